"""Environment overrides for dataset locations.

Config values may reference environment variables as `$NAME` or `${NAME}`.
The dataset root can be overridden with `TROJANBOX_DATA_ROOT`, which may also
come from a `.env` file in the working directory or one of its parents.

`.env` format (a small subset of Bash):

- `KEY=value`, optionally prefixed with `export`
- single- or double-quoted values
- `#` comments at the start of a line
- `$VAR` expansion from earlier lines and the environment

Examples:
    >>> loads('''
    ... # desk-scale data
    ... export TROJANBOX_DATA_ROOT="/data/desk10"
    ... STYLE_DIR=$TROJANBOX_DATA_ROOT/train/banana
    ... ''', update_env=False)
    {'TROJANBOX_DATA_ROOT': '/data/desk10', 'STYLE_DIR': '/data/desk10/train/banana'}
"""

# native
from os import environ as ENV
from pathlib import Path
from typing import Dict
from typing import Mapping
from typing import Match
from typing import Optional
from typing import Union
import re

__all__ = ["DATA_ROOT_VAR", "expand", "loads", "find_env", "load_env", "data_root"]

PathStr = Union[Path, str]
"""`Path` or string path."""

DATA_ROOT_VAR = "TROJANBOX_DATA_ROOT"
"""Environment variable that overrides `data.root`."""

_RE_EXPAND = re.compile(r"\$(\w+|\{[^}]*\})", re.ASCII)


def expand(value: str, store: Optional[Mapping[str, str]] = None) -> str:
    """Expand `$var` and `${var}` from `store` (default: `os.environ`).

    Unknown variables are left unchanged.

    Examples:
        >>> expand("${ROOT}/train/$CLS", {"ROOT": "/data", "CLS": "banana"})
        '/data/train/banana'
        >>> expand("$MISSING/val", {})
        '$MISSING/val'
    """
    if "$" not in value:
        return value

    values = ENV if store is None else store

    def _repl(match: Match[str]) -> str:
        name = match.group(1).strip("{}")
        return str(values[name]) if name in values else match.group(0)

    return _RE_EXPAND.sub(_repl, value)


def loads(text: str, /, *, update_env: bool = True) -> Dict[str, str]:
    """Parse `.env` text into a flat mapping.

    Args:
        text (str): file contents.
        update_env (bool, optional): If `True`, also set `os.environ`.
            Defaults to `True`.

    Returns:
        Dict[str, str]: parsed values

    Examples:
        >>> loads("A='x y'\\nB=$A!", update_env=False)
        {'A': 'x y', 'B': 'x y!'}
    """
    result: Dict[str, str] = {}
    for line in text.replace("\r\n", "\n").split("\n"):
        line = line.strip()
        if not line or line.startswith("#"):
            continue

        if line.startswith("export "):
            line = line[len("export ") :]

        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            value = value[1:-1]

        # file values first, then the environment
        value = expand(expand(value, result))
        if update_env:
            ENV[key] = value
        result[key] = value
    return result


def find_env(path: Optional[PathStr] = None, name: str = ".env") -> Optional[Path]:
    """Find `name` in `path` (default: cwd) or its ancestors.

    Examples:
        >>> find_env("/", name="no-such-file.env") is None
        True
    """
    start = Path(path).resolve() if path else Path.cwd()
    if start.name == name and start.is_file():
        return start

    for parent in [start] + list(start.parents):
        candidate = parent / name
        if candidate.is_file():
            return candidate
    return None


def load_env(path: Optional[PathStr] = None) -> Dict[str, str]:
    """Load the nearest `.env` file into `os.environ`, if there is one.

    Returns:
        Dict[str, str]: loaded values (empty when no file is found)
    """
    found = find_env(path)
    if not found:
        return {}
    return loads(found.read_text(encoding="utf-8"), update_env=True)


def data_root(configured: str) -> str:
    """Return the dataset root, honoring the environment override.

    Examples:
        >>> ENV.pop(DATA_ROOT_VAR, None) and None
        >>> data_root("/data/desk10")
        '/data/desk10'
        >>> ENV[DATA_ROOT_VAR] = "/mnt/override"
        >>> data_root("/data/desk10")
        '/mnt/override'
        >>> del ENV[DATA_ROOT_VAR]
    """
    override = ENV.get(DATA_ROOT_VAR)
    return override if override else expand(configured)
