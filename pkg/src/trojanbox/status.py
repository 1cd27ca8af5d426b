"""Stage completion records written into run directories.

Each stage directory holds a `status.json` that loosely follows the
[JSend specification](https://github.com/omniti-labs/jsend): `success` means the
stage finished and `data` lists its artifacts with content hashes; `fail` is a
controlled failure (e.g., an invalid config); `error` is an unexpected one.
"""

# native
from __future__ import annotations
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Optional
import json

# pkg
from .attrdict import AttrDict

__all__ = ["StageStatus", "STATUS_SUCCESS", "STATUS_FAIL", "STATUS_ERROR"]

STATUS_SUCCESS = "success"
STATUS_FAIL = "fail"
STATUS_ERROR = "error"

STATUS_FILE = "status.json"

Msg = Optional[str]


class StageStatus(AttrDict):
    """Completion record of one pipeline stage.

    Examples:
        >>> status = StageStatus(stage="poison")
        >>> status.ok, status.status
        (True, 'success')
        >>> status.artifact("manifest", "poison/manifest.jsonl", "ab12")
        {'ok': True, 'status': 'success', 'data': {'manifest': {'path': 'poison/manifest.jsonl', 'hash': 'ab12'}}, 'stage': 'poison'}
    """

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__(ok=True, status=STATUS_SUCCESS, data=None)
        self <<= dict(*args, **kwargs)

    def artifact(self, name: str, path: str, digest: str) -> StageStatus:
        """Record an output artifact by relative path and content hash."""
        if self.data is None:
            self.data = {}
        self.data[name] = {"path": path, "hash": digest}
        return self

    def fail(self, message: Msg = None) -> StageStatus:
        """Indicate a controlled failure.

        Examples:
            >>> status = StageStatus().fail("poison ratio too small for dataset")
            >>> status.ok, status.status, status.message
            (False, 'fail', 'poison ratio too small for dataset')
        """
        self.update(ok=False, status=STATUS_FAIL, message=message)
        return self

    def error(self, message: Msg = None, code: Optional[Any] = None) -> StageStatus:
        """Indicate an unexpected error.

        Examples:
            >>> status = StageStatus().error("CUDA out of memory", "RuntimeError")
            >>> status.ok, status.status, status.code
            (False, 'error', 'RuntimeError')
        """
        self.update(ok=False, status=STATUS_ERROR, message=message, code=code)
        return self

    @property
    def complete(self) -> bool:
        """`True` if the stage succeeded."""
        return bool(self.ok) and self.status == STATUS_SUCCESS

    def write(self, stage_dir: Path) -> Path:
        """Write this record to `stage_dir/status.json`."""
        stage_dir.mkdir(parents=True, exist_ok=True)
        path = stage_dir / STATUS_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def read(cls, stage_dir: Path) -> Optional[StageStatus]:
        """Return the record in `stage_dir` or `None` if there is none."""
        path = stage_dir / STATUS_FILE
        if not path.is_file():
            return None
        data: Dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
        return cls(data)
