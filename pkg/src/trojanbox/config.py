"""Experiment configuration: loading, defaults, validation, and CLI parsing."""

# std
import sys
from inspect import cleandoc
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
import hashlib
import json

# lib
from docopt import docopt

# pkg
from . import env
from .attrdict import AttrDict
from .errors import ConfigurationError

# TODO 2026-10-31 @ py3.10 EOL: remove conditional
if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib as toml
else:  # pragma: no cover
    import tomli as toml

__all__ = [
    "SCHEMA_VERSION",
    "DEFAULTS",
    "load_config",
    "build_config",
    "validate_config",
    "config_hash",
    "parse_docopt",
]

SCHEMA_VERSION = 1
"""Config schema version understood by this release."""

LoaderFunc = Callable[[str], Any]
"""Function signature to load configuration from a string."""

LOADERS: Dict[str, LoaderFunc] = {}
"""Mapping of file extensions to configuration loaders."""


def set_loader(suffix: str, loader: LoaderFunc) -> None:
    """Register a configuration `loader` for a file `suffix` (e.g. `".toml"`).

    NOTE: This will overwrite any previously registered loader for `suffix`.
    """
    LOADERS[suffix] = loader


set_loader(".json", json.loads)
set_loader(".toml", toml.loads)
set_loader(".env", lambda text: env.loads(text, update_env=False))

DEFAULTS: Dict[str, Any] = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "deterministic": False,
    "device": "auto",
    "out": "runs",
    "progress": True,
    "data": {
        "root": "${TROJANBOX_DATA_ROOT}",
        "image_size": 64,
        "workers": 0,
        "style_dir": "",
        "content_image": "",
        "content_corpus": "",
        "corpus_limit": 500,
    },
    "stylizer": {
        "alpha": 1e5,
        "epochs": 4,
        "batch_size": 32,
        "learning_rate": 0.001,
        "optimizer": "adam",
        "style_size": 40,
        "texture": "texture",
        "extractor_weights": "imagenet",
        "content_layers": ["relu2_2"],
        "style_layers": ["relu1_2", "relu2_2", "relu3_3", "relu4_3"],
    },
    "poison": {
        "method": "context_free",
        "ratio": 0.01,
        "target_label": "",
        "canvas": "white",
        "canvas_range": [65, 128],
        "trigger_range": [16, 64],
        "trigger_size": 80,
        "patch_size": 8,
        "opacity": 0.2,
        "blend_image": "",
        "sig_delta": 40,
        "sig_frequency": 6,
        "augment": True,
    },
    "pretrain": {
        "arch": "desk_resnet",
        "epochs": 30,
        "batch_size": 64,
        "learning_rate": 0.05,
        "warmup_learning_rate": 0.1,
        "warmup_epochs": 2,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "augmentations": ["flip", "crop"],
        "contrastive_images": 5000,
    },
    "inject": {
        "mode": "none",
        "epochs": 20,
        "learning_rate": 0.001,
        "warmup_learning_rate": 0.01,
        "warmup_epochs": 1,
        "frozen_stages": ["stage1", "stage2", "stage3", "fc"],
        "ft_fraction": 0.01,
        "finetune_fraction": 0.05,
        "finetune_poison_ratio": 0.2,
        "attack_weight": 1.0,
        "utility_weight": 1.0,
        "batch_size": 64,
    },
    "transfer": {
        "tasks": ["classification", "detection"],
        "train_fraction": 0.1,
        "epochs": 20,
        "batch_size": 32,
        "learning_rate": 0.01,
        "scene_size": 128,
        "scenes": 2000,
        "objects": [1, 4],
        "object_size": [32, 64],
    },
    "eval": {
        "iou": 0.5,
        "confidence": 0.5,
        "area_fraction": 0.05,
        "samples": 500,
        "clean_control": "",
        "detector_scores": "",
        "detector_threshold": 0.5,
    },
    "defense": {
        "strategies": ["Minor", "Moderate", "Major"],
        "learning_rates": [0.0001, 0.0004],
        "epochs": 6,
        "mode": "backbone",
        "task": "detection",
    },
}
"""Every config field with its default."""

Check = Callable[[Any], Optional[str]]
"""Returns an error message or `None`."""


def _positive(value: Any) -> Optional[str]:
    return None if value > 0 else "must be > 0"


def _non_negative(value: Any) -> Optional[str]:
    return None if value >= 0 else "must be >= 0"


def _fraction(value: Any) -> Optional[str]:
    return None if 0 < value <= 1 else "must be in (0, 1]"


def _unit(value: Any) -> Optional[str]:
    return None if 0 <= value <= 1 else "must be in [0, 1]"


def _choice(*options: Any) -> Check:
    def _check(value: Any) -> Optional[str]:
        return None if value in options else f"must be one of {list(options)}"

    return _check


def _subset(*options: Any) -> Check:
    def _check(value: Any) -> Optional[str]:
        bad = [v for v in value if v not in options]
        return f"unknown values {bad}; expected {list(options)}" if bad else None

    return _check


def _range_pair(value: Any) -> Optional[str]:
    if len(value) != 2 or not all(isinstance(v, int) for v in value):
        return "must be [min, max] integers"
    return None if 0 < value[0] <= value[1] else "must satisfy 0 < min <= max"


NUMBER = (int, float)
STAGES = ("stage1", "stage2", "stage3", "stage4", "stage5", "fc")
RULES: Dict[Tuple[str, ...], Tuple[Tuple[type, ...], Optional[Check]]] = {
    ("version",): ((int,), _choice(SCHEMA_VERSION)),
    ("seed",): ((int,), _non_negative),
    ("deterministic",): ((bool,), None),
    ("device",): ((str,), _choice("auto", "cpu", "cuda")),
    ("out",): ((str,), None),
    ("progress",): ((bool,), None),
    ("data", "root"): ((str,), None),
    ("data", "image_size"): ((int,), _positive),
    ("data", "workers"): ((int,), _non_negative),
    ("data", "style_dir"): ((str,), None),
    ("data", "content_image"): ((str,), None),
    ("data", "content_corpus"): ((str,), None),
    ("data", "corpus_limit"): ((int,), _positive),
    ("stylizer", "alpha"): (NUMBER, _positive),
    ("stylizer", "epochs"): ((int,), _positive),
    ("stylizer", "batch_size"): ((int,), _positive),
    ("stylizer", "learning_rate"): (NUMBER, _positive),
    ("stylizer", "optimizer"): ((str,), _choice("adam", "sgd")),
    ("stylizer", "style_size"): ((int,), _positive),
    ("stylizer", "texture"): ((str,), _choice("vanilla", "color", "texture")),
    ("stylizer", "extractor_weights"): ((str,), _choice("imagenet", "none")),
    ("stylizer", "content_layers"): ((list,), None),
    ("stylizer", "style_layers"): ((list,), None),
    ("poison", "method"): ((str,), _choice("context_free", "badnets", "blended", "sig")),
    ("poison", "ratio"): (NUMBER, _fraction),
    ("poison", "target_label"): ((str,), None),
    ("poison", "canvas"): ((str,), _choice("white", "grey", "black", "clean")),
    ("poison", "canvas_range"): ((list,), _range_pair),
    ("poison", "trigger_range"): ((list,), _range_pair),
    ("poison", "trigger_size"): ((int,), _positive),
    ("poison", "patch_size"): ((int,), _positive),
    ("poison", "opacity"): (NUMBER, _unit),
    ("poison", "blend_image"): ((str,), None),
    ("poison", "sig_delta"): (NUMBER, _positive),
    ("poison", "sig_frequency"): (NUMBER, _positive),
    ("poison", "augment"): ((bool,), None),
    ("pretrain", "arch"): ((str,), _choice("desk_resnet")),
    ("pretrain", "epochs"): ((int,), _positive),
    ("pretrain", "batch_size"): ((int,), _positive),
    ("pretrain", "learning_rate"): (NUMBER, _positive),
    ("pretrain", "warmup_learning_rate"): (NUMBER, _positive),
    ("pretrain", "warmup_epochs"): ((int,), _non_negative),
    ("pretrain", "momentum"): (NUMBER, _unit),
    ("pretrain", "weight_decay"): (NUMBER, _non_negative),
    ("pretrain", "augmentations"): ((list,), _subset("flip", "crop")),
    ("pretrain", "contrastive_images"): ((int,), _positive),
    ("inject", "mode"): ((str,), _choice("none", "unsupervised_align", "finetune_attack")),
    ("inject", "epochs"): ((int,), _positive),
    ("inject", "learning_rate"): (NUMBER, _positive),
    ("inject", "warmup_learning_rate"): (NUMBER, _positive),
    ("inject", "warmup_epochs"): ((int,), _non_negative),
    ("inject", "frozen_stages"): ((list,), _subset(*STAGES)),
    ("inject", "ft_fraction"): (NUMBER, _fraction),
    ("inject", "finetune_fraction"): (NUMBER, _fraction),
    ("inject", "finetune_poison_ratio"): (NUMBER, _fraction),
    ("inject", "attack_weight"): (NUMBER, _non_negative),
    ("inject", "utility_weight"): (NUMBER, _non_negative),
    ("inject", "batch_size"): ((int,), _positive),
    ("transfer", "tasks"): ((list,), _subset("classification", "detection", "segmentation")),
    ("transfer", "train_fraction"): (NUMBER, _fraction),
    ("transfer", "epochs"): ((int,), _positive),
    ("transfer", "batch_size"): ((int,), _positive),
    ("transfer", "learning_rate"): (NUMBER, _positive),
    ("transfer", "scene_size"): ((int,), _positive),
    ("transfer", "scenes"): ((int,), _positive),
    ("transfer", "objects"): ((list,), _range_pair),
    ("transfer", "object_size"): ((list,), _range_pair),
    ("eval", "iou"): (NUMBER, _unit),
    ("eval", "confidence"): (NUMBER, _unit),
    ("eval", "area_fraction"): (NUMBER, _fraction),
    ("eval", "samples"): ((int,), _positive),
    ("eval", "clean_control"): ((str,), None),
    ("eval", "detector_scores"): ((str,), None),
    ("eval", "detector_threshold"): (NUMBER, _unit),
    ("defense", "strategies"): ((list,), _subset("Minor", "Moderate", "Major")),
    ("defense", "learning_rates"): ((list,), None),
    ("defense", "epochs"): ((int,), _positive),
    ("defense", "mode"): ((str,), _choice("backbone", "joint")),
    ("defense", "task"): ((str,), _choice("classification", "detection", "segmentation")),
}
"""Type and value rules for every config field."""

SECTIONS = ("data", "stylizer", "poison", "pretrain", "inject", "transfer", "eval", "defense")
OPTIONAL_SECTIONS = ("ablation",)


def load_config(
    path: Path,
    /,
    *,
    load_imports: bool = True,
    loaders: Optional[Mapping[str, LoaderFunc]] = None,
    done: Optional[List[Path]] = None,
) -> AttrDict:
    """Load a config file, merging any files listed under `imports` first.

    Args:
        path (Path): file to load.
        load_imports (bool, optional): If `True`, recursively load files at the
            `imports` key (relative to `path`). Defaults to `True`.
        loaders (Mapping[str, LoaderFunc], optional): suffix to loader mapping.
            If `None`, uses the global `LOADERS`. Defaults to `None`.
        done (List[Path], optional): paths to skip when loading recursively.

    Returns:
        AttrDict: merged keys/values; the importing file wins.

    Raises:
        ConfigurationError: If the file is missing or has no loader.

    Examples:
        >>> root = Path(__file__).parent.parent.parent
        >>> cfg = load_config(root / "test/fixtures/ablate_canvas.toml")
        >>> cfg.poison.canvas, cfg.poison.ratio, cfg.seed
        ('grey', 0.02, 7)
    """
    result = AttrDict()
    path = Path(path).resolve()
    done = done or []

    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}", [f"{path}: does not exist"])

    loader = (loaders or LOADERS).get(path.suffix)
    if loader is None:
        raise ConfigurationError(f"no loader for {path.suffix!r} files", [f"{path}: unsupported suffix"])

    try:
        data = loader(path.read_text(encoding="utf-8"))
    except (ValueError, toml.TOMLDecodeError) as e:
        raise ConfigurationError(f"cannot parse {path}", [f"{path}: {e}"]) from e

    if load_imports and "imports" in data:
        imports = [(path.parent / p).resolve() for p in data.pop("imports")]
        for file in imports:
            if file in done:
                continue
            result <<= load_config(file, load_imports=True, loaders=loaders, done=done + imports + [path])
    result <<= data
    return result


def _expand_strings(value: Any) -> Any:
    if isinstance(value, str):
        return env.expand(value)
    if isinstance(value, list):
        return [_expand_strings(v) for v in value]
    if isinstance(value, Mapping):
        return AttrDict({k: _expand_strings(v) for k, v in value.items()})
    return value


def build_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    *,
    check_paths: bool = True,
) -> AttrDict:
    """Return defaults << config file << overrides, expanded and validated.

    Args:
        path (Path, optional): config file to load.
        overrides (Mapping[str, Any], optional): values that win over the file.
        check_paths (bool, optional): If `True`, referenced paths must exist.

    Returns:
        AttrDict: complete, validated config

    Examples:
        >>> cfg = build_config(overrides={"poison": {"target_label": "cat"}},
        ...                    check_paths=False)
        >>> cfg.stylizer.alpha, cfg.poison.target_label, cfg.defense.epochs
        (100000.0, 'cat', 6)
    """
    cfg = AttrDict(DEFAULTS)
    if path is not None:
        cfg <<= load_config(path)
    if overrides:
        cfg <<= overrides

    cfg = _expand_strings(cfg)
    cfg.data.root = env.data_root(cfg.data.root)
    validate_config(cfg, check_paths=check_paths)
    return cfg


def validate_config(cfg: Mapping[str, Any], *, check_paths: bool = True) -> None:
    """Raise `ConfigurationError` listing every problem in `cfg`.

    Examples:
        >>> cfg = AttrDict(DEFAULTS) << {"poison": {"ratio": 0, "method": "wanet"}}
        >>> try:
        ...     validate_config(cfg, check_paths=False)
        ... except ConfigurationError as e:
        ...     print("\\n".join(e.diagnostics))
        poison.method: must be one of ['context_free', 'badnets', 'blended', 'sig']
        poison.ratio: must be in (0, 1]
        poison.target_label: required
    """
    problems: List[str] = []
    cfg = AttrDict(cfg)

    known = {k[0] for k in RULES} | {"imports"} | set(OPTIONAL_SECTIONS)
    problems.extend(f"{k}: unknown key" for k in cfg if k not in known)
    for section in SECTIONS:
        fields = {k[1] for k in RULES if k[0] == section}
        for key in cfg.get(section) or {}:
            if key not in fields:
                problems.append(f"{section}.{key}: unknown key")

    for path, (types, check) in RULES.items():
        name = ".".join(path)
        value = cfg.get(list(path))
        if value is None:
            problems.append(f"{name}: missing")
            continue
        if not isinstance(value, types) or (bool not in types and isinstance(value, bool)):
            problems.append(f"{name}: expected {'/'.join(t.__name__ for t in types)}")
            continue
        message = check(value) if check else None
        if message:
            problems.append(f"{name}: {message}")
    # field rules checked

    poison = cfg.poison or {}
    if not poison.get("target_label"):
        problems.append("poison.target_label: required")
    if not problems:
        if poison.trigger_range[1] > poison.canvas_range[0]:
            problems.append("poison.trigger_range: max must be <= canvas_range min")
        if cfg.defense and not all(isinstance(v, NUMBER) and v > 0 for v in cfg.defense.learning_rates):
            problems.append("defense.learning_rates: must be positive numbers")
    # cross-field rules checked

    if check_paths and not problems:
        paths = [("data.root", cfg.data.root)]
        for key in ("style_dir", "content_image", "content_corpus"):
            if cfg.data[key]:
                paths.append((f"data.{key}", cfg.data[key]))
        if cfg.poison.blend_image:
            paths.append(("poison.blend_image", cfg.poison.blend_image))
        for key in ("clean_control", "detector_scores"):
            if cfg.eval[key]:
                paths.append((f"eval.{key}", cfg.eval[key]))
        for name, value in paths:
            if not Path(value).exists():
                problems.append(f"{name}: path does not exist: {value}")
    # paths checked

    if problems:
        raise ConfigurationError("invalid config", problems)


def config_hash(cfg: Mapping[str, Any], code_version: str) -> str:
    """Return a short content hash of `cfg` plus the code version.

    Examples:
        >>> a = config_hash({"seed": 1, "poison": {"ratio": 0.01}}, "0.1.0")
        >>> b = config_hash({"poison": {"ratio": 0.01}, "seed": 1}, "0.1.0")
        >>> a == b, len(a)
        (True, 12)
        >>> a == config_hash({"seed": 1, "poison": {"ratio": 0.01}}, "0.2.0")
        False
    """
    text = json.dumps({"config": cfg, "code_version": code_version}, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def optvar(name: str, /) -> str:
    """Return a valid python variable name from a docopt flag.

    Examples:
        >>> optvar("--deterministic")
        'deterministic'
        >>> optvar("<run>")
        'run'
        >>> optvar("gen-trigger")
        'gen_trigger'
        >>> optvar("-v")
        'v'
    """
    result = name.lower().lstrip("-")
    trans: Dict[str, Any] = {"-": "_", "<": "", ">": ""}
    return result.translate(str.maketrans(trans))


def parse_value(text: str) -> Any:
    """Parse a `--set` value as a TOML value, falling back to a string.

    Examples:
        >>> parse_value("0.02"), parse_value("[1, 2]"), parse_value("true")
        (0.02, [1, 2], True)
        >>> parse_value("banana")
        'banana'
    """
    try:
        return toml.loads(f"value = {text}")["value"]
    except toml.TOMLDecodeError:
        return text


def parse_docopt(
    doc: str,
    /,
    argv: Optional[Sequence[str]] = None,
    *,
    version: str = "1.0.0",
) -> Tuple[AttrDict, AttrDict]:
    """Parse docopt args and collect config overrides.

    The `--seed`, `--out`, and `--deterministic` options, plus any
    `--set key.path=value` pairs, become overrides on top of `--config`.

    Args:
        doc (str): docstring with the usage of the command.
        argv (Sequence[str], optional): arguments to parse; if `None`, uses
            `sys.argv[1:]`. Defaults to `None`.
        version (str, optional): program version. Defaults to `"1.0.0"`.

    Returns:
        Tuple[AttrDict, AttrDict]: normalized arguments and config overrides

    Examples:
        >>> usage = '''
        ... Usage: tb run [--config=PATH] [--seed=N] [--deterministic] [--set=KV]...
        ... '''
        >>> args, overrides = parse_docopt(usage, ["run", "--seed", "3",
        ...     "--set", "poison.ratio=0.02", "--deterministic"])
        >>> args.run, args.config
        (True, None)
        >>> overrides
        {'seed': 3, 'deterministic': True, 'poison': {'ratio': 0.02}}
    """
    args = AttrDict(
        {
            optvar(k): v
            for k, v in docopt(cleandoc(doc), argv=argv, help=True, version=version).items()
        }
    )

    overrides = AttrDict()
    if args.seed is not None:
        overrides.seed = int(args.seed)
    if args.out:
        overrides.out = args.out
    if args.deterministic:
        overrides.deterministic = True
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigurationError("bad --set value", [f"--set {pair}: expected key.path=value"])
        key, value = pair.split("=", 1)
        overrides[key.strip().split(".")] = parse_value(value.strip())
    return args, overrides
