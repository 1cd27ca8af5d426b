"""`dict` with attribute access, deep selectors, and merging for configs."""

# native
from __future__ import annotations
from typing import Any
from typing import Dict
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import TypeVar
from typing import Union

__all__ = ["AttrDict", "ConfigPath", "get_path", "set_path", "dict_merge"]

ConfigPath = Union[str, Sequence[Union[str, int]]]
"""Key or sequence of keys into a nested config."""

Self = TypeVar("Self", bound="AttrDict")
"""`AttrDict` instance."""

NOT_FOUND = object()
"""Sentinel for a missing value."""


def get_path(src: Any, path: ConfigPath, default: Optional[Any] = None) -> Any:
    """Return the value at `path` in nested mappings/lists or `default`.

    Args:
        src (Any): typically a `dict` of config sections.
        path (ConfigPath): key or sequence of keys.
        default (Any, optional): value if `path` cannot be reached.
            Defaults to `None`.

    Returns:
        Any: value at `path` or `default`.

    Examples:
        >>> get_path({"poison": {"canvas_range": [65, 128]}}, ["poison", "canvas_range", 1])
        128
        >>> get_path({"poison": {}}, ["poison", "ratio"], 0.01)
        0.01
        >>> get_path({"seed": 3}, ["seed", "x"]) is None
        True
    """
    keys = [path] if isinstance(path, str) else list(path)
    result: Any = src
    try:
        for key in keys:
            result = result[key]
    except (KeyError, IndexError, TypeError):
        return default
    return result


def set_path(dest: Dict[Any, Any], path: ConfigPath, value: Any, cls: type = dict) -> Dict[Any, Any]:
    """Set a nested value, creating intermediate sections with `cls`.

    Args:
        dest (Dict): mapping to modify in place.
        path (ConfigPath): key or sequence of keys.
        value (Any): value to store.
        cls (type, optional): constructor for new sections. Defaults to `dict`.

    Returns:
        Dict: `dest`

    Examples:
        >>> set_path({}, ["poison", "ratio"], 0.02)
        {'poison': {'ratio': 0.02}}
        >>> set_path({"seed": 1}, [], 5)
        {'seed': 1}
    """
    keys = [path] if isinstance(path, str) else list(path)
    if not keys:
        return dest

    nested: Any = dest
    for key in keys[:-1]:
        if not isinstance(nested.get(key), Mapping):
            nested[key] = cls()
        nested = nested[key]
    nested[keys[-1]] = value
    return dest


def dict_merge(dest: Dict[Any, Any], *sources: Mapping[Any, Any], cls: type = dict) -> Dict[Any, Any]:
    """Deep-merge `sources` into `dest`; nested mappings pass through `cls`.

    Examples:
        >>> base = {"poison": {"ratio": 0.01, "canvas": "white"}, "seed": 0}
        >>> dict_merge(base, {"poison": {"canvas": "grey"}})
        {'poison': {'ratio': 0.01, 'canvas': 'grey'}, 'seed': 0}
    """
    for src in sources:
        for key, value in src.items():
            if not isinstance(value, Mapping):
                dest[key] = value
                continue

            prev = dest.get(key)
            if isinstance(prev, Mapping):
                dest[key] = dict_merge(cls(prev), value, cls=cls)
            else:
                dest[key] = dict_merge(cls(), value, cls=cls)
    return dest


class AttrDict(Dict[str, Any]):
    """Config mapping with attribute syntax and deep selectors.

    Missing keys and attributes return `None` instead of raising.

    Examples:
        >>> cfg = AttrDict(poison={"ratio": 0.01})
        >>> cfg <<= {"poison": {"method": "sig"}}
        >>> cfg.poison.method, cfg.poison.ratio
        ('sig', 0.01)
        >>> cfg.stylizer is None
        True
        >>> cfg[["poison", "ratio"]]
        0.01
    """

    def __init__(self, *args: Any, **kwargs: Any):
        super().__init__()
        dict_merge(self, dict(*args, **kwargs), cls=self.__class__)

    def copy(self: Self) -> Self:
        """Return a deep copy of the nested sections.

        Examples:
            >>> cfg = AttrDict(poison={"ratio": 0.01})
            >>> clone = cfg.copy()
            >>> clone.poison.ratio = 0.5
            >>> cfg.poison.ratio
            0.01
        """
        return self.__class__(self)

    def __contains__(self, key: Any) -> bool:
        """Return `True` if `key` (or a path of keys) exists.

        Examples:
            >>> cfg = AttrDict(eval={"iou": 0.5})
            >>> ["eval", "iou"] in cfg
            True
            >>> "defense" in cfg
            False
        """
        if isinstance(key, (list, tuple)):
            return get_path(self, key, NOT_FOUND) is not NOT_FOUND
        return super().__contains__(key)

    def __getattr__(self, name: str) -> Optional[Any]:
        # only called when the attribute cannot be found
        if name.startswith("__"):
            raise AttributeError(name)
        return self.get(name)

    def __setattr__(self, name: str, value: Any) -> None:
        self[name] = value

    def __delattr__(self, name: str) -> None:
        self.pop(name, None)

    def __getitem__(self, key: Any) -> Optional[Any]:
        return self.get(key)

    def __setitem__(self, key: Any, value: Any) -> None:
        if isinstance(key, (list, tuple)):
            set_path(self, key, value, self.__class__)
            return
        if isinstance(value, Mapping) and not isinstance(value, AttrDict):
            value = self.__class__(value)
        super().__setitem__(key, value)

    def get(self, key: Any, default: Optional[Any] = None, /) -> Optional[Any]:
        """Return the value at `key` (or path of keys) or `default`."""
        if isinstance(key, (list, tuple)):
            return get_path(self, key, default)
        return super().get(key, default)

    def __lshift__(self: Self, other: Mapping[str, Any]) -> Self:
        """Deep-merge `other` into `self`.

        Examples:
            >>> cfg = AttrDict(defense={"epochs": 6, "mode": "backbone"})
            >>> cfg << {"defense": {"mode": "joint"}}
            {'defense': {'epochs': 6, 'mode': 'joint'}}
        """
        dict_merge(self, other, cls=self.__class__)
        return self

    def to_dict(self) -> Dict[str, Any]:
        """Return plain nested `dict` objects (e.g., for JSON).

        Examples:
            >>> type(AttrDict(a={"b": 1}).to_dict()["a"])
            <class 'dict'>
        """
        return {
            key: value.to_dict() if isinstance(value, AttrDict) else value
            for key, value in self.items()
        }


__pdoc__ = {
    "AttrDict.__contains__": True,
    "AttrDict.__lshift__": True,
}
