from dataclasses import is_dataclass
from typing import Any, Mapping, Type, TypeVar

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .errors import ConfigError

T = TypeVar("T")


def structured(cls: Type[T], data: Mapping[str, Any]) -> T:
    """Build a (possibly nested) config dataclass from plain dicts, type-checked by omegaconf."""
    if not is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    try:
        merged = OmegaConf.merge(OmegaConf.structured(cls), dict(data))
    except OmegaConfBaseException as e:
        raise ConfigError(str(e)) from e
    return OmegaConf.to_object(merged)
