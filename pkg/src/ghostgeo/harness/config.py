"""Pipeline configuration and its strict JSON form."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ghostgeo.errors import ConfigError


class Scope(str, enum.Enum):
    LOCAL = "Local"
    GLOBAL = "Global"


class Fusion(str, enum.Enum):
    WEIGHTED = "Weighted"
    DIRECT = "Direct"


class Truncation(str, enum.Enum):
    Z3D = "Z3D"
    NONE = "None"
    CROP2D = "Crop2D"


_ENUMS = {"scope": Scope, "fusion": Fusion, "truncation": Truncation, "crop2d_scope": Scope}


@dataclass(frozen=True)
class PipelineConfig:
    """``d_max`` both caps candidate distance and sets the 3-D truncation depth."""

    d_max: float = 3.0
    n_pts: int = 256
    D: int = 768
    scope: Scope = Scope.LOCAL
    fusion: Fusion = Fusion.WEIGHTED
    truncation: Truncation = Truncation.Z3D
    crop2d_scope: Scope = Scope.LOCAL
    crop_threshold: float | None = None

    def __post_init__(self) -> None:
        for name, kind in _ENUMS.items():
            val = getattr(self, name)
            if not isinstance(val, kind):
                try:
                    object.__setattr__(self, name, kind(val))
                except ValueError:
                    choices = [k.value for k in kind]
                    raise ConfigError(f"{name}={val!r} is not one of {choices}") from None
        if isinstance(self.d_max, bool) or not isinstance(self.d_max, (int, float)) or not (self.d_max > 0 and math.isfinite(self.d_max)):
            raise ConfigError(f"d_max must be a positive finite number, got {self.d_max!r}")
        for name in ("n_pts", "D"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {val!r}")
        if self.truncation is Truncation.CROP2D:
            t = self.crop_threshold
            if t is None or isinstance(t, bool) or not isinstance(t, (int, float)) or not t > 0:
                raise ConfigError("truncation=Crop2D needs a positive crop_threshold")

    @property
    def weighted(self) -> bool:
        return self.fusion is Fusion.WEIGHTED

    def with_(self, **changes) -> PipelineConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in _ENUMS:
            out[name] = out[name].value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> PipelineConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return PipelineConfig.from_json(text)
