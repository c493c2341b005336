"""Training configuration with a flat ``dotted.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .loss import LossWeights


@dataclass
class LossConfig:
    l1: float = 1000.0  # distortion
    distortion_depth: str = "ndc"  # "ndc" normalised depth or "raw" ray parameter
    distortion_start: int = 3000  # first iteration with the distortion term active
    l2: float = 0.05  # depth-normal consistency
    l3: float = 1.0  # disk regularisation
    l4: float = 0.2  # feature
    rgb_l1: float = 0.8
    mask_threshold: float = 0.5
    feature_mask: bool = True

    def weights(self) -> LossWeights:
        return LossWeights(self.l1, self.l2, self.l3, self.l4)


@dataclass
class LrConfig:
    position: float = 1.6e-4  # times scene extent
    position_final: float = 1.6e-6
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2


@dataclass
class SguConfig:
    enabled: bool = True
    every: int = 100
    start: int = 1  # no update before this iteration
    half: int = 3


@dataclass
class DgprConfig:
    k: int = 25
    subset: int = 4096
    seed: int = 0
    detach_normal: bool = True


@dataclass
class AdcConfig:
    enabled: bool = False
    start: int = 500
    stop: int = 3500
    every: int = 100
    grad_threshold: float = 2e-4
    split_scale: float = 0.01  # fraction of extent
    prune_opacity: float = 0.005


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    freeze_opacity: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    lr: LrConfig = field(default_factory=LrConfig)
    sgu: SguConfig = field(default_factory=SguConfig)
    dgpr: DgprConfig = field(default_factory=DgprConfig)
    adc: AdcConfig = field(default_factory=AdcConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for f in dataclasses.fields(self.lr):
            if not getattr(self.lr, f.name) > 0:
                raise ValueError(f"lr.{f.name} must be > 0")
        self.loss.weights()
        if self.loss.distortion_depth not in ("raw", "ndc"):
            raise ValueError("loss.distortion_depth must be 'raw' or 'ndc'")
        if self.sgu.every < 1:
            raise ValueError("sgu.every must be >= 1")

    # flat key/value view -------------------------------------------------

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    def set(self, key: str, value) -> None:
        """Assign one dotted key, parsing strings to the field's type."""
        target, name = self, key
        if "." in key:
            group, name = key.split(".", 1)
            if not hasattr(self, group) or not dataclasses.is_dataclass(getattr(self, group)):
                raise KeyError(f"unknown config key {key!r}")
            target = getattr(self, group)
        known = {f.name: f for f in dataclasses.fields(target)}
        if name not in known or dataclasses.is_dataclass(getattr(target, name)):
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _parse(value, type(current), key))

    def update(self, pairs: dict[str, object]) -> "TrainConfig":
        for k, v in pairs.items():
            self.set(k, v)
        self.validate()
        return self

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.flat().items())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        return cls().update(parse_pairs(text))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.loads(Path(path).read_text())


def parse_pairs(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _parse(value, typ, key):
    if not isinstance(value, str):
        return typ(value)
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    try:
        return typ(float(value)) if typ is int and any(c in value for c in ".eE") else typ(value)
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
