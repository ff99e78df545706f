"""Plain-text ``key = value`` configuration with named presets.

Lines starting with ``#`` are comments. A ``preset`` key selects the base
values (``desk`` or ``paper-scale``); every other key overrides one entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights

DESK = {
    "data.seed": 0,
    "data.classes": 6,
    "data.per_class": 200,
    "data.image_size": 32,
    "data.max_shift": 2.0,
    "data.max_rotation": 5.0,
    "data.noise_vis": 0.05,
    "data.noise_ir": 0.05,
    "data.path": "",
    "model.channels": 16,
    "model.inn_layers": 3,
    "udt.patch": 4,
    "udt.dim": 64,
    "udt.depth": 4,
    "udt.heads": 4,
    "align.proj_dim": 32,
    "align.prototypes": 10,
    "align.gamma1": 0.1,
    "align.gamma2": 0.07,
    "align.gamma3": 0.2,
    "align.sinkhorn_iters": 3,
    "align.sinkhorn_eps": 0.05,
    "scma.weighting": "uniform",
    "loss.ita": 1.0,
    "loss.scma": 1.0,
    "loss.cpa": 1.0,
    "loss.decp": 1.0,
    "loss.ce": 1.0,
    "loss.beta": 1.0001,
    "train.epochs": 40,
    "train.batch_size": 24,
    "train.lr": 2e-4,
    "train.weight_decay": 0.05,
    "train.clip": 5.0,
    "train.seeds": "0,1,2",
}

PAPER_SCALE = dict(DESK, **{
    "data.image_size": 224,     # 56x56 feature grid, 14x14 patches of 4 -> 196 tokens
    "train.epochs": 100,
})

PRESETS = {"desk": DESK, "paper-scale": PAPER_SCALE}


@dataclass(frozen=True)
class TrainSettings:
    epochs: int
    batch_size: int
    lr: float
    weight_decay: float
    clip: float
    seeds: tuple[int, ...]


def _coerce(key: str, raw, default):
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return str(raw)


class Config:
    def __init__(self, values: dict | None = None, preset: str = "desk"):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        self.preset = preset
        self.values = dict(PRESETS[preset])
        for key, raw in (values or {}).items():
            self.set(key, raw)
        self._validate()

    def set(self, key: str, raw) -> None:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw, PRESETS[self.preset][key])

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **overrides) -> "Config":
        """Copy with overrides; keys use ``__`` for the dot (``loss__cpa=0``)."""
        values = dict(self.values)
        values.update({k.replace("__", "."): v for k, v in overrides.items()})
        return Config(values, self.preset)

    def _validate(self) -> None:
        v = self.values
        if v["train.lr"] <= 0:
            raise ConfigError("train.lr must be positive")
        if v["train.epochs"] < 1:
            raise ConfigError("train.epochs must be at least 1")
        if v["train.batch_size"] < 1:
            raise ConfigError("train.batch_size must be at least 1")
        for key in ("loss.ita", "loss.scma", "loss.cpa", "loss.decp", "loss.ce"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be non-negative")
        try:
            self.model_config().udt_config()
            self.train_settings()
        except (ValueError, ConfigError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "Config":
        values, preset = {}, "desk"
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key == "preset":
                preset = raw
            else:
                values[key] = raw
        return cls(values, preset)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.parse(text, str(path))

    def dumps(self) -> str:
        lines = [f"preset = {self.preset}"]
        lines += [f"{k} = {v}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    # typed views

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            image_size=v["data.image_size"], channels=v["model.channels"], inn_layers=v["model.inn_layers"],
            patch=v["udt.patch"], dim=v["udt.dim"], depth=v["udt.depth"], heads=v["udt.heads"],
            proj_dim=v["align.proj_dim"], prototypes=v["align.prototypes"], classes=v["data.classes"],
            gamma1=v["align.gamma1"], gamma2=v["align.gamma2"], gamma3=v["align.gamma3"],
            sinkhorn_iters=v["align.sinkhorn_iters"], sinkhorn_eps=v["align.sinkhorn_eps"],
            weighting=v["scma.weighting"], beta=v["loss.beta"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(ita=v["loss.ita"], scma=v["loss.scma"], cpa=v["loss.cpa"],
                           decp=v["loss.decp"], ce=v["loss.ce"])

    def synth_spec(self) -> SynthSpec:
        v = self.values
        return SynthSpec(seed=v["data.seed"], classes=v["data.classes"], per_class=v["data.per_class"],
                         image_size=v["data.image_size"], max_shift=v["data.max_shift"],
                         max_rotation=v["data.max_rotation"], noise_vis=v["data.noise_vis"],
                         noise_ir=v["data.noise_ir"])

    def train_settings(self) -> TrainSettings:
        v = self.values
        try:
            seeds = tuple(int(s) for s in str(v["train.seeds"]).split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"train.seeds must be comma-separated integers, got {v['train.seeds']!r}") from None
        if not seeds:
            raise ConfigError("train.seeds is empty")
        return TrainSettings(v["train.epochs"], v["train.batch_size"], v["train.lr"],
                             v["train.weight_decay"], v["train.clip"], seeds)
