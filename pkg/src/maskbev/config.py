"""Run configuration: one JSON document mirroring these dataclasses."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .aggregation import AggregationConfig
from .modulation import ModulationConfig
from .scenes import GridSpec
from .training.losses import LossConfig


@dataclass
class EncoderConfig:
    channels: int = 64
    depth: int = 4
    noise_sigma: float = 0.3  # observation noise applied to the rendered input rasters


@dataclass
class QueryConfig:
    n: int = 64


@dataclass
class DecoderConfig:
    layers: int = 3
    heads: int = 8
    kv_source: str = "F"  # "F" (encoder features) or "F_a" (aggregated features)
    locality: bool = True  # learnable per-head distance bias on the cross-attention logits
    sigma_min: float = 1.5  # initial bias widths in metres, geometric over heads
    sigma_max: float = 16.0


@dataclass
class TrainConfig:
    epochs: int = 9
    batch: int = 8
    lr: float = 2e-3
    seed: int = 0
    weight_decay: float = 0.01
    beta2: float = 0.95  # second-moment decay of AdamW
    warmup_frac: float = 0.05
    grad_clip: float = 10.0
    train_limit: int | None = None  # use only the first n training scenes
    val_limit: int | None = None
    probe_size: int = 32  # fixed training scenes whose loss is logged every epoch


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    queries: QueryConfig = field(default_factory=QueryConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "data/toy"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self.encoder.channels
        if c % self.decoder.heads:
            raise ValueError(f"channels ({c}) must be divisible by decoder heads ({self.decoder.heads})")
        self.aggregation.validate(c)
        if self.decoder.layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.queries.n < 1:
            raise ValueError("need at least one query")
        if self.decoder.kv_source not in ("F", "F_a"):
            raise ValueError(f"kv_source must be 'F' or 'F_a', got {self.decoder.kv_source!r}")
        if not 0 < self.decoder.sigma_min <= self.decoder.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if self.train.batch < 1 or self.train.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_json() if hasattr(value, "to_json") else (
                asdict(value) if hasattr(value, "__dataclass_fields__") else value)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            if name in doc:
                kw[name] = GridSpec.from_json(doc[name]) if typ is GridSpec else _build(typ, doc[name])
        if "dataset" in doc:
            kw["dataset"] = str(doc["dataset"])
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_json(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply "section.key=value" strings (value parsed as JSON, else kept as a string)."""
        doc = self.to_json()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = doc
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_json(doc)


_SECTIONS = {
    "grid": GridSpec,
    "encoder": EncoderConfig,
    "queries": QueryConfig,
    "decoder": DecoderConfig,
    "modulation": ModulationConfig,
    "aggregation": AggregationConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}


def _build(typ, doc: dict):
    names = {f.name for f in fields(typ)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {typ.__name__} fields: {sorted(unknown)}")
    return typ(**doc)
