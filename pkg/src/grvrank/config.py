"""Pipeline configuration: one JSON file, flat flag overrides, stable hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .grv_model import CoxOptions
from .labeler import VitalityParams
from .rerank import AggregationConfig
from .synthgen import SynthConfig

DAY_SLICES = 24


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "mf"              # mf | popularity | external
    dim: int = 32
    lr: float = 0.01
    epochs: int = 10
    neg_per_pos: int = 4
    l2_reg: float = 0.001
    external_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("mf", "popularity", "external"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")


@dataclass(frozen=True)
class SplitConfig:
    train_days: tuple[int, int] = (0, 3)
    eval_days: tuple[int, int] = (7, 9)
    val_fraction: float = 0.5


@dataclass(frozen=True)
class FairnessReportConfig:
    # Figure-2-style protocol: group the earliest uploads, measure later
    n_groups: int = 4
    upload_max_slice: int = 24
    window_start_slice: int = 72


@dataclass(frozen=True)
class BucketEvalConfig:
    age_slice: int = 48
    n_buckets: int = 10
    min_future_exposures: int = 1


@dataclass
class PipelineConfig:
    seed: int = 0
    outdir: str = "runs/default"
    impressions: str | None = None   # None means: generate synthetically into outdir
    items: str | None = None
    slice_seconds: int = 3600
    origin: float = 0.0
    t_obs: int = 24
    t_pred: int = 144
    drop_censored: bool = False
    min_label_exposures: int = 10   # 10-core-style filter on the label cohort
    new_item_quantile: float = 0.2
    vitality: VitalityParams = field(default_factory=VitalityParams)
    cox: CoxOptions = field(default_factory=CoxOptions)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rerank: AggregationConfig = field(default_factory=AggregationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    fairness: FairnessReportConfig = field(default_factory=FairnessReportConfig)
    bucket: BucketEvalConfig = field(default_factory=BucketEvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def horizon_slices(self) -> int:
        return self.t_obs + self.t_pred

    @property
    def day_seconds(self) -> float:
        return DAY_SLICES * self.slice_seconds

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    "vitality": VitalityParams,
    "cox": CoxOptions,
    "backbone": BackboneConfig,
    "rerank": AggregationConfig,
    "split": SplitConfig,
    "fairness": FairnessReportConfig,
    "bucket": BucketEvalConfig,
    "synth": SynthConfig,
}

_TUPLE_FIELDS = {"k_list", "train_days", "eval_days"}


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    nested = {}
    for key, cls in _NESTED.items():
        if key in data:
            nested[key] = _build(cls, data.pop(key))
    cfg = _build(PipelineConfig, data)
    for key, value in nested.items():
        setattr(cfg, key, value)
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(path, cfg: PipelineConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)


def apply_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    """Apply flat CLI overrides; seed also propagates into the synth config."""
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "gamma":
            cfg.rerank = dataclasses.replace(cfg.rerank, gamma=value)
        elif key == "seed":
            cfg.seed = value
            cfg.synth = dataclasses.replace(cfg.synth, seed=value)
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown override {key!r}")
    return cfg


def config_hash(cfg: PipelineConfig, keys: list[str] | None = None) -> str:
    """Stable hash of the config (or the named top-level sections)."""
    data = cfg.to_dict()
    if keys is not None:
        data = {k: data[k] for k in sorted(keys)}
    blob = json.dumps(data, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
