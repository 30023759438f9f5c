"""Run configuration: one structured (JSON) file collecting every tunable,
validated strictly on load, with a master seed overridable via AIDFLOW_SEED.

Defaults are single-sourced: RunConfig composes the per-module config
dataclasses, so a module default changes exactly one place.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields

from . import preprocess as pp
from .classifier import ModelConfig, TrainConfig
from .detection import DetectionConfig
from .synthgen import SynthConfig
from .weaklabel import LFConfig

SEED_ENV_VAR = "AIDFLOW_SEED"


@dataclass(frozen=True)
class PreprocessConfig:
    grid_step: int = pp.GRID_STEP
    history: int = pp.HISTORY_STEPS
    stride: int = 1
    ema_window: int = pp.EMA_WINDOW
    ema_alpha: float = pp.EMA_ALPHA
    offset_window_s: int = pp.OFFSET_WINDOW
    quality_span_s: int = pp.QUALITY_SPAN
    quality_k: float = pp.QUALITY_K
    ref_percentile: float = pp.REF_PERCENTILE
    offset_mask: str = "reported"        # reported | none

    def validate(self):
        if self.offset_mask not in ("reported", "none"):
            raise ValueError("offset_mask must be 'reported' or 'none'")
        if min(self.grid_step, self.history, self.stride, self.ema_window) < 1:
            raise ValueError("preprocess sizes must be >= 1")


@dataclass(frozen=True)
class WeakLabelConfig:
    lf: LFConfig = field(default_factory=LFConfig)
    prior: float | None = None           # None: estimate from majority vote
    min_pairs: int = 50
    accuracy_clamp: tuple = (0.5, 0.99)
    fallback_accuracy: float = 0.7


@dataclass(frozen=True)
class EnsembleConfig:
    n_seeds: int = 50
    selection_threshold: float = 0.9


@dataclass(frozen=True)
class SplitConfig:
    train_days: int = 2
    val_days: int = 1
    test_days: int = 1

    def validate(self, total_days: int | None = None):
        if min(self.train_days, self.val_days, self.test_days) < 1:
            raise ValueError("every split needs >= 1 day")
        if total_days is not None and self.train_days + self.val_days + self.test_days > total_days:
            raise ValueError("splits exceed the corpus length")


@dataclass(frozen=True)
class SamplingConfig:
    """Training-set subsampling: the slice stream is far larger than a CPU
    training budget needs."""
    max_train_per_class: int = 2500
    max_val_per_class: int = 800
    knn_k: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0                         # master seed
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    labeling: WeakLabelConfig = field(default_factory=WeakLabelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def validate(self):
        self.synth.validate()
        self.preprocess.validate()
        self.model.validate()
        self.training.validate()
        self.detection.validate()
        self.split.validate(self.synth.days)


# nested dataclasses by field name (dataclass field types may arrive as
# strings under deferred annotations, so the mapping is explicit)
_NESTED = {
    "synth": SynthConfig, "preprocess": PreprocessConfig, "labeling": WeakLabelConfig,
    "model": ModelConfig, "training": TrainConfig, "ensemble": EnsembleConfig,
    "detection": DetectionConfig, "split": SplitConfig, "sampling": SamplingConfig,
    "lf": LFConfig,
}


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ValueError(f"{path or cls.__name__}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in _NESTED and isinstance(value, dict):
            kwargs[name] = _build(_NESTED[name], value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value) if name == "accuracy_clamp" else value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    """Strict parse: unknown keys anywhere are rejected."""
    spec = dict(data)
    derive = "seed" in spec and "seed" not in spec.get("synth", {}) \
        and "seed" not in spec.get("training", {})
    cfg = _build(RunConfig, spec)
    if derive:
        cfg = apply_master_seed(cfg, cfg.seed)
    cfg.validate()
    return cfg


def apply_master_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate the master seed into the generator and trainer seeds."""
    return dataclasses.replace(
        cfg, seed=seed,
        synth=dataclasses.replace(cfg.synth, seed=seed),
        training=dataclasses.replace(cfg.training, seed=seed))


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """Load a RunConfig file, apply dotted CLI overrides, honor AIDFLOW_SEED."""
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
    for item in overrides or ():
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} must look like section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    env = os.environ if env is None else env
    if SEED_ENV_VAR in env:
        data["seed"] = int(env[SEED_ENV_VAR])
        data.setdefault("synth", {}).pop("seed", None)
        data.setdefault("training", {}).pop("seed", None)
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
