"""Deep ensemble: many seeds of the same LSTM configuration, members kept by
validation accuracy, predictions summarized as mean / variance / 75% quantile
over member outputs."""

import json
import logging
import numpy as np
from pathlib import Path
from dataclasses import dataclass, replace

from .classifier import (ModelConfig, TrainConfig, TrainedModel, TrainingDiverged,
                         forward_many, train)

log = logging.getLogger(__name__)

DEFAULT_N_SEEDS = 50
DEFAULT_SELECTION_THRESHOLD = 0.9
QUANTILE = 75.0
MANIFEST_NAME = "ensemble.json"


@dataclass
class EnsemblePrediction:
    mean: float
    variance: float
    quantile_75: float
    member_outputs: np.ndarray


@dataclass
class Ensemble:
    members: list
    member_seeds: list
    selection_threshold: float = DEFAULT_SELECTION_THRESHOLD
    val_accuracies: list | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs >= 1 member")
        configs = {m.config for m in self.members}
        if len(configs) != 1:
            raise ValueError("ensemble members must share one ModelConfig")

    @property
    def config(self) -> ModelConfig:
        return self.members[0].config

    def member_outputs(self, X: np.ndarray) -> np.ndarray:
        """Member probabilities, shape [M, B]."""
        return forward_many(self.members, X)

    def predict(self, channels: np.ndarray) -> EnsemblePrediction:
        outs = np.array([m.forward(channels) for m in self.members])
        return EnsemblePrediction(
            mean=float(outs.mean()),
            variance=float(((outs - outs.mean()) ** 2).mean()),
            quantile_75=float(np.percentile(outs, QUANTILE, method="linear")),
            member_outputs=outs)

    def predict_scores(self, X: np.ndarray, use_quantile: bool = True) -> np.ndarray:
        """Scorer protocol: per-slice 75% quantile (or mean) of member outputs."""
        outs = self.member_outputs(X)
        if use_quantile:
            return np.percentile(outs, QUANTILE, axis=0, method="linear")
        return outs.mean(axis=0)

    def predict_stats(self, X: np.ndarray):
        """(mean, variance, quantile_75) arrays over a batch."""
        outs = self.member_outputs(X)
        mean = outs.mean(axis=0)
        var = ((outs - mean) ** 2).mean(axis=0)
        q75 = np.percentile(outs, QUANTILE, axis=0, method="linear")
        return mean, var, q75

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.members):
            name = f"member_{i:03d}.npz"
            m.save(d / name)
            files.append(name)
        manifest = {
            "member_files": files,
            "member_seeds": [int(s) for s in self.member_seeds],
            "selection_threshold": self.selection_threshold,
            "val_accuracies": self.val_accuracies,
        }
        (d / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "Ensemble":
        d = Path(directory)
        manifest = json.loads((d / MANIFEST_NAME).read_text())
        members = [TrainedModel.load(d / f) for f in manifest["member_files"]]
        return cls(members=members, member_seeds=manifest["member_seeds"],
                   selection_threshold=manifest["selection_threshold"],
                   val_accuracies=manifest.get("val_accuracies"))


def derive_member_seeds(master_seed: int, n_seeds: int) -> list[int]:
    """Stable per-member seeds spawned from the master seed."""
    return [int(s) for s in
            np.random.SeedSequence(master_seed).generate_state(n_seeds, dtype=np.uint32)]


def train_ensemble(config: ModelConfig, X_train, target_train, X_val, y_val,
                   tcfg: TrainConfig = TrainConfig(),
                   n_seeds: int = DEFAULT_N_SEEDS,
                   master_seed: int | None = None) -> tuple[list, list]:
    """Train candidate members with derived seeds; failed members are dropped.

    Returns (candidates, seeds) aligned lists.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seeds = derive_member_seeds(tcfg.seed if master_seed is None else master_seed, n_seeds)
    candidates, kept_seeds = [], []
    for i, seed in enumerate(seeds):
        member_cfg = replace(tcfg, seed=seed)
        try:
            model = train(config, X_train, target_train, X_val, y_val, member_cfg)
        except TrainingDiverged as exc:
            log.warning("member %d/%d dropped: %s", i + 1, n_seeds, exc)
            continue
        candidates.append(model)
        kept_seeds.append(seed)
    if not candidates:
        raise RuntimeError("every ensemble member failed to train")
    return candidates, kept_seeds


def select_members(candidates: list, seeds: list, X_val, y_val,
                   threshold: float = DEFAULT_SELECTION_THRESHOLD,
                   decision_threshold: float = 0.5) -> Ensemble:
    """Keep members with validation accuracy strictly above the cut.

    If nothing qualifies, the single best member is kept with a warning.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    y = np.asarray(y_val).astype(int)
    accs = []
    for m in candidates:
        pred = (m.forward_batch(X_val) > decision_threshold).astype(int)
        accs.append(float((pred == y).mean()))
    keep = [i for i, a in enumerate(accs) if a > threshold]
    if not keep:
        best = int(np.argmax(accs))
        log.warning("no member beat accuracy %.2f; keeping best (%.3f)",
                    threshold, accs[best])
        keep = [best]
    return Ensemble(members=[candidates[i] for i in keep],
                    member_seeds=[seeds[i] for i in keep],
                    selection_threshold=threshold,
                    val_accuracies=[accs[i] for i in keep])
