"""Labeling-function catalog and the label model that turns LF votes into
probabilistic training labels.

Votes are +1 (incident), -1 (non-incident), 0 (abstain). Labeling functions
read the normalized, offset-corrected slice channels. The label model
estimates per-LF accuracies from vote agreement alone via the triplet
method-of-moments, then combines votes with naive Bayes under conditional
independence given the true label.
"""

import logging
import numpy as np
from dataclasses import dataclass

from .preprocess import (CH_DOWN_OCC, CH_DOWN_SPEED, CH_REL_DIFF, CH_UP_OCC,
                         CH_UP_SPEED, N_CHANNELS, SliceSet, TimeSlice)

log = logging.getLogger(__name__)

LF_NAMES = (
    "speed_separation",
    "strong_speed_separation",
    "one_sided_speed_drop",
    "double_sided_speed_drop",
    "occupancy_separation",
    "strong_occupancy_separation",
    "single_sided_occ_increase",
    "double_sided_occ_increase",
    "free_flow_both",
    "parallel_tracking",
)
N_LFS = len(LF_NAMES)

INCIDENT, NON_INCIDENT, ABSTAIN = 1, -1, 0


@dataclass(frozen=True)
class LFConfig:
    """Thresholds of the labeling functions, in normalized units."""
    tail_steps: int = 4
    speed_sep: float = 0.20
    strong_speed_sep: float = 0.40
    speed_drop: float = 0.30
    down_speed_hold: float = 0.10
    double_drop_span: int = 10
    occ_sep: float = 0.15
    strong_occ_sep: float = 0.30
    occ_rise: float = 0.15
    down_occ_hold: float = 0.05
    free_flow_speed: float = 0.85
    free_flow_occ: float = 0.08
    parallel_band: float = 0.05


@dataclass
class LFStats:
    """Per-LF coverage / overlap / conflict fractions over a label matrix."""
    coverage: np.ndarray
    overlap: np.ndarray
    conflict: np.ndarray

    def __post_init__(self):
        if not (np.all(self.conflict <= self.overlap + 1e-12)
                and np.all(self.overlap <= self.coverage + 1e-12)):
            raise ValueError("expected conflict <= overlap <= coverage")


@dataclass(frozen=True)
class LabelModel:
    """Estimated per-LF accuracies, coverages, and the class prior."""
    accuracies: np.ndarray
    coverages: np.ndarray
    prior: float

    def __post_init__(self):
        if np.any(self.accuracies < 0) or np.any(self.accuracies > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        if np.any(self.coverages < 0) or np.any(self.coverages > 1):
            raise ValueError("coverages must lie in [0, 1]")
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")


def _max_drawdown(x: np.ndarray) -> np.ndarray:
    """Largest peak-to-later-trough fall along the window axis."""
    return np.max(np.maximum.accumulate(x, axis=1) - x, axis=1)


def _max_runup(x: np.ndarray) -> np.ndarray:
    """Largest trough-to-later-peak rise along the window axis."""
    return np.max(x - np.minimum.accumulate(x, axis=1), axis=1)


def _max_drop_within(x: np.ndarray, span: int) -> np.ndarray:
    """Largest fall x[i] - x[j] with 1 <= j - i <= span."""
    best = np.zeros(x.shape[0])
    for s in range(1, min(span, x.shape[1] - 1) + 1):
        drop = np.max(x[:, :-s] - x[:, s:], axis=1)
        best = np.maximum(best, drop)
    return best


def apply_lfs_batch(channels: np.ndarray, cfg: LFConfig = LFConfig()) -> np.ndarray:
    """Vote matrix [N, 10] for a stack of slice channel arrays [N, H, 5]."""
    ch = np.asarray(channels, dtype=np.float64)
    if ch.ndim != 3 or ch.shape[2] != N_CHANNELS:
        raise ValueError(f"expected channels [N, H, {N_CHANNELS}]")
    up_s, down_s = ch[:, :, CH_UP_SPEED], ch[:, :, CH_DOWN_SPEED]
    up_o, down_o = ch[:, :, CH_UP_OCC], ch[:, :, CH_DOWN_OCC]
    rel = ch[:, :, CH_REL_DIFF]
    k = cfg.tail_steps

    tail_rel = rel[:, -k:].mean(axis=1)
    tail_occ = (up_o[:, -k:] - down_o[:, -k:]).mean(axis=1)
    down_s_ptp = down_s.max(axis=1) - down_s.min(axis=1)
    down_o_ptp = down_o.max(axis=1) - down_o.min(axis=1)

    votes = np.zeros((ch.shape[0], N_LFS), dtype=np.int8)
    votes[:, 0] = np.where(tail_rel > cfg.speed_sep, INCIDENT, ABSTAIN)
    votes[:, 1] = np.where(tail_rel > cfg.strong_speed_sep, INCIDENT, ABSTAIN)
    votes[:, 2] = np.where((_max_drawdown(up_s) > cfg.speed_drop)
                           & (down_s_ptp < cfg.down_speed_hold), INCIDENT, ABSTAIN)
    votes[:, 3] = np.where((_max_drop_within(up_s, cfg.double_drop_span) > cfg.speed_drop)
                           & (_max_drop_within(down_s, cfg.double_drop_span) > cfg.speed_drop),
                           INCIDENT, ABSTAIN)
    votes[:, 4] = np.where(tail_occ > cfg.occ_sep, INCIDENT, ABSTAIN)
    votes[:, 5] = np.where(tail_occ > cfg.strong_occ_sep, INCIDENT, ABSTAIN)
    votes[:, 6] = np.where((_max_runup(up_o) > cfg.occ_rise)
                           & (down_o_ptp < cfg.down_occ_hold), INCIDENT, ABSTAIN)
    votes[:, 7] = np.where((_max_runup(up_o) > cfg.occ_rise)
                           & (_max_runup(down_o) > cfg.occ_rise), INCIDENT, ABSTAIN)
    votes[:, 8] = np.where((up_s > cfg.free_flow_speed).all(axis=1)
                           & (down_s > cfg.free_flow_speed).all(axis=1)
                           & (up_o < cfg.free_flow_occ).all(axis=1)
                           & (down_o < cfg.free_flow_occ).all(axis=1),
                           NON_INCIDENT, ABSTAIN)
    votes[:, 9] = np.where((np.abs(rel) < cfg.parallel_band).all(axis=1),
                           NON_INCIDENT, ABSTAIN)
    return votes


def apply_lfs(slc: TimeSlice, cfg: LFConfig = LFConfig()) -> np.ndarray:
    """Vote vector (10 entries) for one time slice."""
    return apply_lfs_batch(slc.channels[None, :, :], cfg)[0]


def build_label_matrix(slices: SliceSet, cfg: LFConfig = LFConfig()) -> np.ndarray:
    return apply_lfs_batch(slices.channels, cfg)


def lf_stats(matrix: np.ndarray) -> LFStats:
    """Coverage, overlap, and conflict fractions per labeling function."""
    L = np.asarray(matrix)
    if L.ndim != 2 or L.shape[0] == 0:
        raise ValueError("label matrix must be a nonempty 2-D array")
    nonzero = L != 0
    n_other = nonzero.sum(axis=1, keepdims=True) - nonzero
    coverage = nonzero.mean(axis=0)
    overlap = (nonzero & (n_other >= 1)).mean(axis=0)
    disagree = np.zeros(L.shape, dtype=bool)
    for j in range(L.shape[1]):
        others = np.delete(L, j, axis=1)
        disagree[:, j] = ((others != 0) & (others != L[:, [j]])).any(axis=1)
    conflict = (nonzero & disagree).mean(axis=0)
    return LFStats(coverage=coverage, overlap=overlap, conflict=conflict)


def estimate_prior(matrix: np.ndarray) -> float:
    """Class prior from the sign of the per-row majority vote."""
    sums = np.asarray(matrix, dtype=np.int64).sum(axis=1)
    decided = sums != 0
    if not decided.any():
        return 0.5
    prior = float((sums[decided] > 0).mean())
    return float(np.clip(prior, 0.01, 0.99))


def fit_label_model(matrix: np.ndarray, prior: float | None = None,
                    min_pairs: int = 50, clamp: tuple[float, float] = (0.5, 0.99),
                    fallback_accuracy: float = 0.7) -> LabelModel:
    """Estimate LF accuracies with the triplet method of moments.

    For conditionally independent LFs the abstain-excluded second moments
    satisfy E[l_i l_j] = a_i a_j, so a_i = sqrt(|E_ij E_ik / E_jk|) for any
    triplet; the median over all valid triplets is used. Accuracy is
    (1 + a_i) / 2, clamped.
    """
    L = np.asarray(matrix, dtype=np.float64)
    if L.ndim != 2:
        raise ValueError("label matrix must be 2-D")
    n, m = L.shape
    if n == 0:
        raise ValueError("empty label matrix")
    nonzero = L != 0
    co_count = nonzero.T.astype(np.int64) @ nonzero.astype(np.int64)
    prod_sum = L.T @ L
    with np.errstate(invalid="ignore", divide="ignore"):
        moments = np.where(co_count > 0, prod_sum / np.maximum(co_count, 1), 0.0)
    eligible = co_count >= min_pairs
    np.fill_diagonal(eligible, False)

    triangle = any(
        eligible[i, j] and eligible[i, k] and eligible[j, k]
        for i in range(m) for j in range(i + 1, m) for k in range(j + 1, m))
    if not triangle:
        raise ValueError(
            f"need >= 3 LFs with pairwise co-coverage >= {min_pairs} rows")

    agreements = np.empty(m)
    for i in range(m):
        candidates = []
        for j in range(m):
            if j == i or not eligible[i, j]:
                continue
            for kk in range(j + 1, m):
                if kk == i or not (eligible[i, kk] and eligible[j, kk]):
                    continue
                if abs(moments[j, kk]) < 1e-6:
                    continue
                candidates.append(
                    np.sqrt(abs(moments[i, j] * moments[i, kk] / moments[j, kk])))
        if candidates:
            agreements[i] = np.median(candidates)
        else:
            log.warning("no valid triplets for LF %d; falling back to accuracy %.2f",
                        i, fallback_accuracy)
            agreements[i] = 2 * fallback_accuracy - 1
    accuracies = np.clip((1.0 + agreements) / 2.0, clamp[0], clamp[1])
    return LabelModel(accuracies=accuracies, coverages=nonzero.mean(axis=0),
                      prior=estimate_prior(matrix) if prior is None else float(prior))


def predict_proba_batch(model: LabelModel, matrix: np.ndarray) -> np.ndarray:
    """p(Y = incident | votes) per row via naive Bayes over non-abstentions."""
    L = np.asarray(matrix, dtype=np.float64)
    weight = np.log(model.accuracies / (1.0 - model.accuracies))
    logit = np.log(model.prior / (1.0 - model.prior)) + L @ weight
    return 1.0 / (1.0 + np.exp(-logit))


def predict_proba(model: LabelModel, votes: np.ndarray) -> float:
    return float(predict_proba_batch(model, np.asarray(votes)[None, :])[0])


@dataclass
class LabelSummary:
    n_total: int
    n_incident: int         # prob_label > 0.5
    n_non_incident: int
    n_all_abstain: int
    all_abstain: np.ndarray  # flag per slice


def label_training_set(slices: SliceSet, model: LabelModel,
                       cfg: LFConfig = LFConfig()) -> tuple[SliceSet, LabelSummary]:
    """Attach probabilistic labels to every slice.

    All-abstain slices receive the prior and are flagged in the summary.
    """
    out = slices.subset(np.arange(len(slices)))
    if len(slices) == 0:
        return out, LabelSummary(0, 0, 0, 0, np.zeros(0, dtype=bool))
    matrix = build_label_matrix(slices, cfg)
    prob = predict_proba_batch(model, matrix)
    abstain = (matrix == 0).all(axis=1)
    prob[abstain] = model.prior
    out.prob = prob
    n_inc = int((prob > 0.5).sum())
    return out, LabelSummary(len(slices), n_inc, len(slices) - n_inc,
                             int(abstain.sum()), abstain)
