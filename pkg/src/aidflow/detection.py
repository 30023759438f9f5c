"""Turn per-slice classifications into incident events, match them against
ground truth, and score detection rate / false alarm rate plus per-class
classification metrics.

Two detection filters follow the classification: (1) incident slices whose
upstream and downstream normalized speeds both exceed the free-flow cut are
reclassified non-incident; (2) only maximal incident runs longer than the
consecutive threshold become events.
"""

import numpy as np
from dataclasses import dataclass, field

from . import preprocess as pp
from .classifier import TrainedModel, forward_many
from .ensemble import QUANTILE, Ensemble
from .preprocess import (CH_DOWN_SPEED, CH_UP_SPEED, SliceSet, ema_values,
                         make_slices, PairSeries)

DEFAULT_MATCH_TOLERANCE_S = 300.0


@dataclass(frozen=True)
class DetectionConfig:
    prob_threshold: float = 0.5
    free_flow_cut: float = 0.8          # normalized speed
    consecutive_threshold: int = 6      # steps; strict: a run must exceed this
    use_quantile: bool = False          # ensemble scoring statistic
    strict_consecutive: bool = True
    match_tolerance_s: float = DEFAULT_MATCH_TOLERANCE_S

    def validate(self):
        if not 0.0 <= self.prob_threshold <= 1.0:
            raise ValueError("prob_threshold must lie in [0, 1]")
        if self.free_flow_cut <= 0:
            raise ValueError("free_flow_cut must be positive")
        if self.consecutive_threshold < 1:
            raise ValueError("consecutive_threshold must be >= 1")

    def run_qualifies(self, length: int) -> bool:
        if self.strict_consecutive:
            return length > self.consecutive_threshold
        return length >= self.consecutive_threshold


@dataclass
class DetectionEvent:
    pair_id: str
    start: int
    end: int
    peak_prob: float | None = None
    mean_uncertainty: float | None = None

    def __post_init__(self):
        if self.start >= self.end:
            raise ValueError("event must span start < end")


@dataclass
class MatchReport:
    matched: list                 # (DetectionEvent, truth tuple) pairs
    correctly_detected: int
    false_alarms: int
    missed: int
    total_truth: int
    total_detected: int
    dr: float | None = field(init=False)
    far: float | None = field(init=False)

    def __post_init__(self):
        if self.correctly_detected + self.false_alarms != self.total_detected:
            raise ValueError("detected events must split into correct + false")
        self.dr = detection_rate(self.correctly_detected, self.total_truth)
        self.far = false_alarm_rate(self.false_alarms, self.total_detected)


def score_slices(scorer, channels: np.ndarray, config: DetectionConfig):
    """(scores, variance) for a batch of slice channels.

    Plain models score with their sigmoid output (variance None); ensembles
    use the 75% quantile of member outputs when config.use_quantile, else the
    member mean, and report the member variance.
    """
    X = np.asarray(channels, dtype=np.float64)
    if isinstance(scorer, Ensemble):
        outs = scorer.member_outputs(X)
        score = (np.percentile(outs, QUANTILE, axis=0, method="linear")
                 if config.use_quantile else outs.mean(axis=0))
        var = ((outs - outs.mean(axis=0)) ** 2).mean(axis=0)
        return score, var
    if isinstance(scorer, TrainedModel):
        return forward_many([scorer], X)[0], None
    return np.asarray(scorer.predict_scores(X), dtype=np.float64), None


def classify_series(scorer, slices: SliceSet, config: DetectionConfig) -> np.ndarray:
    """Binary incident sequence over a time-ordered single-pair slice run.

    A slice is incident when its score strictly exceeds the threshold.
    """
    config.validate()
    if len(set(slices.pair_index.tolist())) > 1:
        raise ValueError("classify_series expects slices of a single pair")
    if len(slices) > 1:
        gaps = np.diff(slices.t_end)
        if np.any(gaps <= 0):
            raise ValueError("slices out of time order")
        if len(set(gaps.tolist())) > 1:
            raise ValueError("slices must run at uniform stride")
    scores, _ = score_slices(scorer, slices.channels, config)
    return (scores > config.prob_threshold).astype(np.int8)


def free_flow_mask(slices: SliceSet, config: DetectionConfig) -> np.ndarray:
    """True where both detectors run free-flow at the slice's current sample."""
    up = slices.channels[:, -1, CH_UP_SPEED]
    down = slices.channels[:, -1, CH_DOWN_SPEED]
    return (up > config.free_flow_cut) & (down > config.free_flow_cut)


def _runs(binary: np.ndarray):
    """(start_idx, end_idx inclusive) of maximal runs of ones."""
    b = np.asarray(binary).astype(bool)
    if b.size == 0:
        return []
    edges = np.diff(b.astype(np.int8))
    starts = list(np.flatnonzero(edges == 1) + 1)
    ends = list(np.flatnonzero(edges == -1))
    if b[0]:
        starts.insert(0, 0)
    if b[-1]:
        ends.append(len(b) - 1)
    return list(zip(starts, ends))


def apply_filters(binary: np.ndarray, slices: SliceSet, config: DetectionConfig,
                  scores: np.ndarray | None = None,
                  uncertainty: np.ndarray | None = None) -> list[DetectionEvent]:
    """Free-flow filter, then the consecutive-run filter, in that order."""
    config.validate()
    if len(binary) != len(slices):
        raise ValueError("classification/slice length mismatch")
    kept = np.asarray(binary, dtype=np.int8).copy()
    kept[free_flow_mask(slices, config)] = 0
    pair_id = slices.pairs[slices.pair_index[0]] if len(slices) else ""
    events = []
    for lo, hi in _runs(kept):
        if not config.run_qualifies(hi - lo + 1):
            continue
        events.append(DetectionEvent(
            pair_id=pair_id,
            start=int(slices.t_end[lo]),
            end=int(slices.t_end[hi]),
            peak_prob=float(scores[lo:hi + 1].max()) if scores is not None else None,
            mean_uncertainty=(float(uncertainty[lo:hi + 1].mean())
                              if uncertainty is not None else None)))
    return events


def match_events(detected: list[DetectionEvent], truth,
                 tolerance_s: float = DEFAULT_MATCH_TOLERANCE_S) -> MatchReport:
    """Greedy one-to-one matching of detections to truth intervals.

    truth: iterable of (pair_id, start, end). A detection matches when the
    intervals overlap or its start falls within the tolerance after the truth
    start. Unmatched detections are false alarms; unmatched truths are missed.
    """
    truth = [tuple(t) for t in truth]
    matched = []
    used = [False] * len(truth)
    order = np.argsort([t[1] for t in truth], kind="stable")
    for ev in sorted(detected, key=lambda e: (e.pair_id, e.start)):
        for oi in order:
            if used[oi]:
                continue
            pid, t_start, t_end = truth[oi]
            if pid != ev.pair_id:
                continue
            overlap = ev.start <= t_end and t_start <= ev.end
            near_start = 0 <= ev.start - t_start <= tolerance_s
            if overlap or near_start:
                used[oi] = True
                matched.append((ev, truth[oi]))
                break
    n_match = len(matched)
    return MatchReport(matched=matched,
                       correctly_detected=n_match,
                       false_alarms=len(detected) - n_match,
                       missed=len(truth) - n_match,
                       total_truth=len(truth),
                       total_detected=len(detected))


def detection_rate(correctly_detected, total_truth=None) -> float | None:
    """Correct detections over total truth incidents; None when undefined."""
    if total_truth is None:
        report = correctly_detected
        correctly_detected, total_truth = report.correctly_detected, report.total_truth
    if total_truth <= 0:
        return None
    return correctly_detected / total_truth


def false_alarm_rate(false_alarms, total_detected=None) -> float | None:
    """False detections over all detections; None when nothing was detected."""
    if total_detected is None:
        report = false_alarms
        false_alarms, total_detected = report.false_alarms, report.total_detected
    if total_detected <= 0:
        return None
    return false_alarms / total_detected


@dataclass
class ClassScores:
    precision: float | None
    recall: float | None
    f1: float | None
    support: int


@dataclass
class ClassificationMetrics:
    non_incident: ClassScores
    incident: ClassScores
    accuracy: float


def classification_metrics(predictions, labels) -> ClassificationMetrics:
    """Confusion-matrix metrics for both classes; absent classes flag None."""
    pred = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if len(pred) != len(y) or len(y) == 0:
        raise ValueError("predictions and labels must align and be nonempty")

    def one_class(cls):
        tp = int(((pred == cls) & (y == cls)).sum())
        fp = int(((pred == cls) & (y != cls)).sum())
        fn = int(((pred != cls) & (y == cls)).sum())
        support = tp + fn
        precision = tp / (tp + fp) if tp + fp > 0 else None
        recall = tp / support if support > 0 else None
        if precision is None or recall is None:
            f1 = None
        elif precision + recall == 0:
            f1 = 0.0
        else:
            f1 = 2 * precision * recall / (precision + recall)
        return ClassScores(precision, recall, f1, support)

    return ClassificationMetrics(non_incident=one_class(0), incident=one_class(1),
                                 accuracy=float((pred == y).mean()))


class _OffsetTracker:
    """Trailing masked mean of (down - up) over the past hour.

    Samples are ingested only while detection status is NORMAL; a fully
    excluded window holds the last valid offset.
    """

    def __init__(self, window_seconds: float):
        self.window_seconds = window_seconds
        self.entries: list = []     # (timestamp, diff) kept within the window
        self.total = 0.0
        self.last_offset = 0.0
        self.ingested = 0

    def ingest(self, ts, diff):
        self.entries.append((ts, diff))
        self.total += diff
        self.ingested += 1

    def offset_at(self, now) -> float:
        cutoff = now - self.window_seconds
        drop = 0
        for ts, diff in self.entries:
            if ts <= cutoff:
                self.total -= diff
                drop += 1
            else:
                break
        if drop:
            del self.entries[:drop]
        if self.entries:
            self.last_offset = self.total / len(self.entries)
        return self.last_offset


@dataclass
class OfflineDetection:
    """Timeline of one pair's offline detection run."""
    slices: SliceSet
    binary: np.ndarray
    scores: np.ndarray
    uncertainty: np.ndarray | None
    events: list


def run_offline_detection(pair: PairSeries, scorer, config: DetectionConfig,
                          ref_up: float, ref_down: float,
                          history: int | None = None,
                          ema_window: int | None = None,
                          ema_alpha: float | None = None,
                          offset_window_s: float | None = None) -> OfflineDetection:
    """Detection over an aligned raw pair, mirroring real-time semantics.

    Smoothing and normalization are vectorized; the upstream offset excludes
    samples that arrive while the simulated detection status is not NORMAL,
    which requires a sequential pass scoring each slice as it forms. The
    resulting slices are then re-scored through classify_series/apply_filters
    to produce the event list. Channel values quantize to float32 exactly as
    SliceSet stores them, so both passes see identical inputs.
    """
    history = pp.HISTORY_STEPS if history is None else history
    ema_window = pp.EMA_WINDOW if ema_window is None else ema_window
    ema_alpha = pp.EMA_ALPHA if ema_alpha is None else ema_alpha
    offset_window_s = pp.OFFSET_WINDOW if offset_window_s is None else offset_window_s
    config.validate()

    t = pair.timestamps
    up_s = ema_values(pair.upstream.speed, ema_window, ema_alpha)
    down_s = ema_values(pair.downstream.speed, ema_window, ema_alpha)
    up_o = ema_values(pair.upstream.occupancy, ema_window, ema_alpha)
    down_o = ema_values(pair.downstream.occupancy, ema_window, ema_alpha)
    down_n = np.clip(down_s / ref_down, 0.0, pp.SPEED_CLIP)

    n = len(t)
    tracker = _OffsetTracker(offset_window_s)
    offsets = np.empty(n)
    up_n = np.empty(n)
    status_normal = True
    run_length = 0
    window = np.empty((history, pp.N_CHANNELS))
    for i in range(n):
        if status_normal:
            tracker.ingest(int(t[i]), down_s[i] - up_s[i])
        offsets[i] = tracker.offset_at(int(t[i]))
        up_n[i] = min(max((up_s[i] + offsets[i]) / ref_up, 0.0), pp.SPEED_CLIP)
        if i >= history - 1:
            lo = i - history + 1
            window[:, CH_UP_SPEED] = up_n[lo:i + 1]
            window[:, CH_DOWN_SPEED] = down_n[lo:i + 1]
            window[:, pp.CH_UP_OCC] = up_o[lo:i + 1]
            window[:, pp.CH_DOWN_OCC] = down_o[lo:i + 1]
            window[:, pp.CH_REL_DIFF] = down_n[lo:i + 1] - up_n[lo:i + 1]
            score, _ = score_slices(scorer, window.astype(np.float32)[None, :, :], config)
            incident = (score[0] > config.prob_threshold
                        and not (np.float32(up_n[i]) > config.free_flow_cut
                                 and np.float32(down_n[i]) > config.free_flow_cut))
            run_length = run_length + 1 if incident else 0
            status_normal = run_length == 0

    corrected = pair.upstream.replace(speed=up_n, occupancy=up_o,
                                      volume=ema_values(pair.upstream.volume,
                                                        ema_window, ema_alpha))
    smoothed_down = pair.downstream.replace(speed=down_n, occupancy=down_o,
                                            volume=ema_values(pair.downstream.volume,
                                                              ema_window, ema_alpha))
    prepared = PairSeries(pair.pair_id, corrected, smoothed_down,
                          offset_applied=offsets, ref_speed_up=ref_up,
                          ref_speed_down=ref_down)
    slices = make_slices(prepared, history=history, stride=1)
    scores, var = score_slices(scorer, slices.channels, config)
    binary = (scores > config.prob_threshold).astype(np.int8)
    events = apply_filters(binary, slices, config, scores=scores, uncertainty=var)
    return OfflineDetection(slices=slices, binary=binary, scores=scores,
                            uncertainty=var, events=events)
