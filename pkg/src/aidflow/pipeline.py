"""End-to-end orchestration: corpus -> aligned pairs -> curated slices ->
weak labels -> training arrays -> evaluation. Used by the CLI and tests.

Day-based chronological splits per pair (train, then validation, then test)
mirror a before/after study design; quality filtering and weak labeling only
ever see the training period's statistics.
"""

import numpy as np
import pandas as pd
from dataclasses import dataclass

from . import preprocess as pp
from . import weaklabel as wl
from .config import RunConfig
from .detection import (DetectionConfig, OfflineDetection, match_events,
                        run_offline_detection)
from .synthgen import DetectorMeta, IncidentRecord

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
DETECTION_WARMUP_S = 7200


def pair_layout(detectors: list[DetectorMeta]):
    """Consecutive detectors by milepost form (upstream, downstream) pairs,
    keyed by the upstream detector id."""
    ordered = sorted(detectors, key=lambda d: d.milepost)
    if len(ordered) % 2:
        raise ValueError("odd detector count cannot form pairs")
    return [(ordered[i].detector_id, ordered[i], ordered[i + 1])
            for i in range(0, len(ordered), 2)]


def _series_from_rows(detector_id, rows: pd.DataFrame, grid_step: int) -> pp.MeasurementSeries:
    """Align each lane onto the grid, then aggregate lanes.

    Speed aggregates volume-weighted, occupancy as the lane mean, volume as
    the lane sum. Rows with lane 0 are taken as already aggregated.
    """
    lanes = sorted(rows["lane"].unique())
    aligned = []
    for lane in lanes:
        sub = rows[rows["lane"] == lane].sort_values("timestamp")
        raw = pp.MeasurementSeries(detector_id, sub["timestamp"].to_numpy(np.int64),
                                   sub["speed_mph"].to_numpy(np.float64),
                                   sub["volume_count"].to_numpy(np.float64),
                                   sub["occupancy_frac"].to_numpy(np.float64))
        aligned.append(pp.align_timestamps(raw, grid_step))
    if len(aligned) == 1:
        return aligned[0]
    if any(not np.array_equal(s.timestamps, aligned[0].timestamps) for s in aligned[1:]):
        raise ValueError(f"{detector_id}: lanes disagree on the grid")
    speed = pp.aggregate_lanes(np.stack([s.speed for s in aligned]),
                               np.stack([s.volume for s in aligned]))
    volume = np.sum([s.volume for s in aligned], axis=0)
    occupancy = np.mean([s.occupancy for s in aligned], axis=0)
    return pp.MeasurementSeries(detector_id, aligned[0].timestamps, speed,
                                volume, occupancy)


def build_pairs(measurements: pd.DataFrame, detectors: list[DetectorMeta],
                grid_step: int) -> tuple[list[pp.PairSeries], dict]:
    """Aligned, lane-aggregated, gap-filled raw pairs plus fill statistics."""
    by_id = {}
    milepost = {d.detector_id: d.milepost for d in detectors}
    for det_id, rows in measurements.groupby("detector_id"):
        by_id[str(det_id)] = _series_from_rows(str(det_id), rows, grid_step)
    filled = {}
    n_gap_fills = 0
    n_spline_fills = 0
    for det_id, series in by_id.items():
        neighbors = [(milepost[i], s) for i, s in by_id.items() if i != det_id]
        missing = int(np.isnan(series.speed).sum() + np.isnan(series.volume).sum()
                      + np.isnan(series.occupancy).sum())
        if missing:
            first_missing = int(np.isnan(series.speed[0]) + np.isnan(series.volume[0])
                                + np.isnan(series.occupancy[0]))
            filled[det_id] = pp.fill_missing(series, milepost[det_id], neighbors)
            n_gap_fills += missing - first_missing
            n_spline_fills += first_missing
        else:
            filled[det_id] = series
    pairs = []
    for pair_id, up_meta, down_meta in pair_layout(detectors):
        up = filled[up_meta.detector_id]
        down = filled[down_meta.detector_id]
        if not np.array_equal(up.timestamps, down.timestamps):
            lo = max(up.timestamps[0], down.timestamps[0])
            hi = min(up.timestamps[-1], down.timestamps[-1])
            usel = (up.timestamps >= lo) & (up.timestamps <= hi)
            dsel = (down.timestamps >= lo) & (down.timestamps <= hi)
            up = pp.MeasurementSeries(up.detector_id, up.timestamps[usel],
                                      up.speed[usel], up.volume[usel], up.occupancy[usel])
            down = pp.MeasurementSeries(down.detector_id, down.timestamps[dsel],
                                        down.speed[dsel], down.volume[dsel],
                                        down.occupancy[dsel])
        pairs.append(pp.PairSeries(pair_id, up, down))
    report = {"gap_fills": n_gap_fills, "spline_fills": n_spline_fills,
              "detectors": len(by_id), "pairs": len(pairs)}
    return pairs, report


def corpus_start(pairs: list[pp.PairSeries]) -> int:
    return int(min(p.timestamps[0] for p in pairs))


def split_bounds(start: int, cfg: RunConfig) -> tuple[int, int, int]:
    """(train_end, val_end, test_end) timestamps."""
    day = 86400
    t_end = start + cfg.split.train_days * day
    v_end = t_end + cfg.split.val_days * day
    return t_end, v_end, v_end + cfg.split.test_days * day


def smooth_pair(pair: pp.PairSeries, cfg: RunConfig) -> pp.PairSeries:
    p = cfg.preprocess
    return pair.replace(upstream=pp.ema_smooth(pair.upstream, p.ema_window, p.ema_alpha),
                        downstream=pp.ema_smooth(pair.downstream, p.ema_window, p.ema_alpha))


def fit_references(pairs_smoothed: list[pp.PairSeries], cfg: RunConfig):
    """Speed references and quality statistics from the training period only."""
    start = corpus_start(pairs_smoothed)
    train_end, _, _ = split_bounds(start, cfg)
    refs = {}
    windows = []
    span_steps = cfg.preprocess.quality_span_s // cfg.preprocess.grid_step
    for pair in pairs_smoothed:
        sel = pair.timestamps < train_end
        for side in (pair.upstream, pair.downstream):
            speed = side.speed[sel]
            for lo in range(0, len(speed) - span_steps + 1, span_steps):
                windows.append(speed[lo:lo + span_steps])
        refs[pair.pair_id] = (
            pp.fit_speed_reference(pair.upstream.speed[sel], cfg.preprocess.ref_percentile),
            pp.fit_speed_reference(pair.downstream.speed[sel], cfg.preprocess.ref_percentile))
    stats = pp.fit_quality_stats(windows, cfg.preprocess.quality_span_s)
    return refs, stats


def incident_intervals(incidents: list[IncidentRecord], pair_id: str):
    """(reported, true) interval lists of one pair."""
    reported = [(i.reported_start, i.reported_duration)
                for i in incidents if i.pair_id == pair_id]
    true = [(i.start, i.duration) for i in incidents if i.pair_id == pair_id]
    return reported, true


def _interval_mask(timestamps: np.ndarray, intervals) -> np.ndarray:
    mask = np.zeros(len(timestamps), dtype=bool)
    for start, duration in intervals:
        mask |= (timestamps >= start) & (timestamps <= start + duration)
    return mask


def quality_flags(pair_smoothed: pp.PairSeries, stats: pp.QualityStats,
                  cfg: RunConfig) -> np.ndarray:
    """Per-sample pass flag; a sample fails when either detector's covering
    window fails the oscillation band."""
    p = cfg.preprocess
    span_steps = p.quality_span_s // p.grid_step
    n = len(pair_smoothed.timestamps)
    ok = np.ones(n, dtype=bool)
    for side in (pair_smoothed.upstream, pair_smoothed.downstream):
        for lo in range(0, n, span_steps):
            window = side.speed[lo:lo + span_steps]
            if len(window) < 2:
                continue
            if not pp.quality_filter(window, stats, p.quality_k):
                ok[lo:lo + span_steps] = False
    return ok


def curate_pair(pair_smoothed: pp.PairSeries, incidents, refs, stats,
                cfg: RunConfig) -> pp.SliceSet:
    """Offset, normalize, slice, label, and flag one smoothed pair."""
    p = cfg.preprocess
    reported, true = incident_intervals(incidents, pair_smoothed.pair_id)
    mask = (_interval_mask(pair_smoothed.timestamps, reported)
            if p.offset_mask == "reported" else None)
    off = pp.offset_upstream(pair_smoothed, p.offset_window_s, mask)
    ref_up, ref_down = refs[pair_smoothed.pair_id]
    norm = pp.normalize(off, ref_up, ref_down)
    slices = pp.make_slices(norm, p.history, p.stride, reported, true)
    ok = quality_flags(pair_smoothed, stats, cfg)
    idx = np.searchsorted(pair_smoothed.timestamps, slices.t_end)
    slices.quality_ok = ok[idx]
    start = int(pair_smoothed.timestamps[0])
    train_end, val_end, test_end = split_bounds(start, cfg)
    split = np.full(len(slices), -1, dtype=np.int8)
    split[slices.t_end < train_end] = SPLIT_TRAIN
    split[(slices.t_end >= train_end) & (slices.t_end < val_end)] = SPLIT_VAL
    split[(slices.t_end >= val_end) & (slices.t_end < test_end)] = SPLIT_TEST
    slices.split = split
    return slices


def curate(pairs_raw: list[pp.PairSeries], incidents, cfg: RunConfig):
    """Full curation: smooth, fit references, slice every pair."""
    smoothed = [smooth_pair(p, cfg) for p in pairs_raw]
    refs, stats = fit_references(smoothed, cfg)
    slices = pp.SliceSet.concat([curate_pair(sp, incidents, refs, stats, cfg)
                                 for sp in smoothed])
    return slices, refs, stats


def weak_label_training(slices: pp.SliceSet, cfg: RunConfig):
    """Fit the label model on training-split, quality-passing slices and
    probabilistically label them."""
    sel = (slices.split == SPLIT_TRAIN) & slices.quality_ok
    train = slices.subset(sel)
    matrix = wl.build_label_matrix(train, cfg.labeling.lf)
    model = wl.fit_label_model(matrix, prior=cfg.labeling.prior,
                               min_pairs=cfg.labeling.min_pairs,
                               clamp=cfg.labeling.accuracy_clamp,
                               fallback_accuracy=cfg.labeling.fallback_accuracy)
    labeled, summary = wl.label_training_set(train, model, cfg.labeling.lf)
    return model, matrix, labeled, summary, np.flatnonzero(sel)


def weak_prob_for(slices: pp.SliceSet, model: wl.LabelModel, cfg: RunConfig) -> np.ndarray:
    labeled, _ = wl.label_training_set(slices, model, cfg.labeling.lf)
    return labeled.prob


def balanced_subsample(slices: pp.SliceSet, labels01: np.ndarray, per_class_cap: int,
                       seed: int) -> np.ndarray:
    """Chronology-preserving index sample with equal class counts."""
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(labels01 > 0.5)
    neg = np.flatnonzero(labels01 <= 0.5)
    take = min(per_class_cap, len(pos), len(neg))
    if take == 0:
        raise ValueError("a class is empty; cannot balance the sample")
    keep = np.concatenate([rng.choice(pos, size=take, replace=False),
                           rng.choice(neg, size=take, replace=False)])
    return np.sort(keep)


@dataclass
class EvaluationResult:
    report: object                       # MatchReport
    per_pair: dict                       # pair_id -> OfflineDetection
    events: list


def evaluate_detection(pairs_raw: list[pp.PairSeries], incidents, scorer,
                       refs: dict, cfg: RunConfig,
                       det_cfg: DetectionConfig | None = None) -> EvaluationResult:
    """Run offline detection over the test period of every pair and score
    DR/FAR against the true incident intervals.

    Detection starts a couple of hours early so smoothing and the offset
    tracker are warm at the test boundary; events and truth are then clipped
    to the test window.
    """
    det_cfg = cfg.detection if det_cfg is None else det_cfg
    start = corpus_start(pairs_raw)
    _, val_end, test_end = split_bounds(start, cfg)
    detect_from = max(start, val_end - DETECTION_WARMUP_S)
    all_events = []
    truth = []
    per_pair = {}
    p = cfg.preprocess
    for pair in pairs_raw:
        sel = (pair.timestamps >= detect_from) & (pair.timestamps < test_end)
        sub = pp.PairSeries(
            pair.pair_id,
            pair.upstream.replace(timestamps=pair.timestamps[sel],
                                  speed=pair.upstream.speed[sel],
                                  volume=pair.upstream.volume[sel],
                                  occupancy=pair.upstream.occupancy[sel], per_lane=None),
            pair.downstream.replace(timestamps=pair.timestamps[sel],
                                    speed=pair.downstream.speed[sel],
                                    volume=pair.downstream.volume[sel],
                                    occupancy=pair.downstream.occupancy[sel], per_lane=None))
        ref_up, ref_down = refs[pair.pair_id]
        result = run_offline_detection(sub, scorer, det_cfg, ref_up, ref_down,
                                       history=p.history, ema_window=p.ema_window,
                                       ema_alpha=p.ema_alpha,
                                       offset_window_s=p.offset_window_s)
        per_pair[pair.pair_id] = result
        all_events += [e for e in result.events if e.end >= val_end]
        truth += [(i.pair_id, i.start, i.start + i.duration) for i in incidents
                  if i.pair_id == pair.pair_id and i.start + i.duration >= val_end
                  and i.start < test_end]
    report = match_events(all_events, truth, det_cfg.match_tolerance_s)
    return EvaluationResult(report=report, per_pair=per_pair, events=all_events)
