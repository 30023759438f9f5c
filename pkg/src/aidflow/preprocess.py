"""Turn raw loop-detector samples into aligned, smoothed, quality-checked,
normalized upstream/downstream pairs and fixed-length time slices.

All operations are pure: they return new objects and never mutate inputs.
"""

import numpy as np
from dataclasses import dataclass, field
from scipy.interpolate import CubicSpline

GRID_STEP = 30          # seconds between samples
HISTORY_STEPS = 20      # slice history H (10 min of 30 s steps, current included)
EMA_WINDOW = 5          # smoothing window (2.5 min)
EMA_ALPHA = 0.33
OFFSET_WINDOW = 3600    # trailing window for upstream offset, seconds
QUALITY_SPAN = 3 * 3600  # quality-check window span, seconds
QUALITY_K = 1.0         # band half-width in sigmas
REF_PERCENTILE = 95.0
SPEED_CLIP = 1.5        # normalized speed ceiling
MIN_REF_SAMPLES = 2880  # 24 h of 30 s data required to fit a speed reference

# channel layout of a TimeSlice
CH_UP_SPEED = 0
CH_DOWN_SPEED = 1
CH_UP_OCC = 2
CH_DOWN_OCC = 3
CH_REL_DIFF = 4
N_CHANNELS = 5

LABEL_UNKNOWN = -1


class AlignmentError(ValueError):
    """Series cannot be placed on the uniform grid."""


@dataclass
class LaneChannels:
    """Per-lane sub-series of one detector."""
    speed: np.ndarray
    volume: np.ndarray
    occupancy: np.ndarray


@dataclass
class MeasurementSeries:
    """Timestamped speed/volume/occupancy samples of one detector.

    Timestamps are epoch seconds, strictly increasing, nominally 30 s apart.
    NaN marks missing values until fill_missing runs.
    """
    detector_id: str
    timestamps: np.ndarray
    speed: np.ndarray
    volume: np.ndarray
    occupancy: np.ndarray
    per_lane: dict[int, LaneChannels] | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        for name in ("speed", "volume", "occupancy"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.timestamps)
        if not (len(self.speed) == len(self.volume) == len(self.occupancy) == n):
            raise ValueError(f"channel lengths differ for {self.detector_id}")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError(f"timestamps not strictly increasing for {self.detector_id}")
        occ = self.occupancy[np.isfinite(self.occupancy)]
        if occ.size and (occ.min() < 0 or occ.max() > 1):
            raise ValueError(f"occupancy outside [0, 1] for {self.detector_id}")
        spd = self.speed[np.isfinite(self.speed)]
        if spd.size and spd.min() < 0:
            raise ValueError(f"negative speed for {self.detector_id}")

    def __len__(self):
        return len(self.timestamps)

    def replace(self, **kw) -> "MeasurementSeries":
        data = dict(detector_id=self.detector_id, timestamps=self.timestamps,
                    speed=self.speed, volume=self.volume, occupancy=self.occupancy,
                    per_lane=self.per_lane)
        data.update(kw)
        return MeasurementSeries(**data)


@dataclass
class PairSeries:
    """Aligned upstream/downstream series of one detector pair."""
    pair_id: str
    upstream: MeasurementSeries
    downstream: MeasurementSeries
    offset_applied: np.ndarray | None = None    # per-sample additive upstream correction, mph
    ref_speed_up: float | None = None
    ref_speed_down: float | None = None

    def __post_init__(self):
        if not np.array_equal(self.upstream.timestamps, self.downstream.timestamps):
            raise ValueError(f"pair {self.pair_id}: upstream/downstream timestamps differ")
        for ref in (self.ref_speed_up, self.ref_speed_down):
            if ref is not None and ref <= 0:
                raise ValueError(f"pair {self.pair_id}: non-positive reference speed")

    @property
    def timestamps(self) -> np.ndarray:
        return self.upstream.timestamps

    def replace(self, **kw) -> "PairSeries":
        data = dict(pair_id=self.pair_id, upstream=self.upstream,
                    downstream=self.downstream, offset_applied=self.offset_applied,
                    ref_speed_up=self.ref_speed_up, ref_speed_down=self.ref_speed_down)
        data.update(kw)
        return PairSeries(**data)


@dataclass(frozen=True)
class QualityStats:
    """Mean/std over training windows of the mean absolute first derivative."""
    mu_d: float
    sigma_d: float
    window_span: float = QUALITY_SPAN

    def __post_init__(self):
        if self.sigma_d < 0:
            raise ValueError("sigma_d must be >= 0")


@dataclass
class TimeSlice:
    """One classification instance: H steps x 5 normalized channels.

    Channels: upstream speed (offset-corrected), downstream speed, upstream
    occupancy, downstream occupancy, relative speed difference
    (downstream - corrected upstream). Labels use -1 for unknown.
    """
    pair_id: str
    t_end: int
    channels: np.ndarray
    reported_label: int = LABEL_UNKNOWN
    prob_label: float | None = None
    true_label: int | None = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[1] != N_CHANNELS:
            raise ValueError(f"slice channels must be [H, {N_CHANNELS}]")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("slice channels must be finite")
        if self.prob_label is not None and not (0.0 <= self.prob_label <= 1.0):
            raise ValueError("prob_label must lie in [0, 1]")


class SliceSet:
    """Column-wise container of time slices; indexing yields TimeSlice views.

    prob_label is NaN when unset; reported/true labels use -1 for unknown.
    """

    def __init__(self, pairs: list[str], pair_index: np.ndarray, t_end: np.ndarray,
                 channels: np.ndarray, reported: np.ndarray, true: np.ndarray,
                 prob: np.ndarray | None = None, quality_ok: np.ndarray | None = None,
                 split: np.ndarray | None = None):
        n = len(t_end)
        self.pairs = list(pairs)
        self.pair_index = np.asarray(pair_index, dtype=np.int32)
        self.t_end = np.asarray(t_end, dtype=np.int64)
        self.channels = np.asarray(channels, dtype=np.float32)
        if self.channels.shape[0] != n or self.channels.shape[2] != N_CHANNELS:
            raise ValueError("channels must be [N, H, 5]")
        self.reported = np.asarray(reported, dtype=np.int8)
        self.true = np.asarray(true, dtype=np.int8)
        self.prob = (np.full(n, np.nan) if prob is None
                     else np.asarray(prob, dtype=np.float64))
        self.quality_ok = (np.ones(n, dtype=bool) if quality_ok is None
                           else np.asarray(quality_ok, dtype=bool))
        self.split = (np.full(n, -1, dtype=np.int8) if split is None
                      else np.asarray(split, dtype=np.int8))

    @property
    def history(self) -> int:
        return self.channels.shape[1]

    def __len__(self):
        return len(self.t_end)

    def __getitem__(self, i) -> TimeSlice:
        if isinstance(i, (slice, np.ndarray, list)):
            raise TypeError("use subset() for bulk selection")
        prob = self.prob[i]
        true = int(self.true[i])
        return TimeSlice(
            pair_id=self.pairs[self.pair_index[i]],
            t_end=int(self.t_end[i]),
            channels=self.channels[i].astype(np.float64),
            reported_label=int(self.reported[i]),
            prob_label=None if np.isnan(prob) else float(prob),
            true_label=None if true == LABEL_UNKNOWN else true,
        )

    def subset(self, mask_or_idx) -> "SliceSet":
        return SliceSet(self.pairs, self.pair_index[mask_or_idx], self.t_end[mask_or_idx],
                        self.channels[mask_or_idx], self.reported[mask_or_idx],
                        self.true[mask_or_idx], self.prob[mask_or_idx],
                        self.quality_ok[mask_or_idx], self.split[mask_or_idx])

    @classmethod
    def concat(cls, parts: list["SliceSet"]) -> "SliceSet":
        if not parts:
            raise ValueError("nothing to concatenate")
        pairs: list[str] = []
        remap = []
        for p in parts:
            m = np.empty(len(p.pairs), dtype=np.int32)
            for j, name in enumerate(p.pairs):
                if name not in pairs:
                    pairs.append(name)
                m[j] = pairs.index(name)
            remap.append(m)
        return cls(
            pairs,
            np.concatenate([m[p.pair_index] for p, m in zip(parts, remap)]),
            np.concatenate([p.t_end for p in parts]),
            np.concatenate([p.channels for p in parts]),
            np.concatenate([p.reported for p in parts]),
            np.concatenate([p.true for p in parts]),
            np.concatenate([p.prob for p in parts]),
            np.concatenate([p.quality_ok for p in parts]),
            np.concatenate([p.split for p in parts]),
        )


def align_timestamps(series: MeasurementSeries, grid_step: int = GRID_STEP) -> MeasurementSeries:
    """Resample onto the uniform grid by linear interpolation.

    Grid points beyond the raw range clamp to the nearest raw value. Grid
    points that hit a raw timestamp exactly take the raw value, so an
    already-on-grid series passes through unchanged (NaN included).
    """
    if len(series) < 2:
        raise AlignmentError(f"{series.detector_id}: need >= 2 samples to align")
    t = series.timestamps
    start = -(-t[0] // grid_step) * grid_step
    stop = (t[-1] // grid_step) * grid_step
    if stop < start:
        raise AlignmentError(f"{series.detector_id}: no grid points inside series span")
    grid = np.arange(start, stop + grid_step, grid_step, dtype=np.int64)
    exact = np.searchsorted(t, grid)
    exact_hit = (exact < len(t)) & (t[np.minimum(exact, len(t) - 1)] == grid)

    def interp(values):
        out = np.interp(grid, t, values)
        # exact hits bypass the interpolation arithmetic (0 * NaN traps)
        out[exact_hit] = values[exact[exact_hit]]
        return out

    return MeasurementSeries(series.detector_id, grid, interp(series.speed),
                             interp(series.volume), interp(series.occupancy))


def aggregate_lanes(speeds, volumes):
    """Volume-weighted mean speed across lanes; plain mean where total volume is 0.

    Accepts 1-D (lanes,) for a single instant or 2-D (lanes, T) arrays.
    """
    s = np.asarray(speeds, dtype=np.float64)
    v = np.asarray(volumes, dtype=np.float64)
    if s.shape != v.shape:
        raise ValueError("speeds and volumes must have identical shapes")
    if s.size == 0 or s.shape[0] == 0:
        raise ValueError("no lanes to aggregate")
    if np.any(v[np.isfinite(v)] < 0):
        raise ValueError("lane volumes must be >= 0")
    total = v.sum(axis=0)
    weighted = (s * v).sum(axis=0)
    plain = s.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, weighted / np.where(total > 0, total, 1.0), plain)
    return float(out) if out.ndim == 0 else out


def fill_missing(series: MeasurementSeries, milepost: float,
                 neighbors: list[tuple[float, MeasurementSeries]]) -> MeasurementSeries:
    """Fill NaN gaps: forward fill interior gaps; spline over mileposts at t=0.

    A missing first sample is interpolated with a natural cubic spline through
    (milepost, value) of neighbor detectors that have data at that timestamp.
    """
    def fill_channel(values, channel):
        x = values.copy()
        if np.isnan(x[0]):
            pts = []
            for mp, nb in neighbors:
                if len(nb) != len(series) or nb.timestamps[0] != series.timestamps[0]:
                    raise ValueError("neighbor series must share the timestamp grid")
                val = getattr(nb, channel)[0]
                if np.isfinite(val):
                    pts.append((mp, val))
            if len(pts) < 2:
                raise ValueError(
                    f"{series.detector_id}: first-timestamp fill needs >= 2 neighbors with data")
            pts.sort()
            mps, vals = zip(*pts)
            x[0] = float(CubicSpline(mps, vals, bc_type="natural")(milepost))
        # forward fill: propagate the last finite value
        idx = np.arange(len(x))
        valid = np.where(np.isfinite(x), idx, 0)
        np.maximum.accumulate(valid, out=valid)
        return x[valid]

    if not (np.isnan(series.speed).any() or np.isnan(series.volume).any()
            or np.isnan(series.occupancy).any()):
        return series
    return series.replace(speed=fill_channel(series.speed, "speed"),
                          volume=fill_channel(series.volume, "volume"),
                          occupancy=fill_channel(series.occupancy, "occupancy"),
                          per_lane=None)


def ema_values(values: np.ndarray, window: int = EMA_WINDOW,
               alpha: float = EMA_ALPHA) -> np.ndarray:
    """Truncated exponential moving average of a 1-D array.

    Output t is the weighted mean of the most recent min(window, t+1) samples
    with weights (1 - alpha)^j, j steps back from t.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    x = np.asarray(values, dtype=np.float64)
    w = (1.0 - alpha) ** np.arange(window)
    num = np.convolve(x, w)[: len(x)]
    denom = np.empty(len(x))
    head = min(window, len(x))
    denom[:head] = np.cumsum(w)[:head]
    denom[head:] = w.sum()
    return num / denom


def ema_smooth(series: MeasurementSeries, window: int = EMA_WINDOW,
               alpha: float = EMA_ALPHA) -> MeasurementSeries:
    """Apply the truncated EMA identically to speed, occupancy, and volume."""
    return series.replace(speed=ema_values(series.speed, window, alpha),
                          volume=ema_values(series.volume, window, alpha),
                          occupancy=ema_values(series.occupancy, window, alpha),
                          per_lane=None)


def mean_abs_derivative(window: np.ndarray) -> float:
    """Mean absolute first difference of one window."""
    w = np.asarray(window, dtype=np.float64)
    if len(w) < 2:
        raise ValueError("window must hold >= 2 samples")
    return float(np.mean(np.abs(np.diff(w))))


def fit_quality_stats(windows, window_span: float = QUALITY_SPAN) -> QualityStats:
    """Fit the oscillation statistics over training windows.

    sigma uses the population convention (divide by the window count).
    """
    if len(windows) < 2:
        raise ValueError("need >= 2 training windows")
    d = np.array([mean_abs_derivative(w) for w in windows])
    return QualityStats(mu_d=float(d.mean()), sigma_d=float(d.std()),
                        window_span=window_span)


def quality_filter(window, stats: QualityStats, k: float = QUALITY_K) -> bool:
    """True when the window's oscillation sits inside mu +/- k*sigma."""
    d = mean_abs_derivative(window)
    return stats.mu_d - k * stats.sigma_d <= d <= stats.mu_d + k * stats.sigma_d


def trailing_masked_mean(values: np.ndarray, window_steps: int,
                         exclude: np.ndarray | None = None) -> np.ndarray:
    """Trailing mean over the last window_steps samples, skipping excluded ones.

    Positions whose whole trailing window is excluded hold the last valid
    mean (0 before any valid sample exists).
    """
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    keep = np.ones(n, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    csum = np.concatenate([[0.0], np.cumsum(np.where(keep, x, 0.0))])
    ccnt = np.concatenate([[0], np.cumsum(keep.astype(np.int64))])
    idx = np.arange(n)
    lo = np.maximum(0, idx - window_steps + 1)
    cnt = ccnt[idx + 1] - ccnt[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (csum[idx + 1] - csum[lo]) / np.maximum(cnt, 1)
    # hold the last defined value through fully-excluded windows
    valid = np.where(cnt > 0, idx, -1)
    np.maximum.accumulate(valid, out=valid)
    out = np.where(valid >= 0, mean[np.maximum(valid, 0)], 0.0)
    return out


def offset_upstream(pair: PairSeries, window_seconds: int = OFFSET_WINDOW,
                    exclusion_mask: np.ndarray | None = None) -> PairSeries:
    """Correct upstream speed by the trailing masked mean of (down - up).

    The trailing window covers the past window_seconds up to and including the
    current sample; excluded samples do not contribute. A fully excluded
    window holds the last valid offset.
    """
    t = pair.timestamps
    if len(t) < 2:
        raise ValueError("pair too short to offset")
    step = int(t[1] - t[0])
    win = max(1, round(window_seconds / step))
    diffs = pair.downstream.speed - pair.upstream.speed
    if exclusion_mask is not None and len(exclusion_mask) != len(t):
        raise ValueError("exclusion mask length mismatch")
    offset = trailing_masked_mean(diffs, win, exclusion_mask)
    up = pair.upstream.replace(speed=pair.upstream.speed + offset)
    return pair.replace(upstream=up, offset_applied=offset)


def fit_speed_reference(speed: np.ndarray, percentile: float = REF_PERCENTILE,
                        min_samples: int = MIN_REF_SAMPLES) -> float:
    """Normalization reference: the 95th percentile of smoothed speed."""
    s = np.asarray(speed, dtype=np.float64)
    if len(s) < min_samples:
        raise ValueError(f"reference estimation needs >= {min_samples} samples, got {len(s)}")
    ref = float(np.percentile(s, percentile))
    if ref <= 0:
        raise ValueError("reference speed must be positive")
    return ref


def normalize(pair: PairSeries, ref_up: float | None = None,
              ref_down: float | None = None) -> PairSeries:
    """Divide speeds by per-detector references, clipped to [0, 1.5].

    References are fitted from the pair itself (>= 24 h required) unless
    provided. Occupancy is already a fraction and passes through.
    """
    if ref_up is None:
        ref_up = fit_speed_reference(pair.upstream.speed)
    if ref_down is None:
        ref_down = fit_speed_reference(pair.downstream.speed)
    if ref_up <= 0 or ref_down <= 0:
        raise ValueError("reference speeds must be positive")
    up = pair.upstream.replace(speed=np.clip(pair.upstream.speed / ref_up, 0.0, SPEED_CLIP))
    down = pair.downstream.replace(speed=np.clip(pair.downstream.speed / ref_down, 0.0, SPEED_CLIP))
    return pair.replace(upstream=up, downstream=down,
                        ref_speed_up=ref_up, ref_speed_down=ref_down)


def label_from_intervals(t_end: np.ndarray, intervals) -> np.ndarray:
    """1 where t_end falls inside any [start, start+duration] interval, else 0."""
    out = np.zeros(len(t_end), dtype=np.int8)
    for start, duration in intervals:
        out[(t_end >= start) & (t_end <= start + duration)] = 1
    return out


def make_slices(pair: PairSeries, history: int = HISTORY_STEPS, stride: int = 1,
                reported_intervals=None, true_intervals=None) -> SliceSet:
    """Window a preprocessed pair into time slices.

    One slice per grid point from index history-1 on, at the given stride.
    Labels come from interval membership of t_end; None means unknown.
    """
    if pair.ref_speed_up is None or pair.offset_applied is None:
        raise ValueError("pair must be offset-corrected and normalized before slicing")
    if history < 1 or stride < 1:
        raise ValueError("history and stride must be >= 1")
    n = len(pair.timestamps)
    if n < history:
        return SliceSet([pair.pair_id], np.empty(0, np.int32), np.empty(0, np.int64),
                        np.empty((0, history, N_CHANNELS), np.float32),
                        np.empty(0, np.int8), np.empty(0, np.int8))
    cols = (pair.upstream.speed, pair.downstream.speed,
            pair.upstream.occupancy, pair.downstream.occupancy,
            pair.downstream.speed - pair.upstream.speed)
    windows = [np.lib.stride_tricks.sliding_window_view(c, history)[::stride] for c in cols]
    channels = np.stack(windows, axis=-1).astype(np.float32)
    t_end = pair.timestamps[history - 1::stride]
    if reported_intervals is None:
        reported = np.full(len(t_end), LABEL_UNKNOWN, dtype=np.int8)
    else:
        reported = label_from_intervals(t_end, reported_intervals)
    if true_intervals is None:
        true = np.full(len(t_end), LABEL_UNKNOWN, dtype=np.int8)
    else:
        true = label_from_intervals(t_end, true_intervals)
    return SliceSet([pair.pair_id], np.zeros(len(t_end), np.int32), t_end,
                    channels, reported, true)
