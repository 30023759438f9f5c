"""Online incident detector: an explicit state machine over arriving 30 s
sample pairs.

Per push: incremental truncated EMA, upstream offset from a trailing one-hour
mean that excludes samples arriving while the status is not NORMAL,
normalization against offline-fitted references, slice assembly once H
samples are buffered, scoring, the free-flow filter, and the run-length
transition rules:

    NORMAL -> REQUIRE_ATTENTION     on the first incident-classified slice
    REQUIRE_ATTENTION -> INCIDENT_DETECTED
                                    once the run exceeds the consecutive
                                    threshold (event opens at the run start)
    any -> NORMAL                   on a non-incident slice (closing an open
                                    event at the last incident slice)
"""

import logging
import numpy as np
from collections import deque
from dataclasses import dataclass
from enum import Enum

from . import preprocess as pp
from .detection import DetectionConfig, DetectionEvent, _OffsetTracker, score_slices

log = logging.getLogger(__name__)


class StreamStatus(Enum):
    NORMAL = "NORMAL"
    REQUIRE_ATTENTION = "REQUIRE_ATTENTION"
    INCIDENT_DETECTED = "INCIDENT_DETECTED"


class OutOfOrderError(ValueError):
    """Pushed sample does not advance the clock."""


@dataclass(frozen=True)
class StreamSample:
    """One aligned, lane-aggregated observation of a detector pair."""
    timestamp: int
    up_speed: float
    up_occ: float
    down_speed: float
    down_occ: float


@dataclass
class StreamUpdate:
    timestamp: int
    score: float | None
    status: StreamStatus
    opened_at: int | None = None          # run start when an event opens
    closed: DetectionEvent | None = None


class StreamState:
    """Mutable per-pair detector state; constant memory in the stream length."""

    def __init__(self, scorer, config: DetectionConfig, ref_up: float, ref_down: float,
                 pair_id: str = "stream", history: int = pp.HISTORY_STEPS,
                 ema_window: int = pp.EMA_WINDOW, ema_alpha: float = pp.EMA_ALPHA,
                 offset_window_s: float = pp.OFFSET_WINDOW):
        if ref_up is None or ref_down is None or ref_up <= 0 or ref_down <= 0:
            raise ValueError("stream needs positive offline-fitted speed references")
        config.validate()
        self.scorer = scorer
        self.config = config
        self.pair_id = pair_id
        self.history = history
        self.ref_up = ref_up
        self.ref_down = ref_down
        self.ema_weights = (1.0 - ema_alpha) ** np.arange(ema_window)
        self.raw = {name: deque(maxlen=ema_window)
                    for name in ("up_speed", "down_speed", "up_occ", "down_occ")}
        self.tracker = _OffsetTracker(offset_window_s)
        self.channels = deque(maxlen=history)
        self.status = StreamStatus.NORMAL
        self.run_length = 0
        self.run_start_ts: int | None = None
        self.last_incident_ts: int | None = None
        self.run_peak = 0.0
        self.run_var_sum = 0.0
        self.run_var_count = 0
        self.event_open = False
        self.last_ts: int | None = None
        self.pushes_while_normal = 0      # instrumentation for the exclusion rule

    def _smooth(self, name: str) -> float:
        buf = self.raw[name]
        num = 0.0
        den = 0.0
        # oldest-first accumulation mirrors the offline convolution order
        m = len(buf)
        for age_from_oldest, value in enumerate(buf):
            j = m - 1 - age_from_oldest
            num += value * self.ema_weights[j]
            den += self.ema_weights[j]
        return num / den

    def state_size(self) -> int:
        """Bounded element count held by the state (constant-memory check)."""
        return (sum(len(b) for b in self.raw.values()) + len(self.channels)
                + len(self.tracker.entries))


def new_stream(scorer, config: DetectionConfig, ref_up: float, ref_down: float,
               pair_id: str = "stream", warmup=None, **kw) -> StreamState:
    """Fresh NORMAL-state stream; warm-up samples pre-fill the smoothing,
    offset, and slice buffers without any classification."""
    state = StreamState(scorer, config, ref_up, ref_down, pair_id, **kw)
    for sample in warmup or ():
        _ingest(state, sample)
    return state


def _ingest(state: StreamState, sample: StreamSample) -> tuple[float, float] | None:
    """Shared sample intake: EMA, offset tracking, channel buffering.

    Returns the (up_n, down_n) current normalized speeds, or None when the
    sample was skipped.
    """
    if state.last_ts is not None and sample.timestamp <= state.last_ts:
        raise OutOfOrderError(
            f"timestamp {sample.timestamp} does not advance past {state.last_ts}")
    values = (sample.up_speed, sample.down_speed, sample.up_occ, sample.down_occ)
    if any(not np.isfinite(v) for v in values):
        log.warning("skipping non-finite sample at %s", sample.timestamp)
        return None
    state.last_ts = sample.timestamp
    state.raw["up_speed"].append(sample.up_speed)
    state.raw["down_speed"].append(sample.down_speed)
    state.raw["up_occ"].append(sample.up_occ)
    state.raw["down_occ"].append(sample.down_occ)
    up_s = state._smooth("up_speed")
    down_s = state._smooth("down_speed")
    up_o = state._smooth("up_occ")
    down_o = state._smooth("down_occ")
    if state.status is StreamStatus.NORMAL:
        state.tracker.ingest(sample.timestamp, down_s - up_s)
        state.pushes_while_normal += 1
    offset = state.tracker.offset_at(sample.timestamp)
    up_n = min(max((up_s + offset) / state.ref_up, 0.0), pp.SPEED_CLIP)
    down_n = min(max(down_s / state.ref_down, 0.0), pp.SPEED_CLIP)
    state.channels.append((sample.timestamp, up_n, down_n, up_o, down_o, down_n - up_n))
    return up_n, down_n


def push(state: StreamState, sample: StreamSample) -> StreamUpdate:
    """Advance the stream by one sample pair."""
    speeds = _ingest(state, sample)
    if speeds is None:
        return StreamUpdate(sample.timestamp, None, state.status)
    if len(state.channels) < state.history:
        return StreamUpdate(sample.timestamp, None, state.status)

    window = np.array([row[1:] for row in state.channels], dtype=np.float64)
    scores, var = score_slices(state.scorer, window.astype(np.float32)[None, :, :],
                               state.config)
    score = float(scores[0])
    up_n, down_n = speeds
    free_flow = (np.float32(up_n) > state.config.free_flow_cut
                 and np.float32(down_n) > state.config.free_flow_cut)
    incident = score > state.config.prob_threshold and not free_flow

    update = StreamUpdate(sample.timestamp, score, state.status)
    if incident:
        state.run_length += 1
        if state.run_length == 1:
            state.run_start_ts = sample.timestamp
            state.run_peak = score
            state.run_var_sum = 0.0
            state.run_var_count = 0
        state.run_peak = max(state.run_peak, score)
        if var is not None:
            state.run_var_sum += float(var[0])
            state.run_var_count += 1
        state.last_incident_ts = sample.timestamp
        if state.status is StreamStatus.NORMAL:
            state.status = StreamStatus.REQUIRE_ATTENTION
        if (state.status is StreamStatus.REQUIRE_ATTENTION
                and state.config.run_qualifies(state.run_length)):
            state.status = StreamStatus.INCIDENT_DETECTED
            state.event_open = True
            update.opened_at = state.run_start_ts
    else:
        if state.event_open:
            update.closed = _close_event(state)
        state.status = StreamStatus.NORMAL
        state.run_length = 0
        state.run_start_ts = None
    update.status = state.status
    return update


def _close_event(state: StreamState) -> DetectionEvent:
    event = DetectionEvent(
        pair_id=state.pair_id,
        start=int(state.run_start_ts),
        end=int(state.last_incident_ts),
        peak_prob=state.run_peak,
        mean_uncertainty=(state.run_var_sum / state.run_var_count
                          if state.run_var_count else None))
    state.event_open = False
    return event


def finalize(state: StreamState) -> DetectionEvent | None:
    """Close an event left open at end of stream."""
    if state.event_open:
        return _close_event(state)
    return None


def replay(scorer, config: DetectionConfig, pair: pp.PairSeries,
           ref_up: float, ref_down: float, **kw) -> tuple[list, list]:
    """Drive a fresh stream with an aligned raw pair; returns (updates, events)."""
    state = new_stream(scorer, config, ref_up, ref_down, pair_id=pair.pair_id, **kw)
    updates = []
    events = []
    up, down = pair.upstream, pair.downstream
    for i, ts in enumerate(pair.timestamps):
        update = push(state, StreamSample(int(ts), up.speed[i], up.occupancy[i],
                                          down.speed[i], down.occupancy[i]))
        updates.append(update)
        if update.closed is not None:
            events.append(update.closed)
    tail = finalize(state)
    if tail is not None:
        events.append(tail)
    return updates, events


def replay_equivalence(scorer, config: DetectionConfig, pair: pp.PairSeries,
                       ref_up: float, ref_down: float,
                       stride_tolerance_s: int = pp.GRID_STEP) -> bool:
    """True when streaming and offline detection yield the same event list
    (start/end timestamps equal to within one stride)."""
    from .detection import run_offline_detection
    offline = run_offline_detection(pair, scorer, config, ref_up, ref_down)
    _, streamed = replay(scorer, config, pair, ref_up, ref_down)
    if len(offline.events) != len(streamed):
        return False
    for a, b in zip(offline.events, streamed):
        if abs(a.start - b.start) > stride_tolerance_s:
            return False
        if abs(a.end - b.end) > stride_tolerance_s:
            return False
    return True
