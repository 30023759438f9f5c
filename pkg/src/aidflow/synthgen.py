"""Synthetic loop-detector corpus with ground-truth incidents and corrupted
incident reports.

Each detector pair shares a diurnal base curve (free-flow at night, two
rush-hour dips affecting both detectors simultaneously) plus a constant
inter-detector speed separation. Injected incidents modify upstream and
downstream speed/occupancy per a template; their reported times are shifted
by uniform jitter to emulate noisy incident logs. Volume follows demand only,
carrying no incident signature.
"""

import math
import numpy as np
from dataclasses import dataclass, field

from .preprocess import GRID_STEP, LaneChannels, MeasurementSeries

CORPUS_EPOCH = 1546300800        # 2019-01-01T00:00:00Z
SAMPLES_PER_DAY = 86400 // GRID_STEP
FREE_FLOW_MPH = 65.0
LANES_PER_DETECTOR = 2
LANE_SPEED_CONTRAST = 1.2        # mph between fast and slow lane
LANE_OCC_CONTRAST = 0.004
INCIDENT_RAMP_S = 240            # cosine ramp in/out of an incident
MIN_INCIDENT_GAP_S = 1800        # separation between incidents on one pair
MAX_SAMPLES = 10 ** 8

TEMPLATES = ("separation", "strong_separation", "one_sided_drop", "double_sided_drop")

# (up-depth low, up-depth high, down-depth low, down-depth high,
#  up-occ bump low/high, down-occ bump low/high)
_TEMPLATE_PARAMS = {
    "separation":         (0.30, 0.45, 0.0, 0.0, 0.20, 0.40, 0.0, 0.0),
    "strong_separation":  (0.50, 0.70, 0.0, 0.0, 0.25, 0.45, 0.0, 0.0),
    "one_sided_drop":     (0.35, 0.55, 0.0, 0.0, 0.20, 0.40, 0.0, 0.0),
    "double_sided_drop":  (0.45, 0.65, 0.30, 0.40, 0.20, 0.40, 0.15, 0.30),
}


@dataclass(frozen=True)
class DetectorMeta:
    detector_id: str
    milepost: float          # km along corridor
    lane_count: int
    direction: str           # east | west

    def __post_init__(self):
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")
        if self.direction not in ("east", "west"):
            raise ValueError("direction must be east or west")


@dataclass(frozen=True)
class SynthConfig:
    days: int = 4
    detector_pairs: int = 2
    incident_rate: float = 1.0           # expected incidents per pair per day
    report_time_jitter: float = 10.0     # minutes, max label-noise shift
    template_mix: dict = field(default_factory=lambda: {t: 0.25 for t in TEMPLATES})
    noise_std: float = 0.02              # Gaussian measurement noise, normalized units
    seed: int = 0

    def validate(self):
        if self.days < 1 or self.detector_pairs < 1:
            raise ValueError("days and detector_pairs must be >= 1")
        if self.incident_rate < 0:
            raise ValueError("incident_rate must be >= 0")
        if self.report_time_jitter < 0:
            raise ValueError("report_time_jitter must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if set(self.template_mix) - set(TEMPLATES):
            raise ValueError(f"unknown templates: {set(self.template_mix) - set(TEMPLATES)}")
        weights = [self.template_mix.get(t, 0.0) for t in TEMPLATES]
        if any(w < 0 for w in weights):
            raise ValueError("template weights must be >= 0")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("template weights must sum to 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")


@dataclass(frozen=True)
class IncidentRecord:
    id: int
    pair_id: str
    start: int               # epoch seconds, true onset
    duration: int            # seconds, true duration
    template: str
    reported_start: float
    reported_duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template}")

    @property
    def end(self) -> int:
        return self.start + self.duration


def _smoothstep(x, lo, hi):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _bump(hours, start, end, ramp=0.75):
    """0 outside [start-ramp, end+ramp], 1 inside [start, end], smooth edges."""
    return _smoothstep(hours, start - ramp, start) - _smoothstep(hours, end, end + ramp)


def diurnal_multiplier(hours: np.ndarray) -> np.ndarray:
    """Fraction of free-flow speed: dips during 07:00-09:00 and 16:00-19:00."""
    return 1.0 - 0.45 * _bump(hours, 7.0, 9.0) - 0.50 * _bump(hours, 16.0, 19.0)


def _half_cos(x):
    return 0.5 * (1.0 - np.cos(np.pi * np.clip(x, 0.0, 1.0)))


def _incident_envelope(n: int, start_idx: int, dur_steps: int) -> np.ndarray:
    """Cosine-ramped 0..1 envelope over [start, start+duration]."""
    ramp = INCIDENT_RAMP_S // GRID_STEP
    env = np.zeros(n)
    idx = np.arange(start_idx, min(start_idx + dur_steps + 1, n))
    rel = idx - start_idx
    env[idx] = np.minimum(_half_cos(rel / ramp), _half_cos((dur_steps - rel) / ramp))
    return env


def _pick_starts(rng, mult, dur_steps_list, n):
    """Choose incident start indices on stretches where the base curve is stable.

    Stability keeps the one-sided templates assertable (downstream must hold
    within ~10% through the incident). Candidates failing stability or
    overlapping a previous incident are redrawn; unplaceable ones are dropped.
    """
    chosen: list[tuple[int, int]] = []
    margin = MIN_INCIDENT_GAP_S // GRID_STEP
    pre = 1800 // GRID_STEP
    for dur_steps in dur_steps_list:
        for _ in range(60):
            s = int(rng.integers(pre + margin, n - dur_steps - margin))
            window = mult[s - pre: s + dur_steps + 1]
            if window.max() - window.min() > 0.05:
                continue
            if any(s < cs + cd + margin and cs < s + dur_steps + margin
                   for cs, cd in chosen):
                continue
            chosen.append((s, dur_steps))
            break
    return sorted(chosen)


def _split_lanes(rng, speed, occ, vol_rate):
    """Split detector-level signal into lanes whose volume-weighted mean
    recovers the detector speed exactly."""
    volumes = [rng.poisson(vol_rate).astype(np.float64) for _ in range(LANES_PER_DETECTOR)]
    total = np.maximum(sum(volumes), 1.0)
    w = [v / total for v in volumes]
    # two-lane contrast c*w2 / -c*w1 cancels exactly under volume weighting
    s1 = speed + LANE_SPEED_CONTRAST * w[1]
    s2 = speed - LANE_SPEED_CONTRAST * w[0]
    ok = np.minimum(occ - LANE_OCC_CONTRAST, 1.0 - (occ + LANE_OCC_CONTRAST)) >= 0.0
    o1 = np.where(ok, occ + LANE_OCC_CONTRAST, occ)
    o2 = np.where(ok, occ - LANE_OCC_CONTRAST, occ)
    return {1: LaneChannels(s1, volumes[0], o1), 2: LaneChannels(s2, volumes[1], o2)}


def generate_corpus(config: SynthConfig):
    """Build (detectors, measurement series, incident records) for the config.

    Deterministic for a fixed seed; each pair derives its own sub-seed from
    (seed, pair index) so pairs are order-independent.
    """
    config.validate()
    n = config.days * SAMPLES_PER_DAY
    if config.days * config.detector_pairs * SAMPLES_PER_DAY * 2 * LANES_PER_DETECTOR > MAX_SAMPLES:
        raise ValueError("corpus would exceed the sample budget (10^8)")

    timestamps = CORPUS_EPOCH + GRID_STEP * np.arange(n, dtype=np.int64)
    hours = ((timestamps - CORPUS_EPOCH) % 86400) / 3600.0
    mult = diurnal_multiplier(hours)
    dip = np.clip((1.0 - mult) / 0.5, 0.0, 1.0)
    day_level = _bump(hours, 6.5, 20.0, ramp=1.5)
    vol_rate = 1.5 + 14.0 * day_level
    weights = np.array([config.template_mix.get(t, 0.0) for t in TEMPLATES])

    detectors: list[DetectorMeta] = []
    series: list[MeasurementSeries] = []
    incidents: list[IncidentRecord] = []
    next_id = 0
    for p in range(config.detector_pairs):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, p)))
        up_id, down_id = f"p{p:03d}u", f"p{p:03d}d"
        detectors.append(DetectorMeta(up_id, 2.0 * p, LANES_PER_DETECTOR, "east"))
        detectors.append(DetectorMeta(down_id, 2.0 * p + 0.8, LANES_PER_DETECTOR, "east"))

        phase = rng.uniform(0, 2 * math.pi)
        stop_go = 3.0 * dip * np.sin(2 * math.pi * (timestamps - CORPUS_EPOCH) / 840.0 + phase)
        base = FREE_FLOW_MPH * mult + stop_go
        gap = rng.uniform(-2.0, 2.0)
        up_speed, down_speed = base.copy(), base + gap
        up_occ = 0.035 + 0.45 * (1.0 - mult)
        down_occ = up_occ.copy()

        n_inc = rng.poisson(config.incident_rate * config.days)
        durs = np.exp(rng.uniform(math.log(600), math.log(5400), size=n_inc))
        dur_steps_list = [int(round(d / GRID_STEP)) for d in durs]
        for start_idx, dur_steps in _pick_starts(rng, mult, dur_steps_list, n):
            template = str(rng.choice(TEMPLATES, p=weights))
            ul, uh, dl, dh, oul, ouh, odl, odh = _TEMPLATE_PARAMS[template]
            up_depth = rng.uniform(ul, uh)
            down_depth = rng.uniform(dl, dh) if dh > 0 else 0.0
            up_bump = rng.uniform(oul, ouh)
            down_bump = rng.uniform(odl, odh) if odh > 0 else 0.0
            env = _incident_envelope(n, start_idx, dur_steps)
            up_speed *= 1.0 - up_depth * env
            down_speed *= 1.0 - down_depth * env
            up_occ = up_occ + up_bump * env
            down_occ = down_occ + down_bump * env
            start = int(timestamps[start_idx])
            duration = dur_steps * GRID_STEP
            jitter_s = config.report_time_jitter * 60.0
            incidents.append(IncidentRecord(
                id=next_id, pair_id=up_id, start=start, duration=duration,
                template=template,
                reported_start=start + rng.uniform(-jitter_s, jitter_s),
                reported_duration=max(60.0, duration + rng.uniform(-jitter_s, jitter_s)),
            ))
            next_id += 1

        noise_mph = config.noise_std * FREE_FLOW_MPH
        for det_id, speed, occ in ((up_id, up_speed, up_occ), (down_id, down_speed, down_occ)):
            speed = np.maximum(speed + rng.normal(0, noise_mph, n), 0.0)
            occ = np.clip(occ + rng.normal(0, config.noise_std * 0.25, n), 0.0, 1.0)
            lanes = _split_lanes(rng, speed, occ, vol_rate)
            volume = sum(lc.volume for lc in lanes.values())
            series.append(MeasurementSeries(det_id, timestamps, speed, volume, occ,
                                            per_lane=lanes))
    return detectors, series, incidents


def corrupt_quality(series: MeasurementSeries, fraction: float,
                    seed: int = 0) -> MeasurementSeries:
    """Flat-line a fraction of detector-hours to exercise the quality filter.

    Chooses round(fraction * hours) whole hours; every channel in a chosen
    hour is held at the hour's first value. Lane data flattens the same way.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if fraction == 0.0:
        return series
    block = 3600 // GRID_STEP
    n_blocks = len(series) // block
    n_pick = int(round(fraction * n_blocks))
    if n_pick == 0:
        return series
    rng = np.random.default_rng(seed)
    picks = rng.choice(n_blocks, size=n_pick, replace=False)

    def flatten(values):
        out = values.copy()
        for b in picks:
            out[b * block:(b + 1) * block] = out[b * block]
        return out

    per_lane = None
    if series.per_lane is not None:
        per_lane = {lane: LaneChannels(flatten(lc.speed), flatten(lc.volume),
                                       flatten(lc.occupancy))
                    for lane, lc in series.per_lane.items()}
    return series.replace(speed=flatten(series.speed), volume=flatten(series.volume),
                          occupancy=flatten(series.occupancy), per_lane=per_lane)
