"""Corpus file formats and serialization.

CSV schemas (bit-exact contracts):
    detectors.csv:    detector_id,milepost_km,lane_count,direction
    measurements.csv: timestamp_iso8601,detector_id,lane,speed_mph,volume_count,occupancy_frac
                      (lane = 0 marks pre-aggregated rows)
    incidents.csv:    incident_id,pair_id,start_iso8601,duration_s,template,
                      reported_start_iso8601,reported_duration_s
    labels csv:       slice_id,lf_1..lf_10,prob_label

Slices persist as an .npz bundle carrying the slice arrays plus pipeline
metadata (history, references, quality stats). All writers go through a
write-to-temp-then-rename step so a crash never leaves partial outputs.

Detector pairing convention: detectors sorted by milepost form consecutive
(upstream, downstream) pairs; a pair is keyed by its upstream detector_id.
"""

import json
import os
import tempfile
import numpy as np
import pandas as pd
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from .preprocess import LaneChannels, MeasurementSeries, QualityStats, SliceSet
from .synthgen import DetectorMeta, IncidentRecord
from .weaklabel import N_LFS

DETECTORS_FILE = "detectors.csv"
MEASUREMENTS_FILE = "measurements.csv"
INCIDENTS_FILE = "incidents.csv"
SLICES_VERSION = 1


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via_temp(path, writer):
    """Run writer(temp_path) then rename; for libraries that open by name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def iso_from_epoch(ts: float) -> str:
    return datetime.fromtimestamp(float(ts), tz=timezone.utc).replace(tzinfo=None).isoformat()


def epoch_from_iso(text: str) -> float:
    return datetime.fromisoformat(text).replace(tzinfo=timezone.utc).timestamp()


def write_detectors_csv(path, detectors: list[DetectorMeta]):
    frame = pd.DataFrame({
        "detector_id": [d.detector_id for d in detectors],
        "milepost_km": [d.milepost for d in detectors],
        "lane_count": [d.lane_count for d in detectors],
        "direction": [d.direction for d in detectors],
    })
    _atomic_via_temp(path, lambda tmp: frame.to_csv(tmp, index=False))


def read_detectors_csv(path) -> list[DetectorMeta]:
    frame = pd.read_csv(path)
    return [DetectorMeta(str(r.detector_id), float(r.milepost_km),
                         int(r.lane_count), str(r.direction))
            for r in frame.itertuples()]


def write_measurements_csv(path, series: list[MeasurementSeries]):
    """Per-lane rows when lane data exists, else aggregated rows with lane 0."""
    chunks = []
    for s in series:
        iso = [iso_from_epoch(t) for t in s.timestamps]
        lanes = s.per_lane or {0: LaneChannels(s.speed, s.volume, s.occupancy)}
        for lane, lc in sorted(lanes.items()):
            chunks.append(pd.DataFrame({
                "timestamp_iso8601": iso,
                "detector_id": s.detector_id,
                "lane": lane,
                "speed_mph": lc.speed,
                "volume_count": lc.volume,
                "occupancy_frac": lc.occupancy,
            }))
    frame = pd.concat(chunks, ignore_index=True)
    _atomic_via_temp(path, lambda tmp: frame.to_csv(tmp, index=False))


def read_measurements_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    frame["timestamp"] = frame["timestamp_iso8601"].map(epoch_from_iso).astype(np.int64)
    return frame


def write_incidents_csv(path, incidents: list[IncidentRecord]):
    frame = pd.DataFrame({
        "incident_id": [i.id for i in incidents],
        "pair_id": [i.pair_id for i in incidents],
        "start_iso8601": [iso_from_epoch(i.start) for i in incidents],
        "duration_s": [i.duration for i in incidents],
        "template": [i.template for i in incidents],
        "reported_start_iso8601": [iso_from_epoch(i.reported_start) for i in incidents],
        "reported_duration_s": [i.reported_duration for i in incidents],
    })
    _atomic_via_temp(path, lambda tmp: frame.to_csv(tmp, index=False))


def read_incidents_csv(path) -> list[IncidentRecord]:
    frame = pd.read_csv(path)
    return [IncidentRecord(
        id=int(r.incident_id), pair_id=str(r.pair_id),
        start=int(epoch_from_iso(r.start_iso8601)), duration=int(r.duration_s),
        template=str(r.template),
        reported_start=epoch_from_iso(r.reported_start_iso8601),
        reported_duration=float(r.reported_duration_s),
    ) for r in frame.itertuples()]


def write_corpus(directory, detectors, series, incidents):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_detectors_csv(d / DETECTORS_FILE, detectors)
    write_measurements_csv(d / MEASUREMENTS_FILE, series)
    write_incidents_csv(d / INCIDENTS_FILE, incidents)


def save_slices(path, slices: SliceSet, meta: dict):
    """Slice arrays + JSON metadata in one .npz bundle."""
    payload = dict(meta)
    payload["slices_version"] = SLICES_VERSION
    payload["pairs"] = slices.pairs
    blob = json.dumps(payload).encode()
    _atomic_via_temp(path, lambda tmp: _savez(tmp, slices, blob))


def _savez(tmp, slices, blob):
    with open(tmp, "wb") as fh:
        np.savez_compressed(
            fh,
            __meta__=np.frombuffer(blob, dtype=np.uint8),
            pair_index=slices.pair_index, t_end=slices.t_end,
            channels=slices.channels, reported=slices.reported, true=slices.true,
            prob=slices.prob, quality_ok=slices.quality_ok, split=slices.split)


def load_slices(path) -> tuple[SliceSet, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("slices_version") != SLICES_VERSION:
            raise ValueError(f"unsupported slices format {meta.get('slices_version')}")
        slices = SliceSet(meta.pop("pairs"), data["pair_index"], data["t_end"],
                          data["channels"], data["reported"], data["true"],
                          data["prob"], data["quality_ok"], data["split"])
    if "quality_stats" in meta and meta["quality_stats"] is not None:
        meta["quality_stats"] = QualityStats(**meta["quality_stats"])
    return slices, meta


def write_labels_csv(path, matrix: np.ndarray, prob: np.ndarray,
                     slice_ids: np.ndarray | None = None):
    if matrix.shape[1] != N_LFS:
        raise ValueError(f"label matrix must have {N_LFS} columns")
    data = {"slice_id": (np.arange(len(matrix)) if slice_ids is None else slice_ids)}
    for j in range(N_LFS):
        data[f"lf_{j + 1}"] = matrix[:, j]
    data["prob_label"] = prob
    frame = pd.DataFrame(data)
    _atomic_via_temp(path, lambda tmp: frame.to_csv(tmp, index=False))


def read_labels_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    frame = pd.read_csv(path)
    matrix = frame[[f"lf_{j + 1}" for j in range(N_LFS)]].to_numpy(dtype=np.int8)
    return frame["slice_id"].to_numpy(), matrix, frame["prob_label"].to_numpy()


def write_text(path, text: str):
    with atomic_write(path) as fh:
        fh.write(text)


def write_ndjson(path, records: list[dict]):
    with atomic_write(path) as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def write_events_csv(path, events):
    frame = pd.DataFrame({
        "pair_id": [e.pair_id for e in events],
        "start_iso8601": [iso_from_epoch(e.start) for e in events],
        "end_iso8601": [iso_from_epoch(e.end) for e in events],
        "peak_prob": [e.peak_prob for e in events],
        "mean_uncertainty": [e.mean_uncertainty for e in events],
    })
    _atomic_via_temp(path, lambda tmp: frame.to_csv(tmp, index=False))


def write_plot_data_csv(path, timeline: dict):
    """Per-sample export: timestamp, speeds, score, uncertainty, event flag."""
    frame = pd.DataFrame({
        "timestamp_iso8601": [iso_from_epoch(t) for t in timeline["timestamp"]],
        "up_speed": timeline["up_speed"],
        "down_speed": timeline["down_speed"],
        "score": timeline["score"],
        "uncertainty": timeline["uncertainty"],
        "event_flag": timeline["event_flag"],
    })
    _atomic_via_temp(path, lambda tmp: frame.to_csv(tmp, index=False))
