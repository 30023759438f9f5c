"""Command-line entry point.

Subcommands mirror the workflow: generate -> preprocess -> label -> train /
ensemble -> evaluate / stream -> report. Every command exits nonzero with a
one-line diagnostic on invalid inputs; outputs are written atomically.
"""

import argparse
import json
import sys
import numpy as np
from pathlib import Path

from . import io as aio
from . import pipeline as pl
from . import stream as st
from . import weaklabel as wl
from .classifier import (DEFAULT_SEARCH_SPACE, TrainedModel, binary_cross_entropy,
                         random_search, train)
from .config import load_config
from .detection import classification_metrics, score_slices
from .ensemble import Ensemble, select_members, train_ensemble
from .pipeline import SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL


def _add_config_args(p):
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config entry (dotted path)")


def _load_corpus(data_dir):
    d = Path(data_dir)
    detectors = aio.read_detectors_csv(d / aio.DETECTORS_FILE)
    measurements = aio.read_measurements_csv(d / aio.MEASUREMENTS_FILE)
    incidents_path = d / aio.INCIDENTS_FILE
    incidents = aio.read_incidents_csv(incidents_path) if incidents_path.exists() else []
    return detectors, measurements, incidents


def cmd_generate(args):
    cfg = load_config(args.config, args.overrides)
    from .synthgen import generate_corpus
    detectors, series, incidents = generate_corpus(cfg.synth)
    aio.write_corpus(args.out, detectors, series, incidents)
    print(f"wrote corpus: {len(detectors)} detectors, "
          f"{len(incidents)} incidents -> {args.out}")


def cmd_preprocess(args):
    cfg = load_config(args.config, args.overrides)
    detectors, measurements, incidents = _load_corpus(args.data)
    pairs, fill_report = pl.build_pairs(measurements, detectors, cfg.preprocess.grid_step)
    slices, refs, stats = pl.curate(pairs, incidents, cfg)
    meta = {
        "history": cfg.preprocess.history,
        "grid_step": cfg.preprocess.grid_step,
        "corpus_start": pl.corpus_start(pairs),
        "refs": {k: list(v) for k, v in refs.items()},
        "quality_stats": {"mu_d": stats.mu_d, "sigma_d": stats.sigma_d,
                          "window_span": stats.window_span},
    }
    aio.save_slices(args.out, slices, meta)
    n_fail = int((~slices.quality_ok).sum())
    lines = [
        "preprocessing report",
        f"detectors: {fill_report['detectors']}  pairs: {fill_report['pairs']}",
        f"gap fills (forward): {fill_report['gap_fills']}",
        f"first-timestamp spline fills: {fill_report['spline_fills']}",
        f"slices: {len(slices)}  quality-failed: {n_fail}",
        f"quality stats: mu_d={stats.mu_d:.6f} sigma_d={stats.sigma_d:.6f} "
        f"k={cfg.preprocess.quality_k}",
    ]
    for pair_id, (ref_up, ref_down) in sorted(refs.items()):
        lines.append(f"ref[{pair_id}]: up={ref_up:.6f} down={ref_down:.6f}")
    aio.write_text(args.report, "\n".join(lines) + "\n")
    print(f"wrote {len(slices)} slices -> {args.out}")


def cmd_label(args):
    cfg = load_config(args.config, args.overrides)
    slices, _ = aio.load_slices(args.slices)
    model, matrix, labeled, summary, train_idx = pl.weak_label_training(slices, cfg)
    aio.write_labels_csv(args.out, matrix, labeled.prob, slice_ids=train_idx)
    model_path = args.model_out or str(Path(args.out).with_name("label_model.json"))
    with aio.atomic_write(model_path) as fh:
        json.dump({"accuracies": model.accuracies.tolist(),
                   "coverages": model.coverages.tolist(),
                   "prior": model.prior}, fh, indent=2)
    stats = wl.lf_stats(matrix)
    lines = ["labeling-function report",
             f"labeled slices: {summary.n_total} "
             f"(incident {summary.n_incident} + non-incident {summary.n_non_incident})",
             f"all-abstain slices: {summary.n_all_abstain}",
             f"estimated prior: {model.prior:.6f}",
             "lf  coverage  overlap  conflict  accuracy"]
    for j, name in enumerate(wl.LF_NAMES):
        lines.append(f"{name:28s} {stats.coverage[j]:.4f}  {stats.overlap[j]:.4f}  "
                     f"{stats.conflict[j]:.4f}  {model.accuracies[j]:.4f}")
    aio.write_text(args.report, "\n".join(lines) + "\n")
    print(f"labeled {summary.n_total} slices "
          f"({summary.n_incident} incident / {summary.n_non_incident} non-incident)")


def _load_label_model(path) -> wl.LabelModel:
    data = json.loads(Path(path).read_text())
    return wl.LabelModel(accuracies=np.array(data["accuracies"]),
                         coverages=np.array(data["coverages"]), prior=data["prior"])


def _training_arrays(cfg, slices, labels_path, label_model_path, on):
    """(X_train, q_train, X_val, y_val) per the chosen label source."""
    train_sel = (slices.split == SPLIT_TRAIN) & slices.quality_ok
    val_sel = (slices.split == SPLIT_VAL) & slices.quality_ok
    train_slices = slices.subset(train_sel)
    val_slices = slices.subset(val_sel)
    if on == "weak":
        ids, _, prob = aio.read_labels_csv(labels_path)
        expect = np.flatnonzero(train_sel)
        if len(ids) != len(expect) or not np.array_equal(np.sort(ids), expect):
            raise ValueError("labels file does not match the slices file's training split")
        order = np.argsort(ids)
        q_train = prob[order]
        label_model = _load_label_model(label_model_path)
        val_prob = pl.weak_prob_for(val_slices, label_model, cfg)
        y_val = (val_prob > 0.5).astype(np.float64)
    elif on == "reported":
        if (train_slices.reported < 0).any():
            raise ValueError("reported labels are unknown; cannot train on them")
        q_train = train_slices.reported.astype(np.float64)
        y_val = val_slices.reported.astype(np.float64)
    else:
        raise ValueError(f"unknown label source {on!r}")
    keep_t = pl.balanced_subsample(train_slices, q_train,
                                   cfg.sampling.max_train_per_class, cfg.seed)
    keep_v = pl.balanced_subsample(val_slices, y_val,
                                   cfg.sampling.max_val_per_class, cfg.seed + 1)
    return (train_slices.channels[keep_t].astype(np.float64), q_train[keep_t],
            val_slices.channels[keep_v].astype(np.float64), y_val[keep_v])


def _check_history(cfg, slices):
    if cfg.model.seq_len != slices.history:
        raise ValueError(f"model history H={cfg.model.seq_len} does not match "
                         f"slices file H={slices.history}")


def cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    slices, _ = aio.load_slices(args.slices)
    _check_history(cfg, slices)
    X, q, Xv, yv = _training_arrays(cfg, slices, args.labels, args.label_model, args.on)
    mcfg, tcfg = cfg.model, cfg.training
    if args.search:
        result = random_search(DEFAULT_SEARCH_SPACE, args.search, X, q, Xv, yv,
                               base_model=mcfg, base_train=tcfg, seed=cfg.seed)
        mcfg, tcfg = result.best_model_config, result.best_train_config
        print(f"search done: best val BCE {result.best_val_bce:.4f} over "
              f"{len(result.trials)} trials")
    model = train(mcfg, X, q, Xv, yv, tcfg)
    aio._atomic_via_temp(args.out, model.save)
    hist_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    h = model.history
    rows = ["epoch,train_loss,val_loss,val_acc"]
    rows += [f"{e + 1},{h.train_loss[e]!r},{h.val_loss[e]!r},{h.val_accuracy[e]!r}"
             for e in range(h.epochs_run)]
    aio.write_text(hist_path, "\n".join(rows) + "\n")
    print(f"trained {model.n_params}-parameter model "
          f"(best epoch {h.best_epoch}/{h.epochs_run}) -> {args.out}")


def cmd_ensemble(args):
    cfg = load_config(args.config, args.overrides)
    slices, _ = aio.load_slices(args.slices)
    _check_history(cfg, slices)
    X, q, Xv, yv = _training_arrays(cfg, slices, args.labels, args.label_model, args.on)
    n_seeds = args.seeds or cfg.ensemble.n_seeds
    candidates, seeds = train_ensemble(cfg.model, X, q, Xv, yv, cfg.training,
                                       n_seeds=n_seeds, master_seed=cfg.seed)
    ens = select_members(candidates, seeds, Xv, yv,
                         threshold=cfg.ensemble.selection_threshold,
                         decision_threshold=cfg.training.threshold)
    ens.save(args.out)
    print(f"ensemble: kept {len(ens.members)}/{len(candidates)} members -> {args.out}")


def _load_scorer(args):
    if getattr(args, "model", None):
        return TrainedModel.load(args.model)
    if getattr(args, "ensemble", None):
        return Ensemble.load(args.ensemble)
    raise ValueError("provide --model or --ensemble")


def _scorer_history(scorer) -> int:
    cfg = scorer.config if hasattr(scorer, "config") else None
    return cfg.seq_len if cfg is not None else 0


def _fmt(x, digits=3):
    return "undefined" if x is None else f"{x:.{digits}f}"


def cmd_evaluate(args):
    cfg = load_config(args.config, args.overrides)
    scorer = _load_scorer(args)
    slices, meta = aio.load_slices(args.slices)
    if _scorer_history(scorer) != slices.history:
        raise ValueError(f"model history H={_scorer_history(scorer)} does not match "
                         f"slices file H={slices.history}")
    detectors, measurements, incidents = _load_corpus(args.data)
    pairs, _ = pl.build_pairs(measurements, detectors, cfg.preprocess.grid_step)
    refs = {k: tuple(v) for k, v in meta["refs"].items()}

    # classification view: test-split slices against ground truth
    test_sel = (slices.split == SPLIT_TEST) & slices.quality_ok
    test = slices.subset(test_sel)
    labels = test.true if (test.true >= 0).any() else test.reported
    scores, _ = score_slices(scorer, test.channels, cfg.detection)
    preds = (scores > cfg.detection.prob_threshold).astype(int)
    cm = classification_metrics(preds, labels)
    bce = float(binary_cross_entropy(scores, labels.astype(np.float64)).mean())

    # event view: DR / FAR over the test period
    result = pl.evaluate_detection(pairs, incidents, scorer, refs, cfg)
    rep = result.report
    lines = [
        "evaluation report",
        "",
        "time-slice classification (test split, quality-passing slices)",
        f"  slices: {len(test)}  val-style BCE: {bce:.4f}",
        "  class          precision  recall  f1",
        f"  non-incident   {_fmt(cm.non_incident.precision)}      {_fmt(cm.non_incident.recall)}"
        f"   {_fmt(cm.non_incident.f1)}",
        f"  incident       {_fmt(cm.incident.precision)}      {_fmt(cm.incident.recall)}"
        f"   {_fmt(cm.incident.f1)}",
        f"  accuracy       {cm.accuracy:.3f}",
        "",
        "incident detection (test period)",
        f"  truth incidents: {rep.total_truth}  detected events: {rep.total_detected}",
        f"  correctly detected: {rep.correctly_detected}  false alarms: {rep.false_alarms}"
        f"  missed: {rep.missed}",
        f"  DR: {_fmt(rep.dr)}  FAR: {_fmt(rep.far)}",
    ]
    aio.write_text(args.out_report, "\n".join(lines) + "\n")
    aio.write_events_csv(args.out_events, result.events)
    if args.out_timeline:
        _save_timeline(args.out_timeline, result)
    print(f"DR={_fmt(rep.dr)} FAR={_fmt(rep.far)} accuracy={cm.accuracy:.3f}")


def _save_timeline(path, result):
    arrays = {}
    pair_ids = sorted(result.per_pair)
    for i, pair_id in enumerate(pair_ids):
        r = result.per_pair[pair_id]
        n = len(r.slices)
        flag = np.zeros(n, dtype=np.int8)
        for e in r.events:
            flag[(r.slices.t_end >= e.start) & (r.slices.t_end <= e.end)] = 1
        arrays[f"{i}_timestamp"] = r.slices.t_end
        arrays[f"{i}_up_speed"] = r.slices.channels[:, -1, 0]
        arrays[f"{i}_down_speed"] = r.slices.channels[:, -1, 1]
        arrays[f"{i}_score"] = r.scores
        arrays[f"{i}_uncertainty"] = (r.uncertainty if r.uncertainty is not None
                                      else np.full(n, np.nan))
        arrays[f"{i}_event_flag"] = flag
    blob = json.dumps({"pairs": pair_ids}).encode()

    def write(tmp):
        with open(tmp, "wb") as fh:
            np.savez_compressed(fh, __meta__=np.frombuffer(blob, dtype=np.uint8), **arrays)

    aio._atomic_via_temp(path, write)


def cmd_stream(args):
    cfg = load_config(args.config, args.overrides)
    scorer = _load_scorer(args)
    slices, meta = aio.load_slices(args.slices)
    refs = {k: tuple(v) for k, v in meta["refs"].items()}
    detectors, measurements, _ = _load_corpus(args.data)
    pairs, _ = pl.build_pairs(measurements, detectors, cfg.preprocess.grid_step)
    start = pl.corpus_start(pairs)
    _, val_end, test_end = pl.split_bounds(start, cfg)
    records = []
    for pair in pairs:
        sel = (pair.timestamps >= val_end) & (pair.timestamps < test_end)
        sub = pair.replace(
            upstream=pair.upstream.replace(timestamps=pair.timestamps[sel],
                                           speed=pair.upstream.speed[sel],
                                           volume=pair.upstream.volume[sel],
                                           occupancy=pair.upstream.occupancy[sel],
                                           per_lane=None),
            downstream=pair.downstream.replace(timestamps=pair.timestamps[sel],
                                               speed=pair.downstream.speed[sel],
                                               volume=pair.downstream.volume[sel],
                                               occupancy=pair.downstream.occupancy[sel],
                                               per_lane=None),
            offset_applied=None)
        ref_up, ref_down = refs[pair.pair_id]
        updates, events = st.replay(scorer, cfg.detection, sub, ref_up, ref_down,
                                    history=cfg.preprocess.history,
                                    ema_window=cfg.preprocess.ema_window,
                                    ema_alpha=cfg.preprocess.ema_alpha,
                                    offset_window_s=cfg.preprocess.offset_window_s)
        event_no = 0
        for u in updates:
            rec = {"pair_id": pair.pair_id, "timestamp": aio.iso_from_epoch(u.timestamp),
                   "score": None if u.score is None else round(u.score, 6),
                   "status": u.status.value}
            if u.opened_at is not None:
                rec["event_opened"] = f"{pair.pair_id}#{event_no}"
            if u.closed is not None:
                rec["event_closed"] = f"{pair.pair_id}#{event_no}"
                event_no += 1
            records.append(rec)
    aio.write_ndjson(args.out, records)
    print(f"streamed {len(records)} updates -> {args.out}")


def cmd_report(args):
    with np.load(args.timeline) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, pair_id in enumerate(meta["pairs"]):
            timeline = {k: data[f"{i}_{k}"] for k in
                        ("timestamp", "up_speed", "down_speed", "score",
                         "uncertainty", "event_flag")}
            aio.write_plot_data_csv(out_dir / f"plot_data_{pair_id}.csv", timeline)
    print(f"wrote plot data for {len(meta['pairs'])} pairs -> {args.out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aidflow",
                                     description="loop-detector incident detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="corpus directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="corpus CSVs -> slices file + quality report")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="slices .npz path")
    p.add_argument("--report", required=True, help="preprocessing report path")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("label", help="slices -> label matrix + probabilistic labels")
    _add_config_args(p)
    p.add_argument("--slices", required=True)
    p.add_argument("--out", required=True, help="labels CSV path")
    p.add_argument("--report", required=True, help="LF stats report path")
    p.add_argument("--model-out", help="label model JSON (default: alongside labels)")
    p.set_defaults(func=cmd_label)

    for name, fn in (("train", cmd_train), ("ensemble", cmd_ensemble)):
        p = sub.add_parser(name, help=f"{name} on labeled slices")
        _add_config_args(p)
        p.add_argument("--slices", required=True)
        p.add_argument("--labels", required=True)
        p.add_argument("--label-model", required=True, help="label model JSON from `label`")
        p.add_argument("--out", required=True)
        p.add_argument("--on", choices=("weak", "reported"), default="weak",
                       help="training label source")
        if name == "train":
            p.add_argument("--search", type=int, default=0, metavar="BUDGET",
                           help="random-search trials before the final fit")
            p.add_argument("--history", help="training history CSV path")
        else:
            p.add_argument("--seeds", type=int, default=0,
                           help="override ensemble.n_seeds")
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="metrics report + DR/FAR match report")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--slices", required=True)
    p.add_argument("--model")
    p.add_argument("--ensemble")
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-events", required=True)
    p.add_argument("--out-timeline")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stream", help="replay the test period through the online detector")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--slices", required=True, help="slices file (for references)")
    p.add_argument("--model")
    p.add_argument("--ensemble")
    p.add_argument("--out", required=True, help="NDJSON stream log")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("report", help="evaluation timeline -> plot-data CSV exports")
    p.add_argument("--timeline", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
