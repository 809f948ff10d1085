"""Command-line pipeline: synth, detect, features, train, predict, eval, report.

All stages read one YAML config whose defaults encode the standard setup
(300 ms detector windows, eta=2, 40th-percentile threshold refreshed every
0.5 s, 200 ms MDWT window, the dense hyperparameter grid, stride factors
20/x10/x40, and the majority-vote sweep), so running with no config file
reproduces the reference configuration; every constant can be overridden.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np
import yaml

from . import evaluate, ingest, krls, synth
from .evaluate import EvalReport, GridSpec
from .features import (MdwtConfig, build_dataset, export_dataset_csv,
                       load_dataset, read_fixation_features, save_dataset)
from .fixation import DetectorParams, detect_fixations
from .kernels import gram

log = logging.getLogger("mmgrasp")


@dataclass(frozen=True)
class StrideSpec:
    test: int = 20           # prediction stride, samples
    train_factor: int = 10   # extra subsampling for training rows
    hyper_factor: int = 40   # extra subsampling for the grid search

    def __post_init__(self):
        if min(self.test, self.train_factor, self.hyper_factor) < 1:
            raise ValueError("strides must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    rate: float = 2000.0
    notch_hz: float | None = None    # powerline notch, e.g. 50
    notch_q: float = 30.0
    cue: str = "emg+cnn"
    k_sweep: tuple = evaluate.DEFAULT_K_SWEEP
    phase_bins: int = 50
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    mdwt: MdwtConfig = field(default_factory=MdwtConfig)
    strides: StrideSpec = field(default_factory=StrideSpec)
    grid: GridSpec = field(default_factory=GridSpec)


def _to_plain(obj):
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = _to_plain(asdict(cfg))
    # grid weights serialize as the EMG weight list; the pair is implied
    d["grid"]["weights_emg"] = [we for we, _ in cfg.grid.weight_pairs]
    del d["grid"]["weight_pairs"]
    return d


def _dataclass_from(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(d: dict) -> PipelineConfig:
    d = dict(d or {})
    grid_d = dict(d.pop("grid", {}))
    if "weights_emg" in grid_d:
        ws = grid_d.pop("weights_emg")
        grid_d["weight_pairs"] = tuple((float(w), 1.0 - float(w)) for w in ws)
    synth_d = dict(d.pop("synth", {}))
    if "object_sharing" in synth_d and synth_d["object_sharing"] is not None:
        synth_d["object_sharing"] = {
            int(k): tuple(v) for k, v in synth_d["object_sharing"].items()
        }
    sub = {
        "synth": _dataclass_from(synth.SynthConfig, synth_d),
        "detector": _dataclass_from(DetectorParams, dict(d.pop("detector", {}))),
        "mdwt": _dataclass_from(MdwtConfig, dict(d.pop("mdwt", {}))),
        "strides": _dataclass_from(StrideSpec, dict(d.pop("strides", {}))),
        "grid": _dataclass_from(GridSpec, grid_d),
    }
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "k_sweep" in d:
        d["k_sweep"] = tuple(d["k_sweep"])
    return PipelineConfig(**d, **sub)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f))


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_recording(args, cfg):
    rec = ingest.load_recording_dir(args.indir, cfg.rate)
    if cfg.notch_hz:
        log.info("notch filter at %g Hz (Q=%g)", cfg.notch_hz, cfg.notch_q)
        rec.emg[:] = ingest.notch_filter(rec.emg, cfg.notch_hz, cfg.rate, cfg.notch_q)
    return rec


def cmd_synth(args):
    cfg = load_config(args.config)
    scfg = cfg.synth
    if args.seed is not None:
        scfg = dc_replace(scfg, seed=args.seed)
    log.info("generating synthetic recording (seed=%d)", scfg.seed)
    emg, gaze, spans, truth, bank = synth.generate_streams(scfg)
    synth.write_synth_dir(args.out, emg, gaze, spans, truth, bank)
    log.info("wrote %s (%.1f s of data, %d trials)", args.out,
             emg.timestamps[-1] if emg.timestamps.size else 0.0,
             truth.times.shape[0])
    return 0


def cmd_detect(args):
    cfg = load_config(args.config)
    rec = _load_recording(args, cfg)
    events = detect_fixations(rec, cfg.detector)
    with open(args.out, "w") as f:
        f.write("t,x,y,volatility\n")
        for e in events:
            f.write(f"{e.time / cfg.rate!r},{e.centroid[0]!r},"
                    f"{e.centroid[1]!r},{e.volatility!r}\n")
    log.info("detected %d fixations -> %s", len(events), args.out)
    return 0


def _read_fixations_csv(path, rate):
    import pandas as pd

    df = pd.read_csv(path)
    times = np.round(df["t"].to_numpy(dtype=np.float64) * rate).astype(np.int64)
    pts = df[["x", "y"]].to_numpy(dtype=np.float64)
    return times, pts


def cmd_features(args):
    cfg = load_config(args.config)
    rec = _load_recording(args, cfg)
    fix_times, fix_pts = _read_fixations_csv(args.fixations, cfg.rate)
    if args.fixation_features:
        ids, feats = read_fixation_features(args.fixation_features)
        if feats.shape[0] != fix_times.shape[0]:
            raise ValueError("fixation-feature rows do not match the fixation list")
        feats = feats.astype(np.float64)
    elif args.objects:
        bank = synth.load_object_bank(args.objects)
        _, feats = synth.fixation_features(bank, fix_pts, cfg.seed)
    else:
        raise ValueError("provide --objects or --fixation-features")
    ds = build_dataset(rec, fix_times, feats, cfg.mdwt, cfg.strides.test)
    save_dataset(ds, args.out)
    if args.export_csv:
        export_dataset_csv(ds, args.export_csv)
    log.info("built %d samples (stride %d) -> %s", len(ds), cfg.strides.test, args.out)
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    cue = args.cue or cfg.cue
    ds = load_dataset(args.features)
    n_classes = int(ds.classes.max()) + 1
    train_ds = ds.subsample(cfg.strides.train_factor)
    hyper_ds = ds.subsample(cfg.strides.hyper_factor)
    kcfg, lam = evaluate.grid_search(hyper_ds, cfg.grid.for_cue(cue), n_classes)
    log.info("selected w_emg=%.1f w_cnn=%.1f gamma_chi2=%g gamma_rbf=%g lambda=%g",
             kcfg.w_emg, kcfg.w_cnn, kcfg.gamma_chi2, kcfg.gamma_rbf, lam)
    G = gram(train_ds, train_ds, kcfg)
    model = krls.train(G, train_ds.labels, lam, n_classes)
    model.cfg = kcfg
    model.train_emg = train_ds.emg
    model.train_vis = train_ds.vis
    model.train_hash = krls.dataset_hash(train_ds.emg, train_ds.vis)
    krls.save_model(model, args.out)
    log.info("trained on %d samples -> %s", len(train_ds), args.out)
    return 0


def cmd_predict(args):
    cfg = load_config(args.config)
    model = krls.load_model(args.model)
    ds = load_dataset(args.features)

    class _TrainView:
        emg = model.train_emg
        vis = model.train_vis

    preds = np.empty(len(ds), dtype=np.int64)
    for a in range(0, len(ds), evaluate.PREDICT_BLOCK):
        blk = ds.select(np.arange(a, min(a + evaluate.PREDICT_BLOCK, len(ds))))
        G = gram(blk, _TrainView, model.cfg)
        _, p = krls.predict(model, G)
        preds[a:a + len(blk)] = p
    with open(args.out, "w") as f:
        f.write("t,truth,prediction\n")
        for i in range(len(ds)):
            f.write(f"{ds.times[i] / cfg.rate!r},{ds.labels[i]},{preds[i]}\n")
    log.info("accuracy %.4f -> %s", evaluate.accuracy(preds, ds.labels), args.out)
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    cue = args.cue or cfg.cue
    ds = load_dataset(args.features)
    report = evaluate.run_experiment(
        ds, cfg.grid, cue,
        train_factor=cfg.strides.train_factor,
        hyper_factor=cfg.strides.hyper_factor,
        k_sweep=cfg.k_sweep, phase_bins=cfg.phase_bins,
        rate=cfg.rate / cfg.strides.test, log=log.info,
    )
    report.save_json(args.out)
    if args.tables:
        from .report import write_tables
        write_tables([report], args.tables)
    log.info("cue=%s accuracy=%.4f -> %s", cue, report.accuracy, args.out)
    return 0


def cmd_report(args):
    from .report import render_report

    reports = [EvalReport.load_json(p) for p in args.inputs]
    render_report(reports, args.out, dpi=args.dpi)
    log.info("rendered %d report(s) -> %s", len(reports), args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="mmgrasp",
        description="multimodal grasp classification pipeline (sEMG + gaze)",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    p.add_argument("--jobs", type=int, default=0,
                   help="worker threads for numeric kernels (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic recording")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("detect", help="detect gaze fixations")
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("features", help="build multicue feature dataset")
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--fixations", required=True)
    s.add_argument("--objects")
    s.add_argument("--fixation-features", dest="fixation_features")
    s.add_argument("--config")
    s.add_argument("--export-csv", dest="export_csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="grid-search and fit a classifier")
    s.add_argument("--features", required=True)
    s.add_argument("--config")
    s.add_argument("--cue", choices=["emg", "cnn", "emg+cnn"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict with a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="repetition-wise cross-validated evaluation")
    s.add_argument("--features", required=True)
    s.add_argument("--config")
    s.add_argument("--cue", choices=["emg", "cnn", "emg+cnn", "baseline"])
    s.add_argument("--tables")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render figures and tables from reports")
    s.add_argument("--in", dest="inputs", action="append", required=True)
    s.add_argument("--dpi", type=int, default=150)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    level = logging.DEBUG if args.verbose else (
        logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(
        stream=sys.stderr, level=level,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.jobs and args.jobs > 0:
        import numba

        numba.set_num_threads(max(1, args.jobs))
    try:
        return args.func(args)
    except (ValueError, KeyError) as e:
        log.error("%s", e)
        return 1
    except OSError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
