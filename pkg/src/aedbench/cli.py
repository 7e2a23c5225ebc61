"""Command line entry point: ``aedbench <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audio_io import DEFAULT_BACKGROUND, DEFAULT_CLASSES, DEFAULT_SECONDS, SynthClass, synth_dataset
from .features import VARIANTS, clip_features
from .gmm import load_gmm, train_gmm
from .kernels import KINDS
from .mfcc import MfccConfig
from .pipeline import (CACHE_ENV, ExperimentCache, ExperimentConfig, dump_bundle, load_manifest,
                       run_experiment, sweep, write_report, write_table_csv)
from .svm import C_GRID, GAMMA_GRID, CvGrid

log = logging.getLogger("aedbench")

KERNEL_ALIASES = {"lk": "linear", "rk": "rbf", "ck": "expchi2",
                  "linear": "linear", "rbf": "rbf", "expchi2": "expchi2"}


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _kernel(v: str) -> str:
    try:
        return KERNEL_ALIASES[v.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown kernel {v!r}") from None


def _floats(v: str) -> tuple:
    return tuple(float(eval_pow(x)) for x in v.split(",") if x.strip())


def eval_pow(x: str) -> float:
    """Accept plain numbers or ``2^k``."""
    x = x.strip()
    if "^" in x:
        b, e = x.split("^", 1)
        return float(b) ** float(e)
    return float(x)


def _manifest_args(p):
    p.add_argument("manifest", help="manifest CSV (generic) or dataset metadata file")
    p.add_argument("--kind", default="generic", choices=("generic", "urbansound8k", "esc50"))
    p.add_argument("--audio-root", default=None)
    p.add_argument("--fold-map", default=None, help="esc50: CSV filename,fold")


def _config_args(p):
    p.add_argument("--config", default=None, help="key = value file supplying any of these flags")
    p.add_argument("--variant", default="alpha", choices=VARIANTS)
    p.add_argument("--kernel", default="expchi2", type=_kernel)
    p.add_argument("--components", "-M", type=int, default=32)
    p.add_argument("--relevance", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir", default=None, help=f"defaults to ${CACHE_ENV}")
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--window-ms", type=float, default=30.0)
    p.add_argument("--hop-ms", type=float, default=15.0)
    p.add_argument("--n-coeffs", type=int, default=20)
    p.add_argument("--n-mels", type=int, default=40)
    p.add_argument("--fft-size", type=int, default=2048)
    p.add_argument("--fmin", type=float, default=0.0)
    p.add_argument("--fmax", type=float, default=22050.0)
    p.add_argument("--gmm-max-iter", type=int, default=100)
    p.add_argument("--gmm-tol", type=float, default=1e-5)
    p.add_argument("--var-floor-frac", type=float, default=1e-3)
    p.add_argument("--c-grid", type=_floats, default=C_GRID, help="comma list, 2^k allowed")
    p.add_argument("--gamma-grid", type=_floats, default=GAMMA_GRID)
    p.add_argument("--inner-folds", type=int, default=3)
    p.add_argument("--svm-tol", type=float, default=1e-3)
    p.add_argument("--sigma-as-variance", action="store_true",
                   help="second block of beta_sigma features holds variances, not std devs")
    p.add_argument("--standardize-beta", action="store_true",
                   help="z-score supervectors with training-fold statistics before the SVM")


def mfcc_config(a) -> MfccConfig:
    return MfccConfig(a.window_ms, a.hop_ms, a.n_coeffs, a.n_mels, a.fft_size, a.fmin, a.fmax)


def experiment_config(a) -> ExperimentConfig:
    return ExperimentConfig(
        variant=a.variant, kernel=a.kernel, n_components=a.components, relevance=a.relevance,
        mfcc=mfcc_config(a), gmm_max_iter=a.gmm_max_iter, gmm_tol=a.gmm_tol,
        var_floor_frac=a.var_floor_frac,
        grid=CvGrid(a.c_grid, a.gamma_grid, a.inner_folds), svm_tol=a.svm_tol,
        sigma_as_std=not a.sigma_as_variance,
        standardize_beta=a.standardize_beta, seed=a.seed, cache_dir=a.cache_dir, n_jobs=a.n_jobs)


def _load(a):
    return load_manifest(a.manifest, a.kind, a.audio_root, a.fold_map)


def cmd_synth(a):
    classes = DEFAULT_CLASSES
    if a.classes:
        with open(a.classes) as f:
            classes = [SynthClass(**c) for c in json.load(f)]
    path = synth_dataset(a.out_dir, classes, a.clips_per_class, a.seconds, a.seed,
                         background=a.background)
    print(path)


def cmd_extract(a):
    m = _load(a)
    cache = ExperimentCache(mfcc_config(a), a.cache_dir, a.n_jobs)
    cache.frames.prefetch(m.rows)
    n = sum(cache.frames.get(r).shape[0] for r in m.rows)
    print(f"{len(m)} clips, {n} frames")
    if a.gmm:
        if not a.out:
            raise SystemExit("--gmm needs --out for the feature file")
        g = load_gmm(a.gmm)
        feats = np.stack([clip_features(g, cache.frames.get(r), [a.variant], a.relevance,
                                        not a.sigma_as_variance)[a.variant] for r in m.rows])
        np.savez(a.out, clip_ids=np.array(m.clip_ids), features=feats,
                 variant=np.array(a.variant), relevance=np.array(a.relevance))
        print(f"features {feats.shape} -> {a.out}")


def cmd_train_gmm(a):
    m = _load(a)
    cfg = experiment_config(a)
    rows = [r for r in m.rows if a.test_fold is None or r.fold != a.test_fold]
    cache = ExperimentCache(cfg.mfcc, cfg.cache_dir, cfg.n_jobs)
    cache.frames.prefetch(rows)
    frames = np.concatenate([cache.frames.get(r) for r in rows])
    trace = []
    g = train_gmm(frames, cfg.gmm_config(a.test_fold or 0), trace=trace)
    g.save(a.out)
    print(f"M={g.n_components} D={g.dim} frames={len(frames)} iterations={len(trace)} "
          f"loglik={trace[-1]:.4f} -> {a.out}")


def _print_summary(b):
    s = b["summary"]
    print(f"MAP {s['map']:.4f}  MAUC {s['mauc']:.4f}  ({s['n_events']} events, {s['n_clips']} clips)")


def cmd_run(a):
    m = _load(a)
    cfg = experiment_config(a)
    b = run_experiment(m, cfg)
    dump_bundle(b, a.out)
    for ev, v in sorted(b["per_event"].items()):
        print(f"{ev:24s} AP {v['ap']:.4f}  AUC {v['auc']:.4f}")
    _print_summary(b)


def cmd_sweep(a):
    m = _load(a)
    base = experiment_config(a)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = sweep(m, base, a.variants, a.kernels, a.Ms)
    dump_bundle(b, out / "sweep.json")
    write_table_csv(b["tables"], "map", out / "map_table.csv")
    write_table_csv(b["tables"], "mauc", out / "mauc_table.csv")
    print((out / "map_table.csv").read_text(), end="")


def cmd_report(a):
    with open(a.results) as f:
        b = json.load(f)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "cells" in b:
        write_table_csv(b["tables"], "map", out / "map_table.csv")
        write_table_csv(b["tables"], "mauc", out / "mauc_table.csv")
        for key, cell in b["cells"].items():
            write_report(cell, out / key.replace("/", "_"))
        print((out / "map_table.csv").read_text(), end="")
    else:
        write_report(b, out)
        _print_summary(b)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aedbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    s.add_argument("out_dir")
    s.add_argument("--clips-per-class", type=int, default=20)
    s.add_argument("--seconds", type=float, default=DEFAULT_SECONDS)
    s.add_argument("--background", type=float, default=DEFAULT_BACKGROUND,
                   help="RMS of the white noise bed shared by all clips (0 disables)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", default=None, help="JSON list of class definitions")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("extract", help="fill the MFCC cache; optionally write clip features")
    _manifest_args(s)
    _config_args(s)
    s.add_argument("--gmm", default=None, help="background model file for feature output")
    s.add_argument("--out", default=None, help="feature .npz")
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("train-gmm", help="train a background GMM on manifest clips")
    _manifest_args(s)
    _config_args(s)
    s.add_argument("--test-fold", type=int, default=None, help="exclude this fold from training")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_gmm)

    s = sub.add_parser("run", help="one 10-fold experiment")
    _manifest_args(s)
    _config_args(s)
    s.add_argument("--out", required=True, help="results bundle JSON")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="variant x kernel x M table")
    _manifest_args(s)
    _config_args(s)
    s.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    s.add_argument("--kernels", nargs="+", type=_kernel, default=list(KINDS))
    s.add_argument("--Ms", nargs="+", type=int, default=[32, 64, 128, 256])
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("report", help="tables, per-event metrics and DET point files")
    s.add_argument("results", help="bundle from run or sweep")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_report)
    return p


def parse_args(argv=None):
    p = build_parser()
    a = p.parse_args(argv)
    if getattr(a, "config", None):
        # config file values act as defaults; explicit flags still win
        sp = p._subparsers._group_actions[0].choices[a.cmd]
        conf = read_config_file(a.config)
        known = {act.dest: act for act in sp._actions}
        unknown = set(conf) - set(known)
        if unknown:
            raise SystemExit(f"{a.config}: unknown keys {sorted(unknown)}")
        defaults = {}
        for k, v in conf.items():
            act = known[k]
            if act.nargs in ("+", "*"):
                v = [act.type(x) if act.type else x for x in v.split()]
            elif act.const is True and act.nargs == 0:
                v = v.lower() in ("1", "true", "yes", "on")
            elif act.type is not None:
                v = act.type(v)
            defaults[k] = v
        sp.set_defaults(**defaults)
        a = p.parse_args(argv)
    return a


def main(argv=None):
    a = parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.fn(a)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"aedbench {a.cmd}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
