"""Manifests, 10-fold experiment orchestration, caching and table sweeps."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import AudioError, load_clip
from .evaluation import (ESC50_EVENT_TO_CATEGORY, ScoredSet, aggregate, average_precision,
                         det_auc, det_curve)
from .features import BETA_VARIANTS, DEFAULT_RELEVANCE, VARIANTS, clip_features
from .gmm import DiagGmm, GmmTrainConfig, load_gmm, train_gmm
from .kernels import KINDS, SHORT_NAMES
from .mfcc import MfccConfig, cache_path, extract_mfcc, load_cached, pad_to_window, save_cached
from .svm import CvGrid, train_event_detector

log = logging.getLogger(__name__)

FOLDS = tuple(range(1, 11))
CACHE_ENV = "AEDBENCH_CACHE"

# column order of the published result tables
TABLE_COLUMNS = (
    ("alpha", "linear"), ("alpha", "rbf"), ("alpha", "expchi2"),
    ("beta_m", "linear"), ("beta_m", "rbf"),
    ("beta_s", "linear"), ("beta_s", "rbf"),
    ("beta_sigma", "linear"), ("beta_sigma", "rbf"),
    ("beta_s_sigma", "linear"), ("beta_s_sigma", "rbf"),
)


class ManifestError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestRow:
    clip_id: str
    path: Path
    label: str
    fold: int
    category: str | None = None


@dataclass
class Manifest:
    rows: list[ManifestRow]

    def __len__(self):
        return len(self.rows)

    @property
    def events(self) -> list[str]:
        return sorted({r.label for r in self.rows})

    @property
    def folds(self) -> list[int]:
        return sorted({r.fold for r in self.rows})

    @property
    def clip_ids(self) -> list[str]:
        return [r.clip_id for r in self.rows]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows])

    def category_map(self) -> dict[str, str] | None:
        cats = {}
        for r in self.rows:
            if not r.category:
                return None
            cats[r.label] = r.category
        return cats

    def check(self):
        """Invariants needed for a full 10-fold rotation."""
        ids = self.clip_ids
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate clip ids")
        missing = set(FOLDS) - set(self.folds)
        if missing:
            raise ManifestError(f"folds {sorted(missing)} hold no clips")
        for ev in self.events:
            nf = len({r.fold for r in self.rows if r.label == ev})
            if nf < 2:
                raise ManifestError(f"event {ev!r} occurs in fewer than 2 folds")


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _require(rows, cols, path):
    have = set(rows[0].keys()) if rows else set()
    miss = [c for c in cols if c not in have]
    if miss:
        raise ManifestError(f"{path}: missing columns {miss}")


def _fold(v, where) -> int:
    try:
        f = int(v)
    except (TypeError, ValueError):
        raise ManifestError(f"{where}: fold {v!r} is not an integer") from None
    if f not in FOLDS:
        raise ManifestError(f"{where}: fold {f} outside 1..10")
    return f


def load_manifest(path, kind: str = "generic", audio_root=None, fold_map=None) -> Manifest:
    """Read a clip manifest.

    Args:
        path: ``generic``: CSV ``clip_id,path,label,fold[,category]`` with
            paths relative to the manifest's directory. ``urbansound8k``:
            the dataset's ``metadata/UrbanSound8K.csv``. ``esc50``: the
            dataset's ``meta/esc50.csv``.
        audio_root: directory holding the audio (``urbansound8k``: the
            ``audio`` dir with ``foldN`` subdirs; ``esc50``: the ``audio``
            dir). Defaults to ``<path>/../../audio``.
        fold_map: ``esc50`` only, required. CSV ``filename,fold`` assigning
            each clip to one of the 10 folds.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"{path}: no such file")
    raw = _read_csv(path)
    if not raw:
        raise ManifestError(f"{path}: empty manifest")
    rows = []
    if kind == "generic":
        _require(raw, ("clip_id", "path", "label", "fold"), path)
        base = path.parent
        for i, r in enumerate(raw):
            p = Path(r["path"])
            rows.append(ManifestRow(r["clip_id"], p if p.is_absolute() else base / p, r["label"],
                                    _fold(r["fold"], f"{path}:{i + 2}"), r.get("category") or None))
    elif kind == "urbansound8k":
        _require(raw, ("slice_file_name", "fold", "class"), path)
        root = Path(audio_root) if audio_root else path.parent.parent / "audio"
        for i, r in enumerate(raw):
            f = _fold(r["fold"], f"{path}:{i + 2}")
            name = r["slice_file_name"]
            rows.append(ManifestRow(Path(name).stem, root / f"fold{f}" / name, r["class"], f))
    elif kind == "esc50":
        _require(raw, ("filename", "category"), path)
        if fold_map is None:
            raise ManifestError("esc50 manifests need a fold mapping file (filename,fold)")
        fm = _read_csv(fold_map)
        _require(fm, ("filename", "fold"), fold_map)
        folds = {r["filename"]: _fold(r["fold"], f"{fold_map}:{i + 2}") for i, r in enumerate(fm)}
        root = Path(audio_root) if audio_root else path.parent.parent / "audio"
        for r in raw:
            name = r["filename"]
            if name not in folds:
                raise ManifestError(f"{name} has no entry in {fold_map}")
            cat = ESC50_EVENT_TO_CATEGORY.get(r["category"])
            rows.append(ManifestRow(Path(name).stem, root / name, r["category"], folds[name], cat))
    else:
        raise ManifestError(f"unknown manifest kind {kind!r}")
    ids = [r.clip_id for r in rows]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ManifestError(f"{path}: duplicate clip id {dup!r}")
    return Manifest(rows)


def write_manifest(m: Manifest, path):
    path = Path(path)
    has_cat = any(r.category for r in m.rows)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["clip_id", "path", "label", "fold"] + (["category"] if has_cat else []))
        for r in m.rows:
            wr.writerow([r.clip_id, r.path.as_posix(), r.label, r.fold] + ([r.category or ""] if has_cat else []))


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    variant: str = "alpha"
    kernel: str = "expchi2"
    n_components: int = 32
    relevance: float = DEFAULT_RELEVANCE
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-5
    var_floor_frac: float = 1e-3
    kmeans_iter: int = 10
    grid: CvGrid = field(default_factory=CvGrid)
    svm_tol: float = 1e-3
    sigma_as_std: bool = True
    standardize_beta: bool = False
    seed: int = 0
    cache_dir: str | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown feature variant {self.variant!r}")
        if self.kernel not in KINDS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "expchi2" and self.variant != "alpha":
            raise ValueError("the exponential chi-square kernel needs nonnegative (alpha) features")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if not self.relevance > 0:
            raise ValueError("relevance factor must be positive")

    def gmm_config(self, rotation: int) -> GmmTrainConfig:
        return GmmTrainConfig(self.n_components, self.gmm_max_iter, self.gmm_tol,
                              self.var_floor_frac, self.kmeans_iter, seed=self.seed * 1000 + rotation)

    def to_dict(self) -> dict:
        """Everything that affects results (cache location and worker count excluded)."""
        d = asdict(self)
        d.pop("cache_dir")
        d.pop("n_jobs")
        d["grid"] = {"C": list(self.grid.C), "gamma": list(self.grid.gamma), "n_folds": self.grid.n_folds}
        return d

    def hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def resolve_cache_dir(cache_dir=None) -> Path | None:
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    return Path(cache_dir) if cache_dir else None


# ---------------------------------------------------------------------------
# per-clip frames and background models

class FrameStore:
    """MFCC matrices per clip, memoised in memory and optionally on disk."""

    def __init__(self, cfg: MfccConfig, cache_dir=None, n_jobs: int = 1):
        self.cfg = cfg
        self.cache_dir = resolve_cache_dir(cache_dir)
        self.n_jobs = n_jobs
        self._mem: dict[str, np.ndarray] = {}

    def _compute(self, row: ManifestRow) -> np.ndarray:
        if self.cache_dir is not None:
            p = cache_path(self.cache_dir, row.clip_id, self.cfg)
            m = load_cached(p, self.cfg)
            if m is not None:
                return m
        try:
            w = load_clip(row.path)
        except AudioError as e:
            raise ExperimentError(f"clip {row.clip_id}: {e}") from e
        m = extract_mfcc(pad_to_window(w.samples, self.cfg), self.cfg)
        if self.cache_dir is not None:
            save_cached(cache_path(self.cache_dir, row.clip_id, self.cfg), m, self.cfg)
        return m

    def prefetch(self, rows):
        todo = [r for r in rows if r.clip_id not in self._mem]
        if self.n_jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.n_jobs) as ex:
                mats = list(ex.map(self._compute, todo))
        else:
            mats = [self._compute(r) for r in todo]
        for r, m in zip(todo, mats):
            self._mem[r.clip_id] = m

    def get(self, row: ManifestRow) -> np.ndarray:
        if row.clip_id not in self._mem:
            self._mem[row.clip_id] = self._compute(row)
        return self._mem[row.clip_id]


class ExperimentCache:
    """State shared by experiments over one manifest: frames and background GMMs."""

    def __init__(self, mfcc_cfg: MfccConfig, cache_dir=None, n_jobs: int = 1):
        self.frames = FrameStore(mfcc_cfg, cache_dir, n_jobs)
        self.cache_dir = self.frames.cache_dir
        self._gmms: dict[str, DiagGmm] = {}

    def gmm(self, train_rows, cfg: GmmTrainConfig) -> DiagGmm:
        ids = "\n".join(r.clip_id for r in train_rows)
        key = hashlib.sha1(json.dumps(
            [asdict(cfg), self.frames.cfg.hash(), ids], sort_keys=True).encode()).hexdigest()[:20]
        if key in self._gmms:
            return self._gmms[key]
        path = self.cache_dir / "gmm" / f"{key}.txt" if self.cache_dir else None
        if path is not None and path.exists():
            g = load_gmm(path)
        else:
            frames = np.concatenate([self.frames.get(r) for r in train_rows])
            g = train_gmm(frames, cfg)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                g.save(tmp)
                os.replace(tmp, path)
                # keep the in-memory copy identical to what a later run would read back
                g = load_gmm(path)
        self._gmms[key] = g
        return g


# ---------------------------------------------------------------------------
# experiments

def _task_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def run_rotation(manifest: Manifest, test_fold: int, cfg: ExperimentConfig,
                 cache: ExperimentCache, observer=None) -> dict[str, np.ndarray]:
    """Train on the nine other folds and score every event on ``test_fold``.

    Returns:
        event -> scores of the test-fold clips (manifest order).
    """
    train = [r for r in manifest.rows if r.fold != test_fold]
    test = [r for r in manifest.rows if r.fold == test_fold]
    if observer:
        observer("gmm", test_fold, [r.clip_id for r in train])
    g = cache.gmm(train, cfg.gmm_config(test_fold))

    def feats(rows):
        return np.stack([clip_features(g, cache.frames.get(r), [cfg.variant], cfg.relevance,
                                       cfg.sigma_as_std)[cfg.variant] for r in rows])

    Xtr, Xte = feats(train), feats(test)
    ytr = np.array([r.label for r in train])
    train_ids = [r.clip_id for r in train]
    standardize = cfg.standardize_beta and cfg.variant in BETA_VARIANTS

    def one(ie):
        i, ev = ie
        if observer:
            observer("cv", test_fold, train_ids)
            if standardize:
                observer("standardize", test_fold, train_ids)
        try:
            model = train_event_detector(ev, Xtr, ytr, cfg.kernel, cfg.grid,
                                         seed=_task_seed(cfg.seed, test_fold, i),
                                         standardize=standardize, ids=train_ids, tol=cfg.svm_tol)
        except Exception as e:
            raise ExperimentError(f"fold {test_fold}, event {ev!r}: {e}") from e
        return model.decision_function(Xte)

    events = list(enumerate(manifest.events))
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(cfg.n_jobs) as ex:
            scores = list(ex.map(one, events))
    else:
        scores = [one(e) for e in events]
    return {ev: s for (_, ev), s in zip(events, scores)}


def metadata(cfg: ExperimentConfig) -> dict:
    return {
        "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
        "code_version": __version__, "auc_axes": "linear",
        "score_type": "svm_margin",
    }


def run_experiment(manifest: Manifest, cfg: ExperimentConfig, cache: ExperimentCache | None = None,
                   observer=None) -> dict:
    """Ten-fold rotation: every clip is scored once per event by a model that never saw its fold.

    ``observer(stage, test_fold, clip_ids)``, if given, is called with the
    clips feeding GMM training, CV selection and standardisation.

    Returns:
        results bundle (JSON-serialisable dict).
    """
    manifest.check()
    if cache is None:
        cache = ExperimentCache(cfg.mfcc, cfg.cache_dir, cfg.n_jobs)
    cache.frames.prefetch(manifest.rows)

    events = manifest.events
    pos = {r.clip_id: i for i, r in enumerate(manifest.rows)}
    scores = {ev: np.full(len(manifest), np.nan) for ev in events}
    for f in FOLDS:
        idx = [pos[r.clip_id] for r in manifest.rows if r.fold == f]
        got = run_rotation(manifest, f, cfg, cache, observer)
        for ev in events:
            scores[ev][idx] = got[ev]
    for ev in events:
        if np.any(np.isnan(scores[ev])):
            raise ExperimentError(f"event {ev!r}: some clips were never scored")
    return score_bundle(manifest, scores, metadata(cfg))


def score_bundle(manifest: Manifest, scores: dict, meta: dict) -> dict:
    """Metrics and scores for a set of per-event score vectors over all clips."""
    labels = manifest.labels
    per_event = {}
    for ev, s in scores.items():
        y = labels == ev
        per_event[ev] = {"ap": average_precision(s, y), "auc": det_auc(det_curve(s, y))}
    aps = {e: v["ap"] for e, v in per_event.items()}
    aucs = {e: v["auc"] for e, v in per_event.items()}
    bundle = {
        "metadata": meta,
        "summary": {"map": aggregate(aps)["all"], "mauc": aggregate(aucs)["all"],
                    "n_clips": len(manifest), "n_events": len(scores)},
        "per_event": per_event,
        "clip_ids": manifest.clip_ids,
        "labels": labels.tolist(),
        "scores": {ev: np.asarray(s).tolist() for ev, s in scores.items()},
    }
    cats = manifest.category_map()
    if cats:
        bundle["categories"] = {"map": aggregate(aps, cats), "mauc": aggregate(aucs, cats)}
    return bundle


def scored_set(bundle: dict, event: str) -> ScoredSet:
    labels = np.array(bundle["labels"]) == event
    return ScoredSet(bundle["clip_ids"], bundle["scores"][event], labels)


def dump_bundle(bundle: dict, path):
    with open(path, "w") as f:
        json.dump(bundle, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# sweeps

def sweep_cells(variants, kernels, Ms) -> list[tuple[str, str, int]]:
    """Cartesian product minus combinations a kernel cannot take (chi-square on supervectors)."""
    return [(v, k, M) for v, k, M in itertools.product(variants, kernels, Ms)
            if not (k == "expchi2" and v != "alpha")]


def sweep(manifest: Manifest, base: ExperimentConfig, variants=VARIANTS, kernels=KINDS,
          Ms=(32, 64, 128, 256)) -> dict:
    """Run every (variant, kernel, M) cell; tables have rows M and the published column order."""
    cache = ExperimentCache(base.mfcc, base.cache_dir, base.n_jobs)
    cells = {}
    for v, k, M in sweep_cells(variants, kernels, Ms):
        cfg = replace(base, variant=v, kernel=k, n_components=M)
        log.info("sweep cell %s/%s/M=%d", v, k, M)
        try:
            b = run_experiment(manifest, cfg, cache)
        except Exception as e:
            raise ExperimentError(f"cell ({v}, {SHORT_NAMES[k]}, M={M}): {e}") from e
        cells[cell_key(v, k, M)] = b
    return {"metadata": {"base_config": base.to_dict(), "code_version": __version__},
            "tables": tables(cells, Ms), "cells": cells}


def cell_key(variant, kernel, M) -> str:
    return f"{variant}/{SHORT_NAMES[kernel]}/{M}"


def tables(cells: dict, Ms) -> dict:
    cols = [(v, k) for v, k in TABLE_COLUMNS
            if any(cell_key(v, k, M) in cells for M in Ms)]
    out = {"columns": [f"{v}/{SHORT_NAMES[k]}" for v, k in cols], "rows": list(Ms)}
    for metric in ("map", "mauc"):
        out[metric] = [[cells[cell_key(v, k, M)]["summary"][metric] if cell_key(v, k, M) in cells else None
                        for v, k in cols] for M in Ms]
    return out


def write_table_csv(tbl: dict, metric: str, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["M"] + tbl["columns"])
        for M, row in zip(tbl["rows"], tbl[metric]):
            wr.writerow([M] + ["" if v is None else f"{v:.3f}" for v in row])


def write_report(bundle: dict, out_dir):
    """Per-event metric CSV, summary JSON and one DET point file per event."""
    out = Path(out_dir)
    (out / "det").mkdir(parents=True, exist_ok=True)
    with open(out / "per_event.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["event", "ap", "auc"])
        for ev in sorted(bundle["per_event"]):
            v = bundle["per_event"][ev]
            wr.writerow([ev, f"{v['ap']:.6f}", f"{v['auc']:.6f}"])
    summary = {"summary": bundle["summary"], "metadata": bundle["metadata"]}
    if "categories" in bundle:
        summary["categories"] = bundle["categories"]
    dump_bundle(summary, out / "summary.json")
    for ev in sorted(bundle["scores"]):
        s = scored_set(bundle, ev)
        det_curve(s.scores, s.labels).write_csv(out / "det" / f"{ev}.csv")
