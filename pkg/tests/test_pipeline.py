import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from aedbench import cli
from aedbench.audio_io import synth_dataset
from aedbench.pipeline import (TABLE_COLUMNS, ExperimentConfig, Manifest, ManifestError,
                               ManifestRow, dump_bundle, load_manifest, run_experiment, sweep,
                               sweep_cells, write_report)
from aedbench.svm import CvGrid

SMALL = CvGrid(C=(1.0, 4.0), gamma=(0.5,))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    return synth_dataset(d, n_clips_per_class=10, clip_seconds=0.2, seed=1)


def small_cfg(**kw):
    base = dict(variant="alpha", kernel="expchi2", n_components=4, grid=SMALL, gmm_max_iter=20)
    base.update(kw)
    return ExperimentConfig(**base)


def write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


class TestManifest:
    def test_generic(self, corpus):
        m = load_manifest(corpus)
        assert len(m) == 30 and m.events == ["chirp", "noise", "tone"]
        assert m.folds == list(range(1, 11))
        assert all(r.path.is_absolute() or r.path.exists() for r in m.rows)
        assert m.rows[0].path == corpus.parent / "audio" / "tone_0000.wav"
        m.check()

    def test_urbansound8k(self, tmp_path):
        meta = tmp_path / "UrbanSound8K" / "metadata" / "UrbanSound8K.csv"
        write_csv(meta, ["slice_file_name", "fsID", "start", "end", "salience", "fold", "classID", "class"],
                  [["100032-3-0-0.wav", 100032, 0.0, 0.3, 1, 5, 3, "dog_bark"],
                   ["100263-2-0-117.wav", 100263, 58.5, 62.5, 1, 10, 2, "children_playing"]])
        m = load_manifest(meta, "urbansound8k")
        assert m.clip_ids == ["100032-3-0-0", "100263-2-0-117"]
        assert m.rows[0].path == tmp_path / "UrbanSound8K" / "audio" / "fold5" / "100032-3-0-0.wav"
        assert m.rows[1].fold == 10 and m.rows[1].label == "children_playing"

    def test_esc50(self, tmp_path):
        meta = tmp_path / "ESC-50" / "meta" / "esc50.csv"
        write_csv(meta, ["filename", "fold", "target", "category", "esc10", "src_file", "take"],
                  [["1-100032-A-0.wav", 1, 0, "dog", True, 100032, "A"],
                   ["1-115545-A-48.wav", 1, 48, "fireworks", False, 115545, "A"]])
        fm = tmp_path / "folds.csv"
        write_csv(fm, ["filename", "fold"], [["1-100032-A-0.wav", 3], ["1-115545-A-48.wav", 9]])
        m = load_manifest(meta, "esc50", fold_map=fm)
        assert [r.fold for r in m.rows] == [3, 9]
        assert m.category_map() == {"dog": "animals", "fireworks": "exterior_urban"}
        with pytest.raises(ManifestError):
            load_manifest(meta, "esc50")
        write_csv(fm, ["filename", "fold"], [["1-100032-A-0.wav", 3]])
        with pytest.raises(ManifestError):
            load_manifest(meta, "esc50", fold_map=fm)

    @pytest.mark.parametrize("rows,header", [
        ([["a", "a.wav", "x", "11"]], ["clip_id", "path", "label", "fold"]),
        ([["a", "a.wav", "x", "one"]], ["clip_id", "path", "label", "fold"]),
        ([["a", "a.wav", "x", "1"], ["a", "b.wav", "x", "2"]], ["clip_id", "path", "label", "fold"]),
        ([["a", "a.wav", "1"]], ["clip_id", "path", "fold"]),
        ([], ["clip_id", "path", "label", "fold"]),
    ])
    def test_malformed(self, tmp_path, rows, header):
        write_csv(tmp_path / "m.csv", header, rows)
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.csv")

    def test_missing_and_unknown_kind(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "nope.csv")
        write_csv(tmp_path / "m.csv", ["clip_id", "path", "label", "fold"], [["a", "a.wav", "x", "1"]])
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.csv", "timit")

    def test_check_requires_all_folds(self):
        rows = [ManifestRow(f"c{i}", "x.wav", "a" if i % 2 else "b", i % 9 + 1) for i in range(30)]
        with pytest.raises(ManifestError):
            Manifest(rows).check()
        rows = [ManifestRow(f"c{i}", "x.wav", "a", i % 10 + 1) for i in range(20)]
        rows.append(ManifestRow("lonely", "x.wav", "b", 1))
        with pytest.raises(ManifestError):
            Manifest(rows).check()


class TestExperiment:
    def test_every_clip_scored_once(self, corpus):
        m = load_manifest(corpus)
        b = run_experiment(m, small_cfg())
        assert b["clip_ids"] == m.clip_ids
        for ev in m.events:
            s = np.array(b["scores"][ev])
            assert s.shape == (30,) and np.all(np.isfinite(s))
        assert set(b["per_event"]) == set(m.events)
        assert b["metadata"]["auc_axes"] == "linear"
        assert 0 <= b["summary"]["map"] <= 1 and 0 <= b["summary"]["mauc"] <= 1

    def test_test_fold_never_used_for_training(self, corpus):
        m = load_manifest(corpus)
        fold_of = {r.clip_id: r.fold for r in m.rows}
        seen = []

        def observer(stage, test_fold, ids):
            seen.append(stage)
            assert all(fold_of[c] != test_fold for c in ids), stage
            assert len(ids) == sum(1 for f in fold_of.values() if f != test_fold)

        run_experiment(m, small_cfg(variant="beta_s", kernel="linear", standardize_beta=True), observer=observer)
        assert seen.count("gmm") == 10
        assert seen.count("cv") == 30 and seen.count("standardize") == 30

    def test_deterministic_and_thread_independent(self, corpus, tmp_path):
        m = load_manifest(corpus)
        cfg = small_cfg(variant="beta_m", kernel="rbf")
        dump_bundle(run_experiment(m, cfg), tmp_path / "a.json")
        dump_bundle(run_experiment(m, replace(cfg, n_jobs=3)), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_cache_does_not_change_results(self, corpus, tmp_path):
        m = load_manifest(corpus)
        cfg = small_cfg()
        dump_bundle(run_experiment(m, cfg), tmp_path / "plain.json")
        cached = replace(cfg, cache_dir=str(tmp_path / "cache"))
        dump_bundle(run_experiment(m, cached), tmp_path / "cold.json")
        assert any((tmp_path / "cache").rglob("*.npz"))
        dump_bundle(run_experiment(m, cached), tmp_path / "warm.json")
        ref = (tmp_path / "plain.json").read_bytes()
        assert (tmp_path / "cold.json").read_bytes() == ref
        assert (tmp_path / "warm.json").read_bytes() == ref

    def test_report_files(self, corpus, tmp_path):
        b = run_experiment(load_manifest(corpus), small_cfg())
        write_report(b, tmp_path / "rep")
        rows = list(csv.DictReader(open(tmp_path / "rep" / "per_event.csv")))
        assert [r["event"] for r in rows] == ["chirp", "noise", "tone"]
        assert json.loads((tmp_path / "rep" / "summary.json").read_text())["summary"] == b["summary"]
        assert sorted(p.name for p in (tmp_path / "rep" / "det").iterdir()) == ["chirp.csv", "noise.csv",
                                                                               "tone.csv"]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(variant="beta_s", kernel="expchi2")
        with pytest.raises(ValueError):
            ExperimentConfig(relevance=0)
        assert ExperimentConfig().hash() == ExperimentConfig(cache_dir="/x", n_jobs=4).hash()
        assert ExperimentConfig().hash() != ExperimentConfig(seed=1).hash()


class TestSweep:
    def test_cells(self):
        assert len(sweep_cells(["alpha"], ["linear", "rbf", "expchi2"], [32, 64])) == 6
        full = sweep_cells(["alpha", "beta_m", "beta_s", "beta_sigma", "beta_s_sigma"],
                           ["linear", "rbf", "expchi2"], [32])
        assert sorted((v, k) for v, k, _ in full) == sorted(TABLE_COLUMNS)

    def test_small_sweep_table(self, corpus):
        m = load_manifest(corpus)
        out = sweep(m, small_cfg(), ["beta_m", "alpha"], ["expchi2", "linear"], (2, 3))
        t = out["tables"]
        assert t["columns"] == ["alpha/LK", "alpha/CK", "beta_m/LK"]
        assert t["rows"] == [2, 3]
        assert len(out["cells"]) == 6
        assert all(v is not None for row in t["map"] for v in row)


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        assert cli.main(["synth", str(tmp_path / "c"), "--clips-per-class", "10", "--seconds", "0.2"]) == 0
        man = tmp_path / "c" / "manifest.csv"
        conf = tmp_path / "run.conf"
        conf.write_text("# small run\ncomponents = 4\nc-grid = 1,2^2\ngamma-grid = 0.5\ngmm-max-iter = 20\n"
                        "kernel = ck\n")
        assert cli.main(["run", str(man), "--config", str(conf), "--out", str(tmp_path / "r.json")]) == 0
        b = json.loads((tmp_path / "r.json").read_text())
        assert b["metadata"]["config"]["n_components"] == 4
        assert b["metadata"]["config"]["grid"]["C"] == [1.0, 4.0]
        assert "MAP" in capsys.readouterr().out
        assert cli.main(["report", str(tmp_path / "r.json"), "--out-dir", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "per_event.csv").exists()

    def test_flag_overrides_config(self, tmp_path):
        conf = tmp_path / "c.conf"
        conf.write_text("components = 4\nvariant = beta_s\n")
        a = cli.parse_args(["run", "m.csv", "--config", str(conf), "-M", "8", "--kernel", "lk", "--out", "x"])
        cfg = cli.experiment_config(a)
        assert cfg.n_components == 8 and cfg.variant == "beta_s" and cfg.kernel == "linear"

    def test_gmm_and_features(self, corpus, tmp_path):
        g = tmp_path / "g.txt"
        assert cli.main(["train-gmm", str(corpus), "-M", "3", "--test-fold", "1", "--out", str(g)]) == 0
        out = tmp_path / "f.npz"
        assert cli.main(["extract", str(corpus), "--gmm", str(g), "--variant", "beta_s_sigma",
                         "--out", str(out)]) == 0
        with np.load(out) as z:
            assert z["features"].shape == (30, 2 * 3 * 20)

    def test_error_exit_code(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.json")]) == 1
        assert "error" in capsys.readouterr().err
