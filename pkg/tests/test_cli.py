import csv
import filecmp
import os
import shutil
import subprocess
import sys

import pytest

from airm.cli import main
from airm.trainer import load_checkpoint

TINY = ["total_iters = 2", "decay_iters = ", "batch_size = 1", "n_scenes = 2", "scene_size = 32x32",
        "crop = 32x32", "aee_dims = 8,16", "feat_dim = 8", "hidden = 16", "n_layers = 3",
        "hyper_width = 8", "max_pairs = 128", "R = 2"]


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text("# tiny model\n" + "\n".join(TINY) + "\n")
    return str(p)


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(
        tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


class TestGenData:
    def test_zero_scenes(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--n", "0"]) == 0
        for split in ("train", "test"):
            assert os.listdir(tmp_path / "d" / split) == ["manifest.tsv"]
        assert (tmp_path / "d" / "gen-data.cfg").exists()

    def test_twice_identical(self, tmp_path):
        args = ["gen-data", "--n", "3", "--seed", "1", "--size", "32x32"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
        assert tree_equal(tmp_path / "a", tmp_path / "b")

    def test_too_small(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--size", "8x8"]) == 2
        assert "minimum" in capsys.readouterr().err

    def test_unknown_category(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--categories", "disk,blob"]) == 2
        assert "blob" in capsys.readouterr().err


class TestTrain:
    def test_zero_iterations(self, tmp_path, config):
        out = tmp_path / "m.ckpt"
        assert main(["train", "--config", config, "--out", str(out), "--set", "total_iters=0"]) == 0
        assert load_checkpoint(out).iteration == 0
        echoed = (tmp_path / "m.ckpt.config.txt").read_text()
        assert "total_iters = 0" in echoed and "lr = 0.001" in echoed

    def test_log_and_seed(self, tmp_path, config):
        out = tmp_path / "m.ckpt"
        assert main(["train", "--config", config, "--out", str(out), "--seed", "7"]) == 0
        assert load_checkpoint(out).config["seed"] == 7
        rows = list(csv.reader(open(str(out) + ".log.csv")))
        assert rows[0] == ["iter", "loss_total", "loss_airmf", "loss_aff", "lr"] and len(rows) == 3

    def test_from_dataset(self, tmp_path, config):
        main(["gen-data", "--out", str(tmp_path / "d"), "--n", "2", "--size", "32x32"])
        assert main(["train", "--config", config, "--out", str(tmp_path / "m.ckpt"),
                     "--data", str(tmp_path / "d")]) == 0

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_key(self, tmp_path, config):
        assert main(["train", "--config", config, "--out", str(tmp_path / "m"),
                     "--set", "nonsense=1"]) == 2

    def test_nan_exit_code(self, tmp_path, config, monkeypatch):
        import airm.trainer as trainer_mod
        real = trainer_mod.compute_losses

        def poisoned(*a, **kw):
            losses, out = real(*a, **kw)
            losses["total"] = losses["total"] * float("nan")
            return losses, out
        monkeypatch.setattr(trainer_mod, "compute_losses", poisoned)
        assert main(["train", "--config", config, "--out", str(tmp_path / "m.ckpt")]) == 3
        assert (tmp_path / "nan_dump.json").exists()


class TestRefineEval:
    @pytest.fixture
    def setup(self, tmp_path, config):
        main(["gen-data", "--out", str(tmp_path / "d"), "--n", "2", "--size", "32x32"])
        main(["train", "--config", config, "--out", str(tmp_path / "m.ckpt")])
        return tmp_path

    def test_refine_single_ratio(self, setup):
        t = setup
        assert main(["refine", "--ckpt", str(t / "m.ckpt"), "--manifest",
                     str(t / "d" / "test" / "manifest.tsv"), "--out", str(t / "o"),
                     "--ratios", "1"]) == 0
        assert (t / "o" / "scene_0000" / "coarse.png").exists()
        assert "ratios = 1.0" in (t / "o" / "refine.cfg").read_text()
        assert (t / "o" / "aggregate.csv").exists()

    def test_refine_missing_file(self, setup):
        t = setup
        assert main(["refine", "--ckpt", str(t / "nope.ckpt"), "--manifest",
                     str(t / "d" / "test" / "manifest.tsv"), "--out", str(t / "o")]) == 2

    def test_refine_bad_ratios(self, setup):
        t = setup
        assert main(["refine", "--ckpt", str(t / "m.ckpt"), "--manifest",
                     str(t / "d" / "test" / "manifest.tsv"), "--out", str(t / "o"),
                     "--ratios", "0.5,0.25"]) == 2

    def test_eval_identical_dirs(self, setup):
        t = setup
        flat = t / "masks"
        flat.mkdir()
        for k in range(2):
            shutil.copy(t / "d" / "test" / f"scene_{k:04d}" / "gt.png", flat / f"m{k}.png")
        assert main(["eval", "--pred", str(flat), "--gt", str(flat), "--report", str(t / "r.csv")]) == 0
        rows = list(csv.DictReader(open(t / "r.csv")))
        assert len(rows) == 3 and all(float(r["iou"]) == 1.0 and float(r["mba"]) == 1.0 for r in rows)

    def test_eval_dataset_layout_uses_gt_png(self, setup):
        t = setup
        gt = str(t / "d" / "test")
        assert main(["eval", "--pred", gt, "--gt", gt, "--report", str(t / "r.csv")]) == 0
        rows = {r["name"]: r for r in csv.DictReader(open(t / "r.csv"))}
        # coarse.png and gt.png of each scene are both scored against gt.png
        assert float(rows["mean"]["iou"]) < 1.0

    def test_eval_refined_against_dataset(self, setup):
        t = setup
        main(["refine", "--ckpt", str(t / "m.ckpt"), "--manifest",
              str(t / "d" / "test" / "manifest.tsv"), "--out", str(t / "o"), "--ratios", "1"])
        assert main(["eval", "--pred", str(t / "o"), "--gt", str(t / "d" / "test"),
                     "--report", str(t / "r.jsonl")]) == 0
        assert len((t / "r.jsonl").read_text().splitlines()) >= 2

    def test_refine_and_eval_agree(self, setup):
        t = setup
        main(["refine", "--ckpt", str(t / "m.ckpt"), "--manifest",
              str(t / "d" / "test" / "manifest.tsv"), "--out", str(t / "o"), "--ratios", "1"])
        main(["eval", "--pred", str(t / "o"), "--gt", str(t / "d" / "test"), "--report", str(t / "r.csv")])
        mine = {r["name"]: r for r in csv.DictReader(open(t / "o" / "aggregate.csv"))}
        theirs = {r["name"]: r for r in csv.DictReader(open(t / "r.csv"))}
        assert mine.keys() == theirs.keys()
        for name in mine:
            assert mine[name]["iou"] == theirs[name]["iou"] and mine[name]["mba"] == theirs[name]["mba"]

    def test_eval_missing_dir(self, tmp_path):
        assert main(["eval", "--pred", str(tmp_path / "x"), "--gt", str(tmp_path),
                     "--report", str(tmp_path / "r.csv")]) == 2


class TestAblate:
    def test_radius_two_rows_then_cache_hit(self, tmp_path, config):
        args = ["ablate", "--study", "radius", "--config", config, "--values", "1,3",
                "--cache", str(tmp_path / "cache")]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "radius.csv").read_text()
        assert len(a.splitlines()) == 3
        assert a == (tmp_path / "b" / "radius.csv").read_text()
        assert (tmp_path / "a" / "radius.config.txt").exists()

    def test_unknown_study(self, tmp_path, capsys):
        assert main(["ablate", "--study", "colour", "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "rf" in err and "embed" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "airm", "gen-data", "--out", str(tmp_path),
                           "--size", "4x4"], capture_output=True, text=True)
    assert proc.returncode == 2 and "minimum" in proc.stderr
