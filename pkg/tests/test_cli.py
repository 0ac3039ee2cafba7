import csv
import json

import numpy as np
import pytest

from navlab import mapper
from navlab.cli import main
from navlab.nnet import ParamSet, load_manifest


def run(*argv):
    return main([str(a) for a in argv])


class TestGenWorlds:
    def test_writes_and_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("--seed", 3, "gen-worlds", "--n", 2, "--out", out,
                       "--size", 16, "--categories", 3) == 0
        files = sorted(p.name for p in a.glob("world_*.json"))
        assert files == ["world_00003.json", "world_00004.json"]
        for name in files:
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert json.loads((a / "run_config.json").read_text())["seed"] == 3

    def test_env_seed_overrides_flag(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NAVLAB_SEED", "9")
        out = tmp_path / "w"
        assert run("--seed", 3, "gen-worlds", "--n", 1, "--out", out,
                   "--size", 16, "--categories", 3) == 0
        assert (out / "world_00009.json").exists()


class TestErrors:
    def test_label_missing_dataset(self, tmp_path):
        assert run("label", "--dataset", tmp_path / "nope") == 2

    def test_train_stage2_without_checkpoint(self, tmp_path):
        assert run("train", "--stage", 2, "--dataset", tmp_path,
                   "--out-ckpt", tmp_path / "m.ckpt") == 2

    def test_eval_checkpoint_without_ckpt(self, tmp_path):
        assert run("eval", "--worlds", tmp_path, "--policy", "checkpoint",
                   "--report", tmp_path / "r.json") == 2

    def test_collect_bad_mix(self, tmp_path):
        (tmp_path / "w").mkdir()
        assert run("collect", "--worlds", tmp_path / "w", "--mix", "1:2",
                   "--out", tmp_path / "d") == 2


class TestRender:
    def test_world_to_png(self, tmp_path):
        out = tmp_path / "w"
        run("--seed", 1, "gen-worlds", "--n", 1, "--out", out, "--size", 16,
            "--categories", 3)
        png = tmp_path / "world.png"
        assert run("render", "--world", next(out.glob("world_*.json")),
                   "--out", png) == 0
        from PIL import Image
        img = Image.open(png)
        assert img.size == (16 * 8, 16 * 8)

    def test_map_to_png(self, tmp_path):
        smap = mapper.new_map(2, 9, 9)
        smap.channels[1, 4, 4] = True
        path = tmp_path / "m.muvm"
        path.write_bytes(mapper.map_to_bytes(smap))
        png = tmp_path / "m.png"
        assert run("render", "--map", path, "--out", png) == 0
        assert png.exists()

    def test_render_needs_input(self, tmp_path):
        assert run("render", "--out", tmp_path / "x.png") == 2


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """gen-worlds -> collect -> label once for the whole module."""
    root = tmp_path_factory.mktemp("cli")
    assert run("--seed", 0, "gen-worlds", "--n", 2, "--out", root / "worlds",
               "--size", 16, "--categories", 3) == 0
    assert run("--seed", 0, "collect", "--worlds", root / "worlds",
               "--records", 40, "--out", root / "data") == 0
    assert run("label", "--dataset", root / "data") == 0
    return root


class TestPipeline:
    def test_dataset_is_labeled(self, workdir):
        with open(workdir / "data" / "index.jsonl") as f:
            headers = [json.loads(line) for line in f]
        assert len(headers) >= 40
        assert all("rtg" in h for h in headers)

    def test_stage0_then_stage2_then_eval(self, workdir):
        ck0 = workdir / "ck" / "stage0.ckpt"
        assert run("--seed", 0, "train", "--stage", 0, "--categories", 3,
                   "--out-ckpt", ck0) == 0
        manifest = load_manifest(ck0)
        assert manifest["stages_done"] == [0]
        assert ParamSet.load(ck0)["obs_encoder"].frozen

        ck2 = workdir / "ck" / "stage2.ckpt"
        assert run("--seed", 0, "train", "--stage", 2, "--categories", 3,
                   "--dataset", workdir / "data", "--in-ckpt", ck0,
                   "--out-ckpt", ck2, "--epochs", 1, "--allow-skip") == 0
        assert load_manifest(ck2)["stages_done"] == [0, 2]
        with open(ck2.parent / "train_report_stage2.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["epoch", "bc_loss", "rtg_loss", "total", "grad_norm"]
        assert len(rows) == 2

        report = workdir / "eval" / "ckpt.json"
        assert run("--seed", 1, "eval", "--worlds", workdir / "worlds",
                   "--ckpt", ck2, "--categories", 3, "--goals", 2,
                   "--budget", 30, "--report", report) == 0
        metrics = json.loads(report.read_text())
        assert set(metrics) == {"sr", "spl", "n", "mean_steps"}
        assert metrics["n"] == 4
        with open(report.with_suffix(".csv")) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 5

    def test_stage_order_enforced(self, workdir):
        ck0 = workdir / "ck" / "stage0.ckpt"
        assert run("--seed", 0, "train", "--stage", 3, "--categories", 3,
                   "--dataset", workdir / "data", "--in-ckpt", ck0,
                   "--out-ckpt", workdir / "ck" / "bad.ckpt") == 2

    def test_random_eval(self, workdir):
        report = workdir / "eval" / "random.json"
        assert run("--seed", 2, "eval", "--worlds", workdir / "worlds",
                   "--policy", "random", "--categories", 3, "--goals", 2,
                   "--budget", 30, "--report", report) == 0
        a = json.loads(report.read_text())
        assert run("--seed", 2, "eval", "--worlds", workdir / "worlds",
                   "--policy", "random", "--categories", 3, "--goals", 2,
                   "--budget", 30, "--report", report) == 0
        assert json.loads(report.read_text()) == a


class TestGradcheckCommand:
    def test_smoke(self, capsys):
        assert run("--seed", 0, "gradcheck", "--samples", 3,
                   "--categories", 3) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
