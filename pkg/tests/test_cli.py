"""End-to-end CLI tests via subprocess (exit codes are part of the contract)."""

import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tmfnet.data import read_gray_levels, read_image, write_image


def run_cli(*args, env_extra=None, check=False):
    import os

    env = os.environ.copy()
    env.pop("TMF_SEED", None)
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run(
        [sys.executable, "-m", "tmfnet.cli", *map(str, args)],
        capture_output=True, text=True, env=env,
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"cli failed ({proc.returncode}):\n{proc.stdout}\n{proc.stderr}")
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared dataset + short training run used by the I/O subcommand tests."""
    root = tmp_path_factory.mktemp("cli")
    run_cli("synth", "--n", 4, "--seed", 3, "--size", 64, "--out", root / "ds",
            check=True)
    run_cli("train", "--data", root / "ds", "--out", root / "run",
            "--iters", 4, "--batch", 2, "--crop", 48, "--seed", 1, check=True)
    return root


def test_usage_error_exits_2():
    assert run_cli("no-such-command").returncode == 2
    assert run_cli("gradcheck", "--scope", "definitely_not_an_op").returncode == 2
    assert run_cli("oracle", "--scope", "bogus").returncode == 2
    assert run_cli("export-kernels", "--weights", "x", "--image", "x",
                   "--trimap", "x", "--stage", "f9", "--out-dir", "x").returncode == 2


def test_gradcheck_single_scope():
    proc = run_cli("gradcheck", "--scope", "nbp", check=True)
    assert "nbp" in proc.stdout and "ok" in proc.stdout


def test_oracle_scopes():
    proc = run_cli("oracle", "--scope", "nbp", "--trials", 20, check=True)
    assert "max abs diff" in proc.stdout and "speedup" in proc.stdout
    proc = run_cli("oracle", "--scope", "fusion", "--trials", 20, check=True)
    assert proc.returncode == 0
    proc = run_cli("oracle", "--scope", "metrics", check=True)
    assert proc.returncode == 0


class TestSynth:
    def test_layout_and_manifest(self, workspace):
        ds = workspace / "ds"
        for sub in ("fg", "alpha", "bg", "composite", "trimap"):
            assert len(list((ds / sub).glob("*.png"))) == 4
        manifest = json.loads((ds / "manifest.json").read_text())
        assert len(manifest["entries"]) == 4

    def test_seeded_regeneration_identical(self, workspace, tmp_path):
        run_cli("synth", "--n", 2, "--seed", 3, "--size", 64,
                "--out", tmp_path / "a", check=True)
        run_cli("synth", "--n", 2, "--seed", 3, "--size", 64,
                "--out", tmp_path / "b", check=True)
        for name in ("fg/0000.png", "alpha/0001.png", "composite/0000.png"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_tmf_seed_env_overrides(self, tmp_path):
        run_cli("synth", "--n", 1, "--seed", 3, "--size", 48,
                "--out", tmp_path / "a", env_extra={"TMF_SEED": "77"}, check=True)
        run_cli("synth", "--n", 1, "--seed", 77, "--size", 48,
                "--out", tmp_path / "b", check=True)
        assert (tmp_path / "a" / "fg" / "0000.png").read_bytes() == \
               (tmp_path / "b" / "fg" / "0000.png").read_bytes()


class TestComposite:
    def test_alpha_one_copies_fg_bitwise(self, workspace, tmp_path):
        ds = workspace / "ds"
        ones = np.ones((64, 64), dtype=np.float32)
        write_image(tmp_path / "ones.png", ones, bits=8)
        run_cli("composite", "--fg", ds / "fg" / "0000.png",
                "--bg", ds / "bg" / "0000.png",
                "--alpha", tmp_path / "ones.png",
                "--out", tmp_path / "out.png", check=True)
        assert read_image(tmp_path / "out.png").tobytes() == \
               read_image(ds / "fg" / "0000.png").tobytes()

    def test_alpha_zero_copies_bg(self, workspace, tmp_path):
        ds = workspace / "ds"
        write_image(tmp_path / "zeros.png", np.zeros((64, 64), np.float32), bits=8)
        run_cli("composite", "--fg", ds / "fg" / "0000.png",
                "--bg", ds / "bg" / "0000.png",
                "--alpha", tmp_path / "zeros.png",
                "--out", tmp_path / "out.png", check=True)
        assert read_image(tmp_path / "out.png").tobytes() == \
               read_image(ds / "bg" / "0000.png").tobytes()

    def test_checkerboard_half_alpha_is_rounded_midpoint(self, tmp_path):
        fg = np.ones((3, 8, 8), np.float32)
        bg = np.zeros((3, 8, 8), np.float32)
        alpha = np.indices((8, 8)).sum(axis=0) % 2 * 0.5
        write_image(tmp_path / "fg.png", fg)
        write_image(tmp_path / "bg.png", bg)
        write_image(tmp_path / "a.png", alpha.astype(np.float32), bits=8)
        run_cli("composite", "--fg", tmp_path / "fg.png", "--bg", tmp_path / "bg.png",
                "--alpha", tmp_path / "a.png", "--out", tmp_path / "out.png",
                check=True)
        out = read_image(tmp_path / "out.png")
        # alpha quantizes to 128/255; midpoint composite rounds to 128
        want = np.where(alpha[None] > 0, 128.0 / 255.0, 0.0)
        assert np.allclose(out, want, atol=1e-6)


def test_trimap_command_writes_three_levels(workspace, tmp_path):
    ds = workspace / "ds"
    run_cli("trimap", "--alpha", ds / "alpha" / "0000.png", "--k-dilate", 7,
            "--k-erode", 7, "--out", tmp_path / "t.png", check=True)
    levels = np.unique(read_gray_levels(tmp_path / "t.png"))
    assert set(levels.tolist()) <= {0, 128, 255}
    assert 128 in levels


class TestTrain:
    def test_run_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "loss_log.csv").exists()
        assert (run / "config.json").exists()
        lines = (run / "loss_log.csv").read_text().strip().splitlines()
        assert lines[0] == "iter,L_alpha,L_c,L_lap,L_total"
        assert len(lines) == 5

    def test_zero_iterations_checkpoint_equals_init(self, workspace, tmp_path):
        from tmfnet.model import build_network, read_weight_file, ArchConfig

        run_cli("train", "--data", workspace / "ds", "--out", tmp_path / "r0",
                "--iters", 0, "--seed", 5, check=True)
        cfg, _, blobs = read_weight_file(tmp_path / "r0" / "checkpoint_0000000.tmfw")
        net = build_network(ArchConfig.from_dict(cfg.to_dict()), seed=5)
        for name, p in net.named_parameters():
            assert np.array_equal(blobs[name], p.data), name

    def test_identical_seeds_identical_logs(self, workspace, tmp_path):
        for tag in ("a", "b"):
            run_cli("train", "--data", workspace / "ds", "--out", tmp_path / tag,
                    "--iters", 3, "--batch", 2, "--crop", 48, "--seed", 9,
                    check=True)
        assert (tmp_path / "a" / "loss_log.csv").read_text() == \
               (tmp_path / "b" / "loss_log.csv").read_text()

    def test_missing_dataset_fails_cleanly(self, tmp_path):
        proc = run_cli("train", "--data", tmp_path / "nope", "--out", tmp_path / "r")
        assert proc.returncode == 1
        assert "not found" in proc.stderr


class TestInfer:
    def test_output_has_input_dimensions(self, workspace, tmp_path):
        ds = workspace / "ds"
        weights = workspace / "run" / "checkpoint_0000004.tmfw"
        run_cli("infer", "--weights", weights,
                "--image", ds / "composite" / "0000.png",
                "--trimap", ds / "trimap" / "0000.png",
                "--out", tmp_path / "alpha.png", check=True)
        pred = read_image(tmp_path / "alpha.png")
        assert pred.shape == (64, 64)

    def test_non_multiple_of_16_padded_and_restored(self, workspace, tmp_path):
        ds = workspace / "ds"
        img = read_image(ds / "composite" / "0000.png")[:, :50, :60]
        tri = read_gray_levels(ds / "trimap" / "0000.png")[:50, :60]
        write_image(tmp_path / "img.png", img)
        write_image(tmp_path / "tri.png", tri.astype(np.float32) / 255.0, bits=8)
        run_cli("infer", "--weights", workspace / "run" / "checkpoint_0000004.tmfw",
                "--image", tmp_path / "img.png", "--trimap", tmp_path / "tri.png",
                "--out", tmp_path / "alpha.png", check=True)
        assert read_image(tmp_path / "alpha.png").shape == (50, 60)

    def test_bitwise_stable_output(self, workspace, tmp_path):
        ds = workspace / "ds"
        weights = workspace / "run" / "checkpoint_0000004.tmfw"
        for tag in ("a.png", "b.png"):
            run_cli("infer", "--weights", weights,
                    "--image", ds / "composite" / "0001.png",
                    "--trimap", ds / "trimap" / "0001.png",
                    "--out", tmp_path / tag, check=True)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


class TestEval:
    def test_perfect_predictions_give_zero(self, workspace, tmp_path):
        ds = workspace / "ds"
        proc = run_cli("eval", "--pred-dir", ds / "alpha", "--gt-dir", ds / "alpha",
                       "--trimap-dir", ds / "trimap",
                       "--out", tmp_path / "m.json", check=True)
        doc = json.loads((tmp_path / "m.json").read_text())
        agg = doc["aggregate"]
        assert all(v == 0.0 for v in agg.values())
        assert len(doc["per_image"]) == 4
        assert {"image_id", "sad", "mse", "grad", "conn"} <= set(doc["per_image"][0])

    def test_missing_file_recorded_and_exit_1(self, workspace, tmp_path):
        ds = workspace / "ds"
        pred_dir = tmp_path / "pred"
        shutil.copytree(ds / "alpha", pred_dir)
        (pred_dir / "0002.png").unlink()
        proc = run_cli("eval", "--pred-dir", pred_dir, "--gt-dir", ds / "alpha",
                       "--trimap-dir", ds / "trimap")
        assert proc.returncode == 1
        doc = json.loads(proc.stdout)
        assert len(doc["errors"]) == 1
        assert len(doc["per_image"]) == 3


class TestCount:
    def test_parity_and_totals(self, tmp_path):
        proc = run_cli("count", "--preset", "toy-ours", "--height", 256,
                       "--width", 256, "--out", tmp_path / "c.json", check=True)
        doc = json.loads((tmp_path / "c.json").read_text())
        assert doc["context_param_parity"]["equal"] is True
        for key in ("configured", "baseline_twin"):
            rows = doc[key]["rows"]
            assert doc[key]["total_params"] == sum(r["params"] for r in rows)
            assert doc[key]["total_macs"] == sum(r["macs"] for r in rows)
        assert doc["flops_ratio"] < 1.0


class TestExportKernels:
    def test_writes_groups_times_nine_maps(self, workspace, tmp_path):
        ds = workspace / "ds"
        from tmfnet.model import load_network
        from tmfnet.blocks import GlfFusion

        weights = workspace / "run" / "checkpoint_0000004.tmfw"
        net = load_network(weights)
        groups = net.stages[0].groups
        run_cli("export-kernels", "--weights", weights,
                "--image", ds / "composite" / "0000.png",
                "--trimap", ds / "trimap" / "0000.png",
                "--stage", "f1", "--out-dir", tmp_path / "maps", check=True)
        assert len(list((tmp_path / "maps").glob("*.png"))) == groups * 9

    def test_trained_maps_differ_from_initial(self, workspace, tmp_path):
        ds = workspace / "ds"
        for tag, weights in (("init", workspace / "run" / "checkpoint_0000000.tmfw"),
                             ("trained", workspace / "run" / "checkpoint_0000004.tmfw")):
            run_cli("export-kernels", "--weights", weights,
                    "--image", ds / "composite" / "0000.png",
                    "--trimap", ds / "trimap" / "0000.png",
                    "--stage", "f2", "--out-dir", tmp_path / tag, check=True)
        def digest(d):
            return [hashlib.sha256(p.read_bytes()).hexdigest()
                    for p in sorted(Path(d).glob("*.png"))]
        assert digest(tmp_path / "init") != digest(tmp_path / "trained")
