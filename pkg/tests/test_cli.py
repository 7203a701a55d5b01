import json
import os
import subprocess
import sys

import pytest

TINY = """
[run]
seed = 3
[data]
points = 48
train_size = 2
test_size = 2
[kernel]
knn = 5
[network]
widths = 4, 6
descriptor_dim = 8
[train]
epochs = 1
"""


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "cylkern.cli", *args],
                          capture_output=True, text=True, cwd=cwd)


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


class TestExitCodes:
    def test_success_is_zero(self, tmp_path, tiny_config):
        r = run_cli("gen-data", "--config", tiny_config,
                    "--out", str(tmp_path / "data"))
        assert r.returncode == 0, r.stderr

    def test_config_error_is_one(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[kernel]\nknn = ten\n")
        r = run_cli("extract", "--config", str(bad), "--out", str(tmp_path))
        assert r.returncode == 1
        assert "config error" in r.stderr

    def test_missing_config_file_is_one(self, tmp_path):
        r = run_cli("extract", "--config", str(tmp_path / "none.cfg"),
                    "--out", str(tmp_path))
        assert r.returncode == 1

    def test_runtime_error_is_two(self, tmp_path, tiny_config):
        r = run_cli("eval-reg", "--config", tiny_config,
                    "--out", str(tmp_path / "o"),
                    "--checkpoint", str(tmp_path / "missing.txt"))
        assert r.returncode == 2


class TestGenData:
    def test_writes_xyz_files(self, tmp_path, tiny_config):
        out = tmp_path / "data"
        r = run_cli("gen-data", "--config", tiny_config, "--out", str(out))
        assert r.returncode == 0
        files = sorted(os.listdir(out))
        assert len(files) == 4  # 2 train + 2 test
        assert files[0].endswith(".xyz")


class TestExtract:
    def test_extract_then_read(self, tmp_path, tiny_config):
        from cylkern.features import read_grid_record

        out = tmp_path / "grids"
        r = run_cli("extract", "--config", tiny_config, "--out", str(out))
        assert r.returncode == 0, r.stderr
        with open(out / "grid_000.bin", "rb") as fh:
            grid = read_grid_record(fh)
        assert grid.shape == (48, 3, 6, 4)


class TestTrainEval:
    def test_train_then_eval_round_trip(self, tmp_path, tiny_config):
        out = tmp_path / "run"
        r = run_cli("train-reg", "--config", tiny_config, "--out", str(out))
        assert r.returncode == 0, r.stderr
        assert (out / "checkpoint.txt").exists()
        r2 = run_cli("eval-reg", "--config", tiny_config,
                     "--out", str(tmp_path / "eval"),
                     "--checkpoint", str(out / "checkpoint.txt"))
        assert r2.returncode == 0, r2.stderr
        data = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert set(data["metrics"]["registration"]) == {
            "R-MSE", "R-RMSE", "R-MAE", "T-MSE", "T-RMSE", "T-MAE"}

    def test_seed_override_changes_results(self, tmp_path, tiny_config):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run_cli("train-reg", "--config", tiny_config, "--out", str(a),
                       "--seed", "1").returncode == 0
        assert run_cli("train-reg", "--config", tiny_config, "--out", str(b),
                       "--seed", "2").returncode == 0
        ra = json.loads((a / "report.json").read_text())
        rb = json.loads((b / "report.json").read_text())
        assert ra["metrics"] != rb["metrics"]

    def test_determinism_across_processes(self, tmp_path, tiny_config):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run_cli("train-reg", "--config", tiny_config,
                       "--out", str(a)).returncode == 0
        assert run_cli("train-reg", "--config", tiny_config,
                       "--out", str(b)).returncode == 0
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        assert (a / "checkpoint.txt").read_bytes() == \
            (b / "checkpoint.txt").read_bytes()

    def test_train_cls_and_eval_cls(self, tmp_path):
        cfg = tmp_path / "cls.cfg"
        cfg.write_text(TINY + "\n[data]\ntrain_families = sphere, cube\n"
                              "train_size = 2\ntest_size = 2\npoints = 48\n")
        out = tmp_path / "cls"
        r = run_cli("train-cls", "--config", str(cfg), "--out", str(out))
        assert r.returncode == 0, r.stderr
        r2 = run_cli("eval-cls", "--config", str(cfg),
                     "--out", str(tmp_path / "clseval"),
                     "--checkpoint", str(out / "checkpoint.txt"))
        assert r2.returncode == 0, r2.stderr


class TestBenchAndReport:
    def test_bench_invariance_csv(self, tmp_path, tiny_config):
        out = tmp_path / "bench"
        r = run_cli("bench-invariance", "--config", tiny_config,
                    "--out", str(out))
        assert r.returncode == 0, r.stderr
        lines = (out / "bench.csv").read_text().splitlines()
        assert lines[0] == "perturbation,max_dev,rms_dev"
        assert any(line.startswith("sign_flip") for line in lines)

    def test_report_rerender(self, tmp_path, tiny_config):
        out = tmp_path / "run"
        assert run_cli("train-reg", "--config", tiny_config,
                       "--out", str(out)).returncode == 0
        (out / "summary.txt").unlink()
        r = run_cli("report", "--out", str(out))
        assert r.returncode == 0, r.stderr
        assert (out / "summary.txt").exists()
