import json
import os

import numpy as np
import pytest

from cylkern.config import ExperimentConfig, load_config, parse_config
from cylkern.errors import ConfigError, NumericalError
from cylkern.harness import (RunReport, bench_invariance, emit_report,
                             extract_run, make_pairs, pool_map, read_report,
                             split_clouds, stream_seed, train_classification,
                             train_registration)
from cylkern.pointcloud import rotation_angle_deg
from cylkern.registration import METRIC_COLUMNS


def tiny_cfg(**over):
    cfg = ExperimentConfig()
    cfg.points = 48
    cfg.train_size = 2
    cfg.test_size = 2
    cfg.epochs = 1
    cfg.widths = (4, 6)
    cfg.descriptor_dim = 8
    cfg.knn = 5
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


class TestConfig:
    def test_empty_file_gives_defaults(self):
        cfg = parse_config("")
        assert cfg == ExperimentConfig()

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError) as e:
            parse_config("[run]\nseed = 1\n\n[kernel]\nbogus = 3\n")
        assert "line 5" in str(e.value) and "bogus" in str(e.value)

    def test_type_error_names_key_and_line(self):
        with pytest.raises(ConfigError) as e:
            parse_config("[kernel]\nknn = ten\n")
        assert "knn" in str(e.value) and "line 2" in str(e.value)

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as e:
            parse_config("[nope]\n")
        assert "line 1" in str(e.value)

    def test_conv_toggle(self):
        cfg = parse_config("[network]\nconv = channelwise\n")
        assert cfg.conv == "channelwise"
        with pytest.raises(ConfigError):
            parse_config("[network]\nconv = fancy\n")

    def test_every_ablation_toggle_reachable(self):
        text = """
[kernel]
knn = 2
scales = 0.1, 0.2
[network]
conv = channelwise
global_context = false
scale_adapt = true
"""
        cfg = parse_config(text)
        assert cfg.knn == 2 and cfg.conv == "channelwise"
        assert cfg.global_context is False and cfg.scale_adapt is True
        echo = cfg.echo()
        for key in ("knn", "conv", "global_context", "scale_adapt"):
            assert key in echo

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "none.cfg"))

    def test_referenced_files_must_exist(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(f"[data]\nfiles = {tmp_path}/missing_*.xyz\n")

    def test_scales_required_for_adaptation(self):
        with pytest.raises(ConfigError):
            parse_config("[network]\nscale_adapt = true\n")

    def test_comments_and_blanks(self):
        cfg = parse_config("# hello\n\n[run]\n# inner\nseed = 9\n")
        assert cfg.seed == 9


class TestMakePairs:
    def test_zero_rotation_gives_identity(self):
        cfg = tiny_cfg(max_rotation=0.0, with_translation=False)
        for pair in make_pairs(cfg, "test"):
            np.testing.assert_array_equal(pair.transform.R, np.eye(3))

    def test_rotation_cap_holds_exhaustively(self):
        cfg = tiny_cfg(train_size=12, test_size=12, max_rotation=45.0)
        for split in ("train", "test"):
            for pair in make_pairs(cfg, split):
                assert rotation_angle_deg(pair.transform.R) <= 45.0 + 1e-9

    def test_splits_use_different_seeds(self):
        cfg = tiny_cfg()
        a = make_pairs(cfg, "train")[0]
        b = make_pairs(cfg, "test")[0]
        assert not np.array_equal(a.source.points, b.source.points)
        assert not np.array_equal(a.transform.R, b.transform.R)

    def test_target_is_transformed_source(self):
        cfg = tiny_cfg()
        p = make_pairs(cfg, "train")[0]
        expect = p.source.points @ p.transform.R.T + p.transform.t
        np.testing.assert_allclose(p.target.points, expect, atol=1e-12)

    def test_family_overlap_rejected(self):
        cfg = tiny_cfg(train_families=("sphere", "cube"),
                       test_families=("cube",))
        with pytest.raises(ConfigError):
            make_pairs(cfg, "train")

    def test_deterministic(self):
        cfg = tiny_cfg()
        a = make_pairs(cfg, "train")
        b = make_pairs(cfg, "train")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.source.points, y.source.points)
            np.testing.assert_array_equal(x.transform.R, y.transform.R)


class TestSplitClouds:
    def test_estimated_normals_path(self):
        cfg = tiny_cfg(normals="estimated")
        clouds = split_clouds(cfg, "test")
        assert all(c.normals is not None for c, _ in clouds)

    def test_file_dataset(self, tmp_path):
        from cylkern.formats import write_xyz
        from cylkern.pointcloud import gen_synthetic

        for i in range(4):
            with open(tmp_path / f"c{i}.xyz", "w") as fh:
                fh.write(write_xyz(gen_synthetic("sphere", 64, 0.0, i)))
        cfg = tiny_cfg(files=tuple(sorted(str(p) for p in tmp_path.glob("*.xyz"))))
        train = split_clouds(cfg, "train")
        test = split_clouds(cfg, "test")
        assert len(train) == 2 and len(test) == 2
        names = {n for _, n in train} | {n for _, n in test}
        assert names == {"c0.xyz", "c1.xyz", "c2.xyz", "c3.xyz"}

    def test_off_file_dataset(self, tmp_path):
        off = "OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n"
        for i in range(2):
            (tmp_path / f"m{i}.off").write_text(off)
        cfg = tiny_cfg(files=tuple(sorted(str(p) for p in tmp_path.glob("*.off"))),
                       normals="estimated")
        clouds = split_clouds(cfg, "train")
        assert len(clouds[0][0]) == cfg.points


class TestTrainRegistration:
    def test_zero_epochs_reports_random_init(self, tmp_path):
        cfg = tiny_cfg(epochs=0)
        rep = train_registration(cfg, str(tmp_path / "run"))
        assert rep.epoch_losses == []
        assert set(rep.metrics["registration"]) == set(METRIC_COLUMNS)

    def test_determinism_bit_identical(self, tmp_path):
        cfg = tiny_cfg(epochs=2)
        r1 = train_registration(cfg, str(tmp_path / "a"))
        r2 = train_registration(cfg, str(tmp_path / "b"))
        assert r1.canonical() == r2.canonical()
        ja = (tmp_path / "a" / "report.json").read_bytes()
        jb = (tmp_path / "b" / "report.json").read_bytes()
        assert ja == jb
        ca = (tmp_path / "a" / "checkpoint.txt").read_bytes()
        cb = (tmp_path / "b" / "checkpoint.txt").read_bytes()
        assert ca == cb

    def test_nan_aborts_with_diagnostic(self, tmp_path):
        cfg = tiny_cfg(epochs=3, lr=1e18, clip=1e30)
        out = str(tmp_path / "nan")
        with pytest.raises(NumericalError):
            train_registration(cfg, out)
        assert os.path.exists(os.path.join(out, "nan_diagnostic.json"))

    def test_report_artifacts(self, tmp_path):
        cfg = tiny_cfg()
        out = tmp_path / "run"
        train_registration(cfg, str(out))
        data = read_report(out / "report.json")
        assert data["task"] == "register"
        assert "icp" in data["extra"]
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == "method," + ",".join(METRIC_COLUMNS)
        assert (out / "timing.json").exists()
        assert (out / "checkpoint.txt").exists()


class TestTrainClassification:
    def test_small_run_and_accuracy_keys(self, tmp_path):
        cfg = tiny_cfg(train_families=("sphere", "cube"), epochs=2,
                       train_size=3, test_size=3)
        rep = train_classification(cfg, str(tmp_path / "cls"))
        acc = rep.metrics["accuracy"]
        assert set(acc) == {"aligned", "rotated"}
        assert 0.0 <= acc["aligned"] <= 1.0

    def test_single_class_rejected(self, tmp_path):
        cfg = tiny_cfg(train_families=("sphere",))
        with pytest.raises(ConfigError):
            train_classification(cfg, str(tmp_path / "cls"))


class TestBench:
    def test_rows_and_bounds(self, tmp_path):
        cfg = tiny_cfg()
        rows = bench_invariance(cfg, str(tmp_path / "bench"))
        table = {r["perturbation"]: r for r in rows}
        assert table["sign_flip"]["max_dev"] <= 1e-9
        assert table["permutation"]["max_dev"] == 0.0
        assert table["noise_0"]["max_dev"] == 0.0
        assert table["rotation"]["max_dev"] <= 1e-5
        assert table["scale_x2_matched"]["max_dev"] <= 1e-9
        assert "density_x2" in table and "density_half" in table
        csv = (tmp_path / "bench" / "bench.csv").read_text().splitlines()
        assert csv[0] == "perturbation,max_dev,rms_dev"


class TestReports:
    def test_json_round_trip(self, tmp_path):
        rep = RunReport(task="register", config={"seed": 1},
                        epoch_losses=[1.0, 0.5],
                        metrics={"registration": dict(zip(METRIC_COLUMNS,
                                                          range(6)))},
                        checkpoint_hash="abc", extra={"icp": {}})
        emit_report(rep, str(tmp_path))
        data = read_report(tmp_path / "report.json")
        assert data == rep.canonical()

    def test_wall_clock_not_in_canonical_report(self, tmp_path):
        rep = RunReport(task="bench", config={}, wall_clock=12.5)
        emit_report(rep, str(tmp_path))
        raw = (tmp_path / "report.json").read_text()
        assert "wall_clock" not in raw
        timing = json.loads((tmp_path / "timing.json").read_text())
        assert timing["wall_clock_sec"] == 12.5


class TestExtract:
    def test_records_written_and_readable(self, tmp_path):
        from cylkern.features import read_grid_record

        cfg = tiny_cfg()
        rep = extract_run(cfg, str(tmp_path))
        assert len(rep.extra["records"]) == cfg.test_size
        with open(tmp_path / "grid_000.bin", "rb") as fh:
            grid = read_grid_record(fh)
        assert grid.shape == (cfg.points, 3, cfg.kernels_per_ring, 4)


class TestPoolMap:
    def test_matches_sequential(self, monkeypatch):
        items = list(range(7))
        seq = pool_map(lambda x: x * x, items)
        monkeypatch.setenv("CYLKERN_WORKERS", "2")
        par = pool_map(_square, items)
        assert seq == par == [x * x for x in items]


def _square(x):
    return x * x


def test_stream_seeds_are_distinct():
    seeds = {stream_seed(0, s, i) for s in ("train_data", "test_data", "params")
             for i in range(5)}
    assert len(seeds) == 15
