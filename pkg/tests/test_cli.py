import csv
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from ilt.cli import bench_average, main
from ilt.config import load_config
from ilt.errors import ConfigError
from ilt.kernels import load_kernel_set
from ilt.objective import read_trace_csv
from ilt.raster import Polygon, PolygonLayout, load_png, write_layout

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
GOLDEN = Path(__file__).parent / "data" / "smoke_golden_trace.csv"


def write_ini(path: Path, sections: dict) -> Path:
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    path.write_text("\n".join(lines))
    return path


@pytest.fixture
def identity_case(tmp_path):
    """A 63 x 63 grid at 1 nm/px with full-window identity kernels."""
    assert main(["kernel-gen", "--kind", "identity", "--freq-dim", "63", "-o", str(tmp_path / "k")]) == 0
    write_layout(PolygonLayout([Polygon.rect(10, 12, 40, 50), Polygon.rect(45, 5, 58, 20)]), tmp_path / "clip.txt")
    ini = write_ini(tmp_path / "run.ini", {
        "run": {"inputs": "clip.txt", "target": "clip.txt", "output": "out"},
        "grid": {"width_px": 63, "height_px": 63, "nm_per_px": 1},
        "kernels": {"source": "files", "nominal": "k/nominal.iltk", "defocus": "k/defocus.iltk"},
    })
    return tmp_path, ini


@pytest.fixture
def smoke_dir(tmp_path):
    for name in ("smoke.ini", "square280.txt"):
        shutil.copy(CONFIGS / name, tmp_path / name)
    return tmp_path


class TestSimulate:
    def test_identity_kernel_prints_the_target(self, identity_case):
        root, ini = identity_case
        assert main(["simulate", "-c", str(ini)]) == 0
        report = json.loads((root / "out" / "clip" / "metrics.json").read_text())
        assert report["mse"] == 0 and report["pv"] == 0 and report["epe"] == 0
        target = load_png(root / "out" / "clip" / "resist_nominal.png", binary=True)
        assert target.count() == 30 * 38 + 13 * 15
        assert report["aerial_peak"] == pytest.approx(1.0, rel=1e-12)

    def test_deterministic(self, identity_case):
        root, ini = identity_case
        assert main(["simulate", "-c", str(ini), "-o", str(root / "a")]) == 0
        assert main(["simulate", "-c", str(ini), "-o", str(root / "b")]) == 0
        names = sorted(p.name for p in (root / "a" / "clip").iterdir())
        assert names == ["aerial.png", "metrics.json", "resist_inner.png", "resist_nominal.png", "resist_outer.png"]
        for name in names:
            assert (root / "a" / "clip" / name).read_bytes() == (root / "b" / "clip" / name).read_bytes()

    def test_missing_kernel_file(self, identity_case, capsys):
        root, ini = identity_case
        (root / "k" / "defocus.iltk").unlink()
        assert main(["simulate", "-c", str(ini)]) == 2
        assert "defocus.iltk" in capsys.readouterr().err
        assert not (root / "out").exists()  # validation happens before any work


class TestRetarget:
    def test_unit_discs_leave_no_diff(self, identity_case):
        root, ini = identity_case
        assert main(["retarget", "-c", str(ini), "--set", "opt.k_cvx=1", "--set", "opt.k_ccv=1"]) == 0
        assert load_png(root / "out" / "clip" / "diff.png", binary=True).count() == 0

    def test_rectangle_diff_near_corners(self, tmp_path):
        write_layout(PolygonLayout([Polygon.rect(20, 30, 90, 80)]), tmp_path / "rect.txt")
        ini = write_ini(tmp_path / "r.ini", {
            "run": {"inputs": "rect.txt", "output": "out"},
            "grid": {"width_px": 112, "height_px": 112},
            "kernels": {"source": "synthetic"},
            "opt": {"k_cvx": 9, "k_ccv": 9},
        })
        assert main(["retarget", "-c", str(ini)]) == 0
        diff = load_png(tmp_path / "out" / "rect" / "diff.png", binary=True).data
        assert diff.any()
        rows, cols = np.nonzero(diff)
        for r, c in zip(rows, cols):
            # Chebyshev distance from the pixel center to the nearest vertex
            d = min(max(abs(r + 0.5 - y), abs(c + 0.5 - x)) for y in (30, 80) for x in (20, 90))
            assert d <= 9


class TestOptimize:
    def test_smoke_run_matches_golden_trace(self, smoke_dir):
        assert main(["optimize", "-c", str(smoke_dir / "smoke.ini"), "-o", str(smoke_dir / "out")]) == 0
        case = smoke_dir / "out" / "square280"
        rows, golden = read_trace_csv(case / "trace.csv"), read_trace_csv(GOLDEN)
        assert len(rows) == len(golden) == 200
        for row, ref in zip(rows, golden):
            for key, value in ref.items():
                assert row[key] == pytest.approx(value, rel=1e-9, abs=0)
        report = json.loads((case / "metrics.json").read_text())
        assert report["mse"] <= 0.5 * report["initial_mse"]
        snaps = sorted(p.name for p in (case / "snapshots").iterdir())
        assert "design.png" in snaps and "epoch_0010_mask.png" in snaps and "epoch_0200_inner.png" in snaps
        assert len(snaps) == 1 + 4 * 20
        assert load_png(case / "mask.png", binary=True).shape == (64, 64)

    def test_repeat_run_is_identical(self, smoke_dir):
        args = ["optimize", "-c", str(smoke_dir / "smoke.ini"), "--set", "opt.T=30"]
        assert main(args + ["-o", str(smoke_dir / "a")]) == 0
        assert main(args + ["-o", str(smoke_dir / "b")]) == 0
        for name in ("trace.csv", "metrics.json", "mask.png"):
            a = (smoke_dir / "a" / "square280" / name).read_bytes()
            assert a == (smoke_dir / "b" / "square280" / name).read_bytes()

    def test_baseline_ablation(self, smoke_dir):
        assert main(["optimize", "-c", str(smoke_dir / "smoke.ini"), "-o", str(smoke_dir / "out"),
                     "--skip-cdr", "--skip-inloop-morph", "--set", "opt.T=40"]) == 0
        case = smoke_dir / "out" / "square280"
        design = load_png(case / "snapshots" / "design.png", binary=True)
        assert design.count() == 35 * 35  # raw square, no corner rounding
        assert len(read_trace_csv(case / "trace.csv")) == 40

    def test_divergence_exit_code(self, smoke_dir, capsys):
        out = smoke_dir / "out"
        code = main(["optimize", "-c", str(smoke_dir / "smoke.ini"), "-o", str(out),
                     "--set", "opt.lr=inf", "--set", "opt.T=5"])
        assert code == 3
        assert "diverged" in capsys.readouterr().err
        assert len(read_trace_csv(out / "square280" / "trace.csv")) == 1

    def test_bad_override(self, smoke_dir):
        assert main(["optimize", "-c", str(smoke_dir / "smoke.ini"), "--set", "opt.k_morph=4"]) == 2
        assert main(["optimize", "-c", str(smoke_dir / "smoke.ini"), "--set", "opt.nope=1"]) == 2
        assert main(["optimize", "-c", str(smoke_dir / "smoke.ini"), "--set", "badformat"]) == 2


class TestEvaluate:
    def test_needs_target(self, smoke_dir):
        assert main(["evaluate", "-c", str(smoke_dir / "smoke.ini")]) == 2

    def test_scores_mask(self, identity_case):
        root, ini = identity_case
        assert main(["evaluate", "-c", str(ini)]) == 0
        report = json.loads((root / "out" / "clip" / "metrics.json").read_text())
        assert report["mse"] == 0 and report["msa"] == 13 * 15 and report["msd"] > 0


class TestBench:
    def read(self, path):
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))

    def test_single_clip_average_equals_row(self, smoke_dir):
        out = smoke_dir / "bench"
        assert main(["bench", "-c", str(smoke_dir / "smoke.ini"), "-o", str(out), "--set", "opt.T=20"]) == 0
        rows = self.read(out / "bench.csv")
        assert [r["case"] for r in rows] == ["square280", "average"]
        for key in ("mse", "pv", "epe", "msa", "msd", "seconds", "peak_rss_mb"):
            assert float(rows[0][key]) == float(rows[1][key])
        assert (out / "square280" / "trace.csv").is_file()

    def test_failed_clip_is_recorded(self, smoke_dir):
        # a rectangle outside the 512 nm grid fails at rasterization, inside the worker
        write_layout(PolygonLayout([Polygon.rect(400, 400, 600, 600)]), smoke_dir / "outside.txt")
        out = smoke_dir / "bench"
        code = main(["bench", "-c", str(smoke_dir / "smoke.ini"), "-o", str(out), "--workers", "2",
                     "--set", "opt.T=10", str(smoke_dir / "square280.txt"), str(smoke_dir / "outside.txt")])
        assert code == 4
        rows = {r["case"]: r for r in self.read(out / "bench.csv")}
        assert "OutOfBoundsError" in rows["outside"]["error"]
        assert rows["outside"]["mse"] == ""
        assert rows["average"]["mse"] == rows["square280"]["mse"]

    def test_empty_glob(self, smoke_dir):
        assert main(["bench", "-c", str(smoke_dir / "smoke.ini"), str(smoke_dir / "none_*.txt")]) == 2

    def test_average_is_exact_mean(self):
        rows = [
            {"mse": 0.1, "pv": 1, "epe": 0, "msa": 3.0, "msd": None, "seconds": 1.0, "peak_rss_mb": 10.0},
            {"mse": 0.2, "pv": 2, "epe": 1, "msa": 5.0, "msd": 4.0, "seconds": 2.0, "peak_rss_mb": 20.0},
            {"mse": 0.3, "pv": 3, "epe": 3, "msa": 7.0, "msd": 8.0, "seconds": 3.0, "peak_rss_mb": 30.0},
            {"mse": 9.0, "error": "boom"},
        ]
        avg = bench_average(rows)
        assert avg["mse"] == math.fsum([0.1, 0.2, 0.3]) / 3 and avg["pv"] == 2.0 and avg["msa"] == 5.0
        assert avg["msd"] is None  # one clip with a single shape makes the mean infinite
        assert avg["epe"] == pytest.approx(4 / 3, rel=1e-15)


class TestKernelCommands:
    def test_gen_and_import(self, tmp_path):
        assert main(["kernel-gen", "-o", str(tmp_path), "--freq-dim", "11", "--sigma-freq", "3"]) == 0
        nominal = load_kernel_set(tmp_path / "nominal.iltk")
        assert nominal.freq_dim == 11 and load_kernel_set(tmp_path / "defocus.iltk").condition_tag == "defocus"
        np.savez(tmp_path / "k.npz", kernels=nominal.responses, scales=nominal.weights)
        assert main(["kernel-import", str(tmp_path / "k.npz"), "-o", str(tmp_path / "x" / "k.iltk")]) == 0
        assert load_kernel_set(tmp_path / "x" / "k.iltk") == nominal
        assert main(["kernel-import", str(tmp_path / "missing.npz"), "-o", str(tmp_path / "y.iltk")]) == 2


class TestConfigFile:
    def test_smoke_config_fields(self):
        cfg = load_config(CONFIGS / "smoke.ini")
        assert (cfg.opt.T, cfg.opt.s, cfg.opt.lr, cfg.opt.k_morph) == (200, 1, 0.05, 3)
        assert cfg.grid.shape == (64, 64) and cfg.grid.nm_per_px == 8.0
        assert cfg.inputs == (CONFIGS / "square280.txt",)

    def test_override_keys_are_case_insensitive(self):
        cfg = load_config(CONFIGS / "smoke.ini", ["opt.t=7", "opt.Beta3=0.5", "epe.threshold_nm=20"])
        assert cfg.opt.T == 7 and cfg.opt.beta3 == 0.5 and cfg.epe.threshold_nm == 20

    @pytest.mark.parametrize("bad", [
        "run.workers=0", "grid.nm_per_px=-1", "kernels.source=wat", "kernels.freq_dim=4",
        "litho.beta2=-3", "opt.s=x", "extra.key=1", "kernels.dose_outer=0.5",
    ])
    def test_rejects_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            load_config(CONFIGS / "smoke.ini", [bad])

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "-c", str(tmp_path / "none.ini")]) == 2

    def test_inf_is_parsed(self):
        assert math.isinf(load_config(CONFIGS / "smoke.ini", ["opt.lr=inf"]).opt.lr)
