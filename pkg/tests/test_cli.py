import json

import numpy as np
import pytest

from efumi.cli import main
from efumi.em import load_result
from efumi.io import load_cube, load_mask
from efumi.superpixel import load_segments


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    rc = run_cli(
        "synth", "--rows", 14, "--cols", 14, "--bands", 8, "--m", 2,
        "--target-fraction", 0.02, "--noise", 0.002, "--seed", 5, "--out", out,
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def fit(tmp_path_factory, scene):
    out = tmp_path_factory.mktemp("fit")
    rc = run_cli(
        "run", "--cube", scene / "cube.hsic", "--mask", scene / "mask.hsim",
        "--m-init", 2, "--seed", 1, "--max-iters", 60, "--out", out,
    )
    assert rc == 0
    return out


class TestSynth:
    def test_writes_scene_and_manifest(self, scene):
        for name in ("cube.hsic", "mask.hsim", "truth_endmembers.hsic",
                     "truth.json", "manifest.json"):
            assert (scene / name).exists()
        manifest = json.loads((scene / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 5
        assert manifest["config"]["rows"] == 14
        assert set(manifest["versions"]) == {"efumi", "numpy", "python", "scipy"}
        cube = load_cube(scene / "cube.hsic")
        load_mask(scene / "mask.hsim").check_matches(cube)

    def test_equal_seeds_give_identical_bytes(self, scene, tmp_path):
        rc = run_cli(
            "synth", "--rows", 14, "--cols", 14, "--bands", 8, "--m", 2,
            "--target-fraction", 0.02, "--noise", 0.002, "--seed", 5,
            "--out", tmp_path,
        )
        assert rc == 0
        for name in ("cube.hsic", "mask.hsim", "truth_endmembers.hsic",
                     "truth.json", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (scene / name).read_bytes()


class TestRun:
    def test_saves_loadable_result(self, fit):
        result = load_result(fit / "result")
        assert result.iterations >= 1
        manifest = json.loads((fit / "manifest.json").read_text())
        assert manifest["command"] == "run"
        assert manifest["config"]["m_init"] == 2
        assert manifest["config"]["seed"] == 1


class TestInfluence:
    def sweep(self, scene, fit, out, *extra):
        return run_cli(
            "influence", "--cube", scene / "cube.hsic", "--mask", scene / "mask.hsim",
            "--result", fit / "result", "--out", out, *extra,
        )

    def test_outputs_and_summary(self, scene, fit, tmp_path):
        assert self.sweep(scene, fit, tmp_path, "--units", "random:5", "--seed", 3) == 0
        lines = (tmp_path / "records.csv").read_text().splitlines()
        assert lines[0] == "unit_id,exact,pt,re"
        assert len(lines) == 6
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n_units"] == 5
        assert -1.0 <= summary["spearman_pt"] <= 1.0
        for scatter in ("scatter_pt.csv", "scatter_re.csv"):
            body = (tmp_path / scatter).read_text()
            assert "nan" not in body.lower()
            assert len(body.splitlines()) == 6

    def test_equal_seeds_give_identical_bytes(self, scene, fit, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert self.sweep(scene, fit, first, "--units", "random:5", "--seed", 3) == 0
        assert self.sweep(scene, fit, second, "--units", "random:5", "--seed", 3) == 0
        for path in sorted(first.iterdir()):
            assert path.read_bytes() == (second / path.name).read_bytes()

    def test_explicit_pixel_units(self, scene, fit, tmp_path):
        assert self.sweep(scene, fit, tmp_path, "--units", "pixels:10,20") == 0
        rows = (tmp_path / "records.csv").read_text().splitlines()[1:]
        assert [int(r.split(",")[0]) for r in rows] == [10, 20]

    def test_unit_file(self, scene, fit, tmp_path):
        units = tmp_path / "units.json"
        units.write_text(json.dumps([[10, 20], [30]]))
        assert self.sweep(scene, fit, tmp_path, "--units", f"file:{units}") == 0
        rows = (tmp_path / "records.csv").read_text().splitlines()[1:]
        assert [int(r.split(",")[0]) for r in rows] == [0, 1]

    def test_top_units_rank_by_target_proportion(self, scene, fit, tmp_path):
        assert self.sweep(scene, fit, tmp_path, "--units", "top:4") == 0
        rows = (tmp_path / "records.csv").read_text().splitlines()[1:]
        pts = [float(r.split(",")[2]) for r in rows]
        assert pts == sorted(pts, reverse=True)

    def test_unknown_unit_spec_fails(self, scene, fit, tmp_path, capsys):
        assert self.sweep(scene, fit, tmp_path, "--units", "best:4") == 1
        assert "unit spec" in capsys.readouterr().err


class TestSegmentCommand:
    def test_segments_round_trip(self, scene, tmp_path):
        rc = run_cli(
            "segment", "--cube", scene / "cube.hsic",
            "--target-segments", 20, "--seed", 2, "--out", tmp_path,
        )
        assert rc == 0
        spmap = load_segments(tmp_path / "segments.hsim")
        info = json.loads((tmp_path / "segments.json").read_text())
        assert info["n_segments"] == spmap.n_segments
        assert abs(spmap.n_segments - 20) <= 4


class TestExperiments:
    def test_single_point_summary(self, scene, tmp_path):
        rc = run_cli(
            "experiment", "single-point", "--cube", scene / "cube.hsic",
            "--mask", scene / "mask.hsim", "--m-init", 2, "--seed", 1,
            "--max-iters", 60, "--units", "random:6", "--jobs", 2, "--out", tmp_path,
        )
        assert rc == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n_units"] == 6
        assert {"spearman_pt", "spearman_re", "clamped"} <= set(summary)

    def test_recovery_full_review_reaches_doi_one(self, scene, tmp_path):
        rc = run_cli(
            "experiment", "recovery", "--cube", scene / "cube.hsic",
            "--mask", scene / "mask.hsim", "--m-init", 2, "--seed", 1,
            "--max-iters", 60, "--lambda-sparse", 1e-4,
            "--alpha", 0.02, "--beta-frac", 1.0, "--out", tmp_path,
        )
        assert rc == 0
        payload = json.loads((tmp_path / "doi.json").read_text())
        assert [r["strategy"] for r in payload["reports"]] == ["rand", "pt", "re"]
        assert all(r["doi"] == 1.0 for r in payload["reports"])

    def test_superpixel_emits_region_scatters(self, scene, tmp_path):
        rc = run_cli(
            "experiment", "superpixel", "--cube", scene / "cube.hsic",
            "--mask", scene / "mask.hsim", "--m-init", 2, "--seed", 1,
            "--max-iters", 60, "--segments", 10, "--jobs", 2, "--out", tmp_path,
        )
        assert rc == 0
        spmap = load_segments(tmp_path / "segments.hsim")
        for name in ("scatter_max_pt.csv", "scatter_sum_pt.csv"):
            lines = (tmp_path / name).read_text().splitlines()
            assert len(lines) == spmap.n_segments + 1
        rows = (tmp_path / "records.csv").read_text().splitlines()[1:]
        assert [int(r.split(",")[0]) for r in rows] == list(range(spmap.n_segments))
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert set(summary["ranking_sum_pt"]) <= set(range(spmap.n_segments))


class TestDispatch:
    def test_unknown_flag_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--rows", "5", "--bogus"])
        assert exc.value.code == 2

    def test_missing_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_runtime_error_exits_one(self, tmp_path, capsys):
        rc = run_cli(
            "run", "--cube", tmp_path / "missing.hsic",
            "--mask", tmp_path / "missing.hsim", "--out", tmp_path,
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_workspace_env_sets_default_output_root(self, scene, tmp_path, monkeypatch):
        monkeypatch.setenv("EFUMI_WORKSPACE", str(tmp_path))
        rc = run_cli("segment", "--cube", scene / "cube.hsic", "--target-segments", 5)
        assert rc == 0
        assert (tmp_path / "segment" / "segments.hsim").exists()

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip()
