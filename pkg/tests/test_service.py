"""HTTP service tests: uploads, labeling, background jobs, persistence.

A module-scoped workspace is threaded through one TestClient so the tests
exercise the same file layout a long-lived deployment would accumulate:
content-addressed datasets, versioned bag files, one directory per run,
and a job table that survives restarts.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from efumi.core import HsiCube
from efumi.em import load_result
from efumi.influence import exact_influence_sweep, flip_labels, influence_norm
from efumi.io import (
    MAGIC,
    bags_from_json,
    bags_to_json,
    load_cube,
    mask_to_bags,
    save_cube,
    save_mask,
)
from efumi.rng import Rng
from efumi.service import Job, JobRegistry, create_app
from efumi.superpixel import load_segments
from efumi.synth import generate_synthetic

RUN_CONFIG = {"m_init": 2, "seed": 1, "max_iters": 60}
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def wait(client, job_id, timeout=120.0):
    """Poll a job until it settles, returning the final status document."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        resp = client.get(f"/jobs/{job_id}")
        assert resp.status_code == 200
        doc = resp.json()
        if doc["state"] in ("done", "failed"):
            return doc
        time.sleep(0.02)
    raise AssertionError(f"job {job_id} did not settle within {timeout}s")


def done(client, job_id):
    doc = wait(client, job_id)
    assert doc["state"] == "done", doc.get("error")
    return doc


def parse_container(payload, tmp_path, name="blob.hsic"):
    path = tmp_path / name
    path.write_bytes(payload)
    return load_cube(path)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    cube, truth, mask = generate_synthetic(14, 14, 8, 2, 0.02, 0.002, Rng(5))
    save_cube(cube, root / "cube.hsic")
    save_mask(mask, root / "mask.hsim")
    return {
        "cube": cube,
        "mask": mask,
        "cube_bytes": (root / "cube.hsic").read_bytes(),
        "mask_bytes": (root / "mask.hsim").read_bytes(),
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("service-ws")


@pytest.fixture(scope="module")
def client(workspace):
    with TestClient(create_app(workspace, jobs=2)) as c:
        yield c


@pytest.fixture(scope="module")
def dataset(client, scene):
    resp = client.post("/datasets", content=scene["cube_bytes"])
    assert resp.status_code == 200
    dataset_id = resp.json()["dataset_id"]
    resp = client.put(f"/datasets/{dataset_id}/bags", content=scene["mask_bytes"])
    assert resp.status_code == 204
    return dataset_id


@pytest.fixture(scope="module")
def run_id(client, dataset):
    resp = client.post(f"/datasets/{dataset}/runs", json=RUN_CONFIG)
    assert resp.status_code == 200
    doc = done(client, resp.json()["job_id"])
    ref = doc["result_ref"]
    assert ref.startswith("runs/")
    return ref.split("/", 1)[1]


@pytest.fixture(scope="module")
def bare_dataset(client, tmp_path_factory):
    """A second dataset that starts out with no bags."""
    cube, _, _ = generate_synthetic(12, 12, 6, 2, 0.03, 0.0, Rng(6))
    path = tmp_path_factory.mktemp("bare") / "cube.hsic"
    save_cube(cube, path)
    resp = client.post("/datasets", content=path.read_bytes())
    assert resp.status_code == 200
    return resp.json()["dataset_id"]


class TestDatasets:
    def test_upload_is_content_addressed(self, client, scene):
        first = client.post("/datasets", content=scene["cube_bytes"])
        second = client.post("/datasets", content=scene["cube_bytes"])
        assert first.status_code == second.status_code == 200
        assert first.json()["dataset_id"] == second.json()["dataset_id"]

    def test_rejects_non_container_body(self, client):
        resp = client.post("/datasets", content=b"these are not cube bytes")
        assert resp.status_code == 400

    def test_rejects_cube_that_fails_validation(self, client, tmp_path):
        data = np.full((4, 3), 0.5)
        data[2, 1] = np.nan
        save_cube(HsiCube(rows=2, cols=2, bands=3, data=data), tmp_path / "bad.hsic")
        resp = client.post("/datasets", content=(tmp_path / "bad.hsic").read_bytes())
        assert resp.status_code == 422
        detail = resp.json()["detail"]
        assert detail["violations"]
        # the rejected cube must not linger in the workspace
        would_be = resp.request.content  # uploaded bytes determine the id
        from efumi.service import _dataset_id

        assert client.get(f"/datasets/{_dataset_id(would_be)}/meta").status_code == 404

    def test_meta_reports_dimensions(self, client, dataset, scene):
        doc = client.get(f"/datasets/{dataset}/meta").json()
        assert doc["rows"] == scene["cube"].rows
        assert doc["cols"] == scene["cube"].cols
        assert doc["bands"] == scene["cube"].bands
        assert doc["wavelengths"] == pytest.approx(scene["cube"].wavelengths)

    def test_meta_unknown_dataset_404(self, client):
        assert client.get("/datasets/feedfacecafe/meta").status_code == 404

    def test_quicklook_returns_png(self, client, dataset):
        default = client.get(f"/datasets/{dataset}/quicklook")
        explicit = client.get(f"/datasets/{dataset}/quicklook", params={"bands": "0,1,2"})
        assert default.status_code == explicit.status_code == 200
        assert default.content.startswith(PNG_MAGIC)
        assert explicit.content.startswith(PNG_MAGIC)
        assert default.headers["content-type"] == "image/png"

    def test_quicklook_rejects_bad_band_lists(self, client, dataset):
        for bands in ("a,b,c", "0,1", "0,1,99"):
            resp = client.get(f"/datasets/{dataset}/quicklook", params={"bands": bands})
            assert resp.status_code == 400, bands


class TestBags:
    def test_mask_upload_persists_canonical_json(self, client, workspace, dataset, scene):
        stored = workspace / "datasets" / dataset / "bags.json"
        assert stored.exists()
        bags = bags_from_json(stored.read_text())
        assert bags.pixel_ids.size == mask_to_bags(scene["mask"]).pixel_ids.size
        versions = list((workspace / "datasets" / dataset).glob("bags-v*.json"))
        assert versions, "every PUT should leave a versioned copy"

    def test_accepts_bag_json_document(self, client, dataset, scene):
        doc = bags_to_json(mask_to_bags(scene["mask"]))
        resp = client.put(f"/datasets/{dataset}/bags", content=doc.encode())
        assert resp.status_code == 204

    def test_get_returns_canonical_document(self, client, dataset, scene):
        doc = client.get(f"/datasets/{dataset}/bags").json()
        expected = json.loads(bags_to_json(mask_to_bags(scene["mask"])))
        assert doc == expected

    def test_get_before_any_put_conflicts(self, client, bare_dataset):
        resp = client.get(f"/datasets/{bare_dataset}/bags")
        assert resp.status_code == 409

    def test_rejects_garbage_body(self, client, dataset):
        resp = client.put(f"/datasets/{dataset}/bags", content=b"\x00\x01 junk")
        assert resp.status_code == 400

    def test_rejects_out_of_bounds_pixels(self, client, dataset):
        doc = {
            "bags": [
                {"id": "pos", "label": 1, "pixels": [0, 1]},
                {"id": "neg", "label": 0, "pixels": [10**6]},
            ]
        }
        resp = client.put(f"/datasets/{dataset}/bags", json=doc)
        assert resp.status_code == 422
        assert "out of range" in resp.json()["detail"]["violations"][0]

    def test_run_without_bags_conflicts(self, client, bare_dataset):
        resp = client.post(f"/datasets/{bare_dataset}/runs", json=RUN_CONFIG)
        assert resp.status_code == 409


class TestRuns:
    def test_job_settles_done_with_result_ref(self, client, run_id):
        doc = client.get(f"/jobs/{run_id}").json()
        assert doc["state"] == "done"
        assert doc["kind"] == "run"
        assert doc["progress"] == 1.0
        assert doc["result_ref"] == f"runs/{run_id}"
        assert doc["error"] is None

    def test_endmember_payload_shape(self, client, run_id, scene):
        doc = client.get(f"/runs/{run_id}/endmembers").json()
        bands = scene["cube"].bands
        assert doc["bands"] == bands
        assert doc["m"] >= 1
        assert len(doc["target"]) == bands
        assert len(doc["background"]) == doc["m"]
        assert all(len(col) == bands for col in doc["background"])
        assert math.isclose(
            sum(v * v for v in doc["target"]), 1.0, rel_tol=0, abs_tol=1e-9
        )
        assert doc["iterations"] >= 1
        assert isinstance(doc["converged"], bool)

    def test_proportions_and_target_map_are_containers(
        self, client, run_id, scene, tmp_path
    ):
        ems = client.get(f"/runs/{run_id}/endmembers").json()
        props = client.get(f"/runs/{run_id}/proportions")
        tmap = client.get(f"/runs/{run_id}/target-map")
        assert props.content.startswith(MAGIC)
        assert tmap.content.startswith(MAGIC)

        p_cube = parse_container(props.content, tmp_path, "p.hsic")
        assert p_cube.bands == ems["m"] + 1
        sums = p_cube.data.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)

        t_cube = parse_container(tmap.content, tmp_path, "t.hsic")
        assert (t_cube.rows, t_cube.cols, t_cube.bands) == (14, 14, 1)
        assert t_cube.data.min() >= -1e-12
        assert t_cube.data.max() <= 1.0 + 1e-12
        # the target map is exactly the target column of the proportions
        np.testing.assert_array_equal(t_cube.data[:, 0], p_cube.data[:, 0])

    def test_equal_seed_runs_serve_identical_endmembers(self, client, dataset, run_id):
        jobs = [
            client.post(f"/datasets/{dataset}/runs", json=RUN_CONFIG).json()["job_id"]
            for _ in range(2)
        ]
        refs = [done(client, j)["result_ref"] for j in jobs]
        payloads = [client.get(f"/{ref}/endmembers").content for ref in refs]
        assert payloads[0] == payloads[1]
        assert payloads[0] == client.get(f"/runs/{run_id}/endmembers").content

    def test_unknown_run_404(self, client):
        for leaf in ("endmembers", "proportions", "target-map"):
            assert client.get(f"/runs/nope/{leaf}").status_code == 404
        assert client.get("/runs/nope/compare/nada").status_code == 404

    def test_malformed_config_body_400(self, client, dataset):
        resp = client.post(f"/datasets/{dataset}/runs", content=b"{nope")
        assert resp.status_code == 400

    def test_invalid_config_values_422(self, client, dataset):
        resp = client.post(f"/datasets/{dataset}/runs", json={"m_init": 0})
        assert resp.status_code == 422
        assert any("m_init" in v for v in resp.json()["detail"]["violations"])

    def test_run_on_unknown_dataset_404(self, client):
        assert client.post("/datasets/nope/runs", json=RUN_CONFIG).status_code == 404

    def test_failed_run_reports_error_and_serves_no_result(self, client, bare_dataset):
        # all-negative labels pass the bag checks but the solver needs a
        # positive bag, so the job itself must fail and say why
        doc = {"bags": [{"id": "n0", "label": 0, "pixels": [0, 1, 2]}]}
        assert client.put(f"/datasets/{bare_dataset}/bags", json=doc).status_code == 204
        job_id = client.post(
            f"/datasets/{bare_dataset}/runs", json=RUN_CONFIG
        ).json()["job_id"]
        status = wait(client, job_id)
        assert status["state"] == "failed"
        assert "positive" in status["error"]
        assert status["result_ref"] is None
        assert client.get(f"/jobs/{job_id}/result").status_code == 404

    def test_compare_run_with_itself_is_zero(self, client, run_id):
        doc = client.get(f"/runs/{run_id}/compare/{run_id}").json()
        assert doc["influence"] == 0.0
        assert doc["angle_deg"] == pytest.approx(0.0, abs=1e-6)

    def test_compare_matches_client_side_norm(self, client, dataset, run_id):
        other_cfg = dict(RUN_CONFIG, seed=3)
        job = client.post(f"/datasets/{dataset}/runs", json=other_cfg).json()["job_id"]
        other = done(client, job)["result_ref"].split("/", 1)[1]
        ours = np.array(client.get(f"/runs/{run_id}/endmembers").json()["target"])
        theirs = np.array(client.get(f"/runs/{other}/endmembers").json()["target"])
        doc = client.get(f"/runs/{run_id}/compare/{other}").json()
        assert doc["influence"] == pytest.approx(
            influence_norm(ours, theirs), rel=1e-12, abs=0.0
        )
        assert doc["angle_deg"] >= 0.0


class TestPixelInfluence:
    def test_superpixel_granularity_needs_map_first(self, client, run_id):
        # runs before any segmentation job has touched this dataset
        resp = client.post(
            f"/runs/{run_id}/influence",
            json={"method": "pt", "granularity": "superpixel"},
        )
        assert resp.status_code == 409

    def test_pt_ranking_descends(self, client, run_id, tmp_path):
        job = client.post(
            f"/runs/{run_id}/influence", json={"method": "pt", "top_k": 6}
        ).json()["job_id"]
        done(client, job)
        doc = client.get(f"/jobs/{job}/result").json()
        assert doc["method"] == "pt"
        assert doc["granularity"] == "pixel"
        assert len(doc["ranking"]) == 6
        assert doc["ranking"] == [r["unit_id"] for r in doc["records"]]
        scores = [r["pt"] for r in doc["records"]]
        assert scores == sorted(scores, reverse=True)
        assert all(r["exact"] is None for r in doc["records"])

        heat = parse_container(
            client.get(f"/jobs/{job}/heatmap").content, tmp_path
        )
        assert (heat.rows, heat.cols, heat.bands) == (14, 14, 1)
        # the heatmap carries the full surrogate field
        top = doc["records"][0]
        assert heat.data[top["unit_id"], 0] == pytest.approx(top["pt"], rel=1e-12)

    def test_exact_ranking_descends_and_reports_progress(self, client, run_id, tmp_path):
        job = client.post(
            f"/runs/{run_id}/influence", json={"method": "exact", "top_k": 3}
        ).json()["job_id"]
        status = done(client, job)
        assert status["progress"] == 1.0
        doc = client.get(f"/jobs/{job}/result").json()
        exacts = [r["exact"] for r in doc["records"]]
        assert all(isinstance(v, float) and v >= 0.0 for v in exacts)
        assert exacts == sorted(exacts, reverse=True)

        heat = parse_container(
            client.get(f"/jobs/{job}/heatmap").content, tmp_path
        )
        swept = {r["unit_id"] for r in doc["records"]}
        for pixel in range(heat.data.shape[0]):
            if pixel not in swept:
                assert heat.data[pixel, 0] == 0.0

    def test_invalid_requests_are_reported_together(self, client, run_id):
        resp = client.post(
            f"/runs/{run_id}/influence",
            json={"method": "bogus", "granularity": "voxel", "top_k": 0},
        )
        assert resp.status_code == 422
        violations = resp.json()["detail"]["violations"]
        assert len(violations) == 3

    def test_influence_on_unknown_run_404(self, client):
        resp = client.post("/runs/nope/influence", json={"method": "pt"})
        assert resp.status_code == 404


@pytest.fixture(scope="module")
def segmented(client, workspace, dataset):
    """Lazily created: nothing touches this before the 409 test above ran."""
    job = client.post(
        f"/datasets/{dataset}/superpixels", json={"target_segments": 12}
    ).json()["job_id"]
    doc = done(client, job)
    assert doc["result_ref"] == f"datasets/{dataset}/segments.hsim"
    return load_segments(workspace / doc["result_ref"])


class TestSuperpixelInfluence:
    def test_segment_map_matches_target(self, segmented):
        assert abs(segmented.n_segments - 12) <= 4

    def test_segment_job_records_count(self, client, workspace, dataset, segmented):
        job_dirs = [
            p for p in (workspace / "jobs").iterdir() if (p / "segments.json").exists()
        ]
        assert job_dirs
        info = json.loads((job_dirs[0] / "segments.json").read_text())
        assert info["n_segments"] == segmented.n_segments

    def test_segment_map_download_round_trips(
        self, client, dataset, segmented, tmp_path
    ):
        resp = client.get(f"/datasets/{dataset}/segments")
        assert resp.status_code == 200
        path = tmp_path / "segments.hsim"
        path.write_bytes(resp.content)
        fetched = load_segments(path)
        assert np.array_equal(fetched.segments, segmented.segments)

    def test_segment_map_before_segmentation_conflicts(self, client, bare_dataset):
        resp = client.get(f"/datasets/{bare_dataset}/segments")
        assert resp.status_code == 409

    def test_pt_records_carry_region_metrics(self, client, run_id, segmented, tmp_path):
        job = client.post(
            f"/runs/{run_id}/influence",
            json={"method": "pt", "granularity": "superpixel", "top_k": 5},
        ).json()["job_id"]
        done(client, job)
        doc = client.get(f"/jobs/{job}/result").json()
        assert len(doc["ranking"]) == min(5, segmented.n_segments)
        for record in doc["records"]:
            assert set(record["metrics"]) == {"max_pt", "sum_pt", "max_re", "sum_re"}
            assert record["pt"] == record["metrics"]["max_pt"]
        maxima = [r["metrics"]["max_pt"] for r in doc["records"]]
        assert maxima == sorted(maxima, reverse=True)

        heat = parse_container(client.get(f"/jobs/{job}/heatmap").content, tmp_path)
        assert np.unique(heat.data).size <= segmented.n_segments

    def test_exact_over_segments(self, client, run_id, segmented):
        job = client.post(
            f"/runs/{run_id}/influence",
            json={"method": "exact", "granularity": "superpixel", "top_k": 3},
        ).json()["job_id"]
        done(client, job)
        doc = client.get(f"/jobs/{job}/result").json()
        exacts = [r["exact"] for r in doc["records"]]
        assert exacts == sorted(exacts, reverse=True)
        assert all(set(r["metrics"]) == {"max_pt", "sum_pt", "max_re", "sum_re"}
                   for r in doc["records"])

    def test_bad_segment_requests(self, client, dataset):
        resp = client.post(
            f"/datasets/{dataset}/superpixels", json={"target_segments": "ten"}
        )
        assert resp.status_code == 400
        resp = client.post(
            f"/datasets/{dataset}/superpixels", json={"target_segments": 0}
        )
        assert resp.status_code == 422


class TestFullLoop:
    def test_relabel_top_five_and_rerun(self, client, dataset, run_id, scene):
        """The workbench loop: influence ranking -> relabel -> rerun -> compare.

        The rerun is a fresh fit, so its shift is not the warm-started
        sweep prediction; what must hold is that the estimate moved and
        that the service-reported influence equals the norm a client
        could compute from the two endmember payloads.
        """
        job = client.post(
            f"/runs/{run_id}/influence", json={"method": "exact", "top_k": 5}
        ).json()["job_id"]
        done(client, job)
        top = client.get(f"/jobs/{job}/result").json()["ranking"]

        flipped = flip_labels(mask_to_bags(scene["mask"]), [int(p) for p in top])
        resp = client.put(
            f"/datasets/{dataset}/bags", content=bags_to_json(flipped).encode()
        )
        assert resp.status_code == 204
        try:
            rerun_job = client.post(
                f"/datasets/{dataset}/runs", json=RUN_CONFIG
            ).json()["job_id"]
            rerun = done(client, rerun_job)["result_ref"].split("/", 1)[1]
            doc = client.get(f"/runs/{run_id}/compare/{rerun}").json()
            assert doc["influence"] > 0.0
            ours = np.array(client.get(f"/runs/{run_id}/endmembers").json()["target"])
            theirs = np.array(client.get(f"/runs/{rerun}/endmembers").json()["target"])
            assert doc["influence"] == pytest.approx(
                influence_norm(ours, theirs), rel=1e-12, abs=0.0
            )
        finally:
            # restore the original labels for any later test
            restore = client.put(
                f"/datasets/{dataset}/bags", content=scene["mask_bytes"]
            )
            assert restore.status_code == 204

    def test_sweep_ordering_matches_library_warm_start(self, client, workspace,
                                                       dataset, run_id, scene):
        """The service's exact ranking is the library's warm-started sweep."""
        job = client.post(
            f"/runs/{run_id}/influence", json={"method": "exact", "top_k": 4}
        ).json()["job_id"]
        done(client, job)
        doc = client.get(f"/jobs/{job}/result").json()

        baseline = load_result(workspace / "runs" / run_id / "result")
        bags = mask_to_bags(scene["mask"])
        swept = sorted(r["unit_id"] for r in doc["records"])
        oracle = exact_influence_sweep(
            scene["cube"], bags, baseline, [[p] for p in swept], unit_ids=swept
        )
        expected = {r.unit_id: r.exact for r in oracle}
        for record in doc["records"]:
            assert record["exact"] == pytest.approx(
                expected[record["unit_id"]], rel=1e-9
            )


class TestJobRegistry:
    def test_job_field_validation(self):
        with pytest.raises(ValueError, match="kind"):
            Job(id="a", kind="nope")
        with pytest.raises(ValueError, match="state"):
            Job(id="a", kind="run", state="paused")
        with pytest.raises(ValueError, match="progress"):
            Job(id="a", kind="run", progress=1.5)
        with pytest.raises(ValueError, match="result_ref"):
            Job(id="a", kind="run", result_ref="runs/a")
        with pytest.raises(ValueError, match="result_ref"):
            Job(id="a", kind="run", state="done")

    def test_legal_lifecycle(self, tmp_path):
        registry = JobRegistry(tmp_path)
        job = registry.create("run")
        assert registry.get(job.id).state == "queued"
        registry.start(job.id)
        registry.set_progress(job.id, 0.5)
        assert registry.get(job.id).progress == 0.5
        registry.finish(job.id, "runs/x")
        final = registry.get(job.id)
        assert final.state == "done"
        assert final.progress == 1.0
        assert final.result_ref == "runs/x"

    def test_illegal_transitions_raise(self, tmp_path):
        registry = JobRegistry(tmp_path)
        job = registry.create("run")
        with pytest.raises(RuntimeError, match="illegal job transition"):
            registry.finish(job.id, "runs/x")  # queued -> done skips running
        registry.start(job.id)
        registry.finish(job.id, "runs/x")
        with pytest.raises(RuntimeError, match="illegal job transition"):
            registry.start(job.id)  # done is terminal

    def test_progress_ignored_unless_running(self, tmp_path):
        registry = JobRegistry(tmp_path)
        job = registry.create("segment")
        registry.set_progress(job.id, 0.7)
        assert registry.get(job.id).progress == 0.0
        registry.start(job.id)
        registry.set_progress(job.id, 2.0)
        assert registry.get(job.id).progress == 1.0

    def test_restart_marks_unsettled_jobs_failed(self, tmp_path):
        registry = JobRegistry(tmp_path)
        started = registry.create("run")
        registry.start(started.id)
        queued = registry.create("segment")
        finished = registry.create("influence")
        registry.start(finished.id)
        registry.finish(finished.id, "jobs/x")

        reloaded = JobRegistry(tmp_path)
        for job_id in (started.id, queued.id):
            job = reloaded.get(job_id)
            assert job.state == "failed"
            assert "restart" in job.error
        survivor = reloaded.get(finished.id)
        assert survivor.state == "done"
        assert survivor.result_ref == "jobs/x"


class TestRestart:
    def test_workspace_survives_restart(self, client, workspace, dataset, run_id):
        before = client.get(f"/runs/{run_id}/endmembers").content
        with TestClient(create_app(workspace)) as reborn:
            assert reborn.get(f"/datasets/{dataset}/meta").status_code == 200
            assert reborn.get(f"/runs/{run_id}/endmembers").content == before
            job = reborn.get(f"/jobs/{run_id}").json()
            assert job["state"] == "done"

    def test_health(self, client):
        doc = client.get("/health").json()
        assert doc["status"] == "ok"
        assert doc["version"]
