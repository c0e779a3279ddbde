"""HTTP API for the labeling workbench.

The service is stateless above the filesystem: datasets, bag sets, runs,
and job records live as plain files under one workspace root, so a
restart loses nothing that had finished. Long work (estimator runs,
influence sweeps, segmentation) executes in a bounded thread pool and is
tracked by ``Job`` records that move queued -> running -> done/failed.

Layout under the workspace root::

    datasets/{id}/cube.hsic        uploaded scene (id = content hash)
    datasets/{id}/bags.json        current bag set (+ versioned copies)
    datasets/{id}/segments.hsim    superpixel map, once requested
    runs/{id}/result/...           saved estimator output
    runs/{id}/target_map.hsic      per-pixel target proportion
    jobs/{id}/job.json             job state
    jobs/{id}/result.json          influence job output
"""

from __future__ import annotations

import io as _io
import json
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import asdict, dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from . import __version__
from .core import BagSet, HsiCube, validate_cube
from .em import EfumiConfig, load_result, run_efumi, save_result
from .influence import (
    InfluenceRecord,
    exact_influence_sweep,
    influence_norm,
    rank_units,
    surrogates,
)
from .io import MAGIC, FormatError, bags_from_json, bags_to_json, load_cube, load_mask, mask_to_bags, save_cube
from .rng import Rng
from .superpixel import load_segments, region_metrics, save_segments, segment

__all__ = ["Job", "JobRegistry", "create_app", "DEFAULT_TOP_K"]

#: Exact influence reruns are limited to this many surrogate-ranked units
#: unless the request says otherwise; full sweeps are too slow to serve.
DEFAULT_TOP_K = 200

_JOB_KINDS = ("run", "influence", "segment")
_JOB_STATES = ("queued", "running", "done", "failed")


@dataclass
class Job:
    """State of one background computation."""

    id: str
    kind: str
    state: str = "queued"
    progress: float = 0.0
    result_ref: Optional[str] = None
    error: Optional[str] = None

    def __post_init__(self):
        if self.kind not in _JOB_KINDS:
            raise ValueError(f"kind must be one of {_JOB_KINDS}")
        if self.state not in _JOB_STATES:
            raise ValueError(f"state must be one of {_JOB_STATES}")
        if not 0.0 <= self.progress <= 1.0:
            raise ValueError("progress must be in [0, 1]")
        if (self.result_ref is not None) != (self.state == "done"):
            raise ValueError("result_ref must be present exactly when done")

    def to_dict(self) -> dict:
        return asdict(self)


class JobRegistry:
    """Thread-safe job table persisted as one JSON file per job."""

    _TRANSITIONS = {
        ("queued", "running"),
        ("queued", "failed"),
        ("running", "done"),
        ("running", "failed"),
    }

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._jobs: dict[str, Job] = {}
        for path in sorted(self.root.glob("*/job.json")):
            job = Job(**json.loads(path.read_text()))
            if job.state in ("queued", "running"):
                job.state = "failed"
                job.error = "interrupted by service restart"
                self._persist(job)
            self._jobs[job.id] = job

    def _persist(self, job: Job) -> None:
        directory = self.root / job.id
        directory.mkdir(parents=True, exist_ok=True)
        _atomic_write(directory / "job.json",
                      (json.dumps(job.to_dict(), sort_keys=True) + "\n").encode())

    def create(self, kind: str) -> Job:
        with self._lock:
            job_id = uuid.uuid4().hex[:12]
            while job_id in self._jobs:
                job_id = uuid.uuid4().hex[:12]
            job = Job(id=job_id, kind=kind)
            self._jobs[job_id] = job
            self._persist(job)
            return job

    def get(self, job_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(job_id)

    def _move(self, job_id: str, state: str, **updates) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if (job.state, state) not in self._TRANSITIONS:
                raise RuntimeError(f"illegal job transition {job.state} -> {state}")
            job.state = state
            for key, value in updates.items():
                setattr(job, key, value)
            self._persist(job)

    def start(self, job_id: str) -> None:
        self._move(job_id, "running")

    def finish(self, job_id: str, result_ref: str) -> None:
        self._move(job_id, "done", progress=1.0, result_ref=result_ref)

    def fail(self, job_id: str, message: str) -> None:
        self._move(job_id, "failed", error=message)

    def set_progress(self, job_id: str, progress: float) -> None:
        with self._lock:
            job = self._jobs[job_id]
            if job.state == "running":
                job.progress = min(max(float(progress), 0.0), 1.0)
                self._persist(job)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}-{threading.get_ident()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _dataset_id(payload: bytes) -> str:
    return sha256(payload).hexdigest()[:12]


def _single_band(rows: int, cols: int, values: np.ndarray) -> HsiCube:
    return HsiCube(rows=rows, cols=cols, bands=1, data=values.reshape(-1, 1))


def create_app(workspace, jobs: Optional[int] = None) -> FastAPI:
    """Build the FastAPI app over a workspace directory."""
    workspace = Path(workspace)
    datasets_root = workspace / "datasets"
    runs_root = workspace / "runs"
    datasets_root.mkdir(parents=True, exist_ok=True)
    runs_root.mkdir(parents=True, exist_ok=True)
    registry = JobRegistry(workspace / "jobs")
    executor = ThreadPoolExecutor(max_workers=jobs or os.cpu_count() or 2)

    @asynccontextmanager
    async def lifespan(app):
        yield
        executor.shutdown(wait=True, cancel_futures=True)

    app = FastAPI(title="efumi service", version=__version__, lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    # ---- helpers ---------------------------------------------------------

    def dataset_dir(dataset_id: str) -> Path:
        directory = datasets_root / dataset_id
        if not (directory / "cube.hsic").exists():
            raise HTTPException(404, f"unknown dataset {dataset_id!r}")
        return directory

    def dataset_cube(dataset_id: str) -> HsiCube:
        return load_cube(dataset_dir(dataset_id) / "cube.hsic")

    def dataset_bags(dataset_id: str) -> BagSet:
        path = dataset_dir(dataset_id) / "bags.json"
        if not path.exists():
            raise HTTPException(409, f"dataset {dataset_id!r} has no bags yet")
        return bags_from_json(path.read_text())

    def run_dir(run_id: str) -> Path:
        directory = runs_root / run_id
        if not (directory / "result" / "result.json").exists():
            raise HTTPException(404, f"no completed run {run_id!r}")
        return directory

    def json_body(request_bytes: bytes) -> dict:
        try:
            payload = json.loads(request_bytes)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise HTTPException(400, f"malformed JSON body: {exc}") from None
        if not isinstance(payload, dict):
            raise HTTPException(400, "body must be a JSON object")
        return payload

    def submit(job: Job, work) -> dict:
        def guarded():
            registry.start(job.id)
            try:
                result_ref = work()
            except Exception as exc:
                registry.fail(job.id, str(exc))
            else:
                registry.finish(job.id, result_ref)

        executor.submit(guarded)
        return {"job_id": job.id}

    # ---- datasets --------------------------------------------------------

    @app.post("/datasets")
    async def upload_dataset(request: Request):
        payload = await request.body()
        if not payload.startswith(MAGIC):
            raise HTTPException(400, "body is not a cube container")
        dataset_id = _dataset_id(payload)
        directory = datasets_root / dataset_id
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "cube.hsic"
        _atomic_write(path, payload)
        try:
            cube = load_cube(path)
        except FormatError as exc:
            path.unlink()
            raise HTTPException(400, str(exc)) from None
        violations = validate_cube(cube)
        if violations:
            path.unlink()
            raise HTTPException(
                422,
                {"message": "cube fails validation",
                 "violations": [str(v) for v in violations]},
            )
        return {"dataset_id": dataset_id}

    @app.get("/datasets/{dataset_id}/meta")
    def dataset_meta(dataset_id: str):
        cube = dataset_cube(dataset_id)
        return {
            "rows": cube.rows,
            "cols": cube.cols,
            "bands": cube.bands,
            "wavelengths": None if cube.wavelengths is None
            else [float(w) for w in cube.wavelengths],
        }

    @app.get("/datasets/{dataset_id}/quicklook")
    def dataset_quicklook(dataset_id: str, bands: Optional[str] = None):
        from PIL import Image

        cube = dataset_cube(dataset_id)
        if bands is None:
            picks = [0, cube.bands // 2, cube.bands - 1]
        else:
            try:
                picks = [int(b) for b in bands.split(",")]
            except ValueError:
                raise HTTPException(400, f"malformed bands {bands!r}") from None
            if len(picks) != 3:
                raise HTTPException(400, "bands must list exactly three indices")
        if any(not 0 <= b < cube.bands for b in picks):
            raise HTTPException(400, f"band index out of range 0..{cube.bands - 1}")
        channels = []
        for b in picks:
            band = cube.data[:, b]
            lo, hi = np.percentile(band, [2.0, 98.0])
            if hi <= lo:
                channels.append(np.zeros(band.size, dtype=np.uint8))
            else:
                stretched = np.clip((band - lo) / (hi - lo), 0.0, 1.0)
                channels.append(np.round(stretched * 255.0).astype(np.uint8))
        rgb = np.stack(channels, axis=-1).reshape(cube.rows, cube.cols, 3)
        buffer = _io.BytesIO()
        Image.fromarray(rgb, mode="RGB").save(buffer, format="PNG")
        return Response(content=buffer.getvalue(), media_type="image/png")

    @app.put("/datasets/{dataset_id}/bags", status_code=204)
    async def put_bags(dataset_id: str, request: Request):
        directory = dataset_dir(dataset_id)
        cube = dataset_cube(dataset_id)
        payload = await request.body()
        try:
            if payload.startswith(MAGIC):
                tmp = directory / "incoming-mask.hsim"
                _atomic_write(tmp, payload)
                try:
                    mask = load_mask(tmp)
                finally:
                    tmp.unlink()
                mask.check_matches(cube)
                bag_set = mask_to_bags(mask)
            else:
                json_body(payload)  # 400 unless the body parses as JSON
                bag_set = bags_from_json(payload)
        except FormatError as exc:
            raise HTTPException(400, str(exc)) from None
        except ValueError as exc:
            raise HTTPException(
                422, {"message": "bags fail validation", "violations": [str(exc)]}
            ) from None
        try:
            bag_set.check_bounds(cube.rows * cube.cols)
        except ValueError as exc:
            raise HTTPException(
                422, {"message": "bags fail validation", "violations": [str(exc)]}
            ) from None
        canonical = bags_to_json(bag_set).encode()
        _atomic_write(directory / "bags.json", canonical)
        _atomic_write(directory / f"bags-v{time.time_ns()}.json", canonical)
        return Response(status_code=204)

    @app.get("/datasets/{dataset_id}/bags")
    def get_bags(dataset_id: str):
        path = dataset_dir(dataset_id) / "bags.json"
        if not path.exists():
            raise HTTPException(409, f"dataset {dataset_id!r} has no bags yet")
        return Response(content=path.read_bytes(), media_type="application/json")

    @app.get("/datasets/{dataset_id}/segments")
    def get_segments(dataset_id: str):
        path = dataset_dir(dataset_id) / "segments.hsim"
        if not path.exists():
            raise HTTPException(
                409, f"dataset {dataset_id!r} has no superpixel map yet"
            )
        return Response(
            content=path.read_bytes(), media_type="application/octet-stream"
        )

    @app.post("/datasets/{dataset_id}/superpixels")
    async def post_superpixels(dataset_id: str, request: Request):
        directory = dataset_dir(dataset_id)
        payload = json_body(await request.body())
        target = payload.get("target_segments")
        if not isinstance(target, int) or isinstance(target, bool):
            raise HTTPException(400, "target_segments must be an integer")
        cube = dataset_cube(dataset_id)
        if not 1 <= target <= cube.rows * cube.cols:
            raise HTTPException(
                422,
                {"message": "target_segments out of range",
                 "violations": [f"target_segments must be in [1, {cube.rows * cube.cols}]"]},
            )
        job = registry.create("segment")

        def work() -> str:
            spmap = segment(cube, target, rng=Rng(0))
            out = directory / "segments.hsim"
            save_segments(spmap, out)
            info = {"n_segments": spmap.n_segments, "target_segments": target}
            _atomic_write(registry.root / job.id / "segments.json",
                          (json.dumps(info, sort_keys=True) + "\n").encode())
            return str(out.relative_to(workspace))

        return submit(job, work)

    # ---- runs ------------------------------------------------------------

    @app.post("/datasets/{dataset_id}/runs")
    async def post_run(dataset_id: str, request: Request):
        cube = dataset_cube(dataset_id)
        bag_set = dataset_bags(dataset_id)
        payload = json_body(await request.body())
        try:
            config = EfumiConfig.from_dict(payload)
        except (TypeError, ValueError) as exc:
            raise HTTPException(
                422, {"message": "config fails validation", "violations": [str(exc)]}
            ) from None
        job = registry.create("run")

        def work() -> str:
            result = run_efumi(cube, bag_set, config)
            directory = runs_root / job.id
            save_result(result, directory / "result")
            save_cube(
                _single_band(cube.rows, cube.cols, result.proportions.target_column),
                directory / "target_map.hsic",
            )
            _atomic_write(
                directory / "run.json",
                (json.dumps({"dataset_id": dataset_id}, sort_keys=True) + "\n").encode(),
            )
            return f"runs/{job.id}"

        return submit(job, work)

    @app.get("/runs/{run_id}/endmembers")
    def run_endmembers(run_id: str):
        result = load_result(run_dir(run_id) / "result")
        ems = result.endmembers
        return {
            "bands": ems.bands,
            "m": ems.m,
            "target": [float(v) for v in ems.target],
            "background": [[float(v) for v in ems.background[:, j]]
                           for j in range(ems.m)],
            "iterations": result.iterations,
            "converged": result.converged,
        }

    @app.get("/runs/{run_id}/proportions")
    def run_proportions(run_id: str):
        payload = (run_dir(run_id) / "result" / "proportions.hsic").read_bytes()
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/runs/{run_id}/target-map")
    def run_target_map(run_id: str):
        payload = (run_dir(run_id) / "target_map.hsic").read_bytes()
        return Response(content=payload, media_type="application/octet-stream")

    @app.get("/runs/{run_id}/compare/{other_id}")
    def run_compare(run_id: str, other_id: str):
        ours = load_result(run_dir(run_id) / "result").endmembers.target
        theirs = load_result(run_dir(other_id) / "result").endmembers.target
        if ours.shape != theirs.shape:
            raise HTTPException(
                status_code=422,
                detail={
                    "message": "runs have different band counts",
                    "violations": [f"{ours.size} bands vs {theirs.size} bands"],
                },
            )
        cosine = abs(float(ours @ theirs))
        cosine /= float(np.linalg.norm(ours) * np.linalg.norm(theirs))
        angle = float(np.degrees(np.arccos(min(cosine, 1.0))))
        return {
            "influence": float(influence_norm(ours, theirs)),
            "angle_deg": angle,
        }

    # ---- influence -------------------------------------------------------

    def influence_work(job_id: str, run_id: str, method: str,
                       granularity: str, top_k: int) -> str:
        directory = run_dir(run_id)
        dataset_id = json.loads((directory / "run.json").read_text())["dataset_id"]
        cube = dataset_cube(dataset_id)
        bag_set = dataset_bags(dataset_id)
        baseline = load_result(directory / "result")
        pt, re = surrogates(cube, baseline)
        n = cube.rows * cube.cols

        if granularity == "pixel":
            pool = bag_set.pixel_ids
            by_pt = pool[np.lexsort((pool, -pt[pool]))]
            if method == "exact":
                chosen = by_pt[:top_k]
                records = []
                for done, pixel in enumerate(chosen):
                    records.extend(
                        exact_influence_sweep(
                            cube, bag_set, baseline, [[int(pixel)]],
                            unit_ids=[int(pixel)],
                        )
                    )
                    registry.set_progress(job_id, (done + 1) / chosen.size)
                records.sort(key=lambda r: (-r.exact, r.unit_id))
                heat = np.zeros(n)
                for record in records:
                    heat[record.unit_id] = record.exact
            else:
                order = by_pt if method == "pt" else pool[np.lexsort((pool, -re[pool]))]
                records = [
                    InfluenceRecord(int(p), None, float(pt[p]), float(re[p]))
                    for p in order[:top_k]
                ]
                heat = pt.copy() if method == "pt" else re.copy()
        else:
            segments_path = datasets_root / dataset_id / "segments.hsim"
            spmap = load_segments(segments_path)
            metrics = region_metrics(spmap, pt, re)
            key = {"pt": "max_pt", "re": "max_re", "exact": "max_pt"}[method]
            base_records = [
                InfluenceRecord(
                    s, None,
                    float(metrics.max_pt[s]), float(metrics.max_re[s]),
                    metrics=metrics.for_segment(s),
                )
                for s in range(spmap.n_segments)
            ]
            ranked = rank_units(base_records, key)[:top_k]
            if method == "exact":
                by_id = {}
                for done, seg_id in enumerate(ranked):
                    record = exact_influence_sweep(
                        cube, bag_set, baseline, [spmap.pixels_of(seg_id)],
                        unit_ids=[seg_id],
                    )[0]
                    by_id[seg_id] = InfluenceRecord(
                        seg_id, record.exact, record.surrogate_pt,
                        record.surrogate_re, metrics=metrics.for_segment(seg_id),
                    )
                    registry.set_progress(job_id, (done + 1) / len(ranked))
                records = sorted(by_id.values(), key=lambda r: (-r.exact, r.unit_id))
                scores = np.zeros(spmap.n_segments)
                for record in records:
                    scores[record.unit_id] = record.exact
            else:
                keep = {r.unit_id: r for r in base_records}
                records = [keep[s] for s in ranked]
                scores = np.asarray(
                    getattr(metrics, key), dtype=np.float64
                )
            heat = scores[spmap.segments]

        out_dir = registry.root / job_id
        doc = {
            "method": method,
            "granularity": granularity,
            "top_k": top_k,
            "ranking": [r.unit_id for r in records],
            "records": [
                {
                    "unit_id": r.unit_id,
                    "exact": r.exact,
                    "pt": r.surrogate_pt,
                    "re": r.surrogate_re,
                    "metrics": r.metrics,
                }
                for r in records
            ],
        }
        _atomic_write(out_dir / "result.json",
                      (json.dumps(doc, sort_keys=True) + "\n").encode())
        save_cube(_single_band(cube.rows, cube.cols, heat), out_dir / "heatmap.hsic")
        return f"jobs/{job_id}"

    @app.post("/runs/{run_id}/influence")
    async def post_influence(run_id: str, request: Request):
        directory = run_dir(run_id)
        dataset_id = json.loads((directory / "run.json").read_text())["dataset_id"]
        dataset_bags(dataset_id)
        payload = json_body(await request.body())
        method = payload.get("method")
        granularity = payload.get("granularity", "pixel")
        top_k = payload.get("top_k", DEFAULT_TOP_K)
        problems = []
        if method not in ("pt", "re", "exact"):
            problems.append(f"method must be pt, re, or exact, got {method!r}")
        if granularity not in ("pixel", "superpixel"):
            problems.append(f"granularity must be pixel or superpixel, got {granularity!r}")
        if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
            problems.append(f"top_k must be a positive integer, got {top_k!r}")
        if problems:
            raise HTTPException(
                422, {"message": "influence request fails validation",
                      "violations": problems},
            )
        if granularity == "superpixel" and not (
            datasets_root / dataset_id / "segments.hsim"
        ).exists():
            raise HTTPException(
                409, f"dataset {dataset_id!r} has no superpixel map yet"
            )
        job = registry.create("influence")
        return submit(
            job, lambda: influence_work(job.id, run_id, method, granularity, top_k)
        )

    # ---- jobs ------------------------------------------------------------

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        job = registry.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        return job.to_dict()

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: str):
        job = registry.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        path = registry.root / job_id / "result.json"
        if job.state != "done" or not path.exists():
            raise HTTPException(404, f"job {job_id!r} has no result payload")
        return json.loads(path.read_text())

    @app.get("/jobs/{job_id}/heatmap")
    def job_heatmap(job_id: str):
        path = registry.root / job_id / "heatmap.hsic"
        if registry.get(job_id) is None or not path.exists():
            raise HTTPException(404, f"job {job_id!r} has no heatmap")
        return Response(content=path.read_bytes(), media_type="application/octet-stream")

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    return app
