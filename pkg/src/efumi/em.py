"""Multiple-instance endmember estimation by expectation-maximization.

Bag labels say only whether a region contains any target pixel. The
estimator treats per-pixel target presence as a latent variable: the
E-step scores each positive-bag pixel by how much adding the target
endmember improves its reconstruction, and the M-step refits proportions
and endmembers under those scores. Negative-bag pixels are known to hold
no target, so their presence weight is exactly zero throughout.

The fitted objective is

    sum_i  z_i ||x_i - E p_i||^2  +  (1 - z_i) ||x_i - E_bg p0_i||^2
         +  lambda_mean * sum_cols ||e - mu||^2
         +  lambda_sparse * sum_i sum_{k>=1} p_ik

over bagged pixels, with every endmember kept at unit squared norm by
rescaling after each update. Because the presence weights come from a
softmax over residuals, a full E/M sweep is not mathematically guaranteed
to lower this objective, so the driver is guarded: endmember updates and
prunes that would raise the cost are rejected, and the run stops at the
first non-improving iteration. The recorded cost trace is therefore
monotone non-increasing by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from .core import BagSet, EndmemberSet, HsiCube, ProportionMatrix, global_mean
from .io import load_cube, save_cube
from .rng import Rng
from .unmix import residuals, solve_simplex_lsq

__all__ = [
    "EfumiConfig",
    "EfumiResult",
    "VcaInit",
    "vca_init",
    "zweight_from_residuals",
    "e_step",
    "m_step",
    "cost",
    "prune",
    "run_efumi",
    "save_result",
    "load_result",
]


@dataclass(frozen=True)
class EfumiConfig:
    """Estimator settings.

    ``beta`` (E-step inverse temperature) and ``lambda_sparse`` may be
    None, meaning: set them from the data scale at the start of a run
    (beta = 5 / mean initial residual, lambda_sparse = 1e-3 * the same
    mean). Results always carry the resolved numbers.
    """

    m_init: int = 5
    beta: Optional[float] = None
    lambda_sparse: Optional[float] = None
    lambda_mean: float = 1e-3
    prune_threshold: float = 1e-4
    max_iters: int = 200
    rel_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.m_init < 1:
            raise ValueError("m_init must be >= 1")
        if self.beta is not None and not self.beta > 0.0:
            raise ValueError("beta must be > 0")
        if self.lambda_sparse is not None and self.lambda_sparse < 0.0:
            raise ValueError("lambda_sparse must be >= 0")
        if self.lambda_mean < 0.0:
            raise ValueError("lambda_mean must be >= 0")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ValueError("prune_threshold must be in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0.0:
            raise ValueError("rel_tol must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "EfumiConfig":
        return EfumiConfig(**doc)

    def _require_resolved(self) -> None:
        if self.lambda_sparse is None:
            raise ValueError("lambda_sparse is unresolved; pass a concrete value")


@dataclass(frozen=True)
class VcaInit:
    """Initialization spectra picked from the data.

    ``indices[j]`` is the pixel that became column j, or -1 where the data
    ran out of rank and a perturbed-mean column was substituted
    (``used_fallback`` is then set).
    """

    columns: np.ndarray
    indices: np.ndarray
    used_fallback: bool

    def __post_init__(self):
        cols = np.ascontiguousarray(np.asarray(self.columns, dtype=np.float64))
        idx = np.asarray(self.indices, dtype=np.intp)
        cols.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class EfumiResult:
    """Everything a finished run knows.

    ``zweights`` holds the per-pixel posterior target-presence weight,
    exactly 0 for negative-bag and unlabeled pixels. ``config`` is the
    resolved configuration the run actually used.
    """

    endmembers: EndmemberSet
    proportions: ProportionMatrix
    zweights: np.ndarray
    cost_trace: tuple[float, ...]
    iterations: int
    converged: bool
    config: EfumiConfig

    def __post_init__(self):
        z = np.ascontiguousarray(np.asarray(self.zweights, dtype=np.float64))
        if z.min(initial=0.0) < 0.0 or z.max(initial=0.0) > 1.0:
            raise ValueError("zweights must lie in [0, 1]")
        z.setflags(write=False)
        object.__setattr__(self, "zweights", z)
        object.__setattr__(self, "cost_trace", tuple(float(c) for c in self.cost_trace))


def _as_generator(rng: Union[Rng, np.random.Generator, int]) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return Rng(int(rng)).child("vca").generator


def vca_init(
    pixels: Union[HsiCube, np.ndarray],
    count: int,
    rng: Union[Rng, np.random.Generator, int],
) -> VcaInit:
    """Pick ``count`` extreme spectra by iterative orthogonal projection.

    Each round draws a random direction, removes its component along the
    already-picked spectra, and takes the pixel with the largest absolute
    projection onto what is left. Picked spectra are returned rescaled to
    unit squared norm. If the data rank is exhausted before ``count``
    picks, the remaining columns are perturbed copies of the mean and the
    result is flagged.
    """
    Y = pixels.data if isinstance(pixels, HsiCube) else np.asarray(pixels, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError("pixels must be an (N, D) array")
    n, d = Y.shape
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > min(n, d):
        raise ValueError(f"count {count} exceeds min(N, D) = {min(n, d)}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("non-finite input")
    gen = _as_generator(rng)

    scale = float(np.abs(Y).max(initial=0.0))
    basis = np.empty((d, 0))
    indices: list[int] = []
    exhausted = scale == 0.0
    while len(indices) < count and not exhausted:
        w = gen.normal(size=d)
        f = w - basis @ (basis.T @ w)
        norm = np.linalg.norm(f)
        if norm < 1e-12 * max(1.0, np.linalg.norm(w)):
            exhausted = True
            break
        f /= norm
        proj = Y @ f
        k = int(np.abs(proj).argmax())
        if abs(proj[k]) <= 1e-10 * max(1.0, scale) or k in indices:
            exhausted = True
            break
        indices.append(k)
        # Extend the orthonormal basis with the picked spectrum.
        q = Y[k] - basis @ (basis.T @ Y[k])
        basis = np.column_stack([basis, q / np.linalg.norm(q)])

    chosen = [Y[k].copy() for k in indices]
    used_fallback = len(chosen) < count
    if used_fallback:
        mu = Y.mean(axis=0)
        jitter = max(float(np.linalg.norm(mu)), 1.0)
        while len(chosen) < count:
            chosen.append(mu + 0.01 * jitter * gen.normal(size=d))
    columns = np.column_stack(chosen)
    norms = np.linalg.norm(columns, axis=0)
    if norms.min() <= 0.0:
        raise ValueError("degenerate zero-norm spectrum selected")
    index_arr = np.asarray(indices + [-1] * (count - len(indices)), dtype=np.intp)
    return VcaInit(columns=columns / norms, indices=index_arr, used_fallback=used_fallback)


def _partition(bags: BagSet, n_pixels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(positive, negative, unlabeled) pixel indices."""
    pos = bags.positive_pixels()
    neg = bags.negative_pixels()
    labeled = np.zeros(n_pixels, dtype=bool)
    labeled[pos] = True
    labeled[neg] = True
    return pos, neg, np.nonzero(~labeled)[0]


def _background_residuals(
    X: np.ndarray, endmembers: EndmemberSet, warm: Optional[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Background-only FCLS solve and residuals; no-background case falls
    back to the empty reconstruction ||x||^2."""
    if endmembers.m == 0:
        return np.zeros((X.shape[0], 0)), np.einsum("nd,nd->n", X, X)
    p0 = solve_simplex_lsq(X, endmembers.background, warm_start=warm)
    return p0, residuals(X, endmembers.background, p0)


def zweight_from_residuals(r_full: np.ndarray, r_background: np.ndarray, beta: float) -> np.ndarray:
    """Posterior presence weight exp(-b r1) / (exp(-b r1) + exp(-b r0)),
    computed in the numerically stable sigmoid form."""
    return expit(beta * (np.asarray(r_background) - np.asarray(r_full)))


def e_step(
    cube: HsiCube,
    bags: BagSet,
    endmembers: EndmemberSet,
    proportions: ProportionMatrix,
    beta: float,
) -> np.ndarray:
    """Posterior target-presence weight per pixel.

    Positive-bag pixels are scored by comparing their best reconstruction
    with and without the target endmember; negative-bag and unlabeled
    pixels get exactly 0. ``proportions`` only warm-starts the solves.
    """
    if not beta > 0.0:
        raise ValueError("beta must be > 0")
    pos, _, _ = _partition(bags, cube.n_pixels)
    z = np.zeros(cube.n_pixels)
    if pos.size:
        X = cube.data[pos]
        warm = proportions.values[pos]
        p1 = solve_simplex_lsq(X, endmembers.matrix, warm_start=warm)
        r1 = residuals(X, endmembers.matrix, p1)
        _, r0 = _background_residuals(X, endmembers, warm[:, 1:])
        z[pos] = zweight_from_residuals(r1, r0, beta)
    return z


def _sparsity_tilt(k: int, lambda_sparse: float) -> np.ndarray:
    # l1 on non-negative proportions is linear: gradient lambda on the
    # background columns, 0 on the target column.
    tilt = np.full(k, lambda_sparse)
    tilt[0] = 0.0
    return tilt


def m_step(
    cube: HsiCube,
    bags: BagSet,
    endmembers: EndmemberSet,
    proportions: ProportionMatrix,
    zweights: np.ndarray,
    config: EfumiConfig,
) -> tuple[EndmemberSet, ProportionMatrix]:
    """One maximization sweep: refit endmembers, then proportions.

    The endmember normal equations use the incoming proportion rows —
    the stored target-allowed row of each positive pixel (weight
    zweight), its background-only completion (weight 1 - zweight), and
    the stored background row of each negative pixel; unlabeled pixels
    never enter them. New columns are rescaled to unit squared norm, and
    the proportion refit that follows, made against the rescaled
    columns, absorbs the compensating inverse scale. Refit rows store
    the target-allowed solve for positive-bag (and unlabeled) pixels and
    the background-only solve for negative-bag pixels.
    """
    config._require_resolved()
    lam_s = float(config.lambda_sparse)
    lam_m = float(config.lambda_mean)
    pos, neg, unlabeled = _partition(bags, cube.n_pixels)
    if neg.size and endmembers.m == 0:
        raise ValueError("negative bags require at least one background endmember")
    X = cube.data
    k = endmembers.m + 1
    E = endmembers.matrix
    old = proportions.values
    z = np.asarray(zweights, dtype=np.float64)

    p0_pos, _ = _background_residuals(X[pos], endmembers, old[pos, 1:])

    # Weighted normal equations over the two latent states of every
    # bagged pixel: E (sum w p p^T + lam I) = sum w x p^T + lam mu 1^T.
    stack_p = np.vstack([old[pos], _pad_target(p0_pos), old[neg]])
    stack_x = np.vstack([X[pos], X[pos], X[neg]])
    stack_w = np.concatenate([z[pos], 1.0 - z[pos], np.ones(neg.size)])
    weighted = stack_p * stack_w[:, None]
    lhs = stack_p.T @ weighted + lam_m * np.eye(k)
    mu = global_mean(cube, subset=np.concatenate([pos, neg]))
    rhs = stack_x.T @ weighted + lam_m * np.outer(mu, np.ones(k))
    try:
        e_new = np.linalg.solve(lhs.T, rhs.T).T
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "singular endmember normal equations; set lambda_mean > 0"
        ) from None
    norms = np.linalg.norm(e_new, axis=0)
    degenerate = norms < 1e-12
    if degenerate.any():
        # A column no pixel uses and no anchor reaches: keep its old value.
        e_new[:, degenerate] = E[:, degenerate]
        norms[degenerate] = 1.0
    ems_new = EndmemberSet.from_matrix(e_new / norms)
    return ems_new, _refit_proportions(X, pos, neg, unlabeled, ems_new, old, lam_s)


def _refit_proportions(
    X: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    unlabeled: np.ndarray,
    ems: EndmemberSet,
    old: np.ndarray,
    lam_s: float,
) -> ProportionMatrix:
    """Per-pixel solves against ``ems`` under the row-storage convention."""
    k = ems.m + 1
    new_p = np.empty((X.shape[0], k))
    free = np.concatenate([pos, unlabeled])
    if free.size:
        new_p[free] = solve_simplex_lsq(
            X[free], ems.matrix, tilt=_sparsity_tilt(k, lam_s), warm_start=old[free]
        )
    if neg.size:
        p0_neg, _ = _background_residuals(X[neg], ems, old[neg, 1:])
        new_p[neg, 0] = 0.0
        new_p[neg, 1:] = p0_neg
    return ProportionMatrix(new_p)


def _pad_target(p_background: np.ndarray) -> np.ndarray:
    """Background-state rows lifted to full width with target column 0."""
    return np.hstack([np.zeros((p_background.shape[0], 1)), p_background])


def cost(
    cube: HsiCube,
    bags: BagSet,
    endmembers: EndmemberSet,
    proportions: ProportionMatrix,
    zweights: np.ndarray,
    config: EfumiConfig,
) -> float:
    """The objective the run drives down, over bagged pixels only.

    The z = 1 state of a positive pixel and the whole of a negative pixel
    are scored with their stored proportion rows; the z = 0 completion of
    a positive pixel re-solves background-only proportions, mirroring the
    E-step residual. The sparsity term reads the stored rows only.
    """
    config._require_resolved()
    pos, neg, _ = _partition(bags, cube.n_pixels)
    X = cube.data
    P = proportions.values
    z = np.asarray(zweights, dtype=np.float64)
    E = endmembers.matrix

    data_term = 0.0
    if pos.size:
        r1 = residuals(X[pos], E, P[pos])
        _, r0 = _background_residuals(X[pos], endmembers, P[pos, 1:])
        data_term += float(z[pos] @ r1 + (1.0 - z[pos]) @ r0)
    if neg.size:
        data_term += float(residuals(X[neg], E, P[neg]).sum())

    mu = global_mean(cube, subset=np.concatenate([pos, neg]))
    mean_term = float(config.lambda_mean * ((E - mu[:, None]) ** 2).sum())
    bagged = np.concatenate([pos, neg])
    sparse_term = float(config.lambda_sparse * P[bagged, 1:].sum())
    return data_term + mean_term + sparse_term


def prune(
    endmembers: EndmemberSet, proportions: ProportionMatrix, threshold: float
) -> tuple[EndmemberSet, ProportionMatrix]:
    """Drop background endmembers no pixel uses above ``threshold``.

    The target column is never pruned, and at least one background column
    always survives. Surviving rows are renormalized to the simplex.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must be in [0, 1)")
    if endmembers.m == 0:
        return endmembers, proportions
    peak = proportions.values[:, 1:].max(axis=0)
    drop = peak < threshold
    if drop.all():
        drop[int(peak.argmax())] = False
    if not drop.any():
        return endmembers, proportions
    keep = np.concatenate([[True], ~drop])
    vals = proportions.values[:, keep]
    sums = vals.sum(axis=1)
    starved = sums <= 0.0
    if starved.any():
        vals = vals.copy()
        vals[starved] = 1.0 / vals.shape[1]
        sums[starved] = 1.0
    pruned = EndmemberSet(target=endmembers.target, background=endmembers.background[:, ~drop])
    return pruned, ProportionMatrix(vals / sums[:, None])


def _label_aware_target_column(
    X_labeled: np.ndarray, labels: np.ndarray, columns: np.ndarray
) -> np.ndarray:
    """Reorder initialization columns so the most positive-bag-specific
    one sits in the target slot."""
    p = solve_simplex_lsq(X_labeled, columns)
    score = p[labels == 1].mean(axis=0) - p[labels == 0].mean(axis=0)
    lead = int(score.argmax())
    order = [lead] + [j for j in range(columns.shape[1]) if j != lead]
    return columns[:, order]


def run_efumi(
    cube: HsiCube,
    bags: BagSet,
    config: EfumiConfig = EfumiConfig(),
    init: Optional[tuple[EndmemberSet, ProportionMatrix]] = None,
) -> EfumiResult:
    """Fit target and background endmembers to a bag-labeled scene.

    Alternates presence-weight updates, proportion/endmember refits and
    background pruning until the cost stalls (relative change below
    ``rel_tol``), stops improving, or ``max_iters`` sweeps pass. Updates
    that would raise the cost are rejected, so the returned trace is
    monotone non-increasing. Deterministic for fixed inputs and seed.
    """
    if not np.all(np.isfinite(cube.data)):
        raise ValueError("cube contains non-finite values")
    if not bags.has_both_labels():
        raise ValueError("need at least one positive and one negative bag")
    bags.check_bounds(cube.n_pixels)
    pos, neg, unlabeled = _partition(bags, cube.n_pixels)
    labeled = np.concatenate([pos, neg])

    if init is not None:
        endmembers, proportions = init
        if proportions.values.shape != (cube.n_pixels, endmembers.m + 1):
            raise ValueError("init proportions do not match cube and endmembers")
    else:
        picked = vca_init(cube.data[labeled], config.m_init + 1, Rng(config.seed).child("vca"))
        columns = _label_aware_target_column(
            cube.data[labeled], bags.labels_for(labeled), picked.columns
        )
        endmembers = EndmemberSet.from_matrix(columns)
        proportions = ProportionMatrix(
            np.full((cube.n_pixels, config.m_init + 1), 1.0 / (config.m_init + 1))
        )

    # Data-scale resolution of the free knobs, from the initial fit.
    p_init = solve_simplex_lsq(
        cube.data[labeled], endmembers.matrix, warm_start=proportions.values[labeled]
    )
    mean_r = max(float(residuals(cube.data[labeled], endmembers.matrix, p_init).mean()), 1e-12)
    resolved = replace(
        config,
        beta=config.beta if config.beta is not None else 5.0 / mean_r,
        lambda_sparse=config.lambda_sparse
        if config.lambda_sparse is not None
        else 1e-3 * mean_r,
    )
    if init is None:
        # Replace the uniform rows with actual solves before the first
        # endmember update, which would otherwise see only rank-one
        # information and collapse the picked columns.
        proportions = _refit_proportions(
            cube.data, pos, neg, unlabeled, endmembers,
            proportions.values, resolved.lambda_sparse,
        )

    zweights = np.zeros(cube.n_pixels)
    trace: list[float] = []
    converged = False
    for _ in range(config.max_iters):
        snapshot = (endmembers, proportions, zweights)
        zweights = e_step(cube, bags, endmembers, proportions, resolved.beta)
        e_new, p_new = m_step(cube, bags, endmembers, proportions, zweights, resolved)
        cost_new = cost(cube, bags, e_new, p_new, zweights, resolved)
        e_pruned, p_pruned = prune(e_new, p_new, resolved.prune_threshold)
        if e_pruned.m < e_new.m:
            cost_pruned = cost(cube, bags, e_pruned, p_pruned, zweights, resolved)
            if cost_pruned <= cost_new:
                e_new, p_new, cost_new = e_pruned, p_pruned, cost_pruned
        if trace and cost_new > trace[-1]:
            # The presence-weight update stopped paying for itself.
            endmembers, proportions, zweights = snapshot
            converged = True
            break
        endmembers, proportions = e_new, p_new
        trace.append(cost_new)
        if len(trace) >= 2:
            prev = trace[-2]
            if abs(trace[-1] - prev) / max(prev, 1e-12) < config.rel_tol:
                converged = True
                break
    return EfumiResult(
        endmembers=endmembers,
        proportions=proportions,
        zweights=zweights,
        cost_trace=tuple(trace),
        iterations=len(trace),
        converged=converged,
        config=resolved,
    )


def save_result(result: EfumiResult, directory) -> None:
    """Write a result as JSON plus float containers, byte-reproducibly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    E = result.endmembers.matrix
    save_cube(
        HsiCube(rows=1, cols=E.shape[1], bands=E.shape[0], data=E.T),
        directory / "endmembers.hsic",
    )
    P = result.proportions.values
    save_cube(
        HsiCube(rows=P.shape[0], cols=1, bands=P.shape[1], data=P),
        directory / "proportions.hsic",
    )
    doc = {
        "config": result.config.to_dict(),
        "zweights": [float(v) for v in result.zweights],
        "cost_trace": list(result.cost_trace),
        "iterations": result.iterations,
        "converged": result.converged,
    }
    (directory / "result.json").write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":"))
    )


def load_result(directory) -> EfumiResult:
    directory = Path(directory)
    doc = json.loads((directory / "result.json").read_text())
    E = load_cube(directory / "endmembers.hsic").data.T
    P = load_cube(directory / "proportions.hsic").data
    return EfumiResult(
        endmembers=EndmemberSet.from_matrix(E),
        proportions=ProportionMatrix(P),
        zweights=np.asarray(doc["zweights"], dtype=np.float64),
        cost_trace=tuple(doc["cost_trace"]),
        iterations=int(doc["iterations"]),
        converged=bool(doc["converged"]),
        config=EfumiConfig.from_dict(doc["config"]),
    )
