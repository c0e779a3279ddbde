"""Fully-constrained least-squares unmixing.

Estimates, for each pixel x, the proportion vector p on the probability
simplex (p >= 0, sum p = 1) minimizing ||x - E p||^2, optionally plus a
linear term tilt . p. The solver is an accelerated simplex-projected
gradient method run over all pixels at once; it is branch-free, robust to
rank-deficient endmember matrices, and its KKT conditions are cheap to
verify after the fact.

Shapes follow core: X is (N, D) pixel-major, E is D x K with K = M+1 and
the target in column 0, P is (N, K).
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from .core import EndmemberSet, HsiCube, ProportionMatrix

__all__ = [
    "project_simplex_rows",
    "solve_simplex_lsq",
    "fcls",
    "unmix_all",
    "residuals",
    "kkt_residual",
]

#: Iteration stops once every row's projected-gradient norm is below this.
PG_TOL = 1e-9
MAX_ITERS = 10_000


def project_simplex_rows(values: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex.

    Sort-based: find per row the largest threshold tau such that
    sum(max(v - tau, 0)) = 1, then clip.
    """
    v = np.asarray(values, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    n, k = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    j = np.arange(1, k + 1)
    cond = u - css / j > 0
    rho = k - np.argmax(cond[:, ::-1], axis=1) - 1
    tau = css[np.arange(n), rho] / (rho + 1)
    out = np.maximum(v - tau[:, None], 0.0)
    return out[0] if squeeze else out


def _as_pixels(x: Union[HsiCube, np.ndarray]) -> np.ndarray:
    if isinstance(x, HsiCube):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def _as_matrix(endmembers: Union[EndmemberSet, np.ndarray]) -> np.ndarray:
    if isinstance(endmembers, EndmemberSet):
        return endmembers.matrix
    e = np.asarray(endmembers, dtype=np.float64)
    return e[:, None] if e.ndim == 1 else e


def solve_simplex_lsq(
    x: Union[HsiCube, np.ndarray],
    endmembers: Union[EndmemberSet, np.ndarray],
    tilt: Optional[np.ndarray] = None,
    warm_start: Optional[np.ndarray] = None,
    tol: float = PG_TOL,
    max_iters: int = MAX_ITERS,
) -> np.ndarray:
    """Minimize ||x_i - E p_i||^2 + tilt . p_i over the simplex, all rows.

    ``tilt`` is an optional length-K linear penalty; note that adding a
    constant to every tilt entry does not change the solution, so only
    tilt differences matter on the simplex. ``warm_start`` rows are
    projected onto the simplex before use.
    """
    X = _as_pixels(x)
    E = _as_matrix(endmembers)
    n, d = X.shape
    k = E.shape[1]
    if E.shape[0] != d:
        raise ValueError(f"endmembers have {E.shape[0]} bands, pixels have {d}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(E))):
        raise ValueError("non-finite input")
    if k == 1:
        return np.ones((n, 1))

    gram = E.T @ E
    cross = X @ E
    tilt_row = np.zeros(k) if tilt is None else np.asarray(tilt, dtype=np.float64)
    lipschitz = 2.0 * float(np.linalg.eigvalsh(gram)[-1])
    if lipschitz <= 0.0:
        return np.full((n, k), 1.0 / k)
    step = 1.0 / lipschitz

    if warm_start is None:
        out = np.full((n, k), 1.0 / k)
    else:
        out = project_simplex_rows(np.asarray(warm_start, dtype=np.float64))
        if out.shape != (n, k):
            raise ValueError(f"warm start is {out.shape}, expected {(n, k)}")

    # Rows converge at very different speeds; finished rows are frozen and
    # removed from the working set so stragglers do not cost full batches.
    active = np.arange(n)
    p = out.copy()
    p_prev = p
    t = np.ones(n)
    b = cross

    def grad(q: np.ndarray) -> np.ndarray:
        return 2.0 * (q @ gram - b) + tilt_row

    def row_objective(q: np.ndarray, bq: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nk->n", q, q @ gram - 2.0 * bq) + q @ tilt_row

    for iteration in range(max_iters):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        weight = ((t - 1.0) / t_next)[:, None]
        y = p + weight * (p - p_prev)
        p_next = project_simplex_rows(y - step * grad(y))
        # Per-row restart when momentum points uphill.
        uphill = np.einsum("nk,nk->n", y - p_next, p_next - p) > 0.0
        t_next[uphill] = 1.0
        p_prev, p, t = p, p_next, t_next
        if iteration % 5 == 4 or iteration == max_iters - 1:
            polished = _polish_support(p, gram, b, tilt_row)
            if polished is not None:
                better = row_objective(polished, b) < row_objective(p, b)
                if better.any():
                    p = np.where(better[:, None], polished, p)
                    p_prev = np.where(better[:, None], polished, p_prev)
                    t[better] = 1.0
            pg = (p - project_simplex_rows(p - step * grad(p))) / step
            done = np.abs(pg).max(axis=1) <= tol
            if done.any():
                out[active[done]] = p[done]
                keep = ~done
                if not keep.any():
                    return out
                active = active[keep]
                p, p_prev, t, b = p[keep], p_prev[keep], t[keep], b[keep]
    out[active] = p
    return out


def _polish_support(
    p: np.ndarray, gram: np.ndarray, b: np.ndarray, tilt_row: np.ndarray
) -> Optional[np.ndarray]:
    """Exact solve of the sum-to-one-constrained problem on each row's
    current support, batched per support pattern.

    Accelerates the gradient iteration: once projection has identified the
    right support, the stationarity system 2 G_SS p + tilt_S + nu 1 = 2 b_S,
    1.p = 1 gives the minimizer in one linear solve. Rows whose polished
    value leaves the support (negative entries) or whose system is singular
    keep their iterate; the caller only accepts rows that improve.
    """
    n, k = p.shape
    supports = p > 0.0
    out = None
    # np.unique on rows groups pixels sharing a support pattern.
    patterns, inverse = np.unique(supports, axis=0, return_inverse=True)
    for g, pattern in enumerate(patterns):
        size = int(pattern.sum())
        if size == 0:
            continue
        rows = np.nonzero(inverse == g)[0]
        cols = np.nonzero(pattern)[0]
        kkt = np.zeros((size + 1, size + 1))
        kkt[:size, :size] = 2.0 * gram[np.ix_(cols, cols)]
        kkt[size, :size] = 1.0
        kkt[:size, size] = 1.0
        rhs = np.empty((size + 1, rows.size))
        rhs[:size] = 2.0 * b[np.ix_(rows, cols)].T - tilt_row[cols][:, None]
        rhs[size] = 1.0
        try:
            solution = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        values = solution[:size].T
        feasible = values.min(axis=1) >= 0.0
        if not feasible.any():
            continue
        if out is None:
            out = p.copy()
        good = rows[feasible]
        block = np.zeros((good.size, k))
        block[:, cols] = values[feasible]
        out[good] = block
    return out


def fcls(x: np.ndarray, endmembers: Union[EndmemberSet, np.ndarray]) -> np.ndarray:
    """Fully-constrained least-squares proportions for one pixel."""
    return solve_simplex_lsq(np.asarray(x, dtype=np.float64)[None, :], endmembers)[0]


def unmix_all(cube: HsiCube, endmembers: EndmemberSet) -> ProportionMatrix:
    """FCLS applied to every pixel of the cube."""
    return ProportionMatrix(solve_simplex_lsq(cube, endmembers))


def residuals(
    x: Union[HsiCube, np.ndarray],
    endmembers: Union[EndmemberSet, np.ndarray],
    proportions: Union[ProportionMatrix, np.ndarray],
) -> np.ndarray:
    """Squared reconstruction error ||x_i - E p_i||^2 per pixel."""
    X = _as_pixels(x)
    E = _as_matrix(endmembers)
    P = proportions.values if isinstance(proportions, ProportionMatrix) else np.asarray(proportions)
    if P.ndim == 1:
        P = P[None, :]
    if P.shape != (X.shape[0], E.shape[1]):
        raise ValueError(f"proportions are {P.shape}, expected {(X.shape[0], E.shape[1])}")
    diff = X - P @ E.T
    return np.einsum("nd,nd->n", diff, diff)


def kkt_residual(
    x: Union[HsiCube, np.ndarray],
    endmembers: Union[EndmemberSet, np.ndarray],
    proportions: np.ndarray,
    tilt: Optional[np.ndarray] = None,
    support_tol: float = 1e-12,
) -> float:
    """Worst first-order optimality violation over all rows.

    At a simplex minimum the gradient entries on the support all equal a
    common multiplier, and off-support entries are >= it. Returns the
    largest deviation from that picture; small values certify optimality.
    """
    X = _as_pixels(x)
    E = _as_matrix(endmembers)
    P = np.asarray(proportions, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    tilt_row = np.zeros(E.shape[1]) if tilt is None else np.asarray(tilt, dtype=np.float64)
    g = 2.0 * (P @ (E.T @ E) - X @ E) + tilt_row
    worst = 0.0
    for i in range(P.shape[0]):
        support = P[i] > support_tol
        nu = g[i, support].mean()
        eq = float(np.abs(g[i, support] - nu).max(initial=0.0))
        ineq = float(np.maximum(nu - g[i, ~support], 0.0).max(initial=0.0))
        worst = max(worst, eq, ineq)
    return worst
