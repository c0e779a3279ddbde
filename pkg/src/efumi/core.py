"""Core domain types for the workbench.

Shape conventions
-----------------
- Cube data is pixel-major: an (N, D) float64 array, N = rows*cols pixels
  in row-major image order, D spectral bands. Each row is one spectrum.
- Endmembers form a D x (M+1) matrix; column 0 is always the target.
- Proportion matrices are (N, M+1); column 0 is the target proportion.

All types are immutable after construction and safe to share between
threads; "mutation" means building a new value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "HsiCube",
    "Bag",
    "BagSet",
    "EndmemberSet",
    "ProportionMatrix",
    "Violation",
    "validate_cube",
    "global_mean",
]

#: |row sum - 1| above this is treated as a solver bug, not numerical dust.
ROW_SUM_TOL = 1e-8
#: Entries may undershoot zero by at most this before clamping is refused.
NEGATIVITY_TOL = 1e-10
#: Relative tolerance on ||e||^2 == 1 for endmember columns.
UNIT_NORM_RTOL = 1e-9


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by a validator."""

    field: str
    index: Optional[tuple] = None
    message: str = ""

    def __str__(self) -> str:
        where = f"[{','.join(map(str, self.index))}]" if self.index is not None else ""
        return f"{self.field}{where}: {self.message}"


@dataclass(frozen=True)
class HsiCube:
    """A rows x cols x bands hyperspectral image, pixel-major.

    ``data`` has shape (rows*cols, bands), float64. ``wavelengths`` is an
    optional strictly increasing list of band centers in nm.
    """

    rows: int
    cols: int
    bands: int
    data: np.ndarray
    wavelengths: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.bands <= 0:
            raise ValueError("rows, cols and bands must be positive")
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != self.rows * self.cols * self.bands:
            raise ValueError(
                f"data has {data.size} values, expected "
                f"{self.rows}*{self.cols}*{self.bands}"
            )
        data = np.ascontiguousarray(data.reshape(self.rows * self.cols, self.bands))
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64).reshape(-1)
            if wl.size != self.bands:
                raise ValueError(
                    f"wavelengths has length {wl.size}, expected {self.bands}"
                )
            wl.setflags(write=False)
            object.__setattr__(self, "wavelengths", wl)

    @property
    def n_pixels(self) -> int:
        return self.rows * self.cols

    def pixel(self, index: int) -> np.ndarray:
        """Spectrum of the pixel at flat row-major ``index``."""
        return self.data[index]

    def image(self) -> np.ndarray:
        """View of the data as (rows, cols, bands)."""
        return self.data.reshape(self.rows, self.cols, self.bands)


def validate_cube(cube: HsiCube) -> list[Violation]:
    """Check every HsiCube invariant, returning one entry per violation.

    An empty report means the cube is well formed. Non-finite values are
    reported per (pixel, band); wavelength problems per band index.
    """
    report: list[Violation] = []
    bad = ~np.isfinite(cube.data)
    if bad.any():
        for pix, band in zip(*np.nonzero(bad)):
            report.append(
                Violation("data", (int(pix), int(band)), "non-finite value")
            )
    if cube.wavelengths is not None:
        wl = cube.wavelengths
        if not np.all(np.isfinite(wl)):
            for (i,) in zip(*np.nonzero(~np.isfinite(wl))):
                report.append(Violation("wavelengths", (int(i),), "non-finite value"))
        diffs = np.diff(wl)
        for (i,) in zip(*np.nonzero(diffs <= 0)):
            report.append(
                Violation(
                    "wavelengths",
                    (int(i), int(i) + 1),
                    "not strictly increasing",
                )
            )
    return report


def global_mean(cube: HsiCube, subset: Optional[Sequence[int]] = None) -> np.ndarray:
    """Arithmetic mean spectrum over all pixels, or over ``subset`` indices."""
    if subset is None:
        return cube.data.mean(axis=0)
    idx = np.asarray(subset, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("subset must be non-empty")
    if idx.min() < 0 or idx.max() >= cube.n_pixels:
        raise ValueError("subset index out of range")
    return cube.data[idx].mean(axis=0)


@dataclass(frozen=True)
class Bag:
    """A labeled multi-set of pixel indices. label 1 = positive, 0 = negative."""

    bag_id: str
    label: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.bag_id!r}: label must be 0 or 1")
        px = np.asarray(self.pixels, dtype=np.intp).reshape(-1)
        if px.size == 0:
            raise ValueError(f"bag {self.bag_id!r} is empty")
        if np.unique(px).size != px.size:
            raise ValueError(f"bag {self.bag_id!r} repeats a pixel index")
        if px.min() < 0:
            raise ValueError(f"bag {self.bag_id!r} has a negative pixel index")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class BagSet:
    """Partition of the labeled pixels into positive and negative bags.

    A pixel belongs to at most one bag; pixels absent from every bag are
    unlabeled. Run-level preconditions (>=1 positive and >=1 negative
    bag, indices within the cube) are checked where a cube is available.
    """

    bags: tuple[Bag, ...]

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise ValueError("BagSet needs at least one bag")
        ids = [b.bag_id for b in bags]
        if len(set(ids)) != len(ids):
            raise ValueError("bag ids must be unique")
        all_px = np.concatenate([b.pixels for b in bags])
        if np.unique(all_px).size != all_px.size:
            raise ValueError("a pixel appears in more than one bag")
        object.__setattr__(self, "bags", bags)

    @property
    def pixel_ids(self) -> np.ndarray:
        """Sorted indices of every labeled pixel."""
        return np.sort(np.concatenate([b.pixels for b in self.bags]))

    def labels_for(self, pixel_ids: np.ndarray) -> np.ndarray:
        """Label of each pixel in ``pixel_ids`` (must all be bagged)."""
        label_of = self.label_map()
        try:
            return np.array([label_of[int(p)] for p in pixel_ids], dtype=np.int8)
        except KeyError as exc:
            raise ValueError(f"pixel {exc.args[0]} is not in any bag") from None

    def label_map(self) -> dict[int, int]:
        return {
            int(p): b.label for b in self.bags for p in b.pixels
        }

    def positive_pixels(self) -> np.ndarray:
        pos = [b.pixels for b in self.bags if b.label == 1]
        return np.sort(np.concatenate(pos)) if pos else np.empty(0, dtype=np.intp)

    def negative_pixels(self) -> np.ndarray:
        neg = [b.pixels for b in self.bags if b.label == 0]
        return np.sort(np.concatenate(neg)) if neg else np.empty(0, dtype=np.intp)

    def has_both_labels(self) -> bool:
        labels = {b.label for b in self.bags}
        return labels == {0, 1}

    def check_bounds(self, n_pixels: int) -> None:
        top = max(int(b.pixels.max()) for b in self.bags)
        if top >= n_pixels:
            raise ValueError(f"bag pixel index {top} out of range for {n_pixels} pixels")


@dataclass(frozen=True)
class EndmemberSet:
    """Target signature plus M background signatures, all unit squared norm.

    ``target`` is (D,), ``background`` is (D, M). Columns must satisfy
    ||e||^2 == 1 within ``UNIT_NORM_RTOL`` relative tolerance.
    """

    target: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.target, dtype=np.float64).reshape(-1))
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.ndim == 1:
            bg = bg.reshape(-1, 1) if bg.size else bg.reshape(t.size, 0)
        if bg.shape[0] != t.size:
            raise ValueError("background rows must match target length")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(bg)):
            raise ValueError("endmembers must be finite")
        for name, sq in (("target", t @ t), ("background", None)):
            if name == "target" and abs(sq - 1.0) > UNIT_NORM_RTOL * max(sq, 1.0):
                raise ValueError(f"target norm^2 = {sq!r}, expected 1")
        sqs = np.einsum("dk,dk->k", bg, bg)
        off = np.abs(sqs - 1.0) > UNIT_NORM_RTOL * np.maximum(sqs, 1.0)
        if off.any():
            k = int(np.nonzero(off)[0][0])
            raise ValueError(f"background column {k} norm^2 = {sqs[k]!r}, expected 1")
        bg = np.ascontiguousarray(bg)
        t.setflags(write=False)
        bg.setflags(write=False)
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "background", bg)

    @property
    def bands(self) -> int:
        return self.target.size

    @property
    def m(self) -> int:
        """Number of background endmembers."""
        return self.background.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """D x (M+1) matrix with the target as column 0."""
        return np.column_stack([self.target, self.background])

    @staticmethod
    def from_matrix(columns: np.ndarray) -> "EndmemberSet":
        """Build from a D x (M+1) matrix whose column 0 is the target."""
        cols = np.asarray(columns, dtype=np.float64)
        if cols.ndim != 2 or cols.shape[1] < 1:
            raise ValueError("need a D x (M+1) matrix with at least one column")
        return EndmemberSet(target=cols[:, 0], background=cols[:, 1:])


@dataclass(frozen=True)
class ProportionMatrix:
    """Per-pixel abundance rows on the probability simplex.

    ``values`` is (N, M+1) with column 0 the target proportion. Rows are
    accepted when they sum to 1 within ``ROW_SUM_TOL`` and undershoot zero
    by at most ``NEGATIVITY_TOL``; such numerical dust is clamped to [0, 1]
    and renormalized. Larger violations raise instead of being repaired,
    to keep solver bugs visible.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] < 1:
            raise ValueError("values must be (N, M+1) with M+1 >= 1")
        if not np.all(np.isfinite(vals)):
            raise ValueError("proportions must be finite")
        if vals.min(initial=0.0) < -NEGATIVITY_TOL:
            i, j = np.unravel_index(int(vals.argmin()), vals.shape)
            raise ValueError(
                f"proportion [{i},{j}] = {vals[i, j]!r} below -{NEGATIVITY_TOL}"
            )
        sums = vals.sum(axis=1)
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if bad.any():
            i = int(np.nonzero(bad)[0][0])
            raise ValueError(f"row {i} sums to {sums[i]!r}, expected 1 +/- {ROW_SUM_TOL}")
        # Rows already on the simplex to machine precision pass through
        # byte-identical, so matrices survive save/load round trips exactly.
        exact = np.finfo(np.float64).eps * 64
        if vals.min(initial=0.0) < 0.0 or vals.max(initial=0.0) > 1.0 or np.abs(sums - 1.0).max(initial=0.0) > exact:
            vals = np.clip(vals, 0.0, 1.0)
            vals = vals / vals.sum(axis=1, keepdims=True)
        vals = np.ascontiguousarray(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_endmembers(self) -> int:
        return self.values.shape[1]

    @property
    def target_column(self) -> np.ndarray:
        """Target proportions p_T for every row."""
        return self.values[:, 0]
