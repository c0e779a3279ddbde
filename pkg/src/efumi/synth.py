"""Synthetic scene generation.

Stands in for airborne collects at desk scale: draws well-separated
endmember spectra, mixes them with simplex proportions, plants sub-pixel
targets, adds Gaussian noise, and labels the scene the way an analyst
would, with a square positive halo around each target pixel and negative
regions elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import EndmemberSet, HsiCube, ProportionMatrix
from .io import LabelMask
from .rng import Rng

__all__ = ["SyntheticTruth", "generate_synthetic", "MIN_PAIR_ANGLE_DEG", "HALO"]

#: Endmembers are redrawn until every pair is at least this far apart.
MIN_PAIR_ANGLE_DEG = 15.0
#: Positive bags are (2*HALO+1) x (2*HALO+1) windows centered on a target.
HALO = 2

_MAX_DRAWS = 1000
_MAX_PLACEMENTS = 100


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth behind a generated scene."""

    endmembers: EndmemberSet
    proportions: ProportionMatrix
    target_pixels: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        tp = np.sort(np.asarray(self.target_pixels, dtype=np.intp).reshape(-1))
        with_target = np.nonzero(self.proportions.target_column > 0)[0]
        if not np.array_equal(tp, with_target):
            raise ValueError("target_pixels must be exactly the rows with p_T > 0")
        tp.setflags(write=False)
        object.__setattr__(self, "target_pixels", tp)


def _spectral_angles(candidate: np.ndarray, accepted: np.ndarray) -> np.ndarray:
    cos = accepted.T @ candidate
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _draw_endmembers(bands: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm smoothed random spectra with pairwise angle >= 15 degrees."""
    window = max(3, bands // 8)
    kernel = np.ones(window) / window
    columns = np.empty((bands, 0))
    for _ in range(count):
        for attempt in range(_MAX_DRAWS):
            raw = rng.uniform(0.05, 1.0, size=bands)
            spectrum = np.convolve(raw, kernel, mode="same")
            spectrum /= np.linalg.norm(spectrum)
            if columns.shape[1] == 0 or _spectral_angles(spectrum, columns).min() >= MIN_PAIR_ANGLE_DEG:
                columns = np.column_stack([columns, spectrum])
                break
        else:
            raise ValueError(
                f"could not draw {count} spectra with pairwise angle >= "
                f"{MIN_PAIR_ANGLE_DEG} degrees in {_MAX_DRAWS} attempts; "
                f"increase the band count"
            )
    return columns


def _place_targets(
    rows: int, cols: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Pick target centers whose positive halos fit inside the image and
    do not overlap each other."""
    interior = [
        r * cols + c
        for r in range(HALO, rows - HALO)
        for c in range(HALO, cols - HALO)
    ]
    if len(interior) < count:
        raise ValueError(f"cannot place {count} targets on a {rows}x{cols} grid")
    interior = np.asarray(interior, dtype=np.intp)
    for _ in range(_MAX_PLACEMENTS):
        order = rng.permutation(interior)
        blocked = np.zeros((rows, cols), dtype=bool)
        centers: list[int] = []
        for pixel in order:
            r, c = divmod(int(pixel), cols)
            window = blocked[r - HALO : r + HALO + 1, c - HALO : c + HALO + 1]
            if window.any():
                continue
            window[:] = True
            centers.append(int(pixel))
            if len(centers) == count:
                return np.asarray(sorted(centers), dtype=np.intp)
    raise ValueError(
        f"could not place {count} non-overlapping target halos on a "
        f"{rows}x{cols} grid; lower the target fraction"
    )


def _halo_mask(rows: int, cols: int, centers: np.ndarray) -> LabelMask:
    codes = np.ones((rows, cols), dtype=np.uint16)
    for num, pixel in enumerate(centers):
        r, c = divmod(int(pixel), cols)
        codes[r - HALO : r + HALO + 1, c - HALO : c + HALO + 1] = num + 2
    return LabelMask(rows=rows, cols=cols, codes=codes.reshape(-1))


def generate_synthetic(
    rows: int,
    cols: int,
    bands: int,
    m_background: int,
    target_fraction: float,
    noise_sigma: float,
    rng: Union[Rng, int],
) -> tuple[HsiCube, SyntheticTruth, LabelMask]:
    """Generate a labeled scene with known endmembers and proportions.

    Exactly round(target_fraction * rows * cols) pixels carry a target
    proportion drawn uniform in [0.1, 0.8]; the background share of every
    pixel is Dirichlet(1) over the m_background endmembers. Pixels are
    E @ p plus N(0, noise_sigma^2) per band. The same seed reproduces
    the scene bit for bit.
    """
    if bands < m_background + 1:
        raise ValueError("need bands >= m_background + 1")
    if not 0.0 < target_fraction < 1.0:
        raise ValueError("target_fraction must be in (0, 1)")
    if noise_sigma < 0.0:
        raise ValueError("noise_sigma must be non-negative")
    if rows < 2 * HALO + 1 or cols < 2 * HALO + 1:
        raise ValueError(f"grid must be at least {2 * HALO + 1} pixels on each side")
    root = rng if isinstance(rng, Rng) else Rng(rng)

    columns = _draw_endmembers(bands, m_background + 1, root.child("endmembers").generator)
    endmembers = EndmemberSet.from_matrix(columns)

    n_pixels = rows * cols
    n_targets = int(round(target_fraction * n_pixels))
    if n_targets < 1:
        raise ValueError("target_fraction rounds to zero target pixels")
    centers = _place_targets(rows, cols, n_targets, root.child("targets").generator)

    prop_rng = root.child("proportions").generator
    background = prop_rng.dirichlet(np.ones(m_background), size=n_pixels)
    p_target = np.zeros(n_pixels)
    p_target[centers] = prop_rng.uniform(0.1, 0.8, size=n_targets)
    values = np.column_stack([p_target, background * (1.0 - p_target)[:, None]])
    proportions = ProportionMatrix(values)

    data = proportions.values @ endmembers.matrix.T
    if noise_sigma > 0.0:
        data = data + root.child("noise").generator.normal(0.0, noise_sigma, size=data.shape)
    cube = HsiCube(
        rows=rows,
        cols=cols,
        bands=bands,
        data=data,
        wavelengths=np.linspace(400.0, 2400.0, bands),
    )
    truth = SyntheticTruth(
        endmembers=endmembers,
        proportions=proportions,
        target_pixels=centers,
        noise_sigma=float(noise_sigma),
    )
    return cube, truth, _halo_mask(rows, cols, centers)
