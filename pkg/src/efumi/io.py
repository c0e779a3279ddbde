"""Cube, label-mask and bag-set file formats.

Container layout (shared by ``.hsic`` cubes and ``.hsim`` masks): an 8-byte
magic ``HSICUBE1``, a 4-byte little-endian header length, a UTF-8 JSON
header, then the payload as little-endian values in pixel-major order.
Cube payloads are float32 or float64 per the header ``dtype``; masks carry
one uint16 code per pixel (0 = unlabeled, 1 = negative, >= 2 = one positive
bag per distinct code).

Headers are serialized with sorted keys and no whitespace, so identical
content yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import Bag, BagSet, HsiCube

__all__ = [
    "MAGIC",
    "LabelMask",
    "FormatError",
    "load_cube",
    "save_cube",
    "load_mask",
    "save_mask",
    "mask_to_bags",
    "bags_to_json",
    "bags_from_json",
]

MAGIC = b"HSICUBE1"

#: Negative pixels are tiled into bags of this many pixels, matching the
#: 5x5 positive-bag footprint. The model is insensitive to the grouping;
#: it is fixed purely for reproducibility.
NEGATIVE_BAG_SIZE = 25

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u16": np.dtype("<u2"),
    "u32": np.dtype("<u4"),
}


class FormatError(ValueError):
    """Raised for malformed or truncated container files."""


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel label codes for one cube, pixel-major like the cube data."""

    rows: int
    cols: int
    codes: np.ndarray

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("rows and cols must be positive")
        codes = np.asarray(self.codes)
        if codes.size != self.rows * self.cols:
            raise ValueError(
                f"mask has {codes.size} codes, expected {self.rows}*{self.cols}"
            )
        if codes.dtype.kind not in "ui":
            raise ValueError("codes must be integers")
        if codes.size and (int(codes.min()) < 0 or int(codes.max()) > 0xFFFF):
            raise ValueError("codes must fit in uint16")
        codes = np.ascontiguousarray(codes.reshape(-1).astype(np.uint16))
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    def image(self) -> np.ndarray:
        return self.codes.reshape(self.rows, self.cols)

    def check_matches(self, cube: HsiCube) -> None:
        if (self.rows, self.cols) != (cube.rows, cube.cols):
            raise ValueError(
                f"mask is {self.rows}x{self.cols}, cube is {cube.rows}x{cube.cols}"
            )


def _write_container(path, header: dict, payload: np.ndarray) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array(len(blob), dtype="<u4").tobytes())
        fh.write(blob)
        fh.write(np.ascontiguousarray(payload).tobytes())


def _read_container(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{path}: file shorter than the fixed header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    n = int(np.frombuffer(raw, dtype="<u4", count=1, offset=len(MAGIC))[0])
    start = len(MAGIC) + 4
    if len(raw) < start + n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    return header, raw[start + n :]


def _header_dims(path, header: dict, keys=("rows", "cols", "bands")) -> tuple[int, ...]:
    dims = []
    for key in keys:
        value = header.get(key)
        if not isinstance(value, int) or value <= 0:
            raise FormatError(f"{path}: header field {key!r} missing or invalid")
        dims.append(value)
    return tuple(dims)


def _payload_array(path, payload: bytes, dtype: np.dtype, count: int) -> np.ndarray:
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, "
            f"expected {count * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype)


def save_cube(cube: HsiCube, path, dtype: str = "f64") -> None:
    """Write a cube. ``dtype`` "f64" round-trips bit-exactly; "f32" halves
    the file at the cost of rounding."""
    if dtype not in ("f32", "f64"):
        raise ValueError(f"cube dtype must be f32 or f64, got {dtype!r}")
    header = {"rows": cube.rows, "cols": cube.cols, "bands": cube.bands, "dtype": dtype}
    if cube.wavelengths is not None:
        header["wavelengths"] = [float(w) for w in cube.wavelengths]
    _write_container(path, header, cube.data.astype(_DTYPES[dtype]))


def load_cube(path) -> HsiCube:
    header, payload = _read_container(path)
    rows, cols, bands = _header_dims(path, header)
    dtype = header.get("dtype")
    if dtype not in ("f32", "f64"):
        raise FormatError(f"{path}: cube dtype must be f32 or f64, got {dtype!r}")
    values = _payload_array(path, payload, _DTYPES[dtype], rows * cols * bands)
    wavelengths = header.get("wavelengths")
    return HsiCube(
        rows=rows,
        cols=cols,
        bands=bands,
        data=values.astype(np.float64).reshape(rows * cols, bands),
        wavelengths=None if wavelengths is None else np.asarray(wavelengths, dtype=np.float64),
    )


def save_mask(mask: LabelMask, path) -> None:
    header = {"rows": mask.rows, "cols": mask.cols, "bands": 1, "dtype": "u16"}
    _write_container(path, header, mask.codes.astype(_DTYPES["u16"]))


def load_mask(path) -> LabelMask:
    header, payload = _read_container(path)
    rows, cols, bands = _header_dims(path, header)
    if bands != 1:
        raise FormatError(f"{path}: mask bands must be 1, got {bands}")
    if header.get("dtype") != "u16":
        raise FormatError(f"{path}: mask dtype must be u16, got {header.get('dtype')!r}")
    codes = _payload_array(path, payload, _DTYPES["u16"], rows * cols)
    return LabelMask(rows=rows, cols=cols, codes=codes)


def mask_to_bags(mask: LabelMask) -> BagSet:
    """Turn label codes into bags: one positive bag per distinct code >= 2,
    negative pixels tiled row-major into 25-pixel bags."""
    codes = mask.codes
    if not np.any(codes):
        raise ValueError("mask has no labeled pixels")
    bags: list[Bag] = []
    for code in np.unique(codes[codes >= 2]):
        pixels = np.nonzero(codes == code)[0]
        bags.append(Bag(bag_id=f"pos{int(code)}", label=1, pixels=pixels))
    if not bags:
        raise ValueError("mask has no positive codes")
    negatives = np.nonzero(codes == 1)[0]
    if negatives.size == 0:
        raise ValueError("mask has no negative codes")
    for num, lo in enumerate(range(0, negatives.size, NEGATIVE_BAG_SIZE)):
        chunk = negatives[lo : lo + NEGATIVE_BAG_SIZE]
        bags.append(Bag(bag_id=f"neg{num:03d}", label=0, pixels=chunk))
    return BagSet(tuple(bags))


def bags_to_json(bags: BagSet) -> str:
    doc = {
        "bags": [
            {"id": b.bag_id, "label": b.label, "pixels": [int(p) for p in b.pixels]}
            for b in bags.bags
        ]
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def bags_from_json(text: Union[str, bytes]) -> BagSet:
    doc = json.loads(text)
    try:
        entries = doc["bags"]
        bags = tuple(
            Bag(bag_id=str(e["id"]), label=int(e["label"]), pixels=np.asarray(e["pixels"]))
            for e in entries
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed bag JSON: {exc}") from None
    return BagSet(bags)
