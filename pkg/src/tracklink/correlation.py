"""Keypoint feature correlation.

The correlation of two keypoint sets is the matrix of inner products between
every descriptor of the first set and every descriptor of the second. The
kernel accumulates each dot product in index order so results do not depend
on tiling or thread count.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numba
import numpy as np

log = logging.getLogger(__name__)

BLOB_MAGIC = b"KPFB"
BLOB_VERSION = 1
_HEADER = struct.Struct("<4sIII")

NO_MATCH = -1


class FeatureFormatError(ValueError):
    """Malformed feature blob."""


@dataclass(frozen=True, eq=False)
class KeypointFeatureSet:
    """``n`` keypoints with ``d``-dimensional descriptors and 3D locations."""

    features: np.ndarray
    locations: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        feats = np.asarray(self.features)
        locs = np.asarray(self.locations, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError(f"features must be a non-empty n x d matrix, got {feats.shape}")
        if locs.shape != (feats.shape[0], 3):
            raise ValueError(f"locations must be {feats.shape[0]} x 3, got {locs.shape}")
        if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(locs))):
            raise ValueError("keypoint features and locations must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "locations", locs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@numba.njit(nogil=True, cache=True)
def _correlate_rows(a, bt, out, row0, row1, col_tile):
    # out[i, j] = sum_k a[i, k] * bt[k, j], summed in increasing k
    d = a.shape[1]
    n_b = bt.shape[1]
    for c0 in range(0, n_b, col_tile):
        c1 = min(c0 + col_tile, n_b)
        for i in range(row0, row1):
            row = out[i]
            for j in range(c0, c1):
                row[j] = 0.0
            for k in range(d):
                aik = a[i, k]
                bk = bt[k]
                for j in range(c0, c1):
                    row[j] += aik * bk[j]


def correlate(
    a: KeypointFeatureSet,
    b: KeypointFeatureSet,
    radius: Optional[float] = None,
    *,
    normalize: bool = False,
    threads: int = 1,
    row_tile: int = 64,
    col_tile: int = 1024,
) -> CorrelationMap:
    """Inner product of every descriptor in ``a`` with every descriptor in ``b``.

    With ``radius`` set, pairs whose keypoints are further apart than
    ``radius`` metres are gated to ``-inf``. ``normalize=True`` switches to
    cosine similarity. Output is identical for any ``threads``/tile setting.
    """
    if a.d != b.d:
        raise ValueError(f"descriptor length mismatch: {a.d} vs {b.d}")
    fa = np.ascontiguousarray(a.features, dtype=np.float64)
    fb = np.asarray(b.features, dtype=np.float64)
    if normalize:
        fa = fa / np.maximum(np.linalg.norm(fa, axis=1, keepdims=True), 1e-300)
        fb = fb / np.maximum(np.linalg.norm(fb, axis=1, keepdims=True), 1e-300)
    bt = np.ascontiguousarray(fb.T)
    out = np.empty((a.n, b.n), dtype=np.float64)

    row_tile = max(1, int(row_tile))
    col_tile = max(1, int(col_tile))
    tiles = [(r, min(r + row_tile, a.n)) for r in range(0, a.n, row_tile)]
    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda t: _correlate_rows(fa, bt, out, t[0], t[1], col_tile), tiles))
    else:
        for r0, r1 in tiles:
            _correlate_rows(fa, bt, out, r0, r1, col_tile)

    if radius is not None and not math.isinf(radius):
        if radius < 0:
            raise ValueError("radius must be non-negative")
        diff = a.locations[:, None, :] - b.locations[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        out[dist > radius] = -np.inf
    return CorrelationMap(out)


def argmax_match(cmap: CorrelationMap):
    """Best column per row of the map.

    Returns ``(index, value)`` arrays. Ties go to the smallest column index;
    a row that is entirely gated yields ``NO_MATCH`` and ``-inf``.
    """
    values = cmap.values
    if values.size == 0:
        raise ValueError("empty correlation map")
    idx = np.argmax(values, axis=1)
    best = values[np.arange(values.shape[0]), idx]
    idx = np.where(np.isneginf(best), NO_MATCH, idx)
    return idx.astype(np.int64), best


def combined_width(n_b: int, d: int) -> int:
    return n_b + 2 * d + 6


def assemble_combined(cmap: CorrelationMap, a: KeypointFeatureSet, b: KeypointFeatureSet) -> np.ndarray:
    """Concatenate per-keypoint inputs for the tracking head.

    Row ``i`` is laid out as::

        [corr(i, 0..n_b) | a.features(i) | b.features(i) | a.locations(i) | b.locations(i)]

    giving width ``n_b + 2 d + 6`` (2310 for 2048 keypoints of length 128).
    """
    n_a, n_b = cmap.values.shape
    if (n_a, n_b) != (a.n, b.n):
        raise ValueError(f"map shape {cmap.values.shape} does not match sets ({a.n}, {b.n})")
    if a.n != b.n:
        raise ValueError("row-wise concatenation needs equally sized keypoint sets")
    if a.d != b.d:
        raise ValueError(f"descriptor length mismatch: {a.d} vs {b.d}")
    return np.concatenate(
        [
            cmap.values,
            a.features.astype(np.float64),
            b.features.astype(np.float64),
            a.locations,
            b.locations,
        ],
        axis=1,
    )


def write_feature_blob(path: Union[str, Path], fset: KeypointFeatureSet) -> None:
    header = _HEADER.pack(BLOB_MAGIC, BLOB_VERSION, fset.n, fset.d)
    feats = np.ascontiguousarray(fset.features, dtype="<f4")
    locs = np.ascontiguousarray(fset.locations, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes())
        fh.write(locs.tobytes())


def read_feature_blob(path: Union[str, Path], frame_id: int = 0) -> KeypointFeatureSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * (n * d + n * 3)
    if len(data) != expected:
        raise FeatureFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    locs = np.frombuffer(data, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
    try:
        return KeypointFeatureSet(feats.astype(np.float32), locs.astype(np.float64), frame_id)
    except ValueError as exc:
        raise FeatureFormatError(f"{path}: {exc}") from exc
