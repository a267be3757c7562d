"""Coordinate management for sparse tensors.

Coordinates are stored as an ``(n, 4)`` int64 array of ``[batch, i, j, k]``
rows. Lookup goes through a packed 64-bit key per coordinate kept in sorted
order, so every query is a ``searchsorted`` rather than a Python dict probe.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

_AXIS_BITS = 16
_AXIS_OFFSET = 1 << (_AXIS_BITS - 1)
_BATCH_BITS = 15
AXIS_MIN = -_AXIS_OFFSET
AXIS_MAX = _AXIS_OFFSET - 1
BATCH_MAX = (1 << _BATCH_BITS) - 1


class Coordinate(NamedTuple):
    batch: int
    i: int
    j: int
    k: int


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack ``[b, i, j, k]`` rows into collision-free int64 keys.

    Key order matches lexicographic order of ``(b, i, j, k)``.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    spatial = coords[:, 1:]
    if coords.size and (
        spatial.min() < AXIS_MIN
        or spatial.max() > AXIS_MAX
        or coords[:, 0].min() < 0
        or coords[:, 0].max() > BATCH_MAX
    ):
        raise ValueError(
            f"coordinates out of packable range: axes must lie in [{AXIS_MIN}, {AXIS_MAX}], "
            f"batch in [0, {BATCH_MAX}]"
        )
    shifted = spatial + _AXIS_OFFSET
    key = coords[:, 0]
    for axis in range(3):
        key = (key << _AXIS_BITS) | shifted[:, axis]
    return key


class CoordinateMap:
    """Immutable bijection between coordinates and row indices ``0..count-1``."""

    __slots__ = ("_coords", "_sorted_keys", "_sorted_rows", "_derived")

    def __init__(self, coords: np.ndarray):
        coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).reshape(-1, 4))
        keys = pack_keys(coords)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        if sorted_keys.size > 1 and np.any(sorted_keys[1:] == sorted_keys[:-1]):
            raise ValueError("duplicate coordinates in CoordinateMap")
        coords.setflags(write=False)
        sorted_keys.setflags(write=False)
        order.setflags(write=False)
        self._coords = coords
        self._sorted_keys = sorted_keys
        self._sorted_rows = order
        # kernel maps and strided maps computed from this map; safe to memoize
        # because the map is immutable
        self._derived: dict = {}

    @property
    def coords(self) -> np.ndarray:
        return self._coords

    @property
    def count(self) -> int:
        return self._coords.shape[0]

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoordinateMap):
            return NotImplemented
        return self is other or np.array_equal(self._coords, other._coords)

    def __hash__(self) -> int:
        return hash(self._coords.tobytes())

    def __repr__(self) -> str:
        return f"CoordinateMap(count={self.count})"

    def coordinate_of(self, row: int) -> Coordinate:
        return Coordinate(*(int(v) for v in self._coords[row]))

    def row_of(self, coord) -> int:
        """Row of a single coordinate, or -1 when absent."""
        return int(self.lookup(np.asarray(coord, dtype=np.int64).reshape(1, 4))[0])

    def __contains__(self, coord) -> bool:
        return self.row_of(coord) >= 0

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Rows for a batch of coordinates; -1 marks absent entries."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
        rows = np.full(coords.shape[0], -1, dtype=np.int64)
        if self.count == 0 or coords.shape[0] == 0:
            return rows
        spatial = coords[:, 1:]
        in_range = (
            (spatial >= AXIS_MIN).all(axis=1)
            & (spatial <= AXIS_MAX).all(axis=1)
            & (coords[:, 0] >= 0)
            & (coords[:, 0] <= BATCH_MAX)
        )
        keys = pack_keys(coords[in_range])
        pos = np.searchsorted(self._sorted_keys, keys)
        pos_clipped = np.minimum(pos, self.count - 1)
        hit = self._sorted_keys[pos_clipped] == keys
        found = np.full(keys.shape[0], -1, dtype=np.int64)
        found[hit] = self._sorted_rows[pos_clipped[hit]]
        rows[in_range] = found
        return rows

    def batch_indices(self) -> np.ndarray:
        return np.unique(self._coords[:, 0])


@dataclass(frozen=True)
class KernelOffsets:
    offsets: np.ndarray  # (K, 3) int64, lexicographic
    size: int

    def __len__(self) -> int:
        return self.offsets.shape[0]

    @property
    def center_index(self) -> int:
        return int(np.flatnonzero(~self.offsets.any(axis=1))[0])


def build_kernel_offsets(kernel_size: int, dimension: int = 3) -> KernelOffsets:
    if dimension != 3:
        raise ValueError("only 3D kernels are supported")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {kernel_size}")
    half = kernel_size // 2
    span = range(-half, half + 1)
    offsets = np.array(list(itertools.product(span, span, span)), dtype=np.int64)
    offsets.setflags(write=False)
    return KernelOffsets(offsets=offsets, size=kernel_size)


@dataclass(frozen=True)
class KernelMap:
    """Per-offset ``(in_row, out_row)`` pairs, each list sorted by ``out_row``."""

    in_rows: tuple[np.ndarray, ...]
    out_rows: tuple[np.ndarray, ...]
    in_count: int
    out_count: int

    def __len__(self) -> int:
        return len(self.in_rows)

    def pairs(self, offset_index: int) -> list[tuple[int, int]]:
        return list(zip(self.in_rows[offset_index].tolist(), self.out_rows[offset_index].tolist()))

    @property
    def pair_count(self) -> int:
        return int(sum(r.shape[0] for r in self.in_rows))

    def validate(self) -> None:
        for a, b in zip(self.in_rows, self.out_rows):
            if a.shape != b.shape:
                raise ValueError("kernel map pair lists are misaligned")
            if a.size and (a.min() < 0 or a.max() >= self.in_count):
                raise ValueError("kernel map references out-of-range input rows")
            if b.size and (b.min() < 0 or b.max() >= self.out_count):
                raise ValueError("kernel map references out-of-range output rows")


def build_kernel_map(
    in_map: CoordinateMap, out_map: CoordinateMap, offsets: KernelOffsets, in_stride: int
) -> KernelMap:
    """Pair each output ``u`` with the input at ``u + offset * in_stride``."""
    key = ("kmap", id(out_map), offsets.size, in_stride)
    cached = in_map._derived.get(key)
    if cached is not None and cached[0] is out_map:
        return cached[1]
    out_coords = out_map.coords
    out_idx = np.arange(out_map.count, dtype=np.int64)
    in_lists, out_lists = [], []
    for offset in offsets.offsets:
        query = out_coords.copy()
        query[:, 1:] += offset * in_stride
        rows = in_map.lookup(query)
        hit = rows >= 0
        in_lists.append(rows[hit])
        out_lists.append(out_idx[hit])
    kmap = KernelMap(tuple(in_lists), tuple(out_lists), in_map.count, out_map.count)
    in_map._derived[key] = (out_map, kmap)
    return kmap


def stride_coordinates(coords: CoordinateMap, in_stride: int, factor: int) -> CoordinateMap:
    if factor < 2:
        raise ValueError("stride factor must be >= 2")
    key = ("stride", in_stride, factor)
    if key in coords._derived:
        return coords._derived[key]
    src = coords.coords
    if np.any(src[:, 1:] % in_stride):
        raise ValueError(f"coordinates are not divisible by stride {in_stride}")
    out_stride = in_stride * factor
    strided = src.copy()
    strided[:, 1:] = np.floor_divide(src[:, 1:], out_stride) * out_stride
    keys = pack_keys(strided)
    _, first = np.unique(keys, return_index=True)
    # keep first-occurrence order so output rows follow input traversal
    out = CoordinateMap(strided[np.sort(first)])
    coords._derived[key] = out
    return out


def quantize_points(
    points: np.ndarray, features: np.ndarray, voxel_size: float = 0.05, batch: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxelize points, averaging the features of points sharing a voxel.

    Returns ``(coords, voxel_features, point_to_row)``. Voxel rows are ordered
    by coordinate, so the result does not depend on the input point order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {points.shape}")
    if points.shape[0] == 0:
        raise ValueError("empty point cloud")
    bad = ~np.isfinite(points).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite coordinate at point index {int(np.flatnonzero(bad)[0])}")
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] != points.shape[0]:
        raise ValueError("features and points differ in length")

    grid = np.floor(points / voxel_size).astype(np.int64)
    coords = np.empty((points.shape[0], 4), dtype=np.int64)
    coords[:, 0] = batch
    coords[:, 1:] = grid
    keys = pack_keys(coords)
    unique_keys, first, point_to_row = np.unique(keys, return_index=True, return_inverse=True)
    n_vox = unique_keys.shape[0]
    counts = np.bincount(point_to_row, minlength=n_vox).astype(np.float64)
    sums = np.zeros((n_vox, features.shape[1]), dtype=np.float64)
    np.add.at(sums, point_to_row, features.astype(np.float64))
    mean = (sums / counts[:, None]).astype(features.dtype if features.dtype.kind == "f" else np.float64)
    return coords[first], mean, point_to_row.astype(np.int64)
