"""Small synthetic scenes for smoke runs and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Var
from .coords import CoordinateMap
from .data import Scan, write_labels, write_scan
from .sparse_ops import SparseTensor


def two_plane_scene(size: int = 14, gap: int = 0, features: str = "normals", dtype=np.float64) -> tuple[SparseTensor, np.ndarray]:
    """A horizontal patch (class 0) and a vertical patch (class 1), ``size``^2 voxels each.

    ``features="normals"`` gives ``[1, n_x, n_y, n_z]`` rows; ``"constant"`` gives
    identical rows so only geometry separates the classes.
    """
    a, b = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    a, b = a.ravel(), b.ravel()
    n = a.size
    floor = np.column_stack([np.zeros(n), a, b, np.zeros(n)])
    wall = np.column_stack([np.zeros(n), np.full(n, size + gap), a, b + 1])
    coords = np.concatenate([floor, wall]).astype(np.int64)
    labels = np.concatenate([np.zeros(n), np.ones(n)]).astype(np.int64)
    if features == "normals":
        f = np.zeros((2 * n, 4))
        f[:, 0] = 1.0
        f[:n, 3] = 1.0
        f[n:, 1] = 1.0
    elif features == "constant":
        f = np.tile([1.0, 0.0, 0.0, 1.0], (2 * n, 1))
    else:
        raise ValueError(f"unknown feature mode {features!r}")
    return SparseTensor(CoordinateMap(coords), Var(f.astype(dtype))), labels


# raw SemanticKITTI ids used by the street scene
_ROAD, _SIDEWALK, _CAR, _POLE, _BUILDING, _VEGETATION, _UNLABELED = 40, 48, 10, 80, 50, 70, 0


def street_scan(rng: np.random.Generator, points: int = 4000) -> tuple[Scan, np.ndarray]:
    """Road, sidewalk, a parked car, a pole, a facade and a hedge around the sensor."""
    h = -1.73
    parts = []

    def add(xyz, raw_id, remission):
        parts.append((np.asarray(xyz, dtype=np.float64), raw_id, remission))

    m = int(points * 0.35)
    xy = rng.uniform([-20, -4], [20, 4], size=(m, 2))
    add(np.column_stack([xy, np.full(m, h)]), _ROAD, 0.25)
    m = int(points * 0.15)
    xy = rng.uniform([-20, 4], [20, 7], size=(m, 2))
    add(np.column_stack([xy, np.full(m, h + 0.15)]), _SIDEWALK, 0.35)

    cx, cy = rng.uniform(4, 10), rng.uniform(-3, -1.5)
    m = int(points * 0.15)
    lo, hi = np.array([-2.2, -0.9, 0.0]), np.array([2.2, 0.9, 1.5])
    box = rng.uniform(lo, hi, size=(m, 3))
    # snap each point onto a side face or the roof
    axis = rng.integers(0, 3, m)
    side = rng.random(m) < 0.5
    rows = np.arange(m)
    box[rows, axis] = np.where(side | (axis == 2), hi[axis], lo[axis])
    add(box + [cx, cy, h], _CAR, 0.6)

    m = int(points * 0.05)
    t = rng.uniform(0, 2 * np.pi, m)
    px, py = rng.uniform(-10, -3), 5.0
    add(np.column_stack([px + 0.15 * np.cos(t), py + 0.15 * np.sin(t), rng.uniform(h, h + 5, m)]), _POLE, 0.45)

    m = int(points * 0.2)
    add(np.column_stack([rng.uniform(-20, 20, m), np.full(m, 9.0), rng.uniform(h, h + 8, m)]), _BUILDING, 0.3)

    m = points - sum(p[0].shape[0] for p in parts)
    hedge = rng.normal([0, -7, h + 0.8], [8, 0.4, 0.4], size=(m, 3))
    add(hedge, _VEGETATION, 0.15)

    xyz = np.concatenate([p[0] for p in parts])
    xyz += rng.normal(0, 0.01, xyz.shape)
    raw = np.concatenate([np.full(p[0].shape[0], p[1], dtype=np.uint32) for p in parts])
    rem = np.concatenate([np.full(p[0].shape[0], p[2]) for p in parts]) + rng.normal(0, 0.02, raw.shape)
    raw[rng.random(raw.shape[0]) < 0.02] = _UNLABELED
    # instance ids in the upper 16 bits, as in the benchmark files
    raw = raw | (rng.integers(0, 4, raw.shape[0]).astype(np.uint32) << 16)
    order = rng.permutation(raw.shape[0])
    scan = Scan(xyz[order].astype(np.float32), np.clip(rem[order], 0, 1).astype(np.float32))
    return scan, raw[order]


def write_street_dataset(root: str | Path, sequences: dict[int, int], seed: int = 0, points: int = 4000) -> list[Path]:
    """Write ``{sequence: scan_count}`` scans under ``root/sequences/NN``."""
    rng = np.random.default_rng(seed)
    written = []
    for seq, count in sequences.items():
        base = Path(root) / "sequences" / f"{int(seq):02d}"
        (base / "velodyne").mkdir(parents=True, exist_ok=True)
        (base / "labels").mkdir(parents=True, exist_ok=True)
        for i in range(count):
            scan, raw = street_scan(rng, points)
            write_scan(base / "velodyne" / f"{i:06d}.bin", scan)
            write_labels(base / "labels" / f"{i:06d}.label", raw)
            written.append(base / "velodyne" / f"{i:06d}.bin")
    return written
