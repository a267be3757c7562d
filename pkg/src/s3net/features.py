"""Range-image projection and image-gradient normal features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FOV_UP_DEG = 3.0
FOV_DOWN_DEG = -25.0


@dataclass(frozen=True)
class RangeImage:
    depth: np.ndarray  # (H, W), 0 where empty
    mapping: np.ndarray  # (n, 2) pixel (row, col) of each point
    pixel_owner: np.ndarray  # (H, W), index of the kept point or -1

    @property
    def occupied(self) -> np.ndarray:
        return self.pixel_owner >= 0


def project_to_range(
    points: np.ndarray,
    H: int = 64,
    W: int = 2048,
    fov_up: float = FOV_UP_DEG,
    fov_down: float = FOV_DOWN_DEG,
) -> RangeImage:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError("expected a non-empty (n, 3) point array")
    depth = np.linalg.norm(points, axis=1)
    at_origin = depth == 0
    if at_origin.any():
        raise ValueError(f"point at the sensor origin at index {int(np.flatnonzero(at_origin)[0])}")

    x, y, z = points.T
    col = np.floor(W * 0.5 * (1.0 - np.arctan2(y, x) / np.pi))
    col = np.clip(col, 0, W - 1).astype(np.int64)
    up, down = np.radians(fov_up), np.radians(fov_down)
    pitch = np.arcsin(np.clip(z / depth, -1.0, 1.0))
    row = np.floor((1.0 - (pitch - down) / (up - down)) * H)
    row = np.clip(row, 0, H - 1).astype(np.int64)

    # far points are written first so the nearest one ends up owning the pixel;
    # on equal range the lowest point index wins
    idx = np.arange(points.shape[0])
    order = np.lexsort((-idx, -depth))
    owner = np.full((H, W), -1, dtype=np.int64)
    owner[row[order], col[order]] = idx[order]
    image = np.zeros((H, W), dtype=np.float64)
    occ = owner >= 0
    image[occ] = depth[owner[occ]]
    return RangeImage(image, np.stack([row, col], axis=1), owner)


def _axis_gradient(depth: np.ndarray, occ: np.ndarray, axis: int) -> np.ndarray:
    """Central difference along ``axis``; one-sided where a neighbour is empty or off-image."""
    d = np.moveaxis(depth, axis, -1)
    o = np.moveaxis(occ, axis, -1)
    prev_ok = np.zeros_like(o)
    next_ok = np.zeros_like(o)
    prev_ok[..., 1:] = o[..., :-1]
    next_ok[..., :-1] = o[..., 1:]
    prev_val = np.zeros_like(d)
    next_val = np.zeros_like(d)
    prev_val[..., 1:] = d[..., :-1]
    next_val[..., :-1] = d[..., 1:]

    grad = np.zeros_like(d)
    both = prev_ok & next_ok
    only_next = next_ok & ~prev_ok
    only_prev = prev_ok & ~next_ok
    grad[both] = 0.5 * (next_val[both] - prev_val[both])
    grad[only_next] = next_val[only_next] - d[only_next]
    grad[only_prev] = d[only_prev] - prev_val[only_prev]
    grad[~o] = 0.0
    return np.moveaxis(grad, -1, axis)


def compute_normals(r: RangeImage | np.ndarray, occupied: np.ndarray | None = None) -> np.ndarray:
    """3-channel normal map ``(d_x, d_y, 1) / sqrt(d_x^2 + d_y^2 + 1)``.

    ``d_x`` runs along image columns, ``d_y`` along rows. Returns ``(H, W, 3)``
    with zeros at empty pixels.
    """
    if isinstance(r, RangeImage):
        depth, occ = r.depth, r.occupied
    else:
        depth = np.asarray(r, dtype=np.float64)
        occ = depth > 0 if occupied is None else occupied
    dx = _axis_gradient(depth, occ, axis=1)
    dy = _axis_gradient(depth, occ, axis=0)
    norm = np.sqrt(dx * dx + dy * dy + 1.0)
    normals = np.stack([dx / norm, dy / norm, 1.0 / norm], axis=-1)
    normals[~occ] = 0.0
    return normals


def lift_to_points(normal_map: np.ndarray, mapping: np.ndarray) -> np.ndarray:
    return normal_map[mapping[:, 0], mapping[:, 1]]


def point_features(points: np.ndarray, remission: np.ndarray, H: int = 64, W: int = 2048) -> np.ndarray:
    """Per-point ``[remission, n_x, n_y, n_z]`` network input."""
    r = project_to_range(points, H, W)
    normals = lift_to_points(compute_normals(r), r.mapping)
    return np.concatenate([np.asarray(remission, dtype=np.float64)[:, None], normals], axis=1)


def write_image_dump(path: str | Path, image: np.ndarray) -> None:
    """Header ``H, W, C`` as little-endian u32, then float32 pixels in row-major order."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    Path(path).write_bytes(struct.pack("<III", h, w, c) + np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image_dump(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    h, w, c = struct.unpack_from("<III", buf)
    expected = 12 + 4 * h * w * c
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, c).copy()
