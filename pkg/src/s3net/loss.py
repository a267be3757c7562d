"""Weighted cross-entropy, geo-aware anisotropic loss and their combination."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .coords import CoordinateMap, build_kernel_offsets

IGNORE_INDEX = 255


@dataclass(frozen=True)
class ClassFrequency:
    counts: np.ndarray  # per class, ignored labels excluded

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @classmethod
    def from_labels(cls, label_arrays: Iterable[np.ndarray], class_count: int, ignore_index: int = IGNORE_INDEX) -> "ClassFrequency":
        counts = np.zeros(class_count, dtype=np.int64)
        for labels in label_arrays:
            labels = np.asarray(labels)
            labels = labels[labels != ignore_index]
            if labels.size and labels.max() >= class_count:
                raise ValueError(f"label {int(labels.max())} outside {class_count} classes")
            counts += np.bincount(labels, minlength=class_count)
        return cls(counts)

    def save(self, path: str | Path, names: list[str] | None = None) -> None:
        freqs = self.frequencies
        rows = [
            {"id": c, "name": names[c] if names else None, "count": int(n), "frequency": float(f)}
            for c, (n, f) in enumerate(zip(self.counts, freqs))
        ]
        Path(path).write_text(json.dumps({"total": self.total, "classes": rows}, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ClassFrequency":
        doc = json.loads(Path(path).read_text())
        rows = sorted(doc["classes"], key=lambda r: r["id"])
        return cls(np.array([r["count"] for r in rows], dtype=np.int64))


def class_weights(freqs) -> np.ndarray:
    """``alpha_c = 1 / sqrt(f_c)``."""
    f = freqs.frequencies if isinstance(freqs, ClassFrequency) else np.asarray(freqs, dtype=np.float64)
    zero = np.flatnonzero(f <= 0)
    if zero.size:
        raise ValueError(f"classes with zero frequency: {zero.tolist()}")
    return 1.0 / np.sqrt(f)


def log_softmax(logits: Var) -> Var:
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return ad.record("log_softmax", (logits,), out, backward)


def weighted_nll(log_probs: Var, labels: np.ndarray, weights: np.ndarray, denominator: float) -> Var:
    """``-sum_r w_r log p_r[label_r] / denominator`` over the given rows."""
    rows = np.arange(labels.shape[0])
    picked = log_probs.data[rows, labels]
    value = -(weights * picked).sum() / denominator + 0.0

    def backward(g):
        grad = np.zeros_like(log_probs.data)
        grad[rows, labels] = -g * weights / denominator
        return (grad,)

    return ad.record("weighted_nll", (log_probs,), np.asarray(value, dtype=log_probs.dtype), backward)


def _supervised(labels: np.ndarray, ignore_index: int) -> np.ndarray:
    return np.flatnonzero(np.asarray(labels) != ignore_index)


def _select_rows(x: Var, rows: np.ndarray) -> Var:
    if rows.shape[0] == x.shape[0]:
        return x

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows] = g
        return (full,)

    return ad.record("select_rows", (x,), x.data[rows], backward)


def wce_loss(logits: Var, labels: np.ndarray, alpha: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Var:
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    keep = _supervised(labels, ignore_index)
    if keep.size == 0:
        raise ValueError("no supervised points")
    lab = labels[keep].astype(np.int64)
    logp = log_softmax(_select_rows(logits, keep))
    return weighted_nll(logp, lab, np.asarray(alpha, dtype=np.float64)[lab], float(keep.size))


@dataclass(frozen=True)
class VoxelLabelGrid:
    coords: np.ndarray  # (n, 4) [batch, i, j, k]
    labels: np.ndarray  # (n,)


def compute_mlga(grid: VoxelLabelGrid, window: int = 3, ignore_index: int = IGNORE_INDEX) -> tuple[np.ndarray, np.ndarray]:
    """Per voxel: count of occupied neighbours with a different label, and neighbour count.

    Voxels carrying ``ignore_index`` are neither counted as neighbours nor scored
    (both values 0).
    """
    labels = np.asarray(grid.labels)
    valid = labels != ignore_index
    cmap = CoordinateMap(np.asarray(grid.coords)[valid])
    vlabels = labels[valid]
    offsets = build_kernel_offsets(window).offsets
    offsets = offsets[offsets.any(axis=1)]
    mlga_v = np.zeros(cmap.count, dtype=np.int64)
    phi_v = np.zeros(cmap.count, dtype=np.int64)
    for off in offsets:
        q = cmap.coords.copy()
        q[:, 1:] += off
        rows = cmap.lookup(q)
        hit = rows >= 0
        phi_v += hit
        mlga_v[hit] += vlabels[rows[hit]] != vlabels[hit]
    mlga = np.zeros(labels.shape[0], dtype=np.int64)
    phi = np.zeros(labels.shape[0], dtype=np.int64)
    mlga[valid] = mlga_v
    phi[valid] = phi_v
    return mlga, phi


def anisotropy_weights(grid: VoxelLabelGrid, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    mlga, phi = compute_mlga(grid, ignore_index=ignore_index)
    w = np.zeros(mlga.shape[0], dtype=np.float64)
    np.divide(mlga, phi, out=w, where=phi > 0)
    return w


def geo_loss(logits: Var, grid: VoxelLabelGrid, ignore_index: int = IGNORE_INDEX, weights: np.ndarray | None = None) -> Var:
    """Cross-entropy weighted by ``M_LGA / Phi``, averaged over supervised voxels."""
    labels = np.asarray(grid.labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} voxels")
    if weights is None:
        weights = anisotropy_weights(grid, ignore_index)
    keep = _supervised(labels, ignore_index)
    if keep.size == 0:
        return ad.record("zero", (logits,), np.asarray(0.0, dtype=logits.dtype), lambda g: (np.zeros_like(logits.data),))
    logp = log_softmax(_select_rows(logits, keep))
    return weighted_nll(logp, labels[keep].astype(np.int64), weights[keep], float(keep.size))


@dataclass
class LossTerms:
    total: Var
    wce: Var
    geo: Var


def total_loss(
    logits: Var,
    grid: VoxelLabelGrid,
    alpha: np.ndarray,
    lambda_wce: float = 0.75,
    lambda_geo: float = 0.25,
    ignore_index: int = IGNORE_INDEX,
    geo_weights: np.ndarray | None = None,
) -> LossTerms:
    wce = wce_loss(logits, grid.labels, alpha, ignore_index)
    geo = geo_loss(logits, grid, ignore_index, geo_weights)
    tot = ad.add(ad.scale(wce, lambda_wce), ad.scale(geo, lambda_geo))
    return LossTerms(tot, wce, geo)
