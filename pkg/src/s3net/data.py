"""SemanticKITTI-format I/O, label remapping, IoU evaluation, attention export."""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml


class DataError(Exception):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class Scan:
    points: np.ndarray  # (n, 3) float32
    remission: np.ndarray  # (n,) float32

    def __post_init__(self):
        if self.points.shape[0] == 0:
            raise DataError("scan has no points")

    def __len__(self) -> int:
        return self.points.shape[0]


def read_scan(path: str | Path) -> Scan:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise DataError(f"{path}: {len(raw)} bytes is not a multiple of 16")
    if not raw:
        raise DataError(f"{path}: empty scan file")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise DataError(f"{path}: non-finite value at point {bad}")
    return Scan(arr[:, :3].astype(np.float32), arr[:, 3].astype(np.float32))


def write_scan(path: str | Path, scan: Scan) -> None:
    arr = np.empty((len(scan), 4), dtype="<f4")
    arr[:, :3] = scan.points
    arr[:, 3] = scan.remission
    Path(path).write_bytes(arr.tobytes())


def read_raw_labels(path: str | Path, point_count: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise DataError(f"{path}: {len(raw)} bytes is not a multiple of 4")
    labels = np.frombuffer(raw, dtype="<u4").copy()
    if point_count is not None and labels.shape[0] != point_count:
        raise DataError(
            f"{path}: {labels.shape[0]} labels ({len(raw)} bytes) for {point_count} points "
            f"({16 * point_count} scan bytes)"
        )
    return labels


def read_labels(path: str | Path, point_count: int | None = None) -> np.ndarray:
    """Semantic ids (low 16 bits) of a ``.label`` file."""
    return (read_raw_labels(path, point_count) & 0xFFFF).astype(np.uint32)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype="<u4").tobytes())


@dataclass(frozen=True)
class LabelMap:
    learning_map: dict[int, int]
    learning_map_inv: dict[int, int]
    class_names: list[str]
    ignore_index: int = 255

    @classmethod
    def load(cls, path: str | Path | None = None) -> "LabelMap":
        if path is None:
            text = resources.files("s3net.configs").joinpath("semantic-kitti.yaml").read_text()
        else:
            text = Path(path).read_text()
        doc = yaml.safe_load(text)
        return cls(
            {int(k): int(v) for k, v in doc["learning_map"].items()},
            {int(k): int(v) for k, v in doc.get("learning_map_inv", {}).items()},
            list(doc["class_names"]),
            int(doc.get("ignore_index", 255)),
        )

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def _lut(self, table: dict[int, int], ids: np.ndarray, what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        uniq = np.unique(ids)
        unknown = [int(u) for u in uniq if int(u) not in table]
        if unknown:
            raise DataError(f"unknown {what} ids: {unknown}")
        lut = np.array([table[int(u)] for u in uniq], dtype=np.int64)
        return lut[np.searchsorted(uniq, ids)]

    def remap(self, raw_ids: np.ndarray) -> np.ndarray:
        return self._lut(self.learning_map, np.asarray(raw_ids) & 0xFFFF, "raw label")

    def to_raw(self, train_ids: np.ndarray) -> np.ndarray:
        return self._lut(self.learning_map_inv, train_ids, "train label").astype(np.uint32)


def remap_labels(raw_ids: np.ndarray, label_map: LabelMap | None = None) -> np.ndarray:
    return (label_map or LabelMap.load()).remap(raw_ids)


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, class_count: int):
        self.counts = np.zeros((class_count, class_count), dtype=np.int64)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    def update(self, pred: np.ndarray, truth: np.ndarray, ignore_index: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        truth = np.asarray(truth, dtype=np.int64)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction length {pred.shape} != truth length {truth.shape}")
        keep = truth != ignore_index
        c = self.class_count
        idx = truth[keep] * c + pred[keep]
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.class_count)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class never appears in truth or prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        out = np.full(self.class_count, np.nan)
        np.divide(tp, denom, out=out, where=denom > 0)
        return out

    def miou(self) -> float:
        iou = self.iou()
        valid = ~np.isnan(iou)
        return float(iou[valid].mean()) if valid.any() else float("nan")


def evaluate(pred: np.ndarray, truth: np.ndarray, class_count: int, ignore_index: int = 255):
    cm = ConfusionMatrix(class_count).update(pred, truth, ignore_index)
    return cm, cm.iou(), cm.miou()


def format_iou_table(iou: np.ndarray, names: list[str], miou: float) -> str:
    width = max(len(n) for n in names)
    lines = [f"{'class':<{width}}  IoU"]
    for name, v in zip(names, iou):
        lines.append(f"{name:<{width}}  {'n/a' if np.isnan(v) else f'{100 * v:5.1f}'}")
    lines.append(f"{'mIoU':<{width}}  {100 * miou:5.1f}")
    return "\n".join(lines)


def export_attention(features: np.ndarray, fraction: float = 0.02) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` rows with the largest normalized norm."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    score = np.linalg.norm(features, axis=1)
    lo, hi = score.min(), score.max()
    score = (score - lo) / (hi - lo) if hi > lo else np.zeros_like(score)
    k = min(n, math.ceil(fraction * n))
    order = np.lexsort((np.arange(n), -score))
    return order[:k]


def write_attention(prefix: str | Path, indices: np.ndarray, points: np.ndarray) -> tuple[Path, Path]:
    """Write ``<prefix>.txt`` (one index per line) and ``<prefix>.xyz`` (selected points)."""
    prefix = Path(prefix)
    idx_path = prefix.with_suffix(".txt")
    xyz_path = prefix.with_suffix(".xyz")
    idx_path.write_text("".join(f"{int(i)}\n" for i in indices))
    np.savetxt(xyz_path, np.asarray(points)[indices], fmt="%.6f")
    return idx_path, xyz_path


def scan_files(root: str | Path, sequences: list[str] | list[int], require_labels: bool = True) -> list[tuple[Path, Path | None]]:
    """``(scan, label)`` path pairs under ``root/sequences/NN``."""
    out = []
    for seq in sequences:
        seq_dir = Path(root) / "sequences" / f"{int(seq):02d}"
        scans = sorted((seq_dir / "velodyne").glob("*.bin"))
        if not scans:
            raise DataError(f"no scans under {seq_dir / 'velodyne'}")
        for s in scans:
            label = seq_dir / "labels" / (s.stem + ".label")
            if require_labels and not label.exists():
                raise DataError(f"missing label file {label}")
            out.append((s, label if label.exists() else None))
    return out
