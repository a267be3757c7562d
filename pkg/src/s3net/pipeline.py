"""Voxelization of scans, batching, the training loop and inference."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .config import RunConfig
from .coords import CoordinateMap, quantize_points
from .data import ConfusionMatrix, LabelMap, Scan, read_labels, read_scan, scan_files
from .features import point_features
from .loss import ClassFrequency, VoxelLabelGrid, class_weights, total_loss
from .modules import S3Net, predict
from .sparse_ops import SparseTensor

log = logging.getLogger("s3net")


@dataclass
class Sample:
    coords: np.ndarray  # (v, 4)
    feats: np.ndarray  # (v, C)
    point_to_row: np.ndarray  # (n,)
    voxel_labels: np.ndarray | None  # (v,)
    point_labels: np.ndarray | None  # (n,)


def voxel_majority(point_to_row: np.ndarray, labels: np.ndarray, voxel_count: int, ignore_index: int) -> np.ndarray:
    """Most frequent supervised label per voxel; ties go to the lower id."""
    out = np.full(voxel_count, ignore_index, dtype=np.int64)
    keep = labels != ignore_index
    if not keep.any():
        return out
    rows, labs = point_to_row[keep], labels[keep].astype(np.int64)
    n_cls = int(labs.max()) + 1
    hist = np.zeros((voxel_count, n_cls), dtype=np.int64)
    np.add.at(hist, (rows, labs), 1)
    has = hist.sum(axis=1) > 0
    out[has] = np.argmax(hist[has], axis=1)
    return out


def prepare_sample(
    scan: Scan,
    train_labels: np.ndarray | None,
    voxel_size: float,
    ignore_index: int = 255,
    height: int = 64,
    width: int = 2048,
    batch: int = 0,
) -> Sample:
    feats = point_features(scan.points, scan.remission, height, width)
    coords, vfeats, p2r = quantize_points(scan.points, feats, voxel_size, batch)
    vlabels = None
    if train_labels is not None:
        vlabels = voxel_majority(p2r, np.asarray(train_labels), coords.shape[0], ignore_index)
    return Sample(coords, vfeats, p2r, vlabels, train_labels)


def collate(samples: list[Sample], dtype=np.float32) -> tuple[SparseTensor, np.ndarray | None, list[int]]:
    """Stack samples into one tensor with batch ids ``0..len-1``.

    Returns the tensor, concatenated voxel labels, and each sample's first row.
    """
    coords, feats, labels, starts = [], [], [], []
    offset = 0
    for b, s in enumerate(samples):
        c = s.coords.copy()
        c[:, 0] = b
        coords.append(c)
        feats.append(s.feats)
        labels.append(s.voxel_labels)
        starts.append(offset)
        offset += c.shape[0]
    tensor = SparseTensor(CoordinateMap(np.concatenate(coords)), Var(np.concatenate(feats).astype(dtype)))
    vox = None if any(l is None for l in labels) else np.concatenate(labels)
    return tensor, vox, starts


class SampleSource:
    """Loads and voxelizes scans once per process."""

    def __init__(self, cfg: RunConfig, label_map: LabelMap):
        self.cfg = cfg
        self.label_map = label_map
        self._cache: dict[Path, Sample] = {}

    def get(self, scan_path: Path, label_path: Path | None) -> Sample:
        if scan_path not in self._cache:
            scan = read_scan(scan_path)
            labels = None
            if label_path is not None:
                labels = self.label_map.remap(read_labels(label_path, len(scan)))
            self._cache[scan_path] = prepare_sample(
                scan, labels, self.cfg.voxel_size, self.label_map.ignore_index,
                self.cfg.range_image.height, self.cfg.range_image.width,
            )
        return self._cache[scan_path]


def build_model(cfg: RunConfig) -> S3Net:
    return S3Net(cfg.network, seed=cfg.seed, dtype=np.dtype(cfg.dtype))


def train_step(model: S3Net, x: SparseTensor, labels: np.ndarray, alpha: np.ndarray, cfg: RunConfig, lr: float, ignore_index: int = 255) -> dict[str, float]:
    model.train()
    model.zero_grad()
    grid = VoxelLabelGrid(x.coords.coords, labels)
    with Tape() as tape:
        logits = model(x)
        terms = total_loss(logits.feats, grid, alpha, cfg.loss.lambda_wce, cfg.loss.lambda_geo, ignore_index)
    tape.backward(terms.total)
    opt = cfg.optimizer
    ad.adam_step(model.parameters(), lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay)
    pred = predict(logits)
    keep = labels != ignore_index
    acc = float((pred[keep] == labels[keep]).mean()) if keep.any() else float("nan")
    return {"loss": float(terms.total.data), "wce": float(terms.wce.data), "geo": float(terms.geo.data), "acc": acc}


def infer_points(model: S3Net, sample: Sample, dtype=np.float32) -> np.ndarray:
    """Per-point training ids: voxel argmax broadcast back through the quantize mapping."""
    model.eval()
    x, _, _ = collate([sample], dtype)
    with ad.no_grad():
        logits = model(x)
    return predict(logits)[sample.point_to_row]


def validate(model: S3Net, source: SampleSource, files, class_count: int, dtype) -> ConfusionMatrix:
    cm = ConfusionMatrix(class_count)
    for scan_path, label_path in files:
        sample = source.get(scan_path, label_path)
        cm.update(infer_points(model, sample, dtype), sample.point_labels, source.label_map.ignore_index)
    return cm


def dataset_frequencies(source: SampleSource, files, class_count: int) -> ClassFrequency:
    labels = (read_and_remap(source, l, s) for s, l in files)
    return ClassFrequency.from_labels(labels, class_count, source.label_map.ignore_index)


def read_and_remap(source: SampleSource, label_path: Path, scan_path: Path) -> np.ndarray:
    n = os.path.getsize(scan_path) // 16
    return source.label_map.remap(read_labels(label_path, n))


class CheckpointError(Exception):
    pass


def save_verified_checkpoint(model: S3Net, path: Path, probe: SparseTensor | None, rtol: float = 1e-3, atol: float = 1e-4) -> None:
    """Write a checkpoint only if reloading it reproduces the model's eval logits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        ad.save_checkpoint(tmp, model.state_dict())
        if probe is not None:
            clone = S3Net(model.config, dtype=model.dtype)
            clone.load_state_dict(ad.load_checkpoint(tmp))
            model.eval()
            clone.eval()
            with ad.no_grad():
                a = model(probe).F
                b = clone(probe).F
            if not np.allclose(a, b, rtol=rtol, atol=atol):
                raise CheckpointError(f"reloaded checkpoint deviates by {np.abs(a - b).max():.3g}")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def train(
    cfg: RunConfig,
    log_record: Callable[[dict], None] | None = None,
    train_files: list | None = None,
    val_files: list | None = None,
) -> tuple[S3Net, list[dict]]:
    """Full loop: forward, total loss, backward, Adam; learning rate stepped per epoch."""
    label_map = LabelMap.load(cfg.label_map)
    ignore = label_map.ignore_index
    dtype = np.dtype(cfg.dtype)
    if train_files is None:
        train_files = scan_files(cfg.dataset_root, cfg.train_sequences)
    if val_files is None:
        val_files = scan_files(cfg.dataset_root, cfg.val_sequences) if cfg.val_sequences else []
    source = SampleSource(cfg, label_map)

    if cfg.loss.frequencies and Path(cfg.loss.frequencies).exists():
        freqs = ClassFrequency.load(cfg.loss.frequencies)
    else:
        freqs = dataset_frequencies(source, train_files, cfg.network.class_count)
    counts = freqs.counts.astype(np.float64)
    # classes absent from the training split get no weight; they never appear as targets
    present = counts > 0
    alpha = np.zeros_like(counts)
    alpha[present] = class_weights(counts[present] / counts.sum())

    model = build_model(cfg)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    emit = log_record or (lambda rec: log.info(json.dumps(rec)))
    step = 0
    for epoch in range(cfg.epochs):
        lr = ad.exp_lr(epoch, cfg.optimizer.lr, cfg.optimizer.decay, cfg.optimizer.period)
        order = rng.permutation(len(train_files))
        for start in range(0, len(order), cfg.batch_size):
            batch = [source.get(*train_files[i]) for i in order[start : start + cfg.batch_size]]
            x, labels, _ = collate(batch, dtype)
            stats = train_step(model, x, labels, alpha, cfg, lr, ignore)
            rec = {"epoch": epoch, "step": step, "lr": lr, **stats}
            history.append(rec)
            emit(rec)
            step += 1
        if val_files:
            cm = validate(model, source, val_files, cfg.network.class_count, dtype)
            rec = {"epoch": epoch, "step": step, "lr": lr, "val_miou": cm.miou()}
            history.append(rec)
            emit(rec)

    probe = None
    if train_files:
        probe, _, _ = collate([source.get(*train_files[0])], dtype)
    save_verified_checkpoint(model, Path(cfg.output_dir) / "model.ckpt", probe)
    return model, history


def load_model(cfg: RunConfig, checkpoint: str | Path) -> S3Net:
    model = build_model(cfg)
    model.load_state_dict(ad.load_checkpoint(checkpoint))
    return model.eval()

