"""Differentiable operations on sparse tensors.

Convolution runs as gather -> per-offset matmul -> scatter over a
:class:`~s3net.coords.KernelMap`. Within one offset list every input and
output row appears at most once, so plain fancy-index accumulation is exact
and the summation order (offset by offset) is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .coords import CoordinateMap, KernelMap


@dataclass(frozen=True)
class SparseTensor:
    coords: CoordinateMap
    feats: Var
    stride: int = 1

    def __post_init__(self):
        if self.feats.shape[0] != self.coords.count:
            raise ValueError(
                f"feature rows ({self.feats.shape[0]}) != coordinate count ({self.coords.count})"
            )
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    @property
    def F(self) -> np.ndarray:
        return self.feats.data

    def replace(self, feats: Var) -> "SparseTensor":
        return SparseTensor(self.coords, feats, self.stride)


@dataclass(frozen=True)
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray


def _check_kmap(kmap: KernelMap, n_in: int, n_out: int, n_weights: int) -> None:
    if len(kmap) != n_weights:
        raise ValueError(f"kernel map has {len(kmap)} offsets, weights have {n_weights}")
    if kmap.in_count != n_in or kmap.out_count != n_out:
        raise ValueError(
            f"kernel map built for {kmap.in_count}->{kmap.out_count} rows, "
            f"got {n_in}->{n_out}"
        )
    kmap.validate()


# ---------------------------------------------------------------------------
# raw kernels on ndarrays


def sparse_conv_forward(
    feats: np.ndarray, weights: np.ndarray, kmap: KernelMap, bias: np.ndarray | None = None
) -> np.ndarray:
    """``out[b] = sum_i W_i^T x[a]`` over pairs ``(a, b)`` of offset ``i``, plus bias."""
    if feats.shape[1] != weights.shape[1]:
        raise ValueError(f"input has {feats.shape[1]} channels, weights expect {weights.shape[1]}")
    _check_kmap(kmap, feats.shape[0], kmap.out_count, weights.shape[0])
    dtype = np.result_type(feats, weights)
    out = np.zeros((kmap.out_count, weights.shape[2]), dtype=dtype)
    for w, a, b in zip(weights, kmap.in_rows, kmap.out_rows):
        if a.size:
            out[b] += feats[a] @ w
    if bias is not None:
        out += bias
    return out


def sparse_conv_backward(
    grad_out: np.ndarray, feats: np.ndarray, weights: np.ndarray, kmap: KernelMap
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(grad_x, grad_w, grad_bias)`` of :func:`sparse_conv_forward`."""
    if grad_out.shape != (kmap.out_count, weights.shape[2]):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output")
    if feats.shape != (kmap.in_count, weights.shape[1]):
        raise ValueError(f"input shape {feats.shape} does not match kernel map / weights")
    grad_x = np.zeros_like(feats, dtype=np.result_type(feats, grad_out))
    grad_w = np.zeros_like(weights, dtype=np.result_type(weights, grad_out))
    for i, (w, a, b) in enumerate(zip(weights, kmap.in_rows, kmap.out_rows)):
        if a.size:
            go = grad_out[b]
            grad_x[a] += go @ w.T
            grad_w[i] = feats[a].T @ go
    return grad_x, grad_w, grad_out.sum(axis=0)


def sparse_conv_transpose_forward(
    feats: np.ndarray, weights: np.ndarray, kmap: KernelMap, bias: np.ndarray | None = None
) -> np.ndarray:
    """Adjoint of :func:`sparse_conv_forward` for the same ``kmap`` and weights.

    ``feats`` live on the kernel map's output side; the result lives on its
    input side. ``weights`` keep the forward layout ``(K, C_target, C_feats)``.
    """
    if feats.shape[1] != weights.shape[2]:
        raise ValueError(f"input has {feats.shape[1]} channels, weights expect {weights.shape[2]}")
    _check_kmap(kmap, kmap.in_count, feats.shape[0], weights.shape[0])
    out = np.zeros((kmap.in_count, weights.shape[1]), dtype=np.result_type(feats, weights))
    for w, a, b in zip(weights, kmap.in_rows, kmap.out_rows):
        if a.size:
            out[a] += feats[b] @ w.T
    if bias is not None:
        out += bias
    return out


def sparse_conv_transpose_backward(
    grad_out: np.ndarray, feats: np.ndarray, weights: np.ndarray, kmap: KernelMap
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_x = np.zeros_like(feats, dtype=np.result_type(feats, grad_out))
    grad_w = np.zeros_like(weights, dtype=np.result_type(weights, grad_out))
    for i, (w, a, b) in enumerate(zip(weights, kmap.in_rows, kmap.out_rows)):
        if a.size:
            go = grad_out[a]
            grad_x[b] += go @ w
            grad_w[i] = go.T @ feats[b]
    return grad_x, grad_w, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# tape-aware ops on SparseTensor


def sparse_conv(
    x: SparseTensor,
    weight: Var,
    kmap: KernelMap,
    out_coords: CoordinateMap,
    out_stride: int,
    bias: Var | None = None,
) -> SparseTensor:
    if kmap.out_count != out_coords.count:
        raise ValueError("kernel map was not built for these output coordinates")
    feats, w = x.feats, weight.data
    out = sparse_conv_forward(feats.data, w, kmap, None if bias is None else bias.data)

    def backward(g):
        gx, gw, gb = sparse_conv_backward(g, feats.data, w, kmap)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (feats, weight) if bias is None else (feats, weight, bias)
    return SparseTensor(out_coords, ad.record("sparse_conv", inputs, out, backward), out_stride)


def sparse_conv_transpose(
    x: SparseTensor,
    weight: Var,
    kmap: KernelMap | None,
    target_coords: CoordinateMap | None,
    target_stride: int,
    bias: Var | None = None,
) -> SparseTensor:
    if kmap is None or target_coords is None:
        raise KeyError("no cached coordinate map for level")
    if kmap.in_count != target_coords.count or kmap.out_count != x.coords.count:
        raise ValueError("cached kernel map does not match the tensors")
    feats, w = x.feats, weight.data
    out = sparse_conv_transpose_forward(feats.data, w, kmap, None if bias is None else bias.data)

    def backward(g):
        gx, gw, gb = sparse_conv_transpose_backward(g, feats.data, w, kmap)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (feats, weight) if bias is None else (feats, weight, bias)
    return SparseTensor(
        target_coords, ad.record("sparse_conv_transpose", inputs, out, backward), target_stride
    )


def batch_index_rows(coords: CoordinateMap) -> tuple[np.ndarray, np.ndarray]:
    """Present batch ids and, per row, the position of its batch in that list."""
    batches, inverse = np.unique(coords.coords[:, 0], return_inverse=True)
    return batches, inverse


def global_avg_pool(x: SparseTensor) -> tuple[np.ndarray, Var]:
    """Per-batch channel means. Returns ``(batch_ids, pooled)``; pooled is ``(B, C)``."""
    if x.coords.count == 0:
        raise ValueError("global_avg_pool on an empty tensor")
    batches, inverse = batch_index_rows(x.coords)
    counts = np.bincount(inverse, minlength=batches.size).astype(x.F.dtype)
    pooled = np.zeros((batches.size, x.channels), dtype=x.F.dtype)
    np.add.at(pooled, inverse, x.F)
    pooled /= counts[:, None]

    def backward(g):
        return ((g / counts[:, None])[inverse],)

    return batches, ad.record("global_avg_pool", (x.feats,), pooled, backward)


def broadcast_mul(x: SparseTensor, batch_ids: np.ndarray, scales: Var) -> SparseTensor:
    """Multiply every row by the scale vector of its batch."""
    present, inverse = batch_index_rows(x.coords)
    pos = np.searchsorted(batch_ids, present)
    if np.any(pos >= len(batch_ids)) or np.any(batch_ids[np.minimum(pos, len(batch_ids) - 1)] != present):
        raise ValueError("broadcast_mul needs one scale vector per batch present in the tensor")
    row_pos = pos[inverse]
    s = scales.data
    feats = x.feats

    def backward(g):
        gs = np.zeros_like(s)
        np.add.at(gs, row_pos, g * feats.data)
        return g * s[row_pos], gs

    out = ad.record("broadcast_mul", (feats, scales), feats.data * s[row_pos], backward)
    return x.replace(out)


def linear(v: Var, weight: Var, bias: Var | None = None) -> Var:
    out = ad.matmul(v, weight)
    return out if bias is None else ad.add_bias(out, bias)


def relu(x: SparseTensor) -> SparseTensor:
    return x.replace(ad.relu(x.feats))


def sigmoid(x: SparseTensor) -> SparseTensor:
    return x.replace(ad.sigmoid(x.feats))


def _same_coords(x: SparseTensor, y: SparseTensor, op: str) -> None:
    if x.coords is not y.coords and x.coords != y.coords:
        raise ValueError(f"{op}: coordinate maps differ")


def add(x: SparseTensor, y: SparseTensor) -> SparseTensor:
    _same_coords(x, y, "add")
    return x.replace(ad.add(x.feats, y.feats))


def mul(x: SparseTensor, y: SparseTensor) -> SparseTensor:
    _same_coords(x, y, "mul")
    return x.replace(ad.mul(x.feats, y.feats))


def scale(x: SparseTensor, factor: float) -> SparseTensor:
    return x.replace(ad.scale(x.feats, factor))


def batch_norm(
    x: SparseTensor,
    gamma: Var,
    beta: Var,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> tuple[SparseTensor, BatchNormState]:
    """Per-channel normalization over all rows of all batches.

    Returns the output and the updated running statistics; in eval mode the
    state is returned unchanged.
    """
    f = x.F
    if training:
        n = f.shape[0]
        mean = f.mean(axis=0)
        var = f.var(axis=0)
        unbiased = var * n / (n - 1) if n > 1 else var
        new_state = BatchNormState(
            (1 - momentum) * state.running_mean + momentum * mean,
            (1 - momentum) * state.running_var + momentum * unbiased,
        )
    else:
        mean, var = state.running_mean, state.running_var
        new_state = state
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (f - mean) * inv_std
    out = xhat * gamma.data + beta.data
    g_data = gamma.data

    def backward(g):
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        gx_hat = g * g_data
        if training:
            gx = inv_std * (gx_hat - gx_hat.mean(axis=0) - xhat * (gx_hat * xhat).mean(axis=0))
        else:
            gx = gx_hat * inv_std
        return gx, g_gamma, g_beta

    y = ad.record("batch_norm", (x.feats, gamma, beta), out.astype(f.dtype, copy=False), backward)
    return x.replace(y), new_state
