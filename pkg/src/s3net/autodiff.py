"""Reverse-mode differentiation over feature matrices.

A :class:`Tape` records one node per primitive while it is active (``with
tape:``). Each node keeps a closure mapping the output gradient to input
gradients; :meth:`Tape.backward` replays them in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []
_kink_logs: list[list[bytes]] = []


class Var:
    """A value slot on the tape: an ndarray plus an identity."""

    __slots__ = ("id", "data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.id = next(_ids)
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Var):
    """Trainable value with Adam moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class Node:
    op: str
    inputs: tuple[Var, ...]
    output: Var
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(value) into every reachable leaf's ``grad``."""
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        produced = {node.output.id for node in self.nodes}
        leaves: dict[int, Var] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.output.id, None)
            if g is None:
                continue
            for var, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not var.requires_grad:
                    continue
                if var.id in grads:
                    grads[var.id] = grads[var.id] + gi
                else:
                    grads[var.id] = gi
                if var.id not in produced:
                    leaves[var.id] = var
        for vid, var in leaves.items():
            g = grads.get(vid)
            if g is None:
                continue
            var.grad = g.copy() if var.grad is None else var.grad + g
        return grads


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


@contextlib.contextmanager
def no_grad():
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


def record(
    op: str,
    inputs: Iterable[Var],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Var:
    """Wrap ``out_data`` in a Var and, when needed, put a node on the active tape."""
    inputs = tuple(inputs)
    tape = active_tape()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Var(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# ---------------------------------------------------------------------------
# dense primitives used by the sparse ops and the losses


def add(a: Var, b: Var) -> Var:
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Var, b: Var) -> Var:
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Var, factor: float) -> Var:
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Var, b: Var) -> Var:
    return record("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(a: Var, bias: Var) -> Var:
    return record("add_bias", (a, bias), a.data + bias.data, lambda g: (g, g.sum(axis=0)))


@contextlib.contextmanager
def track_kinks():
    """Collect the ReLU activation patterns of every call made inside the block."""
    log: list[bytes] = []
    _kink_logs.append(log)
    try:
        yield log
    finally:
        _kink_logs.remove(log)


def relu(a: Var) -> Var:
    mask = a.data > 0
    for log in _kink_logs:
        log.append(np.packbits(mask).tobytes())
    return record("relu", (a,), a.data * mask, lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    out = _stable_sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def total(a: Var) -> Var:
    return record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_squares(a: Var) -> Var:
    return record("sum_squares", (a,), np.asarray((a.data**2).sum()), lambda g: (2.0 * g * a.data,))


def concat_rows(parts: Sequence[Var]) -> Var:
    sizes = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return [g[sizes[i] : sizes[i + 1]] for i in range(len(parts))]

    return record("concat_rows", parts, np.concatenate([p.data for p in parts], axis=0), backward)


# ---------------------------------------------------------------------------
# optimisation


def exp_lr(epoch: int, base_lr: float = 0.001, decay: float = 0.9, period: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    # decimal arithmetic so e.g. 0.001 * 0.9**2 rounds once, to 0.00081
    return float(Decimal(repr(base_lr)) * Decimal(repr(decay)) ** (epoch // period))


def adam_step(
    params: Iterable[Parameter],
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0005,
) -> None:
    """One Adam update in place, with decoupled weight decay."""
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout (all little-endian):
#   magic  b"S3NK"   version u32   record count u32
#   per record: name length u32, utf-8 name, ndim u32, dims u32 * ndim,
#               float32 payload in C order

CHECKPOINT_MAGIC = b"S3NK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
