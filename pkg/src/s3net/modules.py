"""Network building blocks and the encoder-decoder assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import sparse_ops as so
from .autodiff import Parameter
from .coords import CoordinateMap, KernelMap, build_kernel_map, build_kernel_offsets, stride_coordinates
from .sparse_ops import BatchNormState, SparseTensor


@dataclass
class NetworkConfig:
    input_channels: int = 4
    class_count: int = 19
    stem_channels: int = 32
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    kernel_size: int = 3
    damping: float = 0.35
    reduction: int = 4
    encoder_tower: int = 3
    decoder_tower: int = 2
    encoder_inter: tuple[bool, ...] | None = None
    encoder_intra: tuple[bool, ...] | None = None
    decoder_inter: tuple[bool, ...] | None = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        levels = len(self.encoder_channels)
        if levels < 1:
            raise ValueError("at least one encoder level is required")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        for name in ("encoder_inter", "encoder_intra", "decoder_inter"):
            flags = getattr(self, name)
            flags = (True,) * levels if flags is None else tuple(bool(f) for f in flags)
            if len(flags) != levels:
                raise ValueError(f"{name} needs {levels} flags, got {len(flags)}")
            setattr(self, name, flags)

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def level_input_channels(self) -> tuple[int, ...]:
        return (self.stem_channels,) + self.encoder_channels[:-1]


class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self._buffers())
        return state

    def _buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        if isinstance(self, BatchNorm):
            out[prefix + "running_mean"] = self.state.running_mean
            out[prefix + "running_var"] = self.state.running_var
        for name, child in self.children():
            out.update(child._buffers(f"{prefix}{name}."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.asarray(state[name], dtype=p.data.dtype).copy()
        for m_name, m in self._named_modules():
            if isinstance(m, BatchNorm):
                dtype = m.state.running_mean.dtype
                m.state = BatchNormState(
                    np.asarray(state[m_name + "running_mean"], dtype=dtype).copy(),
                    np.asarray(state[m_name + "running_var"], dtype=dtype).copy(),
                )

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child._named_modules(f"{prefix}{name}.")


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    """Sparse convolution. ``stride_factor`` 1 keeps the coordinate set."""

    def __init__(self, in_ch, out_ch, kernel_size, stride_factor=1, bias=False, *, rng, dtype=np.float32):
        self.offsets = build_kernel_offsets(kernel_size)
        self.stride_factor = stride_factor
        k = len(self.offsets)
        self.weight = Parameter(_he(rng, (k, in_ch, out_ch), k * in_ch, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def output_coords(self, x: SparseTensor) -> tuple[CoordinateMap, int]:
        if self.stride_factor == 1:
            return x.coords, x.stride
        return stride_coordinates(x.coords, x.stride, self.stride_factor), x.stride * self.stride_factor

    def __call__(self, x: SparseTensor, out: tuple[CoordinateMap, int] | None = None) -> tuple[SparseTensor, KernelMap]:
        out_coords, out_stride = out if out is not None else self.output_coords(x)
        kmap = build_kernel_map(x.coords, out_coords, self.offsets, x.stride)
        return so.sparse_conv(x, self.weight, kmap, out_coords, out_stride, self.bias), kmap


class ConvTranspose(Module):
    """Scatter back onto coordinates cached by the matching encoder level."""

    def __init__(self, in_ch, out_ch, kernel_size, *, rng, dtype=np.float32):
        k = kernel_size**3
        self.weight = Parameter(_he(rng, (k, out_ch, in_ch), k * in_ch, dtype))

    def __call__(self, x: SparseTensor, kmap: KernelMap | None, target: CoordinateMap | None, target_stride: int) -> SparseTensor:
        return so.sparse_conv_transpose(x, self.weight, kmap, target, target_stride)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.state = BatchNormState(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: SparseTensor) -> SparseTensor:
        out, state = so.batch_norm(x, self.gamma, self.beta, self.state, self.training, self.momentum, self.eps)
        if self.training:
            self.state = BatchNormState(
                state.running_mean.astype(self.state.running_mean.dtype),
                state.running_var.astype(self.state.running_var.dtype),
            )
        return out


class Linear(Module):
    def __init__(self, in_f, out_f, *, rng, dtype=np.float32):
        self.weight = Parameter(_he(rng, (in_f, out_f), in_f, dtype))
        self.bias = Parameter(np.zeros(out_f, dtype=dtype))

    def __call__(self, v):
        return so.linear(v, self.weight, self.bias)


class SIntraAM(Module):
    """Spatial attention mask from two stride-1 convs, applied as ``x + x * mask``."""

    def __init__(self, channels, kernel_size=3, *, rng, dtype=np.float32):
        self.conv_a = Conv(channels, channels, kernel_size, bias=True, rng=rng, dtype=dtype)
        self.conv_b = Conv(channels, channels, kernel_size, bias=True, rng=rng, dtype=dtype)

    def __call__(self, x: SparseTensor) -> SparseTensor:
        h, _ = self.conv_a(x)
        h, _ = self.conv_b(so.relu(h))
        mask = so.sigmoid(h)
        return so.add(x, so.mul(x, mask))


class SInterAM(Module):
    """Squeeze (per-batch pooling), excitation, channel re-scaling, damping."""

    def __init__(self, channels, reduction=4, damping=0.35, *, rng, dtype=np.float32):
        if channels % reduction and channels >= reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype)
        self.damping = damping

    def excite(self, x: SparseTensor):
        batches, pooled = so.global_avg_pool(x)
        s = ad.sigmoid(self.fc2(ad.relu(self.fc1(pooled))))
        return batches, s

    def __call__(self, x: SparseTensor) -> SparseTensor:
        batches, s = self.excite(x)
        return so.scale(so.broadcast_mul(x, batches, s), self.damping)


class SResModule(Module):
    """Two conv-ReLU-BN blocks plus a size-1 conv skip that aligns coordinates."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride_factor=1, *, rng, dtype=np.float32, bn_momentum=0.1, bn_eps=1e-5):
        self.conv1 = Conv(in_ch, out_ch, kernel_size, stride_factor, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(out_ch, bn_momentum, bn_eps, dtype=dtype)
        self.conv2 = Conv(out_ch, out_ch, kernel_size, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, bn_momentum, bn_eps, dtype=dtype)
        self.skip = Conv(in_ch, out_ch, 1, stride_factor, rng=rng, dtype=dtype)

    def __call__(self, x: SparseTensor) -> tuple[SparseTensor, KernelMap]:
        target = self.conv1.output_coords(x)
        h, kmap = self.conv1(x, target)
        h = self.bn1(so.relu(h))
        h, _ = self.conv2(h)
        h = self.bn2(so.relu(h))
        s, _ = self.skip(x, target)
        return so.add(h, s), kmap


class SResTower(Module):
    def __init__(self, in_ch, out_ch, count, kernel_size=3, stride_factor=1, *, rng, dtype=np.float32, **bn):
        if count < 1:
            raise ValueError("tower needs at least one module")
        self.blocks = [
            SResModule(in_ch if i == 0 else out_ch, out_ch, kernel_size, stride_factor if i == 0 else 1, rng=rng, dtype=dtype, **bn)
            for i in range(count)
        ]

    def __call__(self, x: SparseTensor) -> tuple[SparseTensor, KernelMap]:
        x, first_kmap = self.blocks[0](x)
        for block in self.blocks[1:]:
            x, _ = block(x)
        return x, first_kmap


@dataclass
class LevelCache:
    coords: CoordinateMap
    stride: int
    kmap: KernelMap
    skip: SparseTensor


@dataclass
class CoordinateCache:
    levels: dict[int, LevelCache] = field(default_factory=dict)

    def get(self, level: int) -> LevelCache:
        try:
            return self.levels[level]
        except KeyError:
            raise KeyError(f"no cached coordinate map for level {level}") from None


class EncoderLevel(Module):
    def __init__(self, in_ch, out_ch, cfg: NetworkConfig, level: int, *, rng, dtype):
        bn = dict(bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
        self.inter = SInterAM(in_ch, cfg.reduction, cfg.damping, rng=rng, dtype=dtype) if cfg.encoder_inter[level] else None
        self.intra = SIntraAM(in_ch, cfg.kernel_size, rng=rng, dtype=dtype) if cfg.encoder_intra[level] else None
        self.tower = SResTower(in_ch, out_ch, cfg.encoder_tower, cfg.kernel_size, 2, rng=rng, dtype=dtype, **bn)

    def __call__(self, x: SparseTensor) -> tuple[SparseTensor, LevelCache]:
        h = x
        if self.inter is not None:
            h = self.inter(h)
        if self.intra is not None:
            h = self.intra(h)
        out, kmap = self.tower(h)
        return out, LevelCache(x.coords, x.stride, kmap, x)


class DecoderLevel(Module):
    def __init__(self, in_ch, skip_ch, out_ch, cfg: NetworkConfig, level: int, *, rng, dtype):
        bn = dict(bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
        self.up = ConvTranspose(in_ch, out_ch, cfg.kernel_size, rng=rng, dtype=dtype)
        self.skip = Conv(skip_ch, out_ch, 1, rng=rng, dtype=dtype)
        self.inter = SInterAM(out_ch, cfg.reduction, cfg.damping, rng=rng, dtype=dtype) if cfg.decoder_inter[level] else None
        self.tower = SResTower(out_ch, out_ch, cfg.decoder_tower, cfg.kernel_size, 1, rng=rng, dtype=dtype, **bn)

    def __call__(self, x: SparseTensor, cached: LevelCache) -> SparseTensor:
        up = self.up(x, cached.kmap, cached.coords, cached.stride)
        s, _ = self.skip(cached.skip)
        h = so.add(up, s)
        if self.inter is not None:
            h = self.inter(h)
        h, _ = self.tower(h)
        return h


class S3Net(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.dtype = np.dtype(dtype)
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps)
        self.stem = Conv(cfg.input_channels, cfg.stem_channels, cfg.kernel_size, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(cfg.stem_channels, **bn, dtype=dtype)
        in_chs = cfg.level_input_channels
        self.encoders = [
            EncoderLevel(in_chs[l], cfg.encoder_channels[l], cfg, l, rng=rng, dtype=dtype) for l in range(cfg.levels)
        ]
        self.decoders = [
            DecoderLevel(cfg.encoder_channels[l], in_chs[l], in_chs[l], cfg, l, rng=rng, dtype=dtype)
            for l in range(cfg.levels)
        ]
        self.head = Conv(cfg.stem_channels, cfg.class_count, 1, bias=True, rng=rng, dtype=dtype)
        self.last_decoder_features: SparseTensor | None = None

    def __call__(self, scan: SparseTensor) -> SparseTensor:
        if scan.channels != self.config.input_channels:
            raise ValueError(f"scan has {scan.channels} channels, network expects {self.config.input_channels}")
        h, _ = self.stem(scan)
        h = so.relu(self.stem_bn(h))
        cache = CoordinateCache()
        for level, enc in enumerate(self.encoders):
            h, cache.levels[level] = enc(h)
        for level in reversed(range(self.config.levels)):
            h = self.decoders[level](h, cache.get(level))
        self.last_decoder_features = h
        logits, _ = self.head(h)
        return logits


def predict(logits: SparseTensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    f = logits.F if isinstance(logits, SparseTensor) else np.asarray(logits)
    return np.argmax(f, axis=1)
