"""Central finite-difference checks of tape gradients.

Error per component is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
with ``floor = 1e-3 * max|numeric|`` over the checked tensor, so components
many orders below the tensor's gradient scale are judged on an absolute
basis relative to that scale rather than against rounding noise.

A central difference is only a valid oracle when both probes stay on the
same linear piece of every ReLU. Components whose ``+h`` and ``-h`` probes
see different activation patterns are skipped (and counted); when sampling,
another component is drawn in their place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import sparse_ops as so
from .autodiff import Tape, Var
from .coords import CoordinateMap, build_kernel_map, build_kernel_offsets, stride_coordinates
from .loss import VoxelLabelGrid, anisotropy_weights, geo_loss, wce_loss
from .modules import NetworkConfig, S3Net, SInterAM, SIntraAM, SResModule
from .sparse_ops import BatchNormState, SparseTensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    skipped: int = 0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(
            self.checked > 0
            and self.skipped <= self.checked
            and np.isfinite(self.max_error)
            and self.max_error <= self.tolerance
        )


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = max(1e-3 * float(np.abs(numeric).max(initial=0.0)), 1e-10)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(
    loss_fn: Callable[[], Var],
    wrt: Sequence[Var],
    name: str = "",
    step: float = STEP,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the computation from the current ``.data`` of
    every Var in ``wrt``; perturbations are applied in place and restored.
    """
    rng = rng or np.random.default_rng(0)
    for v in wrt:
        v.requires_grad = True
        v.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(v.data) if v.grad is None else v.grad.copy() for v in wrt]

    worst, checked, skipped = 0.0, 0, 0
    with ad.no_grad():
        for v, grad in zip(wrt, analytic):
            flat = v.data.reshape(-1)
            want = flat.size if max_components is None else min(max_components, flat.size)
            candidates = np.arange(flat.size) if want == flat.size else rng.permutation(flat.size)
            idx, numeric = [], []
            for i in candidates:
                if len(idx) == want:
                    break
                orig = flat[i]
                with ad.track_kinks() as kinks_up:
                    flat[i] = orig + step
                    up = float(loss_fn().data)
                with ad.track_kinks() as kinks_down:
                    flat[i] = orig - step
                    down = float(loss_fn().data)
                flat[i] = orig
                if kinks_up != kinks_down:
                    skipped += 1
                    continue
                idx.append(i)
                numeric.append((up - down) / (2 * step))
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size:
                worst = max(worst, max_relative_error(grad.reshape(-1)[idx], np.asarray(numeric)))
            checked += idx.size
    return CheckResult(name, worst, checked, skipped)


# ---------------------------------------------------------------------------
# instances


def random_cloud(rng: np.random.Generator, n: int, extent: int = 6, batches: int = 1) -> CoordinateMap:
    """``n`` distinct coordinates drawn from an ``extent``^3 cube per batch."""
    cells = np.array(np.meshgrid(*[np.arange(extent)] * 3, indexing="ij")).reshape(3, -1).T
    rows = []
    per = [n // batches + (b < n % batches) for b in range(batches)]
    for b, m in enumerate(per):
        pick = cells[rng.choice(cells.shape[0], m, replace=False)]
        rows.append(np.column_stack([np.full(m, b), pick]))
    return CoordinateMap(np.concatenate(rows))


def random_tensor(rng, n, channels, extent=6, batches=1) -> SparseTensor:
    coords = random_cloud(rng, n, extent, batches)
    return SparseTensor(coords, Var(rng.standard_normal((coords.count, channels))))


def _projection_loss(rng, shape) -> Callable[[Var], Var]:
    r = Var(rng.standard_normal(shape))
    return lambda out: ad.total(ad.mul(out, r))


def check_conv(rng) -> CheckResult:
    x = random_tensor(rng, 40, 3)
    w = Var(rng.standard_normal((27, 3, 4)) * 0.3)
    b = Var(rng.standard_normal(4))
    kmap = build_kernel_map(x.coords, x.coords, build_kernel_offsets(3), 1)

    def fn():
        return ad.sum_squares(so.sparse_conv(x, w, kmap, x.coords, 1, b).feats)

    return check_gradients(fn, [x.feats, w, b], "sparse_conv")


def check_strided_conv(rng) -> CheckResult:
    x = random_tensor(rng, 50, 3)
    out = stride_coordinates(x.coords, 1, 2)
    w = Var(rng.standard_normal((27, 3, 2)) * 0.3)
    kmap = build_kernel_map(x.coords, out, build_kernel_offsets(3), 1)

    def fn():
        return ad.sum_squares(so.sparse_conv(x, w, kmap, out, 2).feats)

    return check_gradients(fn, [x.feats, w], "sparse_conv_stride2")


def check_conv_transpose(rng) -> CheckResult:
    fine = random_cloud(rng, 50)
    coarse = stride_coordinates(fine, 1, 2)
    kmap = build_kernel_map(fine, coarse, build_kernel_offsets(3), 1)
    y = SparseTensor(coarse, Var(rng.standard_normal((coarse.count, 3))), 2)
    w = Var(rng.standard_normal((27, 2, 3)) * 0.3)
    proj = _projection_loss(rng, (fine.count, 2))

    def fn():
        return proj(so.sparse_conv_transpose(y, w, kmap, fine, 1).feats)

    return check_gradients(fn, [y.feats, w], "sparse_conv_transpose")


def check_batch_norm(rng) -> CheckResult:
    x = random_tensor(rng, 30, 4)
    gamma = Var(rng.uniform(0.5, 1.5, 4))
    beta = Var(rng.standard_normal(4))
    state = BatchNormState(np.zeros(4), np.ones(4))
    proj = _projection_loss(rng, (x.coords.count, 4))

    def fn():
        out, _ = so.batch_norm(x, gamma, beta, state, training=True)
        return proj(out.feats)

    return check_gradients(fn, [x.feats, gamma, beta], "batch_norm")


def _module_check(name, module, x, rng, max_components=None, unpack=False) -> CheckResult:
    probe = module(x)
    out = probe[0] if unpack else probe
    proj = _projection_loss(rng, out.feats.shape)

    def fn():
        res = module(x)
        return proj((res[0] if unpack else res).feats)

    params = [p for p in module.parameters()]
    return check_gradients(fn, [x.feats, *params], name, max_components=max_components, rng=rng)


def check_sintra(rng) -> CheckResult:
    x = random_tensor(rng, 40, 4)
    return _module_check("SIntraAM", SIntraAM(4, rng=rng, dtype=np.float64), x, rng, max_components=40)


def check_sinter(rng) -> CheckResult:
    x = random_tensor(rng, 40, 8, batches=2)
    return _module_check("SInterAM", SInterAM(8, rng=rng, dtype=np.float64), x, rng)


def check_resmodule(rng) -> CheckResult:
    x = random_tensor(rng, 40, 3)
    m = SResModule(3, 4, stride_factor=2, rng=rng, dtype=np.float64)
    return _module_check("SResModule", m, x, rng, max_components=40, unpack=True)


def _labelled_logits(rng, n=60, classes=4):
    coords = random_cloud(rng, n, extent=5)
    labels = rng.integers(0, classes, coords.count)
    labels[:3] = 255
    logits = Var(rng.standard_normal((coords.count, classes)))
    return logits, VoxelLabelGrid(coords.coords, labels)


def check_wce(rng) -> CheckResult:
    logits, grid = _labelled_logits(rng)
    alpha = rng.uniform(0.5, 3.0, logits.shape[1])
    return check_gradients(lambda: wce_loss(logits, grid.labels, alpha), [logits], "wce_loss")


def check_geo(rng) -> CheckResult:
    logits, grid = _labelled_logits(rng)
    weights = anisotropy_weights(grid)
    return check_gradients(lambda: geo_loss(logits, grid, weights=weights), [logits], "geo_loss")


def small_network_config() -> NetworkConfig:
    return NetworkConfig(input_channels=4, class_count=3, stem_channels=4, encoder_channels=(4, 4, 4, 4))


def check_network(rng, voxels: int = 100, per_param: int = 2) -> CheckResult:
    net = S3Net(small_network_config(), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    x = random_tensor(rng, voxels, 4, extent=8)
    probe = net(x)
    proj = _projection_loss(rng, probe.feats.shape)

    def fn():
        return proj(net(x).feats)

    params = net.parameters()
    return check_gradients(fn, [x.feats, *params], "S3Net", max_components=per_param, rng=rng)


SUITE = {
    "sparse_conv": check_conv,
    "sparse_conv_stride2": check_strided_conv,
    "sparse_conv_transpose": check_conv_transpose,
    "batch_norm": check_batch_norm,
    "SIntraAM": check_sintra,
    "SInterAM": check_sinter,
    "SResModule": check_resmodule,
    "wce_loss": check_wce,
    "geo_loss": check_geo,
    "S3Net": check_network,
}


def run_suite(seed: int = 0, names: Sequence[str] | None = None) -> list[CheckResult]:
    results = []
    for name in names or SUITE:
        results.append(SUITE[name](np.random.default_rng([seed, len(results)])))
    return results
