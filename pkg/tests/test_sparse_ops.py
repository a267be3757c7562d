import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_conv3d
from s3net import autodiff as ad
from s3net import sparse_ops as so
from s3net.autodiff import Tape, Var
from s3net.coords import CoordinateMap, build_kernel_map, build_kernel_offsets, stride_coordinates
from s3net.gradcheck import check_gradients, random_cloud, random_tensor
from s3net.sparse_ops import BatchNormState, SparseTensor


def full_grid(n):
    ijk = np.array(np.meshgrid(*[np.arange(n)] * 3, indexing="ij")).reshape(3, -1).T
    return CoordinateMap(np.column_stack([np.zeros(len(ijk), dtype=np.int64), ijk]))


def submanifold(cmap, k=3):
    return build_kernel_map(cmap, cmap, build_kernel_offsets(k), 1)


def test_identity_kernel_copies_input():
    rng = np.random.default_rng(0)
    x = random_tensor(rng, 30, 5)
    w = np.zeros((27, 5, 5))
    w[13] = np.eye(5)
    out = so.sparse_conv_forward(x.F, w, submanifold(x.coords))
    np.testing.assert_array_equal(out, x.F)


def test_isolated_point_sees_only_centre_weight():
    cmap = CoordinateMap(np.array([[0, 0, 0, 0], [0, 9, 9, 9]]))
    rng = np.random.default_rng(1)
    w = rng.standard_normal((27, 2, 3))
    x = rng.standard_normal((2, 2))
    out = so.sparse_conv_forward(x, w, submanifold(cmap))
    np.testing.assert_allclose(out, x @ w[13], rtol=1e-14)


def test_matches_dense_oracle_on_full_grid():
    rng = np.random.default_rng(2)
    n = 6
    cmap = full_grid(n)
    x = rng.standard_normal((cmap.count, 3))
    w = rng.standard_normal((27, 3, 4))
    out = so.sparse_conv_forward(x, w, submanifold(cmap))
    grid = np.zeros((n, n, n, 3))
    grid[tuple(cmap.coords[:, 1:].T)] = x
    dense = dense_conv3d(grid, w.reshape(3, 3, 3, 3, 4))
    np.testing.assert_allclose(out, dense[tuple(cmap.coords[:, 1:].T)], rtol=1e-10, atol=1e-12)


def test_sparse_grid_matches_dense_oracle_with_zeros():
    rng = np.random.default_rng(3)
    cmap = random_cloud(rng, 60, extent=6)
    x = rng.standard_normal((cmap.count, 2))
    w = rng.standard_normal((27, 2, 2))
    out = so.sparse_conv_forward(x, w, submanifold(cmap))
    grid = np.zeros((6, 6, 6, 2))
    grid[tuple(cmap.coords[:, 1:].T)] = x
    dense = dense_conv3d(grid, w.reshape(3, 3, 3, 2, 2))
    np.testing.assert_allclose(out, dense[tuple(cmap.coords[:, 1:].T)], rtol=1e-10, atol=1e-12)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = random_tensor(rng, 25, 3)
    w = Var(rng.standard_normal((27, 3, 2)))
    b = Var(rng.standard_normal(2))
    kmap = submanifold(x.coords)
    res = check_gradients(lambda: ad.sum_squares(so.sparse_conv(x, w, kmap, x.coords, 1, b).feats), [x.feats, w, b])
    assert res.passed, res


def test_conv_rejects_channel_mismatch():
    rng = np.random.default_rng(5)
    x = random_tensor(rng, 10, 3)
    with pytest.raises(ValueError, match="channels"):
        so.sparse_conv_forward(x.F, np.zeros((27, 4, 2)), submanifold(x.coords))


def test_strided_output_coords():
    rng = np.random.default_rng(6)
    x = random_tensor(rng, 50, 2)
    coarse = stride_coordinates(x.coords, 1, 2)
    kmap = build_kernel_map(x.coords, coarse, build_kernel_offsets(3), 1)
    out = so.sparse_conv(x, Var(rng.standard_normal((27, 2, 2))), kmap, coarse, 2)
    assert out.coords is coarse and out.stride == 2
    assert np.all(out.coords.coords[:, 1:] % 2 == 0)


# transpose


def _adjoint_gap(rng):
    fine = random_cloud(rng, 50)
    coarse = stride_coordinates(fine, 1, 2)
    kmap = build_kernel_map(fine, coarse, build_kernel_offsets(3), 1)
    w = rng.standard_normal((27, 3, 4))
    x = rng.standard_normal((fine.count, 3))
    y = rng.standard_normal((coarse.count, 4))
    lhs = np.sum(so.sparse_conv_forward(x, w, kmap) * y)
    rhs = np.sum(x * so.sparse_conv_transpose_forward(y, w, kmap))
    return abs(lhs - rhs) / max(abs(lhs), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_transpose_is_adjoint(seed):
    assert _adjoint_gap(np.random.default_rng(seed)) < 1e-10


def test_transpose_of_identity_kernel():
    rng = np.random.default_rng(7)
    x = random_tensor(rng, 20, 3)
    w = np.zeros((27, 3, 3))
    w[13] = np.eye(3)
    np.testing.assert_array_equal(so.sparse_conv_transpose_forward(x.F, w, submanifold(x.coords)), x.F)


def test_transpose_support_is_target():
    rng = np.random.default_rng(8)
    fine = random_cloud(rng, 40)
    coarse = stride_coordinates(fine, 1, 2)
    kmap = build_kernel_map(fine, coarse, build_kernel_offsets(3), 1)
    y = SparseTensor(coarse, Var(rng.standard_normal((coarse.count, 2))), 2)
    out = so.sparse_conv_transpose(y, Var(rng.standard_normal((27, 5, 2))), kmap, fine, 1)
    assert out.coords is fine and out.stride == 1 and out.F.shape == (fine.count, 5)


def test_transpose_without_cache_raises():
    rng = np.random.default_rng(9)
    y = random_tensor(rng, 5, 2)
    with pytest.raises(KeyError, match="no cached coordinate map"):
        so.sparse_conv_transpose(y, Var(np.zeros((27, 2, 2))), None, None, 1)


# pooling, broadcast, pointwise


def test_global_avg_pool_example():
    coords = CoordinateMap(np.array([[0, 0, 0, 0], [0, 1, 0, 0], [1, 0, 0, 0]]))
    x = SparseTensor(coords, Var(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])))
    batches, pooled = so.global_avg_pool(x)
    np.testing.assert_array_equal(batches, [0, 1])
    np.testing.assert_array_equal(pooled.data, [[2.0, 3.0], [5.0, 6.0]])


def test_global_avg_pool_batch_oracle():
    rng = np.random.default_rng(10)
    x = random_tensor(rng, 90, 4, batches=3)
    batches, pooled = so.global_avg_pool(x)
    for r, b in enumerate(batches):
        rows = x.coords.coords[:, 0] == b
        np.testing.assert_allclose(pooled.data[r], x.F[rows].mean(axis=0), rtol=1e-13)


def test_broadcast_ones_is_identity():
    rng = np.random.default_rng(11)
    x = random_tensor(rng, 30, 3, batches=2)
    batches, _ = so.global_avg_pool(x)
    out = so.broadcast_mul(x, batches, Var(np.ones((len(batches), 3))))
    np.testing.assert_array_equal(out.F, x.F)


def test_relu_and_coords_preserved():
    rng = np.random.default_rng(12)
    x = random_tensor(rng, 30, 3)
    out = so.relu(x)
    assert out.coords is x.coords
    np.testing.assert_array_equal(out.F, np.maximum(x.F, 0))


def test_add_rejects_mismatched_coords():
    rng = np.random.default_rng(13)
    a = random_tensor(rng, 10, 2)
    b = random_tensor(rng, 10, 2, extent=9)
    with pytest.raises(ValueError):
        so.add(a, b)


def test_batch_norm_training_normalizes():
    rng = np.random.default_rng(14)
    x = SparseTensor(random_cloud(rng, 80), Var(rng.standard_normal((80, 4)) * 3 + 2))
    state = BatchNormState(np.zeros(4), np.ones(4))
    out, new = so.batch_norm(x, Var(np.ones(4)), Var(np.zeros(4)), state, training=True)
    np.testing.assert_allclose(out.F.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.F.var(axis=0), 1, rtol=1e-4)
    np.testing.assert_allclose(new.running_mean, 0.1 * x.F.mean(axis=0), rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    rng = np.random.default_rng(15)
    x = random_tensor(rng, 20, 2)
    state = BatchNormState(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    out, new = so.batch_norm(x, Var(np.ones(2)), Var(np.zeros(2)), state, training=False)
    np.testing.assert_allclose(out.F, (x.F - state.running_mean) / np.sqrt(state.running_var + 1e-5), rtol=1e-12)
    assert new is state or np.array_equal(new.running_mean, state.running_mean)


def test_batch_norm_gradients():
    rng = np.random.default_rng(16)
    x = random_tensor(rng, 25, 3)
    r = rng.standard_normal((25, 3))
    g, b = Var(rng.uniform(0.5, 2, 3)), Var(rng.standard_normal(3))
    state = BatchNormState(np.zeros(3), np.ones(3))

    def fn():
        out, _ = so.batch_norm(x, g, b, state, training=True)
        return ad.total(ad.mul(out.feats, Var(r)))

    assert check_gradients(fn, [x.feats, g, b]).passed


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_in_features(seed, a, b):
    rng = np.random.default_rng(seed)
    cmap = random_cloud(rng, 20, extent=4)
    kmap = submanifold(cmap)
    w = rng.standard_normal((27, 2, 3))
    x, y = rng.standard_normal((2, cmap.count, 2))
    lhs = so.sparse_conv_forward(a * x + b * y, w, kmap)
    rhs = a * so.sparse_conv_forward(x, w, kmap) + b * so.sparse_conv_forward(y, w, kmap)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_conv_is_deterministic():
    rng = np.random.default_rng(17)
    x = random_tensor(rng, 60, 4)
    w = rng.standard_normal((27, 4, 4))
    kmap = submanifold(x.coords)
    a = so.sparse_conv_forward(x.F, w, kmap)
    b = so.sparse_conv_forward(x.F, w, submanifold(CoordinateMap(x.coords.coords)))
    assert a.tobytes() == b.tobytes()


def test_tape_records_conv():
    rng = np.random.default_rng(18)
    x = random_tensor(rng, 10, 2)
    w = Var(rng.standard_normal((27, 2, 2)), requires_grad=True)
    with Tape() as tape:
        out = so.sparse_conv(x, w, submanifold(x.coords), x.coords, 1)
        loss = ad.total(out.feats)
    tape.backward(loss)
    assert w.grad is not None and w.grad.shape == w.shape
