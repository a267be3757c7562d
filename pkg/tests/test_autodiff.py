import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s3net import autodiff as ad
from s3net import sparse_ops as so
from s3net.autodiff import Parameter, Tape, Var, adam_step, exp_lr, load_checkpoint, save_checkpoint
from s3net.coords import build_kernel_map, build_kernel_offsets
from s3net.gradcheck import check_gradients, max_relative_error, random_tensor


def test_sum_gradient_is_ones():
    x = Var(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_gradients_sum_over_paths():
    x = Var(np.array([1.0, -2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(ad.add(x, ad.mul(x, x)))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 1 + 2 * x.data)


def test_residual_passes_gradient_through():
    x = Var(np.array([[-1.0, 2.0]]), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(ad.add(x, ad.relu(x)))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1.0, 2.0]])


def test_backward_requires_scalar():
    x = Var(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = Var(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            ad.total(x)
    assert not tape.nodes


def test_two_layer_conv_gradients():
    rng = np.random.default_rng(0)
    x = random_tensor(rng, 30, 2)
    kmap = build_kernel_map(x.coords, x.coords, build_kernel_offsets(3), 1)
    w1 = Var(rng.standard_normal((27, 2, 3)) * 0.3)
    w2 = Var(rng.standard_normal((27, 3, 2)) * 0.3)

    def fn():
        h = so.sparse_conv(x, w1, kmap, x.coords, 1)
        h = so.sigmoid(h)
        return ad.sum_squares(so.sparse_conv(h, w2, kmap, x.coords, 1).feats)

    res = check_gradients(fn, [x.feats, w1, w2])
    assert res.passed and res.max_error < 1e-5


def test_relative_error_floor():
    assert max_relative_error(np.array([1.0, 1e-9]), np.array([1.0, 0.0])) < 1e-5
    assert max_relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


# optimizer


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adam_step([p], lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_single_step_closed_form():
    rng = np.random.default_rng(1)
    p0 = rng.standard_normal(5)
    g = rng.standard_normal(5)
    lr, b1, b2, eps, wd = 0.001, 0.9, 0.999, 1e-8, 0.0005
    p = Parameter(p0.copy())
    p.grad = g.copy()
    adam_step([p], lr, b1, b2, eps, wd)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = p0 - lr * wd * p0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-10)


def test_adam_converges_on_quadratic():
    p = Parameter(np.array([0.0]))
    for _ in range(1000):
        p.grad = 2 * (p.data - 3.0)
        adam_step([p], lr=0.01, weight_decay=0.0)
    assert abs(p.data[0] - 3.0) < 0.05 * 3.0


@given(st.floats(1e-3, 1e3))
def test_adam_update_is_gradient_scale_invariant(c):
    g = np.array([0.3, -1.2, 2.0])
    a, b = Parameter(np.ones(3)), Parameter(np.ones(3))
    a.grad, b.grad = g, c * g
    adam_step([a], lr=0.01, eps=0.0, weight_decay=0.0)
    adam_step([b], lr=0.01, eps=0.0, weight_decay=0.0)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12)


@pytest.mark.parametrize("epoch, lr", [(0, 0.001), (9, 0.001), (10, 0.0009), (20, 0.00081)])
def test_exp_lr(epoch, lr):
    assert exp_lr(epoch) == lr


# checkpoints


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": np.arange(24, dtype=np.float32).reshape(2, 3, 4), "b": np.array([1.5], dtype=np.float32)}
    save_checkpoint(tmp_path / "m.ckpt", tensors)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    buf = (tmp_path / "m.ckpt").read_bytes()
    assert buf[:4] == b"S3NK"
    assert struct.unpack_from("<III", buf, 4) == (1, 1, 1)
    assert buf[16:17] == b"w"
    assert struct.unpack_from("<III", buf, 17) == (2, 1, 2)
    assert np.frombuffer(buf[29:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    save_checkpoint(path, {"w": np.zeros(2, np.float32)})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)
