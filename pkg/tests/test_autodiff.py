"""Gradient, optimizer, and checkpoint tests for the reverse-mode tape.

Every differentiable op is checked against central finite differences with a
randomized linear readout (a weighted sum), which catches wrong Jacobians
that a plain ``.sum()`` loss would miss (e.g. normalizers whose output sums
are nearly input-independent).  Inputs are O(1) so a single step size works:
truncation error is O(h^2) ~ 1e-12 and roundoff ~ 1e-10, both far below the
1e-5 relative tolerance.
"""

import numpy as np
import pytest

from mmsr import autodiff as ad
from mmsr.errors import CheckpointError, NonFiniteValue, NotScalar, ShapeMismatch

FD_H = 1e-6
FD_RTOL = 1e-5


def weighted_loss(out, w):
    return (out * ad.Tensor(w)).sum()


def fd_grad(fn, x, h=FD_H):
    """Central-difference gradient of scalar fn at x, coordinate by coordinate."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_op(build, x, seed):
    """FD-check d(loss)/dx where loss = sum(W * build(x)) for random W."""
    rng = np.random.default_rng([seed, 7])
    t = ad.parameter(x.copy())
    out = build(t)
    w = rng.standard_normal(out.shape)
    loss = weighted_loss(out, w)
    loss.backward()
    analytic = t.grad.copy()

    def scalar(arr):
        with ad.no_grad():
            return float((build(ad.Tensor(arr)).data * w).sum())

    numeric = fd_grad(scalar, x.copy())
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < FD_RTOL, f"max rel {rel.max():.3e} at {build.__name__ if hasattr(build, '__name__') else build}"


# Each entry: (name, build(t) -> Tensor, input shape, input transform).
# Constants partnered with the input are captured, so only t is differentiated;
# two-input ops get a second FD pass below via swapped roles.
def _op_table(seed):
    rng = np.random.default_rng([seed, 13])
    b23 = ad.Tensor(rng.standard_normal((2, 3)))
    b3 = ad.Tensor(rng.standard_normal(3))
    bpos = ad.Tensor(rng.uniform(0.5, 2.0, (2, 3)) * np.sign(rng.standard_normal((2, 3))))
    m34 = ad.Tensor(rng.standard_normal((3, 4)))
    mb = ad.Tensor(rng.standard_normal((2, 4, 5)))
    ids = rng.integers(0, 6, size=(3, 4))
    return [
        ("add", lambda t: t + b23, (2, 3)),
        ("add_broadcast", lambda t: t + b3, (2, 3)),
        ("sub", lambda t: t - b23, (2, 3)),
        ("rsub_broadcast", lambda t: b23 - (t + b3), (2, 3)),
        ("mul", lambda t: t * b23, (2, 3)),
        ("mul_broadcast_row", lambda t: t * b3, (2, 3)),
        ("div", lambda t: t / bpos, (2, 3)),
        ("div_denominator", lambda t: b23 / (t + ad.Tensor(np.full((2, 3), 3.0))), (2, 3)),
        ("neg", lambda t: -t, (2, 3)),
        ("scale", lambda t: t.scale(-1.7), (2, 3)),
        ("matmul_lhs", lambda t: t @ m34, (2, 3)),
        ("matmul_rhs", lambda t: m34.transpose() @ t, (3, 5)),
        ("matmul_batched", lambda t: t @ mb, (2, 3, 4)),
        ("transpose", lambda t: t.transpose((1, 0, 2)), (2, 3, 4)),
        ("reshape", lambda t: t.reshape(6, 2), (3, 4)),
        ("slice", lambda t: t[1:, ::2], (3, 4)),
        ("gather_rows", lambda t: t[np.array([0, 2, 2, 1])], (3, 4)),
        ("sum_all", lambda t: t.sum().reshape(1), (2, 3)),
        ("sum_axis", lambda t: t.sum(axis=1), (2, 3)),
        ("sum_keepdims", lambda t: t.sum(axis=0, keepdims=True), (2, 3)),
        ("mean", lambda t: t.mean(axis=-1), (2, 3)),
        ("softmax", lambda t: ad.softmax(t), (2, 5)),
        ("softmax_axis0", lambda t: ad.softmax(t, axis=0), (4, 3)),
        ("log_softmax", lambda t: ad.log_softmax(t), (2, 5)),
        ("layer_norm", lambda t: ad.layer_norm(t), (3, 8)),
        ("gelu", lambda t: ad.gelu(t), (2, 5)),
        ("l2_normalize", lambda t: ad.l2_normalize(t), (3, 6)),
        ("embed", lambda t: ad.embed(t, ids), (6, 4)),
        ("concat", lambda t: ad.concat([t, b23, t], axis=0), (2, 3)),
        ("concat_lastaxis", lambda t: ad.concat([t, b23], axis=-1), (2, 3)),
        ("reuse_accumulate", lambda t: t * t + t.scale(0.5), (2, 3)),
        ("chain_mlp", lambda t: ad.layer_norm(ad.gelu(t @ m34)), (2, 3)),
    ]


@pytest.mark.parametrize("seed", range(5))
def test_fd_every_op(seed):
    rng = np.random.default_rng([seed, 3])
    for name, build, shape in _op_table(seed):
        x = rng.standard_normal(shape)
        build.__name__ = name
        check_op(build, x, seed * 101 + hash(name) % 997)


def test_fd_dropout_train_mode():
    # Same generator seed on every evaluation keeps the mask fixed, so the
    # train-mode op is differentiable and its gradient is mask/(1-p).
    x = np.random.default_rng(5).standard_normal((4, 6))

    def build(t):
        return ad.dropout(t, 0.25, train=True, rng=np.random.default_rng(99))

    check_op(build, x, 12345)
    out = ad.dropout(ad.Tensor(x), 0.25, train=True, rng=np.random.default_rng(99))
    kept = out.data != 0.0
    np.testing.assert_allclose(out.data[kept], x[kept] / 0.75, rtol=1e-12)


def test_dropout_eval_mode_is_identity():
    x = ad.parameter(np.random.default_rng(0).standard_normal((3, 3)))
    assert ad.dropout(x, 0.5, train=False) is x
    assert ad.dropout(x, 0.0, train=True) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, train=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        ad.dropout(x, 0.5, train=True)


def test_embed_duplicate_ids_accumulate():
    table = ad.parameter(np.arange(12.0).reshape(4, 3))
    out = ad.embed(table, np.array([1, 1, 3]))
    out.sum().backward()
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(table.grad, expected)
    with pytest.raises(ShapeMismatch):
        ad.embed(table, np.array([4]))
    with pytest.raises(ShapeMismatch):
        ad.embed(table, np.array([0.5]))


def test_backward_requires_scalar():
    t = ad.parameter(np.ones(3))
    with pytest.raises(NotScalar):
        (t * t).backward()


def test_unreachable_params_get_zero_grads():
    used = ad.parameter(np.ones(2))
    unused = ad.parameter(np.ones(3))
    loss = (used * used).sum()
    left_out = ad.backward(loss, [used, unused])
    assert left_out == [unused]
    np.testing.assert_array_equal(unused.grad, np.zeros(3))
    np.testing.assert_array_equal(used.grad, 2.0 * np.ones(2))


def test_no_grad_suppresses_graph():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = x * x
        with ad.no_grad():
            pass  # nesting must not re-enable recording on exit
        z = y + x
    assert not z.requires_grad and z._parents == ()
    # recording resumes after the block
    w = (x * x).sum()
    w.backward()
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones(3))


def test_detach_blocks_gradient():
    x = ad.parameter(np.full(3, 2.0))
    loss = (x.detach() * x).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_non_finite_raises():
    x = ad.parameter(np.ones(3))
    with np.errstate(divide="ignore"), pytest.raises(NonFiniteValue):
        x / ad.Tensor(np.zeros(3))


def test_adam_first_step_size_is_lr():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = ad.Adam({"p": p}, lr=0.01)
    p.grad = np.array([0.5, -3.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)


def test_adam_zero_grad_leaves_params_untouched():
    p = ad.parameter(np.array([3.14, 2.72]))
    before = p.data.copy()
    opt = ad.Adam({"p": p}, lr=0.1)
    for _ in range(5):
        opt.step()  # p.grad is None -> treated as zeros
    np.testing.assert_array_equal(p.data, before)


def test_adam_skip_set_freezes_param_and_state():
    a = ad.parameter(np.ones(2))
    b = ad.parameter(np.ones(2))
    opt = ad.Adam({"a": a, "b": b}, lr=0.05)
    a.grad = np.full(2, 0.3)
    b.grad = np.full(2, 0.3)
    opt.step(skip={"b"})
    assert opt.t == 1
    np.testing.assert_array_equal(b.data, np.ones(2))
    np.testing.assert_array_equal(opt.m["b"], np.zeros(2))
    np.testing.assert_array_equal(opt.v["b"], np.zeros(2))
    assert not np.array_equal(a.data, np.ones(2))


def test_adam_converges_on_quadratic():
    p = ad.parameter(np.array(10.0))
    opt = ad.Adam({"p": p}, lr=0.1)
    for _ in range(1200):
        opt.zero_grad()
        diff = p - ad.Tensor(np.array(3.0))
        loss = diff * diff
        loss.backward()
        opt.step()
    assert abs(float(p.data) - 3.0) < 1e-3


def test_adam_step_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.adam_step(np.ones(2), np.ones(3), np.zeros(2), np.zeros(2), 1, 0.1)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    tensors = {
        "enc.w": rng.standard_normal((4, 3)),
        "enc.b": rng.standard_normal(3),
        "scalar": np.array(2.5),
    }
    path = str(tmp_path / "model.ckpt")
    ad.save_checkpoint(path, tensors, step=42, extra={"cfg": {"d_model": 8}})
    manifest, loaded = ad.load_checkpoint(path)
    assert manifest["step"] == 42
    assert manifest["extra"]["cfg"]["d_model"] == 8
    assert sorted(loaded) == sorted(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], np.asarray(tensors[k]))

    # byte-stable across rewrites of identical contents
    path2 = str(tmp_path / "model2.ckpt")
    ad.save_checkpoint(path2, tensors, step=42, extra={"cfg": {"d_model": 8}})
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_checkpoint_rejects_corruption(tmp_path):
    path = str(tmp_path / "c.ckpt")
    ad.save_checkpoint(path, {"w": np.ones(4)}, step=1)
    blob = open(path, "rb").read()
    bad = str(tmp_path / "bad.ckpt")
    with open(bad, "wb") as fh:
        fh.write(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError):
        ad.load_checkpoint(bad)
    with open(bad, "wb") as fh:
        fh.write(blob[:-9])
    with pytest.raises(CheckpointError):
        ad.load_checkpoint(bad)
