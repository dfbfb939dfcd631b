"""Tape autodiff: forward values against numpy, gradients against finite differences."""

import numpy as np
import pytest

from ctxcompress import engine
from ctxcompress.engine import (Adam, Tensor, concat, cross_entropy_logits, gelu,
                                grad_check, masked_softmax, matmul, rmsnorm_affine,
                                rope_rotate, stop_gradient, where)


def manual_fd(loss_fn, param, eps=1e-6):
    """Central finite differences over every entry, no shared code with grad_check."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(param.data.shape)


def test_matmul_gradient_against_manual_fd():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    loss_fn = lambda: ((a @ b) ** 2.0).sum()
    fd_a, fd_b = manual_fd(loss_fn, a), manual_fd(loss_fn, b)
    a.zero_grad(), b.zero_grad()
    loss_fn().backward()
    np.testing.assert_allclose(a.grad, fd_a, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(b.grad, fd_b, rtol=1e-6, atol=1e-9)


def test_elementwise_op_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(np.abs(rng.normal(size=(4, 5))) * 0.5 + 0.5, requires_grad=True)
    cases = {
        "mul_add": lambda: ((x * x + x) * 0.5).sum(),
        "div": lambda: (x / (x + 2.0)).sum(),
        "exp_log": lambda: (engine.exp(x * 0.1) + engine.log(x)).sum(),
        "tanh_sqrt": lambda: (engine.tanh(x) * engine.sqrt(x)).sum(),
        "pow": lambda: (x ** 3.0).mean(),
        "gelu": lambda: gelu(x).sum(),
        "neg_sub": lambda: (-x - x * 2.0).sum(),
    }
    for name, fn in cases.items():
        assert grad_check(fn, {"x": x}, n_samples=20) < 1e-6, name


def test_broadcast_gradients_have_leaf_shapes():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b + a).sum().backward()
    assert a.grad.shape == (3, 1) and b.grad.shape == (1, 4)
    np.testing.assert_allclose(a.grad, np.full((3, 1), 8.0))  # sum_j (b_j + 1)
    np.testing.assert_allclose(b.grad, np.full((1, 4), 3.0))


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 5, 6)), requires_grad=True)  # broadcast over axis 0
    fn = lambda: ((a @ b) ** 2.0).mean()
    assert grad_check(fn, {"a": a, "b": b}, n_samples=15) < 1e-6
    a.zero_grad(), b.zero_grad()
    fn().backward()
    assert b.grad.shape == (3, 5, 6)


def test_getitem_fancy_index_accumulates():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_concat_where_stop_gradient():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    cond = rng.normal(size=(6, 3)) > 0
    fn = lambda: where(cond, concat([a, b], axis=0), concat([a, b], axis=0) * 3.0).sum()
    assert grad_check(fn, {"a": a, "b": b}, n_samples=18) < 1e-6

    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    (stop_gradient(x) * x).sum().backward()
    np.testing.assert_allclose(x.grad, x.data)  # d/dx (c * x) with c frozen


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_masked_softmax_forward_and_grad():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(size=(3, 5)) * 3, requires_grad=True)
    mask = rng.normal(size=(3, 5)) > -0.3
    mask[:, 0] = True
    p = masked_softmax(logits, mask)
    assert np.all(p.data[~mask] == 0.0)
    np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)
    # reference: plain exp restricted to the allowed set
    e = np.where(mask, np.exp(logits.data - logits.data.max()), 0.0)
    np.testing.assert_allclose(p.data, e / e.sum(-1, keepdims=True), atol=1e-12)

    weights = rng.normal(size=(3, 5))
    fn = lambda: (masked_softmax(logits, mask) * weights).sum()
    assert grad_check(fn, {"logits": logits}, n_samples=15) < 1e-6


def test_masked_softmax_handles_extreme_logits():
    logits = Tensor(np.array([[1e4, -1e4, 0.0]]), requires_grad=True)
    mask = np.array([[True, False, True]])
    p = masked_softmax(logits, mask)
    assert np.isfinite(p.data).all()
    np.testing.assert_allclose(p.data, [[1.0, 0.0, 0.0]], atol=1e-30)


def test_masked_softmax_empty_row_raises():
    with pytest.raises(ValueError, match="empty attention row"):
        masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True] * 3, [False] * 3]))


def test_rmsnorm_matches_scalar_loop():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    gain = Tensor(rng.normal(size=6), requires_grad=True)
    eps = 1e-6
    y = rmsnorm_affine(x, gain, eps)
    ref = np.empty_like(x.data)
    for i in range(2):
        for j in range(3):
            row = x.data[i, j]
            ms = sum(float(v) ** 2 for v in row) / 6
            for k in range(6):
                ref[i, j, k] = row[k] / np.sqrt(ms + eps) * gain.data[k]
    np.testing.assert_allclose(y.data, ref, atol=1e-13)
    fn = lambda: (rmsnorm_affine(x, gain, eps) ** 2.0).sum()
    assert grad_check(fn, {"x": x, "gain": gain}, n_samples=20) < 1e-6


def test_rope_rotate_known_angle_and_norm():
    cos, sin = np.cos(1.0), np.sin(1.0)
    x = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
    y = rope_rotate(x, np.array([[cos]]), np.array([[sin]]))
    np.testing.assert_allclose(y.data, [[cos, sin]], atol=1e-15)

    rng = np.random.default_rng(6)
    v = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    ang = rng.normal(size=(4, 4))
    out = rope_rotate(v, np.cos(ang), np.sin(ang))
    pair_norm = lambda z: z[..., :4] ** 2 + z[..., 4:] ** 2
    np.testing.assert_allclose(pair_norm(out.data), pair_norm(v.data), atol=1e-12)
    fn = lambda: (rope_rotate(v, np.cos(ang), np.sin(ang)) ** 2.0).sum()
    assert grad_check(fn, {"v": v}, n_samples=20) < 1e-6


def test_cross_entropy_matches_manual():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    targets = rng.integers(0, 5, size=(2, 4))
    loss = cross_entropy_logits(logits, targets)
    flat = logits.data.reshape(-1, 5)
    lse = np.log(np.exp(flat - flat.max(-1, keepdims=True)).sum(-1)) + flat.max(-1)
    ref = (lse - flat[np.arange(8), targets.reshape(-1)]).mean()
    np.testing.assert_allclose(loss.item(), ref, atol=1e-12)
    fn = lambda: cross_entropy_logits(logits, targets)
    assert grad_check(fn, {"logits": logits}, n_samples=25) < 1e-6


def test_cross_entropy_weights():
    rng = np.random.default_rng(8)
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    targets = np.array([1, 2, 0])
    w = np.array([1.0, 0.0, 3.0])
    loss = cross_entropy_logits(logits, targets, w)
    flat = logits.data
    lse = np.log(np.exp(flat - flat.max(-1, keepdims=True)).sum(-1)) + flat.max(-1)
    nll = lse - flat[np.arange(3), targets]
    np.testing.assert_allclose(loss.item(), (nll * w).sum() / w.sum(), atol=1e-12)
    with pytest.raises(ValueError, match="zero total weight"):
        cross_entropy_logits(logits, targets, np.zeros(3))
    fn = lambda: cross_entropy_logits(logits, targets, w)
    assert grad_check(fn, {"logits": logits}, n_samples=12) < 1e-6


def test_adam_step_and_lr_multiplier():
    p1 = Tensor(np.zeros(3), requires_grad=True)
    p2 = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([(p1, 1.0), (p2, 10.0)], lr=0.1)
    p1.grad = np.array([1.0, -2.0, 0.5])
    p2.grad = np.array([1.0, -2.0, 0.5])
    opt.step()
    # bias-corrected first step moves by lr * sign(grad), up to eps rounding
    np.testing.assert_allclose(p1.data, [-0.1, 0.1, -0.1], rtol=1e-6)
    np.testing.assert_allclose(p2.data, 10 * p1.data, rtol=1e-6)

    p1.grad = np.array([np.inf, 0.0, 0.0])
    with pytest.raises(FloatingPointError, match="non-finite"):
        opt.step()


def test_adam_converges_on_quadratic():
    x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam([(x, 1.0)], lr=0.2)
    for _ in range(200):
        opt.zero_grad()
        ((x - np.array([1.0, 2.0])) ** 2.0).sum().backward()
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 2.0], atol=1e-3)


def test_grad_check_reports_missing_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        grad_check(lambda: (x * 2.0).sum(), {"x": x, "unused": unused}, n_samples=2)


def test_interior_gradients_are_freed():
    x = Tensor(np.ones((64, 64)), requires_grad=True)
    y = x * 2.0
    z = (y * y).sum()
    z.backward()
    assert y.grad is None and y._parents == ()
    assert x.grad is not None
