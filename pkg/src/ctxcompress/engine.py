"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray and records the operation that produced it.
`Tensor.backward()` walks the recorded graph in reverse topological order
and accumulates gradients into every tensor created with
``requires_grad=True``. Ops cover exactly what the transformer stack and
the training loops need; a few composite operations (masked softmax,
rmsnorm, GeLU, RoPE rotation, cross-entropy) are fused single nodes with
hand-derived backward rules to keep the tape short. `grad_check` verifies
any of it against central finite differences.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray plus the tape node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable grad-tracked tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                # interior activations: free the gradient as soon as it is consumed
                node.grad = None
                node._backward = None
                node._parents = ()

    # -- graph construction ------------------------------------------------


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = False
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: a._accum(-g))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(g):
        a._accum(g * exponent * a.data ** (exponent - 1))

    return _node(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: a._accum(g * out_data))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: a._accum(g / a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _node(out_data, (a,), lambda g: a._accum(g * (1.0 - out_data * out_data)))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: a._accum(g * 0.5 / out_data))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape) if ga.shape != a.data.shape else ga)
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape) if gb.shape != b.data.shape else gb)

    return _node(out_data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(old)))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: a._accum(g.transpose(inverse)))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape) / count)

    return _node(out_data, (a,), backward)


def getitem(a, index) -> Tensor:
    """Slice or integer-array indexing. Backward scatters with np.add.at."""
    a = as_tensor(a)
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accum(full)

    return _node(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _node(out_data, tuple(tensors), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _node(out_data, (a, b), backward)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# -- fused neural-net ops ---------------------------------------------------


def masked_softmax(logits, mask: np.ndarray) -> Tensor:
    """Row softmax over entries where `mask` is True; masked entries are exactly 0.

    `mask` broadcasts against `logits` and is a constant. Rows with no
    allowed entry raise, since their weights are undefined.
    """
    t = as_tensor(logits)
    x = t.data
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("empty attention row: some row has no allowed entry")
    neg = np.finfo(x.dtype).min
    shifted = x - np.max(np.where(mask, x, neg), axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted, where=mask, out=np.zeros_like(x)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        t._accum(p * (g - inner))

    return _node(p, (t,), backward)


def rmsnorm_affine(x, gain, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2, last) + eps) * gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.data.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + np.asarray(eps, dtype=x.dtype))
    normed = x.data * inv
    out_data = normed * gain.data

    def backward(g):
        if gain.requires_grad or gain._parents:
            gain._accum(_unbroadcast(g * normed, gain.data.shape))
        if x.requires_grad or x._parents:
            gn = g * gain.data
            # d/dx [x * inv]: inv * (gn - normed * mean(gn * normed) / (1 + eps/ms-term))
            dot = (gn * x.data).sum(axis=-1, keepdims=True)
            x._accum(inv * gn - (inv ** 3 / d) * dot * x.data)

    return _node(out_data, (x, gain), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """tanh-approximated GeLU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + th)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        x._accum(g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * d_inner))

    return _node(out_data, (x,), backward)


def rope_rotate(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + hd/2) of the last axis by per-position angles.

    `cos`/`sin` have shape broadcastable to x[..., : hd/2] and are constants.
    """
    x = as_tensor(x)
    half = x.data.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out_data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        x._accum(np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1))

    return _node(out_data, (x,), backward)


def cross_entropy_logits(logits, targets: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of integer `targets` under `logits` (..., vocab).

    `weight` (broadcastable to targets' shape) selects/weighs positions; the
    mean is over the total weight.
    """
    t = as_tensor(logits)
    x = t.data
    flat = x.reshape(-1, x.shape[-1])
    idx = np.asarray(targets).reshape(-1)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (x - m) - np.log(z)
    nll = -logp.reshape(-1, x.shape[-1])[np.arange(idx.size), idx]
    if weight is None:
        w = np.ones_like(nll)
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=x.dtype).reshape(-1), nll.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy_logits: zero total weight")
    out_data = np.asarray((nll * w).sum() / total, dtype=x.dtype)

    def backward(g):
        p = (e / z).reshape(-1, x.shape[-1])
        p[np.arange(idx.size), idx] -= 1.0
        p *= (g * w / total)[:, None]
        t._accum(p.reshape(x.shape))

    return _node(out_data, (t,), backward)


# operator sugar on Tensor
Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__pow__ = lambda self, e: pow_(self, e)
Tensor.__getitem__ = lambda self, idx: getitem(self, idx)
Tensor.reshape = lambda self, *shape: reshape(self, shape if len(shape) > 1 else shape[0])
Tensor.transpose = lambda self, *axes: transpose(self, axes)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)


class Adam:
    """Adam over named parameter groups with per-group learning-rate multipliers."""

    def __init__(self, groups, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        """`groups`: iterable of (tensor, lr_multiplier)."""
        self.params = [(p, float(m)) for p, m in groups]
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p, _ in self.params]
        self._v = [np.zeros_like(p.data) for p, _ in self.params]

    def zero_grad(self):
        for p, _ in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for (p, mult), m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise FloatingPointError("non-finite gradient in Adam.step")
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p.data -= (self.lr * mult / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def grad_check(loss_fn, params: dict, n_samples: int = 30, eps: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between tape gradients and central finite differences.

    `loss_fn()` must rebuild the graph from `params` (name -> Tensor) and
    return a scalar Tensor. Checks `n_samples` randomly chosen entries of
    every parameter. Raises on non-finite analytic gradients.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} received no gradient")
        if not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        analytic[name] = p.grad.copy()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        k = min(n_samples, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for i in picks:
            orig = flat[i]
            h = eps * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(analytic[name].reshape(-1)[i])
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, err)
    return worst
