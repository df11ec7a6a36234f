"""Dense tensors with reverse-mode differentiation.

Only the operations needed by the day-encoder ResNet and its two heads are
provided. Arrays are channels-last: sequences are ``(N, L, C)``.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NoLabeledSamplesError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    """A node in the computation graph.

    ``data`` holds the forward value; ``grad`` the accumulated adjoint (None
    until backward reaches the node).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), op=""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def _accumulate(self, g, owned=False):
        # owned=True: caller hands over a fresh array nobody else references
        if not self.requires_grad:
            return
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tensor_sum(self)


_ONES = {}


def _colsum(a):
    """Column sums of a 2-D array through BLAS (much faster than ``sum(axis=0)``)."""
    key = (a.shape[0], a.dtype)
    ones = _ONES.get(key)
    if ones is None:
        if len(_ONES) > 64:
            _ONES.clear()
        ones = _ONES[key] = np.ones(a.shape[0], dtype=a.dtype)
    return ones @ a


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward):
    out = Tensor(data, parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        b._accumulate(g)
        a._accumulate(g, owned=a is not b)

    return _node(a.data + b.data, (a, b), "add", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward)


def tensor_sum(x):
    x = as_tensor(x)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum()), (x,), "sum", backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        x._accumulate(g.reshape(old))

    return _node(x.data.reshape(shape), (x,), "reshape", backward)


def _same_padding(k):
    left = (k - 1) // 2
    return left, k - 1 - left


def _chunk_rows(length, channels, itemsize):
    # keep each block's working set around 256 KiB so shifted matmuls stay in cache
    per_row = max(1, length * channels * itemsize)
    return max(1, (256 * 1024) // per_row)


def _conv_forward(x, w, bias):
    n, length, cin = x.shape
    k, _, cout = w.shape
    left, _ = _same_padding(k)
    out = np.empty((n, length, cout), dtype=x.dtype)
    step = _chunk_rows(length + k, max(cin, cout), x.dtype.itemsize)
    for s in range(0, n, step):
        xs = x[s:s + step]
        xp = np.zeros((xs.shape[0], length + k - 1, cin), dtype=x.dtype)
        xp[:, left:left + length] = xs
        o = out[s:s + step]
        if cin == 1:
            o[...] = xp[:, 0:length] * w[0]
            for j in range(1, k):
                o += xp[:, j:j + length] * w[j]
        else:
            np.matmul(xp[:, 0:length], w[0], out=o)
            for j in range(1, k):
                o += xp[:, j:j + length] @ w[j]
        o += bias
    return out


def _conv_backward(x, w, g, need_w, need_x):
    n, length, cin = x.shape
    k, _, cout = w.shape
    left, _ = _same_padding(k)
    dw = np.zeros_like(w) if need_w else None
    dx = np.empty_like(x) if need_x else None
    step = _chunk_rows(length + k, max(cin, cout), x.dtype.itemsize)
    wt = np.ascontiguousarray(w.transpose(0, 2, 1))
    for s in range(0, n, step):
        gs = g[s:s + step]
        m = gs.shape[0]
        if need_w:
            xp = np.zeros((m, length + k - 1, cin), dtype=x.dtype)
            xp[:, left:left + length] = x[s:s + step]
            g2 = gs.reshape(-1, cout)
            for j in range(k):
                dw[j] += xp[:, j:j + length].reshape(-1, cin).T @ g2
        if need_x:
            gp = np.zeros((m, length + k - 1, cin), dtype=g.dtype)
            for j in range(k):
                gp[:, j:j + length] += gs @ wt[j]
            dx[s:s + step] = gp[:, left:left + length]
    return dw, dx


def conv1d(x, kernel, bias):
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is (N, L, Cin), ``kernel`` (K, Cin, Cout), ``bias`` (Cout,).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv1d expects (N,L,Cin), (K,Cin,Cout), (Cout,); got "
            f"{x.shape}, {kernel.shape}, {bias.shape}"
        )
    n, length, cin = x.shape
    k, kcin, cout = kernel.shape
    if kcin != cin or bias.shape[0] != cout:
        raise ShapeError(
            f"conv1d channel mismatch: input {cin}, kernel {kernel.shape}, bias {bias.shape}"
        )
    w = kernel.data
    if k == 1:
        out = (x.data.reshape(-1, cin) @ w[0]).reshape(n, length, cout)
        out += bias.data
    else:
        out = _conv_forward(x.data, w, bias.data)

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(_colsum(g.reshape(-1, cout)), owned=True)
        if k == 1:
            g2 = g.reshape(-1, cout)
            if kernel.requires_grad:
                kernel._accumulate((x.data.reshape(-1, cin).T @ g2)[None], owned=True)
            if x.requires_grad:
                x._accumulate((g2 @ w[0].T).reshape(n, length, cin), owned=True)
            return
        dw, dx = _conv_backward(x.data, w, g, kernel.requires_grad, x.requires_grad)
        if dw is not None:
            kernel._accumulate(dw, owned=True)
        if dx is not None:
            x._accumulate(dx, owned=True)

    return _node(out, (x, kernel, bias), "conv1d", backward)


def per_component_affine(x, scale, shift):
    """``x * scale + shift`` broadcast along the last (channel) axis."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine: channel dim {c} vs scale {scale.shape}, shift {shift.shape}")

    def backward(g):
        if scale.requires_grad:
            scale._accumulate(np.einsum("ij,ij->j", g.reshape(-1, c), x.data.reshape(-1, c)), owned=True)
        if shift.requires_grad:
            shift._accumulate(_colsum(g.reshape(-1, c)), owned=True)
        if x.requires_grad:
            x._accumulate(g * scale.data, owned=True)

    return _node(x.data * scale.data + shift.data, (x, scale, shift), "affine", backward)


def affine_relu(x, scale, shift):
    """Fused ``relu(per_component_affine(x, scale, shift))``."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine: channel dim {c} vs scale {scale.shape}, shift {shift.shape}")
    out = x.data * scale.data
    out += shift.data
    np.maximum(out, 0, out=out)

    def backward(g):
        gm = g * (out > 0)
        if scale.requires_grad:
            scale._accumulate(np.einsum("ij,ij->j", gm.reshape(-1, c), x.data.reshape(-1, c)), owned=True)
        if shift.requires_grad:
            shift._accumulate(_colsum(gm.reshape(-1, c)), owned=True)
        if x.requires_grad:
            gm *= scale.data
            x._accumulate(gm, owned=True)

    return _node(out, (x, scale, shift), "affine_relu", backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask, owned=True)

    return _node(x.data * mask, (x,), "relu", backward)


def dropout(x, rate, training, rng=None):
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = rng.random(x.shape, dtype=np.float32) >= rate
    scale = x.data.dtype.type(1.0 / keep)

    def backward(g):
        x._accumulate(g * mask * scale, owned=True)

    out = x.data * mask
    out *= scale
    return _node(out, (x,), "dropout", backward)


def mean_axis(x, axis):
    x = as_tensor(x)
    size = x.shape[axis]
    if size == 0:
        raise ShapeError(f"mean over empty axis {axis}")

    def backward(g):
        x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / size, x.shape))

    return _node(x.data.mean(axis=axis), (x,), "mean", backward)


def dense(x, weight, bias):
    """``x @ weight + bias`` for x of shape (B, Din)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.shape[0] != x.shape[1] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: x {x.shape}, weight {weight.shape}, bias {bias.shape}")

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), "dense", backward)


def gradient_reversal(x, lam):
    """Identity forward; the backward pass multiplies adjoints by ``-lam``."""
    if lam < 0:
        raise ValueError("gradient reversal scale must be non-negative")
    x = as_tensor(x)

    def backward(g):
        x._accumulate(-lam * g)

    return _node(x.data.copy(), (x,), "grad_reverse", backward)


def log_softmax(z):
    z = np.asarray(z)
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels, mask=None):
    """Mean negative log-likelihood over rows where ``mask`` is 1."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    mask = np.ones(b) if mask is None else np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count <= 0:
        raise NoLabeledSamplesError("no labeled samples in batch")
    rows = np.flatnonzero(mask)
    if np.any((labels[rows] < 0) | (labels[rows] >= c)):
        raise ValueError("label out of range for masked rows")
    logp = log_softmax(logits.data)
    safe = np.where(mask > 0, labels, 0)
    picked = logp[np.arange(b), safe]
    loss = -(picked * mask).sum() / count

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), safe] -= 1.0
        logits._accumulate(g * p * (mask / count)[:, None])

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), "xent", backward)


def batch_norm(x, gamma, beta, running, training, momentum=0.99, eps=1e-3):
    """Batch normalization over all but the channel axis.

    ``running`` is a dict with ``mean`` and ``var`` arrays, updated in place
    during training and used as frozen statistics otherwise.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        running["mean"] = momentum * running["mean"] + (1 - momentum) * mu
        running["var"] = momentum * running["var"] + (1 - momentum) * var
    else:
        mu, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    m = flat.shape[0]

    def backward(g):
        g2 = g.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        if gamma.requires_grad:
            gamma._accumulate((g2 * xh).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))
        if x.requires_grad and not training:
            x._accumulate(g * (gamma.data * inv))
        elif x.requires_grad:
            gx = g2 * gamma.data
            dx = inv / m * (m * gx - gx.sum(axis=0) - xh * (gx * xh).sum(axis=0))
            x._accumulate(dx.reshape(x.shape))

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), "batchnorm", backward)


def backward(loss: Tensor, keep_intermediate=False) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node requiring grad.

    Adjoints of intermediate (non-leaf) nodes are released after use unless
    ``keep_intermediate`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not keep_intermediate and node is not loss:
                node.grad = None


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update. ``state`` is an :class:`Adam`; returns it."""
    if state is None:
        state = Adam(beta1, beta2, eps)
    state.step(params, grads, lr)
    return state


def numerical_gradient(f, array, eps=1e-6, index=None):
    """Central differences of scalar ``f()`` wrt entries of ``array`` (mutated in place)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out


def max_relative_error(analytic, numeric, floor=1e-6):
    """Entrywise ``|a-n| / max(|a|, |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
