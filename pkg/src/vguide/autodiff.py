"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape`; with no tape
active they only compute values, which is how inference runs.

    with Tape() as tape:
        loss = ad.mul(x, x)
    grads = tape.gradients(loss, [x])
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_TAPES: list["Tape"] = []


class Tensor:
    """A float64 array that may take part in a recorded computation."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications and their adjoints."""

    def __init__(self):
        self.records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) for every recorded node, keyed by id()."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, contribution in zip(inputs, fn(g)):
                if contribution is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
        return grads

    def gradients(self, loss: Tensor, leaves) -> list[np.ndarray]:
        """Gradients for ``leaves``; leaves off every path to the loss get zeros."""
        grads = self.backward(loss)
        return [
            np.asarray(grads.get(id(leaf), np.zeros_like(leaf.data)), dtype=np.float64)
            .reshape(leaf.data.shape)
            for leaf in leaves
        ]


def _record(out_data, inputs, backward):
    out = Tensor(out_data)
    if _TAPES:
        _TAPES[-1].records.append((out, inputs, backward))
    return out


def recording() -> bool:
    return bool(_TAPES)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return _record(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def total(a, axis=None) -> Tensor:
    """Sum of all entries (0-d result), or along one axis."""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _record(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a, index) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters back (accumulating repeats)."""
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None for i in parts)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), backward)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}"
        )
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record(table.data[ids], (table,), backward)


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match features {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + bias.data, (x, gain, bias), backward)


def _logsumexp(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    out = x.data - _logsumexp(x.data, axis=axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def cross_entropy_from_logprobs(logprobs, targets, weights=None) -> Tensor:
    """Weighted sum of ``-logprobs[..., target]``; weights default to 1."""
    logprobs = as_tensor(logprobs)
    targets = np.asarray(targets, dtype=np.int64)
    lead = logprobs.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(
            f"cross_entropy_from_logprobs: targets {targets.shape} vs logprobs {logprobs.shape}"
        )
    w = np.ones(lead) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != lead:
        raise ShapeError(f"cross_entropy_from_logprobs: weights {w.shape} vs targets {lead}")
    picked = np.take_along_axis(logprobs.data, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(logprobs.shape)
        np.put_along_axis(full, targets[..., None], (-g * w)[..., None], axis=-1)
        return (full,)

    return _record(-(w * picked).sum(), (logprobs,), backward)
