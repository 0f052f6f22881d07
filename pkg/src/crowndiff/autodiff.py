"""Minimal reverse-mode automatic differentiation over numpy arrays.

Supports exactly the operations the reference networks need: broadcasted
arithmetic, (batched) matmul, tanh/exp/log/power, reductions, reshaping,
gather/scatter indexing, concatenation, masked softmax, and dropout.
Everything runs in float64.  Graphs are built only when some input requires
gradients, so evaluation-mode forwards carry no bookkeeping overhead.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the backward closures that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjps: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, vjps) -> "Tensor":
        out = Tensor(data)
        tracked = tuple(
            (p, vjp) for p, vjp in zip(parents, vjps) if p.requires_grad
        )
        if tracked:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in tracked)
            out._vjps = tuple(v for _, v in tracked)
        return out

    def backward(self, grad=None) -> None:
        """Accumulate gradients of this (scalar) tensor into the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:  # leaf: expose the accumulated gradient
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                pg = vjp(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data
        return Tensor._result(
            data,
            (self, other),
            (
                lambda g, s=self.data.shape: _unbroadcast(g, s),
                lambda g, s=other.data.shape: _unbroadcast(g, s),
            ),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data
        return Tensor._result(
            data,
            (self, other),
            (
                lambda g, o=other.data, s=self.data.shape: _unbroadcast(g * o, s),
                lambda g, o=self.data, s=other.data.shape: _unbroadcast(g * o, s),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return as_tensor(other) * self ** -1.0

    def __pow__(self, exponent: float):
        data = self.data ** exponent
        return Tensor._result(
            data,
            (self,),
            (lambda g, x=self.data, e=exponent: g * e * x ** (e - 1.0),),
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        data = self.data @ other.data
        return Tensor._result(
            data,
            (self, other),
            (
                lambda g, b=other.data, s=self.data.shape: _unbroadcast(
                    g @ np.swapaxes(b, -1, -2), s
                ),
                lambda g, a=self.data, s=other.data.shape: _unbroadcast(
                    np.swapaxes(a, -1, -2) @ g, s
                ),
            ),
        )

    # -- elementwise ----------------------------------------------------------

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._result(y, (self,), (lambda g, y=y: g * (1.0 - y * y),))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._result(y, (self,), (lambda g, y=y: g * y,))

    def log(self):
        return Tensor._result(
            np.log(self.data), (self,), (lambda g, x=self.data: g / x,)
        )

    def relu(self):
        y = np.maximum(self.data, 0.0)
        return Tensor._result(
            y, (self,), (lambda g, m=(self.data > 0.0): g * m,)
        )

    def abs(self):
        # Subgradient 0 at x == 0.
        return Tensor._result(
            np.abs(self.data), (self,), (lambda g, s=np.sign(self.data): g * s,)
        )

    # -- reductions and shaping -----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g, shape=self.data.shape, axis=axis, keepdims=keepdims):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor._result(data, (self,), (vjp,))

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Maximum along one axis; gradient flows to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            data = np.squeeze(data, axis=axis)

        def vjp(g, idx=idx, axis=axis, keepdims=keepdims, shape=self.data.shape):
            if not keepdims:
                g = np.expand_dims(g, axis)
            out = np.zeros(shape)
            np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
            return out

        return Tensor._result(data, (self,), (vjp,))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        return Tensor._result(
            data, (self,), (lambda g, s=self.data.shape: g.reshape(s),)
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        data = self.data.transpose(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._result(data, (self,), (lambda g, inv=inv: g.transpose(inv),))

    def __getitem__(self, index):
        data = self.data[index]
        # Basic indexing never selects the same element twice, so plain
        # assignment is a valid (and much faster) scatter.
        basic = isinstance(index, (int, slice)) or (
            isinstance(index, tuple)
            and all(isinstance(i, (int, slice)) for i in index)
        )

        def vjp(g, index=index, shape=self.data.shape, basic=basic):
            out = np.zeros(shape)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return out

        return Tensor._result(data, (self,), (vjp,))

    def broadcast_to(self, shape):
        data = np.broadcast_to(self.data, shape)
        return Tensor._result(
            data, (self,), (lambda g, s=self.data.shape: _unbroadcast(g, s),)
        )

    def take(self, indices, axis: int = 0):
        """Gather rows along an axis; duplicates accumulate in the backward."""
        indices = np.asarray(indices, dtype=np.intp)
        data = np.take(self.data, indices, axis=axis)

        def vjp(g, indices=indices, axis=axis, shape=self.data.shape):
            out = np.zeros(shape)
            moved = np.moveaxis(out, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
            return out

        return Tensor._result(data, (self,), (vjp,))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along an axis."""
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return Tensor._result(data, tuple(tensors), tuple(make_vjp(k) for k in range(len(tensors))))


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to True positions of ``mask``.

    Masked positions receive weight exactly 0.0 (they are excluded before
    exponentiation, not pushed to -inf).  Raises if any row of the broadcast
    mask has no admissible position.
    """
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.data.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has every position masked out")
    neg = np.where(mask, scores.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    shifted = np.where(mask, scores.data - mx, 0.0)
    ex = np.exp(shifted) * mask
    denom = ex.sum(axis=-1, keepdims=True)
    y = ex / denom

    def vjp(g, y=y):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - inner)

    return Tensor._result(y, (scores,), (vjp,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate <= 0.0:
        return x
    x = as_tensor(x)
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradients(loss_fn, params: dict) -> dict:
    """Analytic gradients of ``loss_fn()`` for every tensor in ``params``.

    ``loss_fn`` must close over the parameter tensors and return a scalar
    Tensor built from this module's operations.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def finite_difference_gradients(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Central finite differences of ``loss_fn()`` for every parameter entry."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn().data)
            flat[i] = orig - step
            lo = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out[name] = g
    return out


def check_gradients(loss_fn, params: dict, step: float = 1e-5) -> dict:
    """Relative error between analytic and central-difference gradients.

    The per-parameter error is ||g_a - g_fd|| / max(||g_a||, ||g_fd||, 1e-12),
    which is 0 when both vanish.
    """
    analytic = gradients(loss_fn, params)
    numeric = finite_difference_gradients(loss_fn, params, step=step)
    errors = {}
    for name in params:
        a, n = analytic[name], numeric[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        errors[name] = float(np.linalg.norm(a - n) / denom)
    return errors
