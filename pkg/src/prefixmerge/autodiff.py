"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is an eager tape: every operation returns a `Tensor` holding the
numpy result plus a closure mapping the output gradient back to the parents.
Everything runs in float64 so analytic gradients can be checked against
central finite differences (`finite_diff_grad`) to ~1e-7 relative error.

The op set is exactly what a small encoder-decoder transformer and its
losses need; there is no general broadcasting.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An op precondition was violated (e.g. backward on a non-scalar)."""


class OracleError(RuntimeError):
    """The finite-difference oracle detected a non-deterministic function."""


class Tensor:
    """Shape-tagged float64 array, optionally a node in a backward graph.

    Immutable after creation except `grad`; `data` must not be mutated once
    the tensor participates in a graph (finite_diff_grad is the one sanctioned
    exception and restores the buffer it perturbs).
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def node(data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    """Build a graph node directly; used by fused ops outside this module.

    `grad_fn(g)` must return one gradient (or None) per parent, in order.
    If no parent requires grad the node degenerates to a constant leaf.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.grad_fn = grad_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.grad_fn = None
    return out


class GradientMap:
    """Maps parameter tensors (by identity) to their gradient buffers."""

    def __init__(self, entries: dict):
        self.entries = entries

    def get(self, param: Tensor):
        return self.entries.get(param)

    def __contains__(self, param: Tensor):
        return param in self.entries

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Same shapes, or b a row vector added to each row of 2-D a."""
    if a.shape == b.shape:
        def grad_fn(g):
            return (g if a.requires_grad else None,
                    g if b.requires_grad else None)
        return node(a.data + b.data, (a, b), grad_fn)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def grad_fn(g):
            return (g if a.requires_grad else None,
                    g.sum(axis=0) if b.requires_grad else None)
        return node(a.data + b.data, (a, b), grad_fn)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)
    return node(a.data * b.data, (a, b), grad_fn)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        return (g * c,)
    return node(t.data * c, (t,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)
    return node(a.data @ b.data, (a, b), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b fused into one node; x [n,k], w [k,m], b [m]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")

    def grad_fn(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)
    return node(x.data @ w.data + b.data, (x, w, b), grad_fn)


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {t.shape}")

    def grad_fn(g):
        return (g.T,)
    return node(t.data.T.copy(), (t,), grad_fn)


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = t.shape

    def grad_fn(g):
        return (g.reshape(old),)
    return node(t.data.reshape(shape), (t,), grad_fn)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if p.requires_grad else None
                     for p, piece in zip(parts, pieces))
    return node(np.concatenate([p.data for p in parts], axis=axis),
                tuple(parts), grad_fn)


def take_rows(t: Tensor, indices) -> Tensor:
    """Row gather with scatter-add backward; also the embedding lookup."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be 1-D, got {idx.shape}")
    n = t.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for {n} rows")

    def grad_fn(g):
        buf = np.zeros_like(t.data)
        np.add.at(buf, idx, g)
        return (buf,)
    return node(t.data[idx], (t,), grad_fn)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    if t.ndim != 2 or not (0 <= start <= stop <= t.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for {t.shape}")

    def grad_fn(g):
        buf = np.zeros_like(t.data)
        buf[:, start:stop] = g
        return (buf,)
    return node(t.data[:, start:stop], (t,), grad_fn)


def sum_all(t: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.full(t.shape, float(g)),)
    return node(np.asarray(t.data.sum()), (t,), grad_fn)


def add_n(tensors) -> Tensor:
    """Sum of same-shaped tensors as a single node (batch loss totals)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("add_n: empty input list")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"add_n: mixed shapes {shape} and {t.shape}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total = total + t.data

    def grad_fn(g):
        return tuple(g if t.requires_grad else None for t in tensors)
    return node(total, tuple(tensors), grad_fn)


# ---------------------------------------------------------------------------
# nonlinear ops

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form.

    g(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    x = t.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))

    def grad_fn(g):
        du = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)
    return node(0.5 * x * (1.0 + th), (t,), grad_fn)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; slices sum to 1."""
    if axis >= t.ndim or axis < -t.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {t.shape}")
    if not np.isfinite(t.data).all():
        raise NumericError("softmax: input contains non-finite values")
    m = t.data.max(axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    a = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * a).sum(axis=axis, keepdims=True)
        return (a * (g - inner),)
    return node(a, (t,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} "
                         f"do not match feature dim {d}")
    mu = x.data.sum(axis=-1, keepdims=True) * (1.0 / d)
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * (1.0 / d)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
                        * (1.0 / d))
        axes = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=axes) if gain.requires_grad else None
        gbias = g.sum(axis=axes) if bias.requires_grad else None
        return (gx, ggain, gbias)
    return node(xhat * gain.data + bias.data, (x, gain, bias), grad_fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-wise softmax.

    logits [T, V], targets T integer ids; returns a scalar. The per-sequence
    log-likelihood is -T times this value.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.intp)
    t_len, vocab = logits.shape
    if tgt.shape != (t_len,):
        raise ShapeError(f"cross_entropy: targets shape {tgt.shape} does not "
                         f"match {t_len} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"cross_entropy: target id out of range for vocab {vocab}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    rows = np.arange(t_len)
    loss = float((lse - z[rows, tgt]).mean())

    def grad_fn(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, tgt] -= 1.0
        return (p * (float(g) / t_len),)
    return node(np.asarray(loss), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> GradientMap:
    """Reverse-mode gradients of a scalar `loss` for every reachable leaf.

    Returns a GradientMap over the requires_grad leaf tensors; any tensors in
    `params` not reached by the graph get explicit zero buffers. Each call
    recomputes from scratch and overwrites leaf `.grad` (no accumulation
    across calls).
    """
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        if params is not None:
            entries = {p: np.zeros_like(p.data) for p in params}
            for p, g in entries.items():
                p.grad = g
            return GradientMap(entries)
        raise ContractError("backward: loss is not connected to any "
                            "requires_grad tensor")

    order = _topo_order(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    entries = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.grad_fn is None:
            prev = entries.get(t)
            entries[t] = g if prev is None else prev + g
            continue
        for p, pg in zip(t.parents, t.grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p not in entries:
                entries[p] = np.zeros_like(p.data)
    for p, g in entries.items():
        p.grad = g
    return GradientMap(entries)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f, t: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. every element of t.

    f is called as f(t) with t.data perturbed in place (restored afterwards),
    so f may close over t or ignore its argument. f must be deterministic;
    a repeated base evaluation that disagrees raises OracleError.
    """
    if eps <= 0:
        raise ContractError("finite_diff_grad: eps must be positive")

    def evaluate():
        out = f(t)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    base1 = evaluate()
    base2 = evaluate()
    if base1 != base2:
        raise OracleError(f"finite_diff_grad: f is not deterministic "
                          f"({base1!r} != {base2!r})")

    flat = t.data.reshape(-1)
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = evaluate()
        flat[j] = orig - eps
        f_minus = evaluate()
        flat[j] = orig
        grad[j] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(t.shape)
