"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Graph` is active (``with Graph() as g:``)
and touching at least one tensor with ``requires_grad=True`` are appended to
that graph in execution order, which is therefore a valid topological order.
:func:`backward` walks the recorded nodes once, in reverse.

Outside a graph the same functions run as plain numpy kernels and record
nothing, which is how inference and finite-difference replays are executed.

Storage defaults to float32.  Every op keeps the dtype of its inputs, so a
graph built from float64 tensors runs fully in float64 (used by
:func:`grad_check`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NumericError, ParameterError

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array plus optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` get a zero-filled
    ``grad`` immediately.  Tensors produced by recorded ops receive their
    ``grad`` during :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.array(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self) -> Tensor:
        return tsum(self)

    def relu(self) -> Tensor:
        return relu(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Graph:
    """Tape of recorded operations.

    A graph belongs to the thread that entered it; concurrent forward passes
    must each use their own graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> Graph:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    first = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != first:
            raise ContractError(f"{op}: mixed dtypes {first} and {t.dtype}")


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(out, op)
    graph = current_graph()
    needs_grad = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs_grad)
    if needs_grad:
        node = Node(op, inputs, result, backward_fn)
        result._node = node
        graph.nodes.append(node)
    return result


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    _check_dtypes("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-N vector to every row of ``x[..., N]``."""
    n = x.shape[-1]
    if bias.shape != (n,):
        raise DimensionError(f"add_bias: bias shape {bias.shape} does not match input {x.shape}")
    _check_dtypes("add_bias", x, bias)

    def back(g):
        return g, g.reshape(-1, n).sum(axis=0)

    return _record("add_bias", x.data + bias.data, (x, bias), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    _check_dtypes("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    c = x.dtype.type(factor)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    kinks = getattr(_local, "kinks", None)
    if kinks is not None:
        kinks.append(mask)
    out = np.maximum(x.data, x.dtype.type(0))
    return _record("relu", out, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``rate == 0`` returns ``x`` unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g, dtype=g.dtype),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes("concat", *tensors)
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_dtypes("matmul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), back)


def conv1d_causal(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal convolution along the frame axis.

    ``x`` is ``T x C_in`` and ``kernel`` is ``k x C_in x C_out``.  The input is
    left-padded with ``(k - 1) * dilation`` zero frames, so output frame ``t``
    sees input frames ``t - (k - 1 - j) * dilation`` for taps ``j = 0..k-1``;
    tap ``k - 1`` is the current frame.
    """
    if isinstance(dilation, bool) or not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ParameterError(f"conv1d_causal: dilation must be a positive int, got {dilation!r}")
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d_causal: input {x.shape} incompatible with kernel {kernel.shape}")
    if x.shape[0] < 1:
        raise DimensionError("conv1d_causal: input needs at least one frame")
    _check_dtypes("conv1d_causal", x, kernel)
    T, c_in = x.shape
    k = kernel.shape[0]
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((pad, c_in), dtype=x.dtype), x.data], axis=0)
    w = kernel.data
    out = xp[0:T] @ w[0]
    for j in range(1, k):
        s = j * dilation
        out += xp[s:s + T] @ w[j]

    def back(g):
        gk = np.empty_like(w) if kernel.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for j in range(k):
            s = j * dilation
            if gk is not None:
                gk[j] = xp[s:s + T].T @ g
            if gxp is not None:
                gxp[s:s + T] += g @ w[j].T
        return (gxp[pad:] if gxp is not None else None), gk

    return _record("conv1d_causal", out, (x, kernel), back)


# -- attention helpers ---------------------------------------------------------

def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` for an ``N x D`` table and an integer index array of any shape."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected a 2-D table, got {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {x.shape[0]} rows")
    n_rows = x.shape[0]

    def back(g):
        gx = np.zeros((n_rows, g.shape[-1]), dtype=g.dtype)
        np.add.at(gx, index.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gx,)

    return _record("gather_rows", x.data[index], (x,), back)


def rowwise_dot(q: Tensor, keys: Tensor) -> Tensor:
    """``out[t, s] = q[t] . keys[t, s]`` for ``q: T x D`` and ``keys: T x S x D``."""
    if q.ndim != 2 or keys.ndim != 3 or keys.shape[0] != q.shape[0] or keys.shape[2] != q.shape[1]:
        raise DimensionError(f"rowwise_dot: shapes {q.shape} and {keys.shape} incompatible")
    _check_dtypes("rowwise_dot", q, keys)
    qd, kd = q.data, keys.data
    out = np.einsum("td,tsd->ts", qd, kd)

    def back(g):
        gq = np.einsum("ts,tsd->td", g, kd) if q.requires_grad else None
        gk = g[:, :, None] * qd[:, None, :] if keys.requires_grad else None
        return gq, gk

    return _record("rowwise_dot", out, (q, keys), back)


def weighted_rows(weights: Tensor, values: Tensor) -> Tensor:
    """``out[t] = sum_s weights[t, s] * values[t, s]``."""
    if weights.ndim != 2 or values.ndim != 3 or values.shape[:2] != weights.shape:
        raise DimensionError(f"weighted_rows: shapes {weights.shape} and {values.shape} incompatible")
    _check_dtypes("weighted_rows", weights, values)
    wd, vd = weights.data, values.data
    out = np.einsum("ts,tsd->td", wd, vd)

    def back(g):
        gw = np.einsum("td,tsd->ts", g, vd) if weights.requires_grad else None
        gv = wd[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return _record("weighted_rows", out, (weights, values), back)


# -- normalisation and loss ----------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax", p, (x,), back)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is true.

    Masked positions get probability exactly zero and receive zero gradient.
    Every row must keep at least one position.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_softmax: mask {mask.shape} does not match {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: a row has no unmasked position")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), x.dtype.type(0))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", p, (x,), back)


def cross_entropy(logits: Tensor, targets, class_weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    With ``class_weights`` the mean is weighted by the weight of each frame's
    target class (normalised by the sum of those weights).  Uniform weights
    are treated as no weights, so the result is identical to the unweighted
    loss.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be T x K, got {logits.shape}")
    T, K = logits.shape
    y = np.asarray(targets)
    if y.shape != (T,):
        raise LabelError(f"cross_entropy: expected {T} targets, got shape {y.shape}")
    y = y.astype(np.intp)
    bad = np.flatnonzero((y < 0) | (y >= K))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"cross_entropy: target {int(targets[i])} at frame {i} outside [0, {K})")

    weights = None
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        if cw.shape != (K,):
            raise DimensionError(f"cross_entropy: class_weights shape {cw.shape}, expected ({K},)")
        if not np.all(cw == cw[0]):
            weights = cw[y]

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    p = e / s
    rows = np.arange(T)
    nll = -logp[rows, y]
    if weights is None:
        loss = nll.mean()
        coef = np.full(T, 1.0 / T, dtype=logits.dtype)
    else:
        total = weights.sum()
        loss = (weights * nll).sum() / total
        coef = weights / total

    def back(g):
        d = p.copy()
        d[rows, y] -= 1
        return (d * (coef[:, None] * g),)

    return _record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), back)


# -- gradients -----------------------------------------------------------------

def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that contributed to ``loss``.

    Leaf gradients accumulate into their existing buffers, so call
    :func:`zero_grad` between optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._node is None:
        if not loss.requires_grad:
            raise ContractError("backward: loss does not depend on any tensor requiring grad")
        loss.grad += 1
        return
    if not any(node is loss._node for node in reversed(graph.nodes)):
        raise ContractError("backward: loss was not recorded in this graph")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad += gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        if t.grad is not None:
            t.grad[...] = 0


class _KinkLog:
    """Collects the sign pattern of every relu evaluated inside the block."""

    def __enter__(self) -> list[np.ndarray]:
        self.masks: list[np.ndarray] = []
        self.prev = getattr(_local, "kinks", None)
        _local.kinks = self.masks
        return self.masks

    def __exit__(self, *exc) -> None:
        _local.kinks = self.prev


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple[int, int] | None = None  # (tensor index, flat index)


def grad_check_details(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-3,
    n_samples: int | None = 200,
    seed: int = 0,
    skip_kinks: bool = True,
    max_redraws: int = 50,
) -> GradCheckResult:
    """Compare analytic gradients with central differences, replayed in float64.

    ``f`` maps a list of tensors (same order as ``params``) to a scalar loss;
    ``params`` itself is never modified.  Coordinates are drawn round-robin
    over the tensors so every tensor is visited; ``n_samples=None`` checks
    every coordinate.

    A central difference is only meaningful if the loss is smooth on
    ``[x - eps, x + eps]``.  With ``skip_kinks`` a coordinate whose
    perturbation flips the sign pattern of any relu is replaced by a fresh
    draw from the same tensor (counted in ``skipped_kinks``).
    """
    replay = [Tensor(p.data, requires_grad=True, dtype=np.float64) for p in params]
    with _KinkLog() as base_pattern, Graph() as g:
        loss = f(replay)
    backward(g, loss)
    analytic = [p.grad.copy() for p in replay]
    rng = np.random.default_rng(seed)

    if n_samples is None:
        coords = [(i, j) for i, p in enumerate(replay) for j in range(p.data.size)]
    else:
        coords = [(n % len(replay), None) for n in range(n_samples)]

    def evaluate(i: int, j: int) -> tuple[float, bool]:
        flat = replay[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        with _KinkLog() as pat_plus:
            f_plus = f(replay).item()
        flat[j] = orig - epsilon
        with _KinkLog() as pat_minus:
            f_minus = f(replay).item()
        flat[j] = orig
        smooth = _same_pattern(base_pattern, pat_plus) and _same_pattern(base_pattern, pat_minus)
        return (f_plus - f_minus) / (2 * epsilon), smooth

    worst, worst_at, skipped, checked = 0.0, None, 0, 0
    for i, j in coords:
        if j is not None:
            numeric, smooth = evaluate(i, j)
            if skip_kinks and not smooth:
                skipped += 1
                continue
        else:
            for _ in range(max_redraws + 1):
                j = int(rng.integers(replay[i].data.size))
                numeric, smooth = evaluate(i, j)
                if smooth or not skip_kinks:
                    break
                skipped += 1
            else:
                continue
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        checked += 1
        if worst_at is None or err > worst:
            worst, worst_at = err, (i, j)
    return GradCheckResult(worst, checked, skipped, worst_at)


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-3,
    n_samples: int | None = 200,
    seed: int = 0,
    skip_kinks: bool = True,
) -> float:
    """Max relative error ``|a - n| / max(1e-8, |a| + |n|)``; see :func:`grad_check_details`."""
    return grad_check_details(f, params, epsilon, n_samples, seed, skip_kinks).max_rel_error
