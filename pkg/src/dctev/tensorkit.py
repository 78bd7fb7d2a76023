"""Minimal dense-tensor numerics with reverse-mode gradients.

Every differentiable operation is a :class:`DiffOp` with a pure ``forward``
on numpy arrays and a pure ``backward`` that maps the upstream gradient to
one gradient per input. :class:`Tensor` records applied ops on a tape so a
composed expression can be differentiated with :meth:`Tensor.backward`.

All values are float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

BCE_CLAMP = 1e-12
_SIGMOID_HI = 1.0 - 2.0**-53
_SIGMOID_LO = np.finfo(np.float64).tiny


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out dimensions that numpy broadcasting introduced or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class DiffOp:
    """A differentiable operation.

    ``forward(*inputs, **kw)`` returns the output array; ``backward(g, out,
    *inputs, **kw)`` returns a tuple with the gradient for each input, given
    the upstream gradient ``g`` and the cached forward output ``out``.
    """

    name = "op"

    def forward(self, *inputs: np.ndarray, **kw) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, out: np.ndarray, *inputs: np.ndarray, **kw) -> tuple:
        raise NotImplementedError

    def __call__(self, *inputs, **kw) -> "Tensor":
        return _apply(self, inputs, kw)

    def __repr__(self) -> str:
        return f"<DiffOp {self.name}>"


class MatMul(DiffOp):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g, out, a, b):
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.shape[:-1] == g.shape[:-1]:
            # shared weight: fold the leading axes into one GEMM
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb


class Add(DiffOp):
    name = "add"

    def forward(self, a, b):
        try:
            return a + b
        except ValueError as exc:
            raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Mul(DiffOp):
    name = "mul"

    def forward(self, a, b):
        try:
            return a * b
        except ValueError as exc:
            raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def backward(self, g, out, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Scale(DiffOp):
    name = "scale"

    def forward(self, a, *, factor):
        return a * factor

    def backward(self, g, out, a, *, factor):
        return (g * factor,)


class Transpose(DiffOp):
    name = "transpose"

    def forward(self, a, *, axes):
        return np.transpose(a, axes)

    def backward(self, g, out, a, *, axes):
        return (np.transpose(g, np.argsort(axes)),)


class Reshape(DiffOp):
    name = "reshape"

    def forward(self, a, *, shape):
        return a.reshape(shape)

    def backward(self, g, out, a, *, shape):
        return (g.reshape(a.shape),)


class Sum(DiffOp):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum())

    def backward(self, g, out, a):
        return (np.broadcast_to(g, a.shape).copy(),)


class SoftmaxRows(DiffOp):
    """Softmax over the last axis, stabilised by max-subtraction."""

    name = "softmax_rows"

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, g, out, x):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


class Relu(DiffOp):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, g, out, x):
        return (g * (x > 0),)


class Sigmoid(DiffOp):
    name = "sigmoid"

    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        # keep the output strictly inside (0, 1)
        return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)

    def backward(self, g, out, x):
        return (g * out * (1.0 - out),)


class LayerNorm(DiffOp):
    """Normalise each row (last axis) then apply an affine gain and bias."""

    name = "layer_norm"

    def forward(self, x, gain, bias, *, eps=1e-5):
        if x.shape[-1] < 2:
            raise DimensionError(f"layer_norm needs at least 2 features, got shape {x.shape}")
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise DimensionError(
                f"layer_norm gain/bias shapes {gain.shape}, {bias.shape} do not match {x.shape}"
            )
        xhat, _ = self._normalise(x, eps)
        return xhat * gain + bias

    @staticmethod
    def _normalise(x, eps):
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        return (x - mu) * inv, inv

    def backward(self, g, out, x, gain, bias, *, eps=1e-5):
        xhat, inv = self._normalise(x, eps)
        dxhat = g * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


class BCELoss(DiffOp):
    """Binary cross-entropy of probabilities against fixed {0,1} labels.

    Probabilities are clamped to ``[BCE_CLAMP, 1 - BCE_CLAMP]`` before the
    log. ``pos_weight`` scales the positive-label term.
    """

    name = "bce_loss"

    def forward(self, probs, *, labels, reduction="mean", pos_weight=1.0):
        labels = np.asarray(labels, dtype=np.float64)
        if probs.shape != labels.shape:
            raise DimensionError(f"bce_loss shape mismatch: probs {probs.shape}, labels {labels.shape}")
        p = np.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
        total = -(pos_weight * labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).sum()
        if reduction == "mean":
            total = total / max(probs.size, 1)
        elif reduction != "sum":
            raise ValueError(f"unknown reduction {reduction!r}")
        return np.asarray(total)

    def backward(self, g, out, probs, *, labels, reduction="mean", pos_weight=1.0):
        labels = np.asarray(labels, dtype=np.float64)
        p = np.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
        grad = -(pos_weight * labels / p) + (1.0 - labels) / (1.0 - p)
        if reduction == "mean":
            grad = grad / max(probs.size, 1)
        return (g * grad,)


matmul_op = MatMul()
add_op = Add()
mul_op = Mul()
scale_op = Scale()
transpose_op = Transpose()
reshape_op = Reshape()
sum_op = Sum()
softmax_op = SoftmaxRows()
relu_op = Relu()
sigmoid_op = Sigmoid()
layer_norm_op = LayerNorm()
bce_op = BCELoss()


class Tensor:
    """A float64 array that remembers how it was computed.

    Leaves created with ``requires_grad=True`` receive a ``grad`` after
    :meth:`backward`. When a tensor feeds several ops its gradients add.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add_op(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale_op(self, factor=float(other))
        return mul_op(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul_op(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape_op(self, shape=tuple(shape))

    def transpose(self, *axes):
        return transpose_op(self, axes=tuple(axes))

    def sum(self):
        return sum_op(self)

    def backward(self, grad=None) -> None:
        """Accumulate gradients into every reachable leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not (parent.requires_grad or parent._grad_fn is not None):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _apply(op: DiffOp, inputs: Sequence, kw: dict) -> Tensor:
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    out = op.forward(*arrays, **kw)
    result = Tensor(out)
    if any(t.requires_grad or t._grad_fn is not None for t in tensors):
        result._parents = tuple(tensors)
        result._grad_fn = lambda g: op.backward(g, out, *arrays, **kw)
    return result


def matmul(a, b) -> Tensor:
    return matmul_op(a, b)


def softmax_rows(x) -> Tensor:
    return softmax_op(x)


def relu(x) -> Tensor:
    return relu_op(x)


def sigmoid(x) -> Tensor:
    return sigmoid_op(x)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    return layer_norm_op(x, gain, bias, eps=eps)


def bce_loss(probs, labels, reduction: str = "mean", pos_weight: float = 1.0) -> Tensor:
    return bce_op(probs, labels=_as_array(labels), reduction=reduction, pos_weight=pos_weight)


class GraphOp(DiffOp):
    """Wrap a function of Tensors as a DiffOp so composites can be grad-checked."""

    def __init__(self, fn: Callable[..., Tensor], name: str = "graph"):
        self.fn = fn
        self.name = name

    def forward(self, *inputs):
        return self.fn(*[Tensor(x) for x in inputs]).data

    def backward(self, g, out, *inputs):
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        self.fn(*leaves).backward(g)
        return tuple(np.zeros_like(x) if t.grad is None else t.grad for x, t in zip(inputs, leaves))


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst_input: int = -1

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    op: DiffOp,
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    *,
    kwargs: dict | None = None,
    seed: int = 0,
    max_coords: int | None = None,
) -> GradCheckReport:
    """Compare ``op.backward`` against central finite differences.

    The output is contracted with a random upstream gradient so that a
    single scalar is differentiated. ``max_coords`` limits the number of
    coordinates probed per input (chosen at random); ``None`` probes all.
    A failed check is reported, never raised.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    kwargs = kwargs or {}
    rng = np.random.default_rng(seed)
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    out = op.forward(*xs, **kwargs)
    upstream = rng.standard_normal(np.shape(out))
    analytic = op.backward(upstream, out, *xs, **kwargs)

    def scalar(args):
        return float(np.sum(upstream * op.forward(*args, **kwargs)))

    worst, worst_input, count = 0.0, -1, 0
    for i, x in enumerate(xs):
        if analytic[i] is None:
            continue
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        flat = x.reshape(-1)
        a_flat = np.asarray(analytic[i]).reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = scalar(xs)
            flat[c] = orig - eps
            fm = scalar(xs)
            flat[c] = orig
            num = (fp - fm) / (2.0 * eps)
            a = a_flat[c]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            count += 1
            if not np.isfinite(err):
                err = np.inf
            if err > worst:
                worst, worst_input = err, i
    return GradCheckReport(max_rel_error=worst, passed=bool(worst < tol), n_checked=count, worst_input=worst_input)
