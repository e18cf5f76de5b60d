"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` returning one gradient per input.
Calling ``Function.apply`` wraps the result in a :class:`Tensor` that remembers
the function, so the executed graph can be replayed backwards by
:func:`backward`. Shapes are explicit: apart from tensor-scalar arithmetic and
:func:`bias_add`, nothing broadcasts.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, EvaluationError, ShapeError

PROB_FLOOR = 1e-12

__all__ = [
    "Tensor", "Function", "Tape", "backward", "grad_check", "as_tensor",
    "matmul", "transpose", "add", "sub", "mul", "bias_add", "relu", "exp", "expm1", "log",
    "sum", "mean", "reshape", "concat", "conv2d", "global_avg_pool",
    "softmax_with_temperature", "log_softmax", "kl_divergence", "squared_l2",
    "l2_norm", "gaussian_sample", "rotate90", "one_hot",
]


class Tensor:
    """Dense float64 array with an optional gradient and a link to its producer."""

    __slots__ = ("data", "grad", "requires_grad", "op")

    def __init__(self, data, requires_grad: bool = False, op: "Function | None" = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic: tensor-tensor of equal shape, or tensor-scalar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return Slice.apply(self, key=key)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One node of the computation graph."""

    def __init__(self, *inputs: Tensor, **attrs):
        self.inputs = inputs
        self.__dict__.update(attrs)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs, **attrs)
        out = fn.forward(*(t.data for t in inputs))
        if any(t.requires_grad for t in inputs):
            return Tensor(out, requires_grad=True, op=fn)
        return Tensor(out)


class Tape:
    """Topologically ordered record of the ops that produced ``output``."""

    def __init__(self, ops: list[Function]):
        self.ops = ops

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Function] = []
        seen: set[int] = set()
        if output.op is None:
            return cls(order)
        stack = [(output.op, False)]
        while stack:
            fn, expanded = stack.pop()
            if expanded:
                order.append(fn)
                continue
            if id(fn) in seen:
                continue
            seen.add(id(fn))
            stack.append((fn, True))
            for t in fn.inputs:
                if t.op is not None and id(t.op) not in seen:
                    stack.append((t.op, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if tape is None:
        tape = Tape.record(output)
    if output.op is None:
        if output.requires_grad:
            output.grad = np.ones_like(output.data) if output.grad is None else output.grad + 1.0
        return
    # keyed by producing op: each op yields exactly one tensor
    grads: dict[int, np.ndarray] = {id(output.op): np.ones_like(output.data)}
    for fn in reversed(tape.ops):
        g = grads.pop(id(fn), None)
        if g is None:
            continue
        for t, gi in zip(fn.inputs, fn.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.op is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t.op)
                grads[key] = gi if key not in grads else grads[key] + gi


def grad_check(closure: Callable[..., Tensor], point: Tensor | Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.requires_grad for p in points]
    for p in points:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    try:
        out = closure(*points)
        if not np.all(np.isfinite(out.data)):
            raise EvaluationError("closure returned a non-finite value")
        backward(out)
        worst = 0.0
        for p in points:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = _scalar(closure(*points))
                flat[i] = orig - eps
                f_minus = _scalar(closure(*points))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        return worst
    finally:
        for p, flag in zip(points, saved):
            p.requires_grad = flag
            p.grad = None


def _scalar(t: Tensor) -> float:
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise EvaluationError("closure returned a non-finite value")
    return v


# --------------------------------------------------------------------------
# elementwise and linear algebra


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return g * b.data, g * a.data


class AddScalar(Function):
    def forward(self, a):
        return a + self.c

    def backward(self, g):
        return (g,)


class MulScalar(Function):
    def forward(self, a):
        return a * self.c

    def backward(self, g):
        return (g * self.c,)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return AddScalar.apply(a, c=float(b))
    if not isinstance(a, Tensor):
        return AddScalar.apply(b, c=float(a))
    _check_same(a, b, "add")
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return AddScalar.apply(a, c=-float(b))
    _check_same(as_tensor(a), b, "sub")
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return MulScalar.apply(a, c=float(b))
    if not isinstance(a, Tensor):
        return MulScalar.apply(b, c=float(a))
    _check_same(a, b, "mul")
    return Mul.apply(a, b)


def neg(a) -> Tensor:
    return MulScalar.apply(a, c=-1.0)


class MatMul(Function):
    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        return g @ b.data.T, a.data.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, g):
        return (g.T,)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return Transpose.apply(a)


class BiasAdd(Function):
    def forward(self, x, b):
        return x + b

    def backward(self, g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis (the one sanctioned broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    return BiasAdd.apply(x, b)


class ReLU(Function):
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g):
        return (g * (self.inputs[0].data > 0),)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


class Expm1(Function):
    def forward(self, a):
        self.a = a
        return np.expm1(a)

    def backward(self, g):
        return (g * np.exp(self.a),)


def expm1(a: Tensor) -> Tensor:
    """exp(a) - 1 without cancellation near zero."""
    return Expm1.apply(a)


class Log(Function):
    def forward(self, a):
        return np.log(np.maximum(a, PROB_FLOOR))

    def backward(self, g):
        a = self.inputs[0].data
        return (np.where(a > PROB_FLOOR, g / np.maximum(a, PROB_FLOOR), 0.0),)


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped below at 1e-12."""
    return Log.apply(a)


# --------------------------------------------------------------------------
# reductions and shape manipulation


class Sum(Function):
    def forward(self, a):
        return np.asarray(a.sum(axis=self.axis))

    def backward(self, g):
        shape = self.inputs[0].shape
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, shape).copy(),)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise DomainError("mean of an empty tensor")
    n = a.size if axis is None else a.shape[axis]
    return MulScalar.apply(Sum.apply(a, axis=axis), c=1.0 / n)


class Reshape(Function):
    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


class Slice(Function):
    def forward(self, a):
        return np.array(a[self.key], dtype=np.float64)

    def backward(self, g):
        out = np.zeros_like(self.inputs[0].data)
        np.add.at(out, self.key, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(ref, other))
                                         if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} disagree")
    return Concat.apply(*tensors, axis=axis)


# --------------------------------------------------------------------------
# convolution and pooling (NHWC layout)


class Conv2d(Function):
    """3x3 convolution, zero padding 1, stride 1 or 2. Weights are (3, 3, Cin, Cout)."""

    def forward(self, x, w, b):
        n, h, wd, cin = x.shape
        s = self.stride
        ho, wo = (h - 1) // s + 1, (wd - 1) // s + 1
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
        win = win[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]  # (n, ho, wo, cin, 3, 3)
        self.cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, 9 * cin)
        self.out_hw = (ho, wo)
        return (self.cols @ w.reshape(9 * cin, -1)).reshape(n, ho, wo, -1) + b

    def backward(self, g):
        x, w, _ = self.inputs
        n, h, wd, cin = x.shape
        ho, wo = self.out_hw
        s = self.stride
        cout = w.shape[-1]
        g2 = g.reshape(-1, cout)
        dw = (self.cols.T @ g2).reshape(w.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ w.data.reshape(9 * cin, cout).T).reshape(n, ho, wo, 3, 3, cin)
        dxp = np.zeros((n, h + 2, wd + 2, cin))
        for i in range(3):
            for j in range(3):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, :, i, j]
        return dxp[:, 1:-1, 1:-1], dw, db


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    if stride not in (1, 2):
        raise DomainError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[3]} output channels")
    return Conv2d.apply(x, w, b, stride=stride)


class GlobalAvgPool(Function):
    def forward(self, x):
        return x.mean(axis=(1, 2))

    def backward(self, g):
        n, h, w, c = self.inputs[0].shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC input, got shape {x.shape}")
    return GlobalAvgPool.apply(x)


# --------------------------------------------------------------------------
# probability primitives


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return tau


class Softmax(Function):
    def forward(self, x):
        z = x / self.tau
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / self.tau,)


class LogSoftmax(Function):
    def forward(self, x):
        z = x / self.tau
        z = z - z.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        return ((g - self.soft * g.sum(axis=-1, keepdims=True)) / self.tau,)


def softmax_with_temperature(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``logits / tau`` along the last axis."""
    return Softmax.apply(logits, tau=_check_tau(tau))


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    return LogSoftmax.apply(logits, tau=_check_tau(tau))


class KLDivergence(Function):
    def forward(self, p, q):
        qc = np.maximum(q, PROB_FLOOR)
        safe_p = np.where(p > 0, p, 1.0)
        return np.where(p > 0, p * (np.log(safe_p) - np.log(qc)), 0.0).sum(axis=-1)

    def backward(self, g):
        p, q = self.inputs[0].data, self.inputs[1].data
        qc = np.maximum(q, PROB_FLOOR)
        g = g[..., None]
        dp = g * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(qc) + 1.0)
        dq = np.where(q > PROB_FLOOR, -g * p / qc, 0.0)
        return dp, dq


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) along the last axis, with 0 ln 0 = 0 and q floored at 1e-12."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    return KLDivergence.apply(p, q)


class SquaredL2(Function):
    def forward(self, x):
        return (x * x).sum(axis=-1)

    def backward(self, g):
        return (2.0 * self.inputs[0].data * g[..., None],)


class L2Norm(Function):
    def forward(self, x):
        self.out = np.sqrt((x * x).sum(axis=-1))
        return self.out

    def backward(self, g):
        x = self.inputs[0].data
        n = self.out[..., None]
        return (np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0) * g[..., None],)


def squared_l2(x: Tensor) -> Tensor:
    """Row-wise squared Euclidean norm over the last axis."""
    return SquaredL2.apply(x)


def l2_norm(x: Tensor) -> Tensor:
    """Row-wise Euclidean norm over the last axis (subgradient 0 at the origin)."""
    return L2Norm.apply(x)


class GaussianSample(Function):
    def forward(self, mu, logvar, eps):
        self.std = np.exp(0.5 * logvar)
        return mu + self.std * eps

    def backward(self, g):
        eps = self.inputs[2].data
        return g, g * eps * 0.5 * self.std, None


def gaussian_sample(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """Reparameterized draw ``mu + exp(logvar / 2) * eps`` with caller-supplied noise."""
    eps = Tensor(np.asarray(eps, dtype=np.float64))
    if not (mu.shape == logvar.shape == eps.shape):
        raise ShapeError(f"gaussian_sample: shapes {mu.shape}, {logvar.shape}, {eps.shape}")
    return GaussianSample.apply(mu, logvar, eps)


def _rot_once(a: np.ndarray, axes: tuple[int, int]) -> np.ndarray:
    # new[r][c] = old[c][H-1-r]: transpose, then reverse the row axis
    return np.flip(np.swapaxes(a, *axes), axis=axes[0])


def _rotate_array(a: np.ndarray, k: int, axes: tuple[int, int]) -> np.ndarray:
    for _ in range(k % 4):
        a = _rot_once(a, axes)
    return np.ascontiguousarray(a)


class Rotate90(Function):
    def forward(self, x):
        return _rotate_array(x, self.k, self.axes)

    def backward(self, g):
        return (_rotate_array(g, (4 - self.k) % 4, self.axes),)


def rotate90(image, k: int):
    """Counter-clockwise rotation by ``k * 90`` degrees of an HxWxC (or NxHxWxC) image.

    Accepts a numpy array (returned as an array) or a Tensor (differentiable).
    """
    if int(k) != k or not 0 <= k <= 3:
        raise DomainError(f"rotation index must be in {{0, 1, 2, 3}}, got {k}")
    k = int(k)
    shape = image.shape
    if len(shape) not in (3, 4):
        raise ShapeError(f"rotate90 expects HxWxC or NxHxWxC, got shape {shape}")
    axes = (0, 1) if len(shape) == 3 else (1, 2)
    if shape[axes[0]] != shape[axes[1]]:
        raise ShapeError(f"rotate90 needs square images, got {shape[axes[0]]}x{shape[axes[1]]}")
    if isinstance(image, Tensor):
        return Rotate90.apply(image, k=k, axes=axes)
    return _rotate_array(np.asarray(image), k, axes)


def one_hot(labels, num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return Tensor(out)
