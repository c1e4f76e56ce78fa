"""Dense tensors with reverse-mode automatic differentiation.

numpy holds the raw arrays. Every differentiable operation records its
parent tensors and a backward closure, so the gradient of a scalar output
can be pushed back through arbitrary compositions of the primitives the
architecture needs: 2-D convolution, batch normalization, average pooling,
dense products, reshapes and elementwise nonlinearities. Data is stored
row-major; leaf tensors reject NaN/Inf at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError, StateError

__all__ = [
    "Tensor",
    "RunningStats",
    "backward",
    "matmul",
    "dense",
    "relu",
    "softmax",
    "einsum",
    "conv2d",
    "avg_pool2d",
    "batch_norm",
]


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    ``requires_grad`` marks leaves that should accumulate gradients.
    Tensors produced by operations carry the recorded graph; calling
    :func:`backward` on a scalar output fills the ``grad`` slots of every
    reachable leaf with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    # keep numpy from broadcasting Tensors elementwise in `ndarray <op> Tensor`;
    # NotImplemented falls through to the reflected Tensor operator instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        """Wrap an op result; records the graph only if a parent needs grad."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- inspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph management --------------------------------------------------

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward_fn = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)

    # -- arithmetic --------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data + b.data

        def bw(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return Tensor._from_op(out_data, (a, b), bw)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data * b.data

        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return Tensor._from_op(out_data, (a, b), bw)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def bw(g):
            _accumulate(a, -g)

        return Tensor._from_op(-a.data, (a,), bw)

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data - b.data

        def bw(g):
            _accumulate(a, g)
            _accumulate(b, -g)

        return Tensor._from_op(out_data, (a, b), bw)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data / b.data

        def bw(g):
            _accumulate(a, g / b.data)
            _accumulate(b, -g * a.data / (b.data * b.data))

        return Tensor._from_op(out_data, (a, b), bw)

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ParameterError("only scalar exponents are supported")
        a = self
        p = float(exponent)
        out_data = a.data ** p

        def bw(g):
            _accumulate(a, g * p * a.data ** (p - 1.0))

        return Tensor._from_op(out_data, (a,), bw)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out_data = a.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}: {exc}") from exc
        in_shape = a.shape

        def bw(g):
            _accumulate(a, g.reshape(in_shape))

        return Tensor._from_op(out_data, (a,), bw)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        a = self
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out_data = np.ascontiguousarray(a.data.transpose(axes))

        def bw(g):
            _accumulate(a, g.transpose(inverse))

        return Tensor._from_op(out_data, (a,), bw)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
        in_shape = a.shape

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % len(in_shape) for ax in axes)
                for ax in sorted(axes):
                    gg = np.expand_dims(gg, ax)
            _accumulate(a, np.broadcast_to(gg, in_shape))

        return Tensor._from_op(out_data, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities ------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0
        out_data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

        def bw(g):
            _accumulate(a, g * mask)

        return Tensor._from_op(out_data, (a,), bw)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            _accumulate(a, g * out_data)

        return Tensor._from_op(out_data, (a,), bw)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def bw(g):
            _accumulate(a, g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), bw)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.shape)
    t.grad = g if t.grad is None else t.grad + g


def backward(output: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Reverse-mode sweep from a scalar ``output``.

    Fills ``grad`` on every reachable tensor with ``requires_grad``. Any
    tensor listed in ``params`` that the graph never touched gets an
    explicit zero gradient so optimizers see a complete gradient set.
    """
    if output.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {output.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    output.grad = np.ones_like(output.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), bw)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with x shaped (batch, in_features)."""
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    return x.relu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # constant max-shift keeps exp in range without touching gradients;
    # built as a detached op result, not a leaf, so the leaf finiteness
    # check cannot fire mid-graph on data the graph itself produced
    shift = Tensor._from_op(x.data.max(axis=axis, keepdims=True), (), None)
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable einsum for explicit contractions.

    Restricted to specs with an explicit ``->``, no ellipsis and no index
    repeated within one operand; every operand index must appear in the
    output or in another operand (true for all contractions used here).
    """
    if "->" not in subscripts or "..." in subscripts:
        raise ParameterError(f"einsum spec must be explicit without ellipsis: {subscripts!r}")
    in_part, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = in_part.split(",")
    if len(in_subs) != len(operands):
        raise ParameterError(f"einsum spec {subscripts!r} expects {len(in_subs)} operands")
    for sub, op in zip(in_subs, operands):
        if len(set(sub)) != len(sub):
            raise ParameterError(f"repeated index within one operand unsupported: {sub!r}")
        if len(sub) != op.ndim:
            raise DimensionError(f"operand rank {op.ndim} does not match subscript {sub!r}")
    for m, sub in enumerate(in_subs):
        known = set(out_sub).union(*(set(s) for k, s in enumerate(in_subs) if k != m)) if len(in_subs) > 1 else set(out_sub)
        if not set(sub) <= known:
            raise ParameterError(f"index of operand {m} appears nowhere else; unsupported: {subscripts!r}")

    out_data = np.einsum(subscripts, *(op.data for op in operands))

    def bw(g):
        for m, op in enumerate(operands):
            if not op.requires_grad:
                continue
            others = [(s, o) for k, (s, o) in enumerate(zip(in_subs, operands)) if k != m]
            spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + in_subs[m]
            _accumulate(op, np.einsum(spec, g, *(o.data for _, o in others)))

    return Tensor._from_op(out_data, operands, bw)


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------


def _conv_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, kh, kw), (s0, s1, s2 * sh, s3 * sw, s2, s3), writeable=False
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an FCkk kernel plus bias."""
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if c != ck:
        raise DimensionError(f"input has {c} channels but kernel expects {ck}")
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    windows = _conv_windows(xp, kh, kw, stride, stride, ho, wo)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    w2 = kernel.data.reshape(f, c * kh * kw)
    out2 = cols @ w2.T + bias.data
    out_data = np.ascontiguousarray(out2.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    pad_shape = xp.shape

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        if kernel.requires_grad:
            _accumulate(kernel, (g2.T @ cols).reshape(kernel.shape))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(pad_shape, dtype=g.dtype)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += (
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, dxp)

    return Tensor._from_op(out_data, (x, kernel, bias), bw)


def avg_pool2d(x: Tensor, pool: int, stride: Optional[int] = None) -> Tensor:
    """Mean over pool x pool windows of an NCHW tensor."""
    if pool < 1:
        raise ParameterError(f"pool size must be >= 1, got {pool}")
    stride = pool if stride is None else stride
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects a 4-D tensor, got {x.shape}")
    n, c, h, w = x.shape
    if pool > h or pool > w:
        raise DimensionError(f"pool {pool} exceeds spatial dims {h}x{w}")

    ho = (h - pool) // stride + 1
    wo = (w - pool) // stride + 1
    windows = _conv_windows(x.data, pool, pool, stride, stride, ho, wo)
    out_data = windows.mean(axis=(-2, -1))
    scale = 1.0 / (pool * pool)

    def bw(g):
        if not x.requires_grad:
            return
        dx = np.zeros(x.shape, dtype=g.dtype)
        gs = g * scale
        for u in range(pool):
            for v in range(pool):
                dx[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += gs
        _accumulate(x, dx)

    return Tensor._from_op(np.ascontiguousarray(out_data), (x,), bw)


@dataclass
class RunningStats:
    """Exponential running mean/variance for batch normalization.

    ``update`` blends batch statistics in place with the given momentum
    (running = momentum * running + (1 - momentum) * batch), so the arrays
    keep their identity and can live inside a model's parameter store.
    """

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = 0.9
    updates: int = field(default=0)

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if not self.initialized:
            raise StateError("running stats have no arrays to update")
        m = self.momentum
        self.mean *= m
        self.mean += (1.0 - m) * batch_mean.astype(self.mean.dtype)
        self.var *= m
        self.var += (1.0 - m) * batch_var.astype(self.var.dtype)
        self.updates += 1


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    stats: Optional[RunningStats] = None,
) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    Train mode normalizes by batch mean and (biased) batch variance and
    folds those statistics into ``stats``; infer mode normalizes by the
    running statistics and leaves them untouched.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")

    gamma_r = gamma.reshape(1, c, 1, 1)
    beta_r = beta.reshape(1, c, 1, 1)

    if mode == "train":
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        out = gamma_r * (centered / (var + eps).sqrt()) + beta_r
        if stats is not None:
            stats.update(mu.data.reshape(c), var.data.reshape(c))
        return out

    if stats is None or not stats.initialized:
        raise StateError("inference-mode batch_norm requires initialized running stats")
    rm = Tensor(stats.mean.reshape(1, c, 1, 1).astype(x.data.dtype))
    rv = Tensor(stats.var.reshape(1, c, 1, 1).astype(x.data.dtype))
    return gamma_r * ((x - rm) / (rv + eps).sqrt()) + beta_r
