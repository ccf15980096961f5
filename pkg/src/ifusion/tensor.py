"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values live in contiguous numpy arrays; every operation validates its output
for NaN/Inf and, when a :class:`Graph` is active on the current thread,
records a node whose closure knows how to push gradients to its inputs.
Execution order is the topological order, so backward is a single reverse
sweep over the tape.  Graphs are single-use: one forward, one backward.

Gradient convention: ``backward(loss, graph)`` accumulates d(loss)/d(p) into
``Parameter.grad`` for every parameter that influenced the scalar loss.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .rng import SplitMix64

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Immutable-by-convention dense array of float64 values."""

    __slots__ = ("array", "requires_grad", "name", "param")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anonymous>'}")
        self.array = arr
        self.requires_grad = requires_grad
        self.name = name
        self.param: "Parameter | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def ndim(self) -> int:
        return self.array.ndim

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values) -> Tensor:
    """Constant (non-differentiable) tensor from array-like values."""
    return Tensor(values)


class Parameter:
    """Named leaf tensor with a gradient buffer of identical shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, values):
        self.name = name
        self.value = Tensor(values, requires_grad=True, name=name)
        self.value.param = self
        self.grad = np.zeros_like(self.value.array)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out: Tensor, fn):
        self.out = out
        self.fn = fn


class Graph:
    """Single-use tape of executed operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    A graph must stay on one thread and may be consumed by ``backward`` once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _stack().pop()
        assert top is self
        return False


_LOCAL = threading.local()


def _stack() -> list:
    try:
        return _LOCAL.graphs
    except AttributeError:
        _LOCAL.graphs = []
        return _LOCAL.graphs


def _active() -> Graph | None:
    s = _stack()
    return s[-1] if s else None


def _finish(op: str, out_arr: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    # a single sum is far cheaper than an isfinite pass and still catches any
    # NaN/Inf element (they propagate, +inf-inf turning into NaN)
    if not math.isfinite(out_arr.sum()):
        names = ", ".join(t.name for t in inputs if t.name) or "<constants>"
        raise NonFiniteError(f"op '{op}' produced non-finite values (inputs: {names})")
    out = Tensor.__new__(Tensor)
    out.array = out_arr if out_arr.flags.c_contiguous else np.ascontiguousarray(out_arr)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.name = None
    out.param = None
    g = _active()
    if g is not None and out.requires_grad:
        if g.consumed:
            raise ContractError("recording into a graph that was already backpropagated")
        g.nodes.append(_Node(out, fn))
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over leading axes so it matches a suffix shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")

    def fn(g):
        return ((a, g), (b, g))

    return _finish("add", a.array + b.array, (a, b), fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} vs {b.shape}")

    def fn(g):
        return ((a, g), (b, -g))

    return _finish("sub", a.array - b.array, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
    A, B = a.array, b.array

    def fn(g):
        return ((a, g * B), (b, g * A))

    return _finish("mul", A * B, (a, b), fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def fn(g):
        return ((x, g * c),)

    return _finish("scale", x.array * c, (x,), fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add ``b`` whose shape is a suffix of ``x.shape``."""
    if x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: {b.shape} is not a suffix of {x.shape}")
    bshape = b.shape

    def fn(g):
        return ((x, g), (b, _sum_to(g, bshape)))

    return _finish("add_bias", x.array + b.array, (x, b), fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def fn(g):
        return ((x, g.reshape(old)),)

    return _finish("reshape", x.array.reshape(shape), (x,), fn)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def fn(g):
        return ((x, np.ascontiguousarray(g.transpose(inv))),)

    return _finish("transpose", np.ascontiguousarray(x.array.transpose(axes)), (x,), fn)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        idx = [slice(None)] * g.ndim
        out = []
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx[axis] = slice(int(lo), int(hi))
            out.append((t, np.ascontiguousarray(g[tuple(idx)])))
        return out

    return _finish("concat", np.concatenate([t.array for t in parts], axis=axis), tuple(parts), fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    xshape = x.shape

    def fn(g):
        full = np.zeros(xshape)
        full[idx] = g
        return ((x, full),)

    return _finish("slice", np.ascontiguousarray(x.array[idx]), (x,), fn)


def broadcast_leading(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""

    def fn(g):
        return ((x, g.sum(axis=0)),)

    out = np.broadcast_to(x.array, (n,) + x.shape).copy()
    return _finish("broadcast_leading", out, (x,), fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def fn(g):
        return ((x, np.full(shape, float(g))),)

    return _finish("sum_all", np.asarray(x.array.sum()), (x,), fn)


# ---------------------------------------------------------------------------
# linear algebra and neural ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Project the last axis of ``x`` through ``w`` (+ optional bias).

    Fuses flatten, matmul, bias and unflatten into one tape node; the leading
    axes of ``x`` are untouched.
    """
    A, W = x.array, w.array
    if W.ndim != 2 or A.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    lead = A.shape[:-1]
    flat = A.reshape(-1, A.shape[-1])
    out = flat @ W
    if b is not None:
        out = out + b.array
    out = out.reshape(lead + (W.shape[1],))

    def fn(g):
        gflat = g.reshape(-1, W.shape[1])
        res = []
        if x.requires_grad:
            res.append((x, (gflat @ W.T).reshape(A.shape)))
        if w.requires_grad:
            res.append((w, flat.T @ gflat))
        if b is not None and b.requires_grad:
            res.append((b, gflat.sum(axis=0)))
        return res

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("linear", out, inputs, fn)


def heads_split(x: Tensor, heads: int) -> Tensor:
    """(B, T, h*Dq) -> (B, h, T, Dq) in one node."""
    b, t, d = x.shape
    dq = d // heads
    out = np.ascontiguousarray(x.array.reshape(b, t, heads, dq).transpose(0, 2, 1, 3))

    def fn(g):
        return ((x, np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b, t, d)),)

    return _finish("heads_split", out, (x,), fn)


def heads_merge(x: Tensor) -> Tensor:
    """(B, h, T, Dq) -> (B, T, h*Dq) in one node."""
    b, h, t, dq = x.shape
    out = np.ascontiguousarray(x.array.transpose(0, 2, 1, 3)).reshape(b, t, h * dq)

    def fn(g):
        return ((x, np.ascontiguousarray(g.reshape(b, t, h, dq).transpose(0, 2, 1, 3))),)

    return _finish("heads_merge", out, (x,), fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked inputs must share identical leading dims."""
    A, B = a.array, b.array
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if A.shape[-1] != B.shape[-2] or A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not agree")

    def fn(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ B.swapaxes(-1, -2)))
        if b.requires_grad:
            out.append((b, A.swapaxes(-1, -2) @ g))
        return out

    return _finish("matmul", A @ B, (a, b), fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    A = x.array
    e = np.exp(A - A.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((x, y * (g - dot)),)

    return _finish("softmax", y, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-dimension slice to mean 0, variance 1, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    A = x.array
    mu = A.mean(axis=-1, keepdims=True)
    xc = A - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gamma.array + beta.array

    def fn(g):
        res = []
        if gamma.requires_grad:
            res.append((gamma, _sum_to(g * y, (d,))))
        if beta.requires_grad:
            res.append((beta, _sum_to(g, (d,))))
        if x.requires_grad:
            gy = g * gamma.array
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            res.append((x, inv * (gy - m1 - y * m2)))
        return res

    return _finish("layer_norm", out, (x, gamma, beta), fn)


def gelu(x: Tensor) -> Tensor:
    """Exact error-function GELU: x * Phi(x)."""
    A = x.array
    phi_cdf = 0.5 * (1.0 + _erf(A * _INV_SQRT2))

    def fn(g):
        pdf = np.exp(-0.5 * A * A) * _INV_SQRT_2PI
        return ((x, g * (phi_cdf + A * pdf)),)

    return _finish("gelu", A * phi_cdf, (x,), fn)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); kernels are
    (C_out, C_in, kh, kw).  Output spatial dims follow
    (H + 2*padding - kh) // stride + 1.
    """
    squeeze = x.ndim == 3
    A = x.array[None] if squeeze else x.array
    K = kernels.array
    n, c_in, h, w = A.shape
    c_out, kc, kh, kw = K.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} vs kernel channels {kc}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} vs {c_out} kernels")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input ({h + 2 * padding}x{w + 2 * padding})"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    ap = np.pad(A, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else A
    win = np.lib.stride_tricks.sliding_window_view(ap, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c_in, ho, wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * kh * kw)
    kmat = K.reshape(c_out, c_in * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2) + bias.array[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        if squeeze:
            g = g[None]
        res = []
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c_out)
        if bias.requires_grad:
            res.append((bias, gmat.sum(axis=0)))
        if kernels.requires_grad:
            res.append((kernels, (gmat.T @ cols).reshape(c_out, c_in, kh, kw)))
        if x.requires_grad:
            gcols = (gmat @ kmat).reshape(n, ho, wo, c_in, kh, kw)
            gp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
            for ki in range(kh):
                for kj in range(kw):
                    gp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            gx = gp[:, :, padding:padding + h, padding:padding + w] if padding else gp
            res.append((x, gx[0] if squeeze else gx))
        return res

    return _finish("conv2d", out[0] if squeeze else out, (x, kernels, bias), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row logits against integer labels.

    Log-sum-exp is stabilized by max subtraction; the backward pass is the
    usual (softmax - onehot) / batch.
    """
    A = logits.array
    if A.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = A.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows vs {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError("cross_entropy labels out of range")
    m = A.max(axis=-1, keepdims=True)
    z = A - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    loss = np.asarray((lse - A[np.arange(n), labels]).mean())

    def fn(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return ((logits, p * (float(g) / n)),)

    return _finish("cross_entropy", loss, (logits,), fn)


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate ``Parameter.grad`` for every parameter the loss depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.consumed:
        raise ContractError("graph already backpropagated")
    graph.consumed = True

    acc: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = acc.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in node.fn(g):
            if not t.requires_grad:
                continue
            if t.param is not None:
                t.param.grad += gt
            else:
                key = id(t)
                if key in acc:
                    acc[key] = acc[key] + gt
                else:
                    acc[key] = gt


@dataclass
class GradCheckEntry:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((float(e.rel_err.max()) for e in self.entries if e.rel_err.size), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        worst = max(self.entries, key=lambda e: float(e.rel_err.max()) if e.rel_err.size else 0.0)
        return (
            f"grad_check {'PASS' if self.passed else 'FAIL'}: "
            f"max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) at {worst.name}"
        )


def grad_check(f, params: list[Parameter], h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor; it is re-evaluated with each parameter element nudged by +/-h.
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    if _active() is not None:
        raise ContractError("grad_check must not run inside an active graph")

    if f().item() != f().item():
        raise ContractError("grad_check: f is non-deterministic (repeated evaluation mismatch)")

    for p in params:
        p.zero_grad()
    with Graph() as g:
        loss = f()
    backward(loss, g)
    analytic = {p.name: p.grad.copy() for p in params}

    report = GradCheckReport(tol=tol)
    for p in params:
        flat = p.value.array.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        numeric = numeric.reshape(p.shape)
        a = analytic[p.name]
        rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        report.entries.append(GradCheckEntry(p.name, a, numeric, rel))
    return report


# ---------------------------------------------------------------------------
# parameter registry


class ParamStore:
    """Registry of uniquely named parameters with seeded initialization.

    Weight matrices draw Xavier-uniform values row-major from a single
    splitmix64 stream in registration order; zero and one initializers
    consume no draws.  This ordering is the whole init contract: same seed
    and same registration sequence means bit-identical parameters.
    """

    def __init__(self, seed: int):
        self.rng = SplitMix64(seed)
        self.params: dict[str, Parameter] = {}

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ConfigError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def xavier(self, name: str, fan_in: int, fan_out: int, shape: tuple[int, ...] | None = None) -> Parameter:
        shape = shape or (fan_in, fan_out)
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        vals = (self.rng.uniform(int(np.prod(shape))) * 2.0 - 1.0) * limit
        return self._register(Parameter(name, vals.reshape(shape)))

    def xavier_conv(self, name: str, c_out: int, c_in: int, kh: int, kw: int) -> Parameter:
        return self.xavier(name, c_in * kh * kw, c_out * kh * kw, shape=(c_out, c_in, kh, kw))

    def zeros(self, name: str, *shape: int) -> Parameter:
        return self._register(Parameter(name, np.zeros(shape)))

    def ones(self, name: str, *shape: int) -> Parameter:
        return self._register(Parameter(name, np.ones(shape)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def total_size(self) -> int:
        return sum(p.size for p in self.params.values())
