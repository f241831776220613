"""Reverse-mode automatic differentiation over dense numpy arrays.

Every trainable computation in this package is built from the primitives
here. Ops execute eagerly on numpy values; while a Tape is active each op
records a backward closure, and Tape.backward replays the closures once,
in reverse execution order, accumulating gradients additively. Backward
never mutates forward values.

Parameter gradients persist across backward calls until explicitly
zeroed, so gradient accumulation is the default. Double precision is used
on all test/oracle paths; single precision is accepted for training runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DataError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class NDArray:
    """A dense row-major array flowing through taped ops.

    ``data`` is the forward value (numpy, float32 or float64). ``grad`` is
    allocated lazily during backward for arrays that participate in
    differentiation; it is None until then.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"NDArray(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; non-NDArray operands are lifted to constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_ndarray(x, dtype=None) -> NDArray:
    """Lift a scalar/array to a constant NDArray (no-op on NDArray input)."""
    if isinstance(x, NDArray):
        return x
    return NDArray(x, requires_grad=False, dtype=dtype)


class Parameter:
    """A learned array with a persistent gradient slot and a trainable flag.

    The gradient buffer is pre-allocated and stays all-zero for frozen
    parameters; backward skips them entirely.
    """

    __slots__ = ("node",)

    def __init__(self, value, trainable: bool = True):
        node = NDArray(value, requires_grad=trainable)
        node.grad = np.zeros_like(node.data)
        self.node = node

    @property
    def value(self) -> np.ndarray:
        return self.node.data

    @value.setter
    def value(self, arr):
        if np.shape(arr) != self.node.data.shape:
            raise ShapeError(
                f"cannot assign shape {np.shape(arr)} to parameter of shape {self.node.data.shape}"
            )
        self.node.data = np.asarray(arr, dtype=self.node.data.dtype)
        self.node.grad = np.zeros_like(self.node.data)

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad

    @property
    def trainable(self) -> bool:
        return self.node.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.node.requires_grad = bool(flag)
        if not flag:
            self.node.grad[...] = 0.0

    @property
    def shape(self):
        return self.node.data.shape

    @property
    def size(self):
        return self.node.data.size

    def zero_grad(self):
        self.node.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed primitive ops.

    Used as a context manager around a forward pass; ``backward`` then
    replays the recorded closures exactly once in reverse execution order.
    A tape is confined to one execution context.
    """

    def __init__(self):
        self._ops: list[tuple[NDArray, object]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, out: NDArray):
        """Seed d(out)/d(out)=1 and accumulate gradients into all
        requires-grad inputs reachable from ``out``."""
        if out.size != 1:
            raise ContractError(f"backward requires a scalar output, got shape {out.shape}")
        if out.grad is None:
            out.grad = np.zeros_like(out.data)
        out.grad += np.ones_like(out.data)
        for node, bwd in reversed(self._ops):
            if node.grad is None or not node.requires_grad:
                continue
            bwd(node.grad)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _record(out: NDArray, bwd):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._ops.append((out, bwd))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _accum(x: NDArray, delta: np.ndarray):
    if not x.requires_grad:
        return
    d = _unbroadcast(delta, x.data.shape)
    if x.grad is None:
        x.grad = np.zeros_like(x.data)
    x.grad += d


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> NDArray:
    a, b = as_ndarray(a), as_ndarray(b)
    out = NDArray(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, bwd)
    return out


def sub(a, b) -> NDArray:
    a, b = as_ndarray(a), as_ndarray(b)
    out = NDArray(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    _record(out, bwd)
    return out


def neg(a) -> NDArray:
    a = as_ndarray(a)
    out = NDArray(-a.data, requires_grad=a.requires_grad)

    def bwd(g):
        _accum(a, -g)

    _record(out, bwd)
    return out


def mul(a, b) -> NDArray:
    a, b = as_ndarray(a), as_ndarray(b)
    out = NDArray(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    _record(out, bwd)
    return out


def div(a, b) -> NDArray:
    a, b = as_ndarray(a), as_ndarray(b)
    out = NDArray(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / b.data)
        if b.requires_grad:
            _accum(b, -g * a.data / (b.data * b.data))

    _record(out, bwd)
    return out


def sqrt(a) -> NDArray:
    a = as_ndarray(a)
    root = np.sqrt(a.data)
    out = NDArray(root, requires_grad=a.requires_grad)

    def bwd(g):
        _accum(a, g * 0.5 / root)

    _record(out, bwd)
    return out


def activation(x, kind: str) -> NDArray:
    """Elementwise non-linearity. ``gelu`` is the exact Gaussian-CDF form."""
    x = as_ndarray(x)
    if kind == "relu":
        y = np.maximum(x.data, 0.0)

        def local(g):
            return g * (x.data > 0.0)

    elif kind == "tanh":
        y = np.tanh(x.data)

        def local(g):
            return g * (1.0 - y * y)

    elif kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        y = x.data * cdf

        def local(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            return g * (cdf + x.data * pdf)

    else:
        raise ConfigError(f"unknown activation kind: {kind!r}")
    out = NDArray(y, requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, local(g))

    _record(out, bwd)
    return out


def relu(x) -> NDArray:
    return activation(x, "relu")


def tanh(x) -> NDArray:
    return activation(x, "tanh")


def gelu(x) -> NDArray:
    return activation(x, "gelu")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> NDArray:
    """Matrix product with numpy batching over leading axes."""
    a, b = as_ndarray(a), as_ndarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = NDArray(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, a.data.swapaxes(-1, -2) @ g)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape) -> NDArray:
    x = as_ndarray(x)
    out = NDArray(x.data.reshape(shape), requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    _record(out, bwd)
    return out


def transpose(x, axes) -> NDArray:
    x = as_ndarray(x)
    out = NDArray(x.data.transpose(axes), requires_grad=x.requires_grad)
    inverse = np.argsort(axes)

    def bwd(g):
        _accum(x, g.transpose(inverse))

    _record(out, bwd)
    return out


def gather_rows(table, ids) -> NDArray:
    """Embedding lookup: out[..., :] = table[ids[...], :]."""
    table = as_ndarray(table)
    idx = np.asarray(ids)
    out = NDArray(table.data[idx], requires_grad=table.requires_grad)

    def bwd(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            _accum(table, buf)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims: bool = False) -> NDArray:
    x = as_ndarray(x)
    out = NDArray(x.data.sum(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    _record(out, bwd)
    return out


def reduce_mean(x, axis=None, keepdims: bool = False) -> NDArray:
    x = as_ndarray(x)
    n = x.size if axis is None else x.data.shape[axis]
    out = NDArray(x.data.mean(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / n)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Row-normalized ops
# ---------------------------------------------------------------------------


def softmax_rows(x) -> NDArray:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = as_ndarray(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = NDArray(y, requires_grad=x.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    _record(out, bwd)
    return out


def log_softmax(x) -> NDArray:
    """Log-softmax over the last axis; rows exp-sum to one."""
    x = as_ndarray(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = NDArray(y, requires_grad=x.requires_grad)

    def bwd(g):
        _accum(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    _record(out, bwd)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> NDArray:
    """Normalize each trailing-axis vector to zero mean / unit variance,
    then apply the affine (gain, bias). ``eps`` guards zero variance."""
    x = as_ndarray(x)
    g_node = gain.node if isinstance(gain, Parameter) else as_ndarray(gain)
    b_node = bias.node if isinstance(bias, Parameter) else as_ndarray(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm requires trailing dimension >= 2, got {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = NDArray(
        xhat * g_node.data + b_node.data,
        requires_grad=x.requires_grad or g_node.requires_grad or b_node.requires_grad,
    )

    def bwd(g):
        if g_node.requires_grad:
            _accum(g_node, g * xhat)
        if b_node.requires_grad:
            _accum(b_node, g)
        if x.requires_grad:
            gg = g * g_node.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gg - m1 - xhat * m2) * inv_std)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Temporal convolution
# ---------------------------------------------------------------------------


def conv1d(x, w, b=None, stride: int = 1, padding: str = "floor") -> NDArray:
    """Temporal convolution over the last axis.

    x: (B, C_in, L), w: (C_out, C_in, K), b: (C_out,) or None.

    padding="floor" right-pads with zeros so that the output length is
    exactly L // stride; every output position sees a contiguous window of
    the input starting at ``t * stride``.
    padding="same" (stride 1 only) pads symmetrically so length is kept.
    """
    if isinstance(w, Parameter):
        w = w.node
    x, w = as_ndarray(x), as_ndarray(w)
    b_node = b.node if isinstance(b, Parameter) else (as_ndarray(b) if b is not None else None)
    B, C_in, L = x.shape
    C_out, C_in_w, K = w.shape
    if C_in != C_in_w:
        raise ShapeError(f"conv1d channel mismatch: input {C_in}, weight {C_in_w}")
    if padding == "floor":
        if L < stride:
            raise DataError(f"conv1d input length {L} shorter than stride {stride}")
        L_out = L // stride
        needed = (L_out - 1) * stride + K
        pad_left, pad_right = 0, max(0, needed - L)
    elif padding == "same":
        if stride != 1:
            raise ConfigError("same padding requires stride 1")
        L_out = L
        pad_left, pad_right = (K - 1) // 2, K // 2
    else:
        raise ConfigError(f"unknown conv1d padding mode: {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right))) if (pad_left or pad_right) else x.data
    idx = np.arange(L_out)[:, None] * stride + np.arange(K)[None, :]
    # (B, L_out, C_in*K) windows against (C_in*K, C_out); per-row GEMM keeps
    # outputs bit-identical under batch permutation
    flat = xp[:, :, idx].transpose(0, 2, 1, 3).reshape(B, L_out, C_in * K)
    wmat = w.data.reshape(C_out, C_in * K).T
    y = (flat @ wmat).transpose(0, 2, 1)
    if b_node is not None:
        y = y + b_node.data[:, None]
    rg = x.requires_grad or w.requires_grad or (b_node is not None and b_node.requires_grad)
    out = NDArray(y, requires_grad=rg)

    def bwd(g):
        gt = g.transpose(0, 2, 1)  # (B, L_out, C_out)
        if b_node is not None and b_node.requires_grad:
            _accum(b_node, g.sum(axis=(0, 2)))
        if w.requires_grad:
            dwmat = flat.reshape(-1, C_in * K).T @ gt.reshape(-1, C_out)
            _accum(w, dwmat.T.reshape(C_out, C_in, K))
        if x.requires_grad:
            dwin = (gt @ wmat.T).reshape(B, L_out, C_in, K).transpose(0, 2, 1, 3)
            dxp = np.zeros((B, C_in, L + pad_left + pad_right), dtype=x.data.dtype)
            np.add.at(dxp, (slice(None), slice(None), idx), dwin)
            _accum(x, dxp[:, :, pad_left : pad_left + L])

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container.

    Subclasses assign Parameters, Modules, or lists of Modules as
    attributes; ``named_params`` walks them in insertion order so the
    parameter ordering is deterministic across runs.
    """

    def named_params(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_params(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def params(self) -> list[Parameter]:
        return [p for _, p in self.named_params()]

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params() if p.trainable]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.trainable = flag

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def trainable_count(self) -> int:
        return sum(p.size for p in self.params() if p.trainable)

    def digest(self, only_frozen: bool = False) -> str:
        """sha256 over the canonical little-endian float32 encoding of the
        (optionally frozen-only) parameters, in name order."""
        h = hashlib.sha256()
        for name, p in self.named_params():
            if only_frozen and p.trainable:
                continue
            h.update(name.encode())
            h.update(p.value.astype("<f4").tobytes())
        return h.hexdigest()


class Linear(Module):
    """Affine map x @ W + b with W of shape (in_dim, out_dim)."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float64, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))
        self.w = Parameter(w.astype(dtype))
        self.b = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x) -> NDArray:
        y = matmul(x, self.w.node)
        if self.b is not None:
            y = add(y, self.b.node)
        return y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x) -> NDArray:
        return layer_norm(x, self.gain, self.bias, self.eps)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Comparison of tape gradients against central finite differences."""

    rel_tol: float
    entries: dict = field(default_factory=dict)  # name -> (max_abs_err, max_rel_err)

    @property
    def max_rel_error(self) -> float:
        return max((rel for _, rel in self.entries.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.rel_tol

    def __str__(self):
        lines = [
            f"{name}: abs={abs_err:.3e} rel={rel_err:.3e}"
            for name, (abs_err, rel_err) in self.entries.items()
        ]
        lines.append(f"max_rel={self.max_rel_error:.3e} tol={self.rel_tol:.1e} passed={self.passed}")
        return "\n".join(lines)


def backward_and_check(
    forward_fn,
    params,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Run ``forward_fn`` (a deterministic closure returning a scalar
    NDArray) under a fresh tape, backpropagate, and compare each trainable
    parameter's gradient with central finite differences.

    Relative error uses a 1e-6 floor in the denominator so components with
    near-zero true gradient do not blow up the ratio. ``max_coords`` caps
    how many coordinates per parameter are probed (all by default).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.zero_grad()
    with Tape() as tape:
        out = forward_fn()
    if out.size != 1:
        raise ContractError(f"gradient check requires a scalar output, got shape {out.shape}")
    tape.backward(out)

    report = GradCheckReport(rel_tol=rel_tol)
    rng = rng or np.random.default_rng(0)
    for name, p in named:
        if not p.trainable:
            continue
        analytic = p.grad.reshape(-1).copy()
        n = p.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = p.node.data.reshape(-1)
        max_abs = 0.0
        max_rel = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = forward_fn().item()
            flat[i] = orig - h
            f_minus = forward_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            abs_err = abs(analytic[i] - fd)
            rel_err = abs_err / max(abs(fd), abs(analytic[i]), 1e-6)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
        report.entries[name] = (max_abs, max_rel)
    return report
