"""Dense tensors with reverse-mode automatic differentiation.

Everything trainable in this package runs through the tape defined here.
Design constraints:

* row-major numpy storage, float32 by default; a global float64 switch
  exists for gradient checking (``precision``),
* tensors are treated as immutable values once created,
* recording happens only inside an active ``Tape`` context; each tape is
  confined to one logical execution context,
* every forward op validates that its output is finite.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's rule."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf, or a solve left the finite regime."""


# ---------------------------------------------------------------------------
# global dtype switch (float64 mode is used by tests only)
# ---------------------------------------------------------------------------

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager flipping the global dtype, e.g. ``with precision('float64'):``."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # single-pass check: any NaN/Inf poisons the sum
    s = float(np.sum(arr))
    if not np.isfinite(s):
        raise NumericError(f"non-finite values produced by op '{op}'")


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_creator", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._creator = None
        self._tape = None

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar ------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("inputs", "out", "bwd", "name")

    def __init__(self, name, inputs, out, bwd):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered op record; construction order is the topological order."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        if Tape._active is not None:
            raise ContractError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(name: str, out_data: np.ndarray, inputs: tuple, bwd) -> Tensor:
    """Wrap an op result; push on the active tape when gradients are needed."""
    _ensure_finite(out_data, name)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg, dtype=out_data.dtype)
    tape = Tape._active
    if rg and tape is not None:
        node = _Node(name, inputs, out, bwd)
        out._creator = node
        out._tape = tape
        tape.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; populates ``grad`` on leaf tensors.

    Visits each recorded op exactly once in reverse order, releasing tape
    references as it goes, and clears the tape afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise ContractError("backward called with an empty tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            node.inputs = node.out = node.bwd = None
            continue
        input_grads = node.bwd(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._creator is None or inp._tape is not tape:
                # leaf for this tape (true leaf, or produced on an earlier tape)
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        node.inputs = node.out = node.bwd = None  # free memory as we go
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "add")
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "sub")
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "mul")
    out = a.data * b.data
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _same_dtype(a, b, "div")
    out = a.data / b.data
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ash),
                              _unbroadcast(-g * ad / (bd * bd), bsh)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))),
                   np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    out = out.astype(ad.dtype, copy=False)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    # subgradient at 0 is 0; the mask is recovered from the output lazily
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    return _record("relu", out, (a,), lambda g: (g * (out > 0),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


# ---------------------------------------------------------------------------
# linear algebra / shape primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    _same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _record("matmul", out, (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a 2-D tensor, got {a.shape}")
    return _record("transpose2d", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    for t in ts[1:]:
        _same_dtype(ts[0], t, "concat")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(ts), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).astype(a.data.dtype, copy=False),)

    return _record("sum", np.asarray(out), (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    ash = a.shape
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash).astype(a.data.dtype, copy=False),)

    return _record("mean", np.asarray(out), (a,), bwd)


def take_rows(a, idx, inv_idx=None) -> Tensor:
    """Row gather ``a[idx]``.

    When ``idx`` is a permutation the caller can pass its inverse so the
    backward pass is a gather too (np.add.at is an order of magnitude
    slower and is kept only as the general fallback).
    """
    a = _as_tensor(a)
    idx = np.asarray(idx)
    out = a.data[idx]

    def bwd(g):
        if inv_idx is not None:
            return (g[inv_idx],)
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _record("take_rows", out, (a,), bwd)


def neighbor_mean(a, idx_stack, inv_stack, weights, degree: float) -> Tensor:
    """Weighted mean of row gathers: sum_c w_c * a[idx_c] / degree.

    Every index column must be a permutation (its inverse provided), which
    is what the grid hierarchy guarantees; the backward pass is then pure
    gathers. Fused into one op to keep the solver's hot loop short.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx_stack)
    w = np.asarray(weights, dtype=np.float64)
    stacked = a.data[idx.reshape(-1)].reshape(idx.shape + a.shape[1:])
    scale = (w / degree).astype(a.data.dtype)
    # reductions here are elementwise over the node axis with a fixed
    # accumulation order, so the op is exactly equivariant under any
    # relabeling of the nodes
    if np.all(w == w[0]):
        out = np.add.reduce(stacked, axis=0)
        out *= scale[0]
    else:
        out = scale[0] * stacked[0]
        for c in range(1, idx.shape[0]):
            out += scale[c] * stacked[c]

    def bwd(g):
        da = None
        for c in range(idx.shape[0]):
            term = (scale[c] * g)[inv_stack[c]]
            da = term if da is None else da + term
        return (da,)

    return _record("neighbor_mean", out, (a,), bwd)


def segment_sum_sorted(values, seg_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into segments; ``seg_ids`` must be sorted.

    The sorted requirement makes the float accumulation order canonical,
    which is what gives the grid encoder its exact permutation invariance.
    """
    values = _as_tensor(values)
    seg = np.asarray(seg_ids)
    if seg.ndim != 1 or seg.shape[0] != values.shape[0]:
        raise ShapeError("segment ids must be one per value row")
    if seg.size and np.any(np.diff(seg) < 0):
        raise ContractError("segment ids must be sorted ascending")
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.data.dtype)
    if seg.size:
        present, starts = np.unique(seg, return_index=True)
        sums = np.add.reduceat(values.data, starts, axis=0)
        out[present] = sums

    def bwd(g):
        return (g[seg],)

    return _record("segment_sum", out, (values,), bwd)


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity along the last axis; zero-norm rows map to 0."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    _same_dtype(a, b, "cosine_similarity")
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = np.sum(ad * bd, axis=-1)
    na = np.sqrt(np.sum(ad * ad, axis=-1))
    nb = np.sqrt(np.sum(bd * bd, axis=-1))
    denom = na * nb
    valid = denom > 0
    safe = np.where(valid, denom, 1.0)
    out = np.where(valid, dot / safe, 0.0).astype(ad.dtype, copy=False)

    def bwd(g):
        gv = g * valid
        s = np.where(valid, out, 0.0)
        na2 = np.where(valid, na * na, 1.0)
        nb2 = np.where(valid, nb * nb, 1.0)
        ga = (gv / safe)[..., None] * bd - (gv * s / na2)[..., None] * ad
        gb = (gv / safe)[..., None] * ad - (gv * s / nb2)[..., None] * bd
        return (ga.astype(ad.dtype, copy=False), gb.astype(bd.dtype, copy=False))

    return _record("cosine_similarity", out, (a, b), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last (channel) axis with learned affine."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm affine params must match the channel axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data
    C = xd.shape[-1]

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        dbeta = g.sum(axis=red)
        dgamma = (g * xhat).sum(axis=red)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx.astype(xd.dtype, copy=False), dgamma, dbeta)

    _ = C
    return _record("layer_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# 2-D convolutions (NHWC layout)
# ---------------------------------------------------------------------------

def _pad2d(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    spec = ((0, 0), (ph, ph), (pw, pw), (0, 0))
    if mode == "wrap":
        return np.pad(x, spec, mode="wrap")
    if mode == "zeros":
        return np.pad(x, spec)
    raise ContractError(f"unknown pad mode '{mode}'")


def _unpad2d_grad(gp: np.ndarray, ph: int, pw: int, H: int, W: int, mode: str) -> np.ndarray:
    """Fold the gradient of a padded array back onto the core region."""
    if ph == 0 and pw == 0:
        return gp
    if mode == "zeros":
        return gp[:, ph:ph + H, pw:pw + W, :]
    # wrap: pad strips alias the opposite edge of the core
    g = gp[:, ph:ph + H, pw:pw + W, :].copy()
    if ph:
        g[:, H - ph:H, :, :] += gp[:, :ph, pw:pw + W, :]
        g[:, :ph, :, :] += gp[:, ph + H:, pw:pw + W, :]
    if pw:
        core = slice(ph, ph + H)
        g[:, :, W - pw:W, :] += gp[:, core, :pw, :]
        g[:, :, :pw, :] += gp[:, core, pw + W:, :]
        if ph:  # corners
            g[:, H - ph:H, W - pw:W, :] += gp[:, :ph, :pw, :]
            g[:, H - ph:H, :pw, :] += gp[:, :ph, pw + W:, :]
            g[:, :ph, W - pw:W, :] += gp[:, ph + H:, :pw, :]
            g[:, :ph, :pw, :] += gp[:, ph + H:, pw + W:, :]
    return g


def conv2d(x, w, b=None, stride: int = 1, padding: str = "same",
           pad_mode: str = "wrap", groups: int = 1) -> Tensor:
    """2-D convolution, NHWC activations, (kh, kw, cin/groups, cout) weights.

    Two supported regimes cover every use in this package:
      * stride 1 with 'same' padding (wrap or zeros), any odd kernel,
      * stride == kernel size with no padding (non-overlapping blocks).
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    _same_dtype(x, w, "conv2d")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-D weight, got {x.shape}, {w.shape}")
    N, H, W_, Cin = x.shape
    kh, kw, cin_g, cout = w.shape
    if Cin % groups or cout % groups:
        raise ShapeError(f"conv2d channels ({Cin}->{cout}) not divisible by groups={groups}")
    if cin_g != Cin // groups:
        raise ShapeError(f"conv2d weight expects {Cin // groups} input channels per group, got {cin_g}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},)")

    if stride == 1:
        if padding != "same":
            raise ShapeError("stride-1 conv2d supports 'same' padding only")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        if 2 * ph + 1 != kh or 2 * pw + 1 != kw:
            raise ShapeError("stride-1 conv2d needs odd kernels for 'same' padding")
        if ph >= H or pw >= W_:
            raise ShapeError(
                f"kernel {kh}x{kw} needs padding smaller than the {H}x{W_} extents")
        xp = _pad2d(x.data, ph, pw, pad_mode)
        # im2col: (N, H, W, kh, kw, Cin)
        cols = np.empty((N, H, W_, kh, kw, Cin), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W_, :]
        OH, OW = H, W_
    elif stride == kh == kw and padding in ("same", "valid", 0):
        if H % stride or W_ % stride:
            raise ShapeError(f"block conv2d needs extents divisible by stride={stride}")
        OH, OW = H // stride, W_ // stride
        cols = x.data.reshape(N, OH, kh, OW, kw, Cin).transpose(0, 1, 3, 2, 4, 5)
        ph = pw = 0
        xp = None
    else:
        raise ShapeError(f"unsupported conv2d config: kernel {kh}x{kw}, stride {stride}")

    cg = Cin // groups
    og = cout // groups
    cols_g = cols.reshape(N * OH * OW, kh, kw, groups, cg)
    w_g = w.data.reshape(kh, kw, cg, groups, og)
    out = np.empty((N * OH * OW, groups, og), dtype=x.data.dtype)
    mats = []
    for gidx in range(groups):
        m = cols_g[:, :, :, gidx, :].reshape(N * OH * OW, kh * kw * cg)
        mats.append(m)
        out[:, gidx, :] = m @ w_g[:, :, :, gidx, :].reshape(kh * kw * cg, og)
    out = out.reshape(N, OH, OW, cout)
    if b is not None:
        out = out + b.data

    def bwd(g):
        g2 = g.reshape(N * OH * OW, groups, og)
        dw = np.empty((kh, kw, cg, groups, og), dtype=w.data.dtype)
        dcols = np.empty((N * OH * OW, kh, kw, groups, cg), dtype=g.dtype)
        for gi in range(groups):
            wm = w_g[:, :, :, gi, :].reshape(kh * kw * cg, og)
            dw[:, :, :, gi, :] = (mats[gi].T @ g2[:, gi, :]).reshape(kh, kw, cg, og)
            dcols[:, :, :, gi, :] = (g2[:, gi, :] @ wm.T).reshape(N * OH * OW, kh, kw, cg)
        dw_full = dw.reshape(kh, kw, cin_g, cout)
        dcols = dcols.reshape(N, OH, OW, kh, kw, Cin)
        if stride == 1:
            gp = np.zeros((N, H + 2 * ph, W_ + 2 * pw, Cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i:i + H, j:j + W_, :] += dcols[:, :, :, i, j, :]
            dx = _unpad2d_grad(gp, ph, pw, H, W_, pad_mode)
        else:
            dx = dcols.transpose(0, 1, 3, 2, 4, 5).reshape(N, H, W_, Cin)
        db = None
        if b is not None:
            db = g.sum(axis=(0, 1, 2))
        grads = (dx, dw_full) if b is None else (dx, dw_full, db)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out, inputs, bwd)


def conv2d_transpose(x, w, b=None, stride: int = 2) -> Tensor:
    """Transposed 2-D convolution with kernel == stride (exact upsampling).

    Each input pixel expands into a stride x stride output block, so output
    extents are exactly ``stride`` times the input extents.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    _same_dtype(x, w, "conv2d_transpose")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d_transpose expects NHWC input and 4-D weight")
    N, H, W_, Cin = x.shape
    kh, kw, cin, cout = w.shape
    if kh != stride or kw != stride:
        raise ShapeError(f"conv2d_transpose supports kernel == stride, got k={kh}x{kw}, s={stride}")
    if cin != Cin:
        raise ShapeError(f"conv2d_transpose weight expects {Cin} input channels, got {cin}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d_transpose bias must have shape ({cout},)")

    x2 = x.data.reshape(N * H * W_, Cin)
    w2 = w.data.transpose(2, 0, 1, 3).reshape(Cin, kh * kw * cout)
    blocks = (x2 @ w2).reshape(N, H, W_, kh, kw, cout)
    out = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(N, H * kh, W_ * kw, cout)
    if b is not None:
        out = out + b.data

    def bwd(g):
        gb = g.reshape(N, H, kh, W_, kw, cout).transpose(0, 1, 3, 2, 4, 5)
        g2 = gb.reshape(N * H * W_, kh * kw * cout)
        dx = (g2 @ w2.T).reshape(N, H, W_, Cin)
        dw = (x2.T @ g2).reshape(Cin, kh, kw, cout).transpose(1, 2, 0, 3)
        if b is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 1, 2)))

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d_transpose", out, inputs, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"{'PASS' if e.passed else 'FAIL'} {e.name}: max rel err {e.max_rel_err:.3e}"
                 for e in self.entries]
        return "\n".join(lines)


def grad_check(f, inputs: dict, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(inputs)`` against central differences.

    Meant to run in float64 mode; the report carries per-tensor pass/fail
    rather than raising.
    """
    if default_dtype() is not np.float64:
        raise ContractError("grad_check requires the float64 precision mode")
    for t in inputs.values():
        t.zero_grad()
    with Tape():
        loss = f(inputs)
        backward(loss)
    report = GradCheckReport()
    for name, t in inputs.items():
        tape_grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(inputs).item()
            flat[i] = orig - step
            fm = f(inputs).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(tape_grad), np.abs(num)), 1e-8)
        rel = np.abs(tape_grad - num) / denom
        # exact agreement on identically-zero gradients
        rel[(tape_grad == 0) & (num == 0)] = 0.0
        err = float(rel.max()) if rel.size else 0.0
        report.entries.append(GradCheckEntry(name, err, err < tol))
    return report


# ---------------------------------------------------------------------------
# parameter trees and serialization
# ---------------------------------------------------------------------------

def flatten_params(tree: dict, prefix: str = "") -> dict:
    """Flatten a nested dict of Tensors into {dotted.name: Tensor}."""
    flat = {}
    for key, val in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict):
            flat.update(flatten_params(val, name))
        elif isinstance(val, Tensor):
            flat[name] = val
        else:
            raise ContractError(f"parameter tree leaf '{name}' is not a Tensor")
    return flat


def unflatten_params(flat: dict) -> dict:
    tree: dict = {}
    for name, t in flat.items():
        parts = name.split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = t
    return tree


def save_params(dirpath: str, params: dict, config: dict | None = None,
                manifest_name: str = "manifest.json", blob_name: str = "params.bin") -> None:
    """Write a parameter manifest (JSON) plus one raw little-endian blob.

    Round-trips bit-exactly; ``config`` (if given) is embedded in the manifest.
    """
    flat = flatten_params(params) if any(isinstance(v, dict) for v in params.values()) else dict(params)
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(flat):
        t = flat[name]
        arr = np.ascontiguousarray(t.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "byte_offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {"tensors": entries, "blob": blob_name, "total_bytes": offset}
    if config is not None:
        manifest["config"] = config
    with open(os.path.join(dirpath, manifest_name), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(dirpath, blob_name), "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(dirpath: str, manifest_name: str = "manifest.json",
                requires_grad: bool = True):
    """Load a manifest+blob checkpoint; returns (flat params, embedded config)."""
    with open(os.path.join(dirpath, manifest_name)) as fh:
        manifest = json.load(fh)
    with open(os.path.join(dirpath, manifest["blob"]), "rb") as fh:
        blob = fh.read()
    flat = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=e["byte_offset"])
        arr = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
        flat[e["name"]] = Tensor(arr, requires_grad=requires_grad, dtype=arr.dtype)
    return flat, manifest.get("config")
