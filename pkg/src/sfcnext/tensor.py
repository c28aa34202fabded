"""Minimal dense-tensor engine with tape-based reverse-mode autodiff.

Tensors wrap contiguous numpy arrays (float32 by default; float64 is allowed
so gradient checks can re-evaluate any forward pass in double precision).
Operations executed inside a ``with Tape() as tape:`` block are recorded in
forward (topological) order; ``backward(tape, loss)`` replays the tape once in
reverse and populates ``.grad`` on every tensor that requires gradients.

Reductions that are prone to cancellation (conv inner sums, normalization
statistics) accumulate in 64-bit regardless of the tensor dtype.
"""

import numpy as np
from scipy import special

from . import accel


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericsError(ArithmeticError):
    """Raised on NaN/Inf where silent propagation would hide divergence."""


_TAPE_STACK = []


class Tape:
    """Ordered record of op nodes; parents always precede children."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _push(self, out, parents, backward_fn):
        self.nodes.append((out, parents, backward_fn))


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray)
                  and arr.dtype in (np.float32, np.float64)):
            arr = arr.astype(np.float32)
        if 0 in arr.shape:
            raise ShapeError(f"tensor shape {arr.shape} contains a zero dimension")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self):
        """Row-major flat view of the underlying storage."""
        return self.data.reshape(-1)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _record(out, parents, backward_fn):
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._push(out, parents, backward_fn)
    return out


def _accum(tensor, grad_map, g):
    key = id(tensor)
    if key in grad_map:
        grad_map[key][1] += g
    else:
        grad_map[key] = [tensor, g.astype(tensor.dtype, copy=True)]


def backward(tape, loss):
    """Populate ``.grad`` on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grad_map = {id(loss): [loss, np.ones_like(loss.data)]}
    for out, parents, backward_fn in reversed(tape.nodes):
        entry = grad_map.pop(id(out), None)
        if entry is None:
            continue
        g = entry[1]
        if out.grad is None:
            out.grad = g
        else:
            out.grad = out.grad + g
        needs = tuple(p.requires_grad for p in parents)
        pgrads = backward_fn(g, needs)
        for p, pg in zip(parents, pgrads):
            if pg is not None and p.requires_grad:
                _accum(p, grad_map, np.asarray(pg))
    for t, g in grad_map.values():
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        ax = _first_mismatch(a.shape, b.shape)
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape} differ at axis {ax}")
    out = Tensor(a.data + b.data, dtype=a.dtype)
    return _record(out, (a, b), lambda g, needs: (g if needs[0] else None,
                                                  g if needs[1] else None))


def sub(a, b):
    if a.shape != b.shape:
        ax = _first_mismatch(a.shape, b.shape)
        raise ShapeError(f"sub: shapes {a.shape} vs {b.shape} differ at axis {ax}")
    out = Tensor(a.data - b.data, dtype=a.dtype)
    return _record(out, (a, b), lambda g, needs: (g if needs[0] else None,
                                                  -g if needs[1] else None))


def mul(a, b):
    if a.shape != b.shape:
        ax = _first_mismatch(a.shape, b.shape)
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape} differ at axis {ax}")
    out = Tensor(a.data * b.data, dtype=a.dtype)
    return _record(out, (a, b), lambda g, needs: (g * b.data if needs[0] else None,
                                                  g * a.data if needs[1] else None))


def mul_scalar(x, c):
    c = float(c)
    out = Tensor(x.data * c, dtype=x.dtype)
    return _record(out, (x,), lambda g, needs: (g * c,))


def gelu(x):
    """Exact erf-based GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + special.erf(d / np.sqrt(2.0)))
    out = Tensor(d * cdf, dtype=x.dtype)

    def bwd(g, needs):
        pdf = np.exp(-0.5 * d.astype(np.float64) ** 2) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + d * pdf).astype(x.dtype, copy=False),)

    return _record(out, (x,), bwd)


def softmax(x, axis=-1):
    d = x.data.astype(np.float64)
    d = d - d.max(axis=axis, keepdims=True)
    e = np.exp(d)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, dtype=x.dtype)

    def bwd(g, needs):
        gs = g * s
        return ((gs - s * gs.sum(axis=axis, keepdims=True)).astype(x.dtype, copy=False),)

    return _record(out, (x,), bwd)


def concat(tensors, axis):
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (p, q) in enumerate(zip(ref, t.shape)):
            if ax != (axis % len(ref)) and p != q:
                raise ShapeError(
                    f"concat: shapes {ref} vs {t.shape} differ at non-join axis {ax}"
                )
        if len(t.shape) != len(ref):
            raise ShapeError(f"concat: rank mismatch {ref} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 dtype=tensors[0].dtype)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g, needs):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record(out, tuple(tensors), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)
    orig = x.shape
    return _record(out, (x,), lambda g, needs: (g.reshape(orig),))


def transpose(x, axes):
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), dtype=x.dtype)
    inv = np.argsort(axes)
    return _record(out, (x,), lambda g, needs: (np.ascontiguousarray(g.transpose(inv)),))


def sum_all(x):
    out = Tensor(np.array(x.data.sum(dtype=np.float64)), dtype=x.dtype)
    return _record(out, (x,), lambda g, needs: (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),))


def mean_all(x):
    n = x.data.size
    out = Tensor(np.array(x.data.sum(dtype=np.float64) / n), dtype=x.dtype)
    return _record(out, (x,),
                   lambda g, needs: ((np.broadcast_to(g, x.shape) / n).astype(x.dtype, copy=False),))


def square(x):
    out = Tensor(x.data * x.data, dtype=x.dtype)
    return _record(out, (x,), lambda g, needs: (g * 2.0 * x.data,))


def mean_pool_spatial(x):
    """[N,C,D,H,W] -> [N,C], mean over the spatial axes."""
    if x.data.ndim != 5:
        raise ShapeError(f"mean_pool_spatial expects a 5-d tensor, got {x.shape}")
    n_vox = x.shape[2] * x.shape[3] * x.shape[4]
    out = Tensor(x.data.mean(axis=(2, 3, 4), dtype=np.float64), dtype=x.dtype)

    def bwd(g, needs):
        return ((g[:, :, None, None, None] / n_vox
                 * np.ones(x.shape, dtype=x.dtype)).astype(x.dtype, copy=False),)

    return _record(out, (x,), bwd)


def mean_tokens(x):
    """[N,T,C] -> [N,C], mean over the token axis."""
    if x.data.ndim != 3:
        raise ShapeError(f"mean_tokens expects a 3-d tensor, got {x.shape}")
    T = x.shape[1]
    out = Tensor(x.data.mean(axis=1, dtype=np.float64), dtype=x.dtype)

    def bwd(g, needs):
        return (np.broadcast_to(g[:, None, :] / T, x.shape).astype(x.dtype, copy=False),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} vs {b.shape[-2]} at axis {len(a.shape) - 1}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def bwd(g, needs):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if needs[0] else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if needs[1] else None
        return (ga, gb)

    return _record(out, (a, b), bwd)


def linear(x, w, b=None):
    """x[..., F_in] @ w[F_out, F_in]^T + b[F_out]."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[-1]} != weight F_in {w.shape[1]}"
        )
    y = np.matmul(x.data, w.data.T)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data
    out = Tensor(y, dtype=x.dtype)
    parents = (x, w, b) if b is not None else (x, w)

    def bwd(g, needs):
        gx = np.matmul(g, w.data) if needs[0] else None
        gw = None
        if needs[1]:
            g2 = g.reshape(-1, w.shape[0])
            x2 = x.data.reshape(-1, w.shape[1])
            gw = g2.T @ x2
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, w.shape[0]).sum(axis=0, dtype=np.float64)
                         if needs[2] else None)
        return tuple(grads)

    return _record(out, parents, bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    F = x.shape[-1]
    if gamma.shape != (F,) or beta.shape != (F,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({F},)"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.data.astype(np.float64)
    mu = d.mean(axis=-1, keepdims=True)
    var = ((d - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, dtype=x.dtype)

    def bwd(g, needs):
        g64 = g.astype(np.float64)
        gh = g64 * gamma.data.astype(np.float64)
        gx = None
        if needs[0]:
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            gx = (inv * (gh - m1 - xhat * m2)).astype(x.dtype, copy=False)
        gg = (g64 * xhat).reshape(-1, F).sum(axis=0) if needs[1] else None
        gb = g64.reshape(-1, F).sum(axis=0) if needs[2] else None
        return (gx, gg, gb)

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv3d(x, w, b=None, stride=1, padding=0, groups=1):
    """3-D convolution; overlapped downsampling uses kernel > stride."""
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d: input must be 5-d [N,C,D,H,W], got {x.shape}")
    if w.data.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"conv3d: weight must be [C_out,C_in/g,k,k,k], got {w.shape}")
    N, Cin, D, H, W = x.shape
    Cout, cpg, k = w.shape[0], w.shape[1], w.shape[2]
    if Cin % groups != 0:
        raise ShapeError(f"conv3d: C_in={Cin} not divisible by groups={groups} (axis 1)")
    if Cout % groups != 0:
        raise ShapeError(f"conv3d: C_out={Cout} not divisible by groups={groups} (axis 0)")
    if cpg != Cin // groups:
        raise ShapeError(
            f"conv3d: weight axis 1 is {cpg}, expected C_in/groups={Cin // groups}"
        )
    for ax, size in ((2, D), (3, H), (4, W)):
        if size + 2 * padding < k:
            raise ShapeError(
                f"conv3d: input axis {ax} (size {size}, padding {padding}) smaller than kernel {k}"
            )
    y = accel.conv3d_fwd(x.data, w.data, stride, padding, groups)
    if b is not None:
        if b.shape != (Cout,):
            raise ShapeError(f"conv3d: bias shape {b.shape} != ({Cout},) (axis 0)")
        y = y + b.data[None, :, None, None, None]
    out = Tensor(y, dtype=x.dtype)
    parents = (x, w, b) if b is not None else (x, w)

    def bwd(g, needs):
        gx = gw = None
        if needs[0]:
            gx = accel.conv3d_bwd_input(
                g, w.data, (N, Cin, D, H, W), stride, padding, groups
            ).astype(x.dtype, copy=False)
        if needs[1]:
            gw = accel.conv3d_bwd_weight(g, x.data, k, stride, padding, groups)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4), dtype=np.float64) if needs[2] else None)
        return tuple(grads)

    return _record(out, parents, bwd)


def depthwise_conv3d(x, w, b=None):
    """Per-channel spatial conv, odd kernel, spatial size preserved."""
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv3d: kernel size {k} must be odd")
    return conv3d(x, w, b, stride=1, padding=(k - 1) // 2, groups=x.shape[1])


def dwconv_tokens(x, w, b=None):
    """Depthwise 1-D conv along the token axis; x[N,T,C], w[C,k] with odd k."""
    if x.data.ndim != 3:
        raise ShapeError(f"dwconv_tokens expects [N,T,C], got {x.shape}")
    N, T, C = x.shape
    k = w.shape[1]
    if w.shape[0] != C:
        raise ShapeError(f"dwconv_tokens: weight channels {w.shape[0]} != {C}")
    if k % 2 == 0:
        raise ShapeError(f"dwconv_tokens: kernel size {k} must be odd")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0))).astype(np.float64)
    y = np.zeros((N, T, C), dtype=np.float64)
    for j in range(k):
        y += w.data[:, j] * xp[:, j : j + T, :]
    if b is not None:
        y += b.data
    out = Tensor(y, dtype=x.dtype)
    parents = (x, w, b) if b is not None else (x, w)

    def bwd(g, needs):
        gx = gw = None
        if needs[0]:
            gp = np.zeros((N, T + 2 * pad, C), dtype=np.float64)
            for j in range(k):
                gp[:, j : j + T, :] += w.data[:, j] * g
            gx = gp[:, pad : pad + T, :].astype(x.dtype, copy=False)
        if needs[1]:
            gw = np.empty((C, k), dtype=np.float64)
            g64 = g.astype(np.float64)
            for j in range(k):
                gw[:, j] = (g64 * xp[:, j : j + T, :]).sum(axis=(0, 1))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1), dtype=np.float64) if needs[2] else None)
        return tuple(grads)

    return _record(out, parents, bwd)


def _first_mismatch(a, b):
    if len(a) != len(b):
        return min(len(a), len(b))
    for ax, (p, q) in enumerate(zip(a, b)):
        if p != q:
            return ax
    return -1
