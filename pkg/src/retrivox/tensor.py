"""Minimal dense reverse-mode autodiff engine over numpy arrays.

A Tensor wraps an ndarray; every op records a backward closure on the output
node while gradients are enabled, forming a dynamic tape.  backward() runs a
reverse topological sweep, accumulates gradients into leaves that require
them, and clears the tape.  Training runs in float32; gradient checks build
the same graphs in float64.

No implicit broadcasting beyond bias-add: elementwise ops take equal shapes
or a python scalar, anything else goes through reshape/transpose/broadcast_to
explicitly.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

CHECKPOINT_MAGIC = b"RFC1"

_grad_enabled = True
_live_tape_nodes = 0


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / data prep)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def live_tape_nodes() -> int:
    """Number of graph nodes whose backward closure has not been consumed."""
    return _live_tape_nodes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars only, tensor-tensor shapes must match exactly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, arming the tape closure when gradients are on."""
    global _live_tape_nodes
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _live_tape_nodes += 1
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss; clears the tape afterwards."""
    global _live_tape_nodes
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    # iterative postorder topo sort
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # release the tape; keep leaf gradients
    for node in topo:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            _live_tape_nodes -= 1
            node.grad = None  # interior grads are not reused


def clear_graph(root: Tensor):
    """Drop the tape below an output that will never be backpropagated."""
    global _live_tape_nodes
    stack = [root]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node._parents)
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            _live_tape_nodes -= 1


def constant(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(use broadcast_to/reshape explicitly)")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bval = float(b)
        out = _node(a.data + bval, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: _accum(a, g)
        return out
    _check_same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), None)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)
    if out.requires_grad:
        out._backward = bwd
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")
    out = _node(a.data - b.data, (a, b), None)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    if out.requires_grad:
        out._backward = bwd
    return out


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bval = float(b)
        out = _node(a.data * bval, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: _accum(a, g * bval)
        return out
    _check_same_shape(a, b, "mul")
    out = _node(a.data * b.data, (a, b), None)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    if out.requires_grad:
        out._backward = bwd
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _node(a.data.reshape(shape), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.transpose(inv))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; gradient sums over the expanded axes."""
    shape = tuple(shape)
    np.broadcast_to(a.data, shape)  # raises on incompatibility
    lead = len(shape) - a.data.ndim
    sum_axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(a.data.shape) if d == 1 and shape[lead + i] != 1)
    out = _node(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), None)

    def bwd(g):
        gg = g.sum(axis=sum_axes, keepdims=True) if sum_axes else g
        _accum(a, gg.reshape(a.shape))
    if out.requires_grad:
        out._backward = bwd
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; gradient scatter-adds back (duplicates ok)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _node(a.data[idx], (a,), None)

    def bwd(g):
        gg = np.zeros_like(a.data)
        np.add.at(gg, idx, g)
        _accum(a, gg)
    if out.requires_grad:
        out._backward = bwd
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out = _node(data, tuple(tensors), None)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])
    if out.requires_grad:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions and nonlinearities
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = _node(a.data.sum(axis=axis), (a,), None)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))
    if out.requires_grad:
        out._backward = bwd
    return out


def mean(a: Tensor) -> Tensor:
    inv = 1.0 / a.size
    out = _node(np.asarray(a.data.mean()), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, np.broadcast_to(g * inv, a.shape).astype(a.dtype, copy=False))
    return out


def abs_sum(a: Tensor) -> Tensor:
    """l1 norm of all entries; subgradient sign(x) at 0 is 0."""
    out = _node(np.asarray(np.abs(a.data).sum()), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * np.sign(a.data))
    return out


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along an axis; ties route the gradient to the first maximum."""
    data = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)
    out = _node(data, (a,), None)

    def bwd(g):
        gg = np.zeros_like(a.data)
        np.put_along_axis(gg, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        _accum(a, gg)
    if out.requires_grad:
        out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * mask)
    return out


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    mask = a.data > 0
    out = _node(np.where(mask, a.data, alpha * a.data), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * np.where(mask, 1.0, alpha).astype(a.dtype))
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = _node(y, (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def log(a: Tensor) -> Tensor:
    out = _node(np.log(a.data), (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g / a.data)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _node(y, (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * y)
    return out


def softmax(a: Tensor, axis: int, scale: float = 1.0) -> Tensor:
    """softmax(scale * x) along axis, numerically stabilized."""
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = scale * a.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,), None)

    def bwd(g):
        dot_ = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, scale * y * (g - dot_))
    if out.requires_grad:
        out._backward = bwd
    return out


def l2_normalize(a: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    y = a.data / n
    out = _node(y, (a,), None)

    def bwd(g):
        dot_ = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, (g - y * dot_) / n)
    if out.requires_grad:
        out._backward = bwd
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    out = _node(np.asarray(a.data @ b.data), (a, b), None)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    if out.requires_grad:
        out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = _node(a.data @ b.data, (a, b), None)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    if out.requires_grad:
        out._backward = bwd
    return out


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, Fin) @ w (Fin, Fout) + b (Fout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}")
    data = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _node(data, parents, None)

    def bwd(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))
    if out.requires_grad:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# 3-D convolution ops; activations are (N, C, X, Y, Z)
# ---------------------------------------------------------------------------

def _conv_out_dim(d: int, k: int, stride: int, pad: int) -> int:
    return (d + 2 * pad - k) // stride + 1


def conv3(x: Tensor, w: Tensor, b: Tensor | None = None,
          stride: int = 1, pad: int = 0) -> Tensor:
    """3-D convolution; w is (Cout, Cin, K, K, K)."""
    if x.data.ndim != 5:
        raise ValueError(f"conv3 expects (N, C, X, Y, Z), got {x.shape}")
    n, cin, *spatial = x.shape
    cout, cin_w, k, k2, k3 = w.shape
    if cin != cin_w or k != k2 or k != k3:
        raise ValueError(f"conv3 weight {w.shape} incompatible with input {x.shape}")
    od = [_conv_out_dim(d, k, stride, pad) for d in spatial]
    if min(od) < 1:
        raise ValueError(f"conv3 output would be empty: in {spatial}, k={k}, stride={stride}, pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else x.data
    p_flat = od[0] * od[1] * od[2]

    def _slice(a, bb, c):
        xs = xp[:, :, a:a + stride * od[0]:stride,
                bb:bb + stride * od[1]:stride,
                c:c + stride * od[2]:stride]
        return np.ascontiguousarray(xs).reshape(n, cin, p_flat)

    out_flat = np.zeros((n, cout, p_flat), dtype=x.dtype)
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                out_flat += np.matmul(w.data[:, :, a, bb, c], _slice(a, bb, c))
    data = out_flat.reshape(n, cout, *od)
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"conv3 bias shape {b.shape} != ({cout},)")
        data = data + b.data.reshape(1, cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = _node(data, parents, None)

    def bwd(g):
        gf = np.ascontiguousarray(g).reshape(n, cout, p_flat)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    if gw is not None:
                        gw[:, :, a, bb, c] = np.tensordot(gf, _slice(a, bb, c),
                                                          axes=([0, 2], [0, 2]))
                    if gxp is not None:
                        gx_block = np.matmul(w.data[:, :, a, bb, c].T, gf).reshape(n, cin, *od)
                        gxp[:, :, a:a + stride * od[0]:stride,
                            bb:bb + stride * od[1]:stride,
                            c:c + stride * od[2]:stride] += gx_block
        if gxp is not None:
            gx = gxp[:, :, pad:pad + spatial[0], pad:pad + spatial[1], pad:pad + spatial[2]] \
                if pad else gxp
            _accum(x, gx)
        if gw is not None:
            _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))
    if out.requires_grad:
        out._backward = bwd
    return out


def transposed_conv3(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """3-D transposed convolution; w is (Cin, Cout, K, K, K).

    Output spatial dim = (in - 1) * stride + K - 2 * pad.
    """
    if x.data.ndim != 5:
        raise ValueError(f"transposed_conv3 expects (N, C, X, Y, Z), got {x.shape}")
    n, cin, *spatial = x.shape
    cin_w, cout, k, k2, k3 = w.shape
    if cin != cin_w or k != k2 or k != k3:
        raise ValueError(f"transposed_conv3 weight {w.shape} incompatible with input {x.shape}")
    full = [(d - 1) * stride + k for d in spatial]
    od = [f - 2 * pad for f in full]
    if min(od) < 1:
        raise ValueError("transposed_conv3 output would be empty")
    xf = x.data.reshape(n, cin, -1)
    out_full = np.zeros((n, cout, *full), dtype=x.dtype)
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                contrib = np.matmul(w.data[:, :, a, bb, c].T, xf).reshape(n, cout, *spatial)
                out_full[:, :, a:a + stride * spatial[0]:stride,
                         bb:bb + stride * spatial[1]:stride,
                         c:c + stride * spatial[2]:stride] += contrib
    data = out_full[:, :, pad:pad + od[0], pad:pad + od[1], pad:pad + od[2]] if pad else out_full
    data = np.ascontiguousarray(data)
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"transposed_conv3 bias shape {b.shape} != ({cout},)")
        data = data + b.data.reshape(1, cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = _node(data, parents, None)

    def bwd(g):
        gfull = np.zeros((n, cout, *full), dtype=g.dtype)
        gfull[:, :, pad:pad + od[0], pad:pad + od[1], pad:pad + od[2]] = g
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        xs_flat = xf
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    gslice = gfull[:, :, a:a + stride * spatial[0]:stride,
                                   bb:bb + stride * spatial[1]:stride,
                                   c:c + stride * spatial[2]:stride]
                    gslice = np.ascontiguousarray(gslice).reshape(n, cout, -1)
                    if gx is not None:
                        gx += np.matmul(w.data[:, :, a, bb, c], gslice).reshape(x.shape)
                    if gw is not None:
                        gw[:, :, a, bb, c] = np.tensordot(xs_flat, gslice,
                                                          axes=([0, 2], [0, 2]))
        if gx is not None:
            _accum(x, gx)
        if gw is not None:
            _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))
    if out.requires_grad:
        out._backward = bwd
    return out


def nearest_upsample3(x: Tensor, factor: int) -> Tensor:
    """Repeat each voxel factor times along every spatial axis."""
    if x.data.ndim != 5:
        raise ValueError(f"nearest_upsample3 expects (N, C, X, Y, Z), got {x.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3).repeat(factor, axis=4)
    out = _node(data, (x,), None)
    n, c, dx, dy, dz = x.shape

    def bwd(g):
        gg = g.reshape(n, c, dx, factor, dy, factor, dz, factor).sum(axis=(3, 5, 7))
        _accum(x, gg)
    if out.requires_grad:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable parameters plus Adam moments and the step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def create(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter; consumes grads."""
    missing = [n for n, t in store.params.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: missing gradients for {missing}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * (g * g)
        mhat = store.m[name] / bc1
        vhat = store.v[name] / bc2
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
        p.grad = None


def save_checkpoint(store: ParamStore, path):
    """RFC1 checkpoint: parameters with Adam moments and the step counter."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<QI", store.step, len(store.params)))
        for name, p in store.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            for arr in (p.data, store.m[name], store.v[name]):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(store: ParamStore, path):
    """Overwrite an existing store's arrays by name; shapes must match."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an RFC1 checkpoint")
        step, count = struct.unpack("<QI", f.read(12))
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            numel = int(np.prod(shape)) if ndim else 1
            blobs = [np.frombuffer(f.read(4 * numel), dtype="<f4").reshape(shape).copy()
                     for _ in range(3)]
            if name not in store.params:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            if store.params[name].data.shape != tuple(shape):
                raise ValueError(f"{path}: shape mismatch for {name!r}: "
                                 f"{tuple(shape)} vs {store.params[name].data.shape}")
            dt = store.params[name].data.dtype
            store.params[name].data = blobs[0].astype(dt)
            store.m[name] = blobs[1].astype(dt)
            store.v[name] = blobs[2].astype(dt)
            seen.add(name)
    missing = set(store.params) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    store.step = step


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def gradcheck(fn, inputs: list[np.ndarray], h: float = 1e-4,
              max_coords: int = 64, seed: int = 0) -> float:
    """Compare analytic gradients of scalar fn(*tensors) to central differences.

    Inputs are promoted to float64.  Returns the worst relative error
    |analytic - numeric| / max(1, |numeric|) over the checked coordinates;
    tensors larger than max_coords are subsampled deterministically.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    loss = fn(*ts)
    backward(loss)
    grads = [np.zeros_like(x) if t.grad is None else t.grad.copy()
             for x, t in zip(xs, ts)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                fp = fn(*[Tensor(v) for v in xs]).item()
            flat[c] = orig - h
            with no_grad():
                fm = fn(*[Tensor(v) for v in xs]).item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            analytic = grads[i].reshape(-1)[c]
            err = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
