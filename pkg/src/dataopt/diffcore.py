"""Reverse-mode differentiation over dense float64 tensors.

Every operation records a node on the active :class:`Graph`.  Backward
sweeps build their vector-Jacobian products out of the same recorded
operations, so gradients are themselves differentiable: Hessian-vector
products and mixed second derivatives come from composing ``backward``
with itself.  Graphs are rebuilt per step; there is no persistent tape.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Graph", "DiffError", "new_graph", "active_graph",
    "as_tensor", "constant",
    "backward", "hvp", "mixed_grad",
    "add", "sub", "mul", "div", "neg", "pow_const",
    "log", "exp", "sqrt", "sin", "cos",
    "relu", "sigmoid", "softplus", "clamp", "softmax",
    "matmul", "transpose", "reshape", "narrow", "embed", "broadcast_to",
    "tsum", "tmean",
    "gather_rows", "scatter_rows", "take_hw", "put_hw",
    "unfold3x3", "fold3x3", "conv2d_3x3", "avg_pool2d", "grid_sample",
]


class DiffError(Exception):
    """Raised for malformed differentiation requests (shape/graph errors)."""


class Graph:
    """Recording graph: operation nodes stamped in creation order.

    Creation order is a valid topological order (an op's inputs always
    exist before its output), so a backward sweep is a reverse sweep
    over order stamps.
    """

    def __init__(self):
        self.nodes = []
        self.counter = 0

    def add(self, node):
        node.order = self.counter
        self.counter += 1
        self.nodes.append(node)


_active = Graph()


def active_graph() -> Graph:
    return _active


def new_graph() -> Graph:
    """Swap in a fresh recording graph (dropping the old one) and return it."""
    global _active
    _active = Graph()
    return _active


class Node:
    __slots__ = ("op", "inputs", "vjps", "out", "order")

    def __init__(self, op, inputs, vjps, out):
        self.op = op
        self.inputs = inputs
        self.vjps = vjps
        self.out = out
        self.order = -1


class Tensor:
    """Dense float64 array, optionally attached to the recording graph."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor outside the differentiation graph."""
    return Tensor(x)


def _record(op, out, inputs, vjps):
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), tuple(vjps), out)
        _active.add(out.node)
    return out


def _sum_to(g: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (recorded ops)."""
    while g.data.ndim > len(shape):
        g = tsum(g, axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.data.shape[ax] != 1:
            g = tsum(g, axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives (numpy broadcasting; vjps reduce back to input shape)

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b),
                   (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b),
                   (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(neg(g), b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b),
                   (lambda g: _sum_to(mul(g, b), a.shape),
                    lambda g: _sum_to(mul(g, a), b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record("div", out, (a, b),
                   (lambda g: _sum_to(div(g, b), a.shape),
                    lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record("neg", out, (a,), (lambda g: neg(g),))


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** p)
    return _record("pow", out, (a,),
                   (lambda g: mul(g, mul(constant(p), pow_const(a, p - 1.0))),))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record("log", out, (a,), (lambda g: div(g, a),))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record("exp", out, (a,), (lambda g: mul(g, out),))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _record("sqrt", out, (a,),
                   (lambda g: div(g, mul(constant(2.0), out)),))


def sin(a):
    a = as_tensor(a)
    out = Tensor(np.sin(a.data))
    return _record("sin", out, (a,), (lambda g: mul(g, cos(a)),))


def cos(a):
    a = as_tensor(a)
    out = Tensor(np.cos(a.data))
    return _record("cos", out, (a,), (lambda g: neg(mul(g, sin(a))),))


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    out = Tensor(a.data * mask)
    return _record("relu", out, (a,), (lambda g: mul(g, constant(mask)),))


def sigmoid(a):
    a = as_tensor(a)
    # stable in both tails
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(out_data)
    return _record("sigmoid", out, (a,),
                   (lambda g: mul(g, mul(out, sub(constant(1.0), out))),))


def softplus(a):
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    return _record("softplus", out, (a,), (lambda g: mul(g, sigmoid(a)),))


def clamp(a, lo, hi):
    """Clamp to [lo, hi]; lo/hi are constants broadcastable against ``a``."""
    a = as_tensor(a)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    out = Tensor(np.clip(a.data, lo, hi))
    return _record("clamp", out, (a,), (lambda g: mul(g, constant(mask)),))


# ---------------------------------------------------------------------------
# shape / linear-algebra primitives

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DiffError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record("matmul", out, (a, b),
                   (lambda g: matmul(g, transpose(b, (1, 0))),
                    lambda g: matmul(transpose(a, (1, 0)), g)))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record("transpose", out, (a,), (lambda g: transpose(g, inv),))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    orig = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), (lambda g: reshape(g, orig),))


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor(a.data[tuple(idx)])
    total = a.shape[axis]
    return _record("narrow", out, (a,),
                   (lambda g: embed(g, axis, start, total),))


def embed(a, axis, start, total):
    """Adjoint of narrow: place ``a`` into a zero tensor of size ``total`` along ``axis``."""
    a = as_tensor(a)
    shape = list(a.shape)
    length = shape[axis]
    shape[axis] = total
    data = np.zeros(shape)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    data[tuple(idx)] = a.data
    out = Tensor(data)
    return _record("embed", out, (a,),
                   (lambda g: narrow(g, axis, start, length),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    orig = a.shape
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _record("broadcast_to", out, (a,), (lambda g: _sum_to(g, orig),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    orig = a.shape

    def vjp(g):
        if axis is None:
            gk = reshape(g, (1,) * len(orig)) if orig else g
        elif not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            kshape = list(orig)
            for ax in axes:
                kshape[ax] = 1
            gk = reshape(g, kshape)
        else:
            gk = g
        return broadcast_to(gk, orig)

    return _record("sum", out, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / count))


def softmax(a, axis=-1):
    """Numerically stable softmax (shift by detached max)."""
    a = as_tensor(a)
    shift = constant(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# gather/scatter primitives (constant indices; exact linear adjoint pairs)

def gather_rows(a, idx):
    """Select rows ``a[idx]`` along axis 0; idx is a constant int array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    out = Tensor(a.data[idx])
    return _record("gather_rows", out, (a,),
                   (lambda g: scatter_rows(g, idx, n),))


def scatter_rows(a, idx, n):
    """Adjoint of gather_rows: accumulate rows of ``a`` at ``idx`` into n rows."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n,) + a.shape[1:])
    np.add.at(data, idx, a.data)
    out = Tensor(data)
    return _record("scatter_rows", out, (a,),
                   (lambda g: gather_rows(g, idx),))


def take_hw(img, yi, xi):
    """Spatial gather: out[b,c,r,s] = img[b,c,yi[b,r,s],xi[b,r,s]] (constant indices)."""
    img = as_tensor(img)
    b, c, h, w = img.shape
    flat_idx = (yi * w + xi).reshape(b, 1, -1)
    flat = img.data.reshape(b, c, h * w)
    picked = np.take_along_axis(flat, np.broadcast_to(flat_idx, (b, c, flat_idx.shape[-1])), axis=2)
    out = Tensor(picked.reshape(b, c, *yi.shape[1:]))
    return _record("take_hw", out, (img,),
                   (lambda g: put_hw(g, yi, xi, h, w),))


def put_hw(vals, yi, xi, h, w):
    """Adjoint of take_hw: scatter-add values back onto an h-by-w canvas."""
    vals = as_tensor(vals)
    b, c = vals.shape[0], vals.shape[1]
    flat_idx = (yi * w + xi).reshape(b, 1, -1)
    data = np.zeros((b, c, h * w))
    bi = np.arange(b)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(data, (bi, ci, flat_idx), vals.data.reshape(b, c, -1))
    out = Tensor(data.reshape(b, c, h, w))
    return _record("put_hw", out, (vals,),
                   (lambda g: take_hw(g, yi, xi),))


def unfold3x3(x):
    """im2col for 3x3/stride-1/zero-pad-1 windows: [B,C,H,W] -> [B, C*9, H*W]."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = Tensor(_unfold3x3_data(x.data))
    return _record("unfold3x3", out, (x,),
                   (lambda g: fold3x3(g, c, h, w),))


def fold3x3(cols, c, h, w):
    """Adjoint of unfold3x3: scatter-add column windows back onto the image."""
    cols = as_tensor(cols)
    out = Tensor(_fold3x3_data(cols.data, c, h, w))
    return _record("fold3x3", out, (cols,),
                   (lambda g: unfold3x3(g),))


def _unfold3x3_data(xd):
    b, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w))
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(b, c * 9, h * w)


def _fold3x3_data(cd, c, h, w):
    b = cd.shape[0]
    cols = cd.reshape(b, c, 9, h, w)
    xp = np.zeros((b, c, h + 2, w + 2))
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, k]
            k += 1
    return xp[:, :, 1:h + 1, 1:w + 1]


# ---------------------------------------------------------------------------
# composites

def conv2d_3x3(x, weight, bias=None):
    """2-D convolution, 3x3 kernel, stride 1, zero padding 1 (shape-preserving).

    x: [B,Cin,H,W], weight: [Cout,Cin,3,3], bias: [Cout] or None.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    cols = unfold3x3(x)                                   # [B, Cin*9, H*W]
    cols2 = reshape(transpose(cols, (1, 0, 2)), (cin * 9, b * h * w))
    wmat = reshape(weight, (cout, cin * 9))
    out = matmul(wmat, cols2)                             # [Cout, B*H*W]
    out = transpose(reshape(out, (cout, b, h * w)), (1, 0, 2))
    out = reshape(out, (b, cout, h, w))
    if bias is not None:
        out = add(out, reshape(as_tensor(bias), (1, cout, 1, 1)))
    return out


def avg_pool2d(x):
    """2x2 average pooling, stride 2; spatial dims must be even."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DiffError(f"avg_pool2d needs even spatial dims, got {h}x{w}")
    r = reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return tmean(r, axis=(3, 5))


def grid_sample(img, gx, gy):
    """Bilinear sampling with zero padding, differentiable in image and grid.

    Grid coordinates are normalized to [-1, 1] over the pixel centers
    (align-corners convention).  img: [B,C,H,W]; gx, gy: [B,Ho,Wo].
    """
    img = as_tensor(img)
    gx, gy = as_tensor(gx), as_tensor(gy)
    b, c, h, w = img.shape
    px = mul(add(gx, constant(1.0)), constant((w - 1) / 2.0))
    py = mul(add(gy, constant(1.0)), constant((h - 1) / 2.0))
    x0 = np.floor(px.data)
    y0 = np.floor(py.data)
    fx = sub(px, constant(x0))
    fy = sub(py, constant(y0))
    one = constant(1.0)
    out = None
    for dy in (0, 1):
        wy = fy if dy else sub(one, fy)
        yi = (y0 + dy).astype(np.int64)
        for dx in (0, 1):
            wx = fx if dx else sub(one, fx)
            xi = (x0 + dx).astype(np.int64)
            valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(np.float64)
            pix = take_hw(img, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1))
            wgt = mul(mul(wy, wx), constant(valid))
            term = mul(pix, reshape(wgt, (b, 1) + wgt.shape[1:]))
            out = term if out is None else add(out, term)
    return out


# ---------------------------------------------------------------------------
# differentiation entry points

def backward(loss, wrt, strict=False):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    The returned gradients are recorded tensors, so they can be
    differentiated again (create-graph semantics).  With ``strict`` a
    wrt tensor that the loss does not reach raises; otherwise it gets a
    zero gradient.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise DiffError(f"backward needs a scalar loss, got shape {loss.shape}")

    # reachable sub-graph, leaves included
    nodes = []
    leaves = set()
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes.append(t.node)
            stack.extend(t.node.inputs)
        else:
            leaves.add(id(t))

    if strict:
        for t in wrt:
            if id(t) not in seen:
                raise DiffError("tensor not reachable from loss on the recorded graph")

    grads = {id(loss): _ones_like(loss)}
    for node in sorted(nodes, key=lambda n: n.order, reverse=True):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, vjp in zip(node.inputs, node.vjps):
            if not inp.requires_grad:
                continue
            contrib = vjp(g)
            prev = grads.get(id(inp))
            grads[id(inp)] = contrib if prev is None else add(prev, contrib)

    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(g if g is not None else constant(np.zeros(t.shape)))
    return out


def _ones_like(t):
    return constant(np.ones(t.shape))


def hvp(loss, params, v):
    """Hessian-vector product H v without materializing H.

    Computed as the gradient of (grad . v) with v held constant.
    """
    v = as_tensor(v)
    params = as_tensor(params)
    if v.shape != params.shape:
        raise DiffError(f"hvp vector shape {v.shape} != params shape {params.shape}")
    g, = backward(loss, [params], strict=True)
    gv = tsum(mul(g, constant(v.data)))
    h, = backward(gv, [params], strict=True)
    return h


def mixed_grad(loss, params, hypers, v, strict=True):
    """(d^2 loss / d hypers d params^T) . v: gradient wrt hypers of (grad_params . v)."""
    v = as_tensor(v)
    params = as_tensor(params)
    if v.shape != params.shape:
        raise DiffError(f"mixed_grad vector shape {v.shape} != params shape {params.shape}")
    g, = backward(loss, [params], strict=True)
    gv = tsum(mul(g, constant(v.data)))
    m, = backward(gv, [hypers], strict=strict)
    return m
