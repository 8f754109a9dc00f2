"""Small reverse-mode autodiff over float64 numpy arrays.

Every primitive that touches a tensor with ``requires_grad`` records a node
carrying its parents and a vector-Jacobian closure. Nodes get a global
sequence number at creation, so the recorded tape is ordered by construction;
:func:`backward` replays it in exactly reverse order and then releases it.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameter, ShapeError, TapeConsumed

_seq = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run primitives without recording a tape (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def record_patterns():
    """Collect ReLU masks and max-pool selections made while active.

    Within one activation pattern every model here is smooth, which is what
    a finite-difference oracle needs to be valid.
    """
    prev = getattr(_state, "patterns", None)
    _state.patterns = patterns = []
    try:
        yield patterns
    finally:
        _state.patterns = prev


def _note_pattern(arr):
    patterns = getattr(_state, "patterns", None)
    if patterns is not None:
        patterns.append(arr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq", "_consumed", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._seq = next(_seq)
        self._consumed = False
        self._op = "leaf"

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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out._consumed = False
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


class Tape:
    """The recorded primitive applications reachable from ``root``, in recording order."""

    def __init__(self, root):
        nodes = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            if t._consumed:
                raise TapeConsumed("tape already consumed by a previous backward pass")
            nodes[id(t)] = t
            stack.extend(t._parents)
        self.nodes = sorted(nodes.values(), key=lambda t: t._seq)
        self.root = root

    def __len__(self):
        return sum(1 for t in self.nodes if not t.is_leaf)

    def ops(self):
        return [t._op for t in self.nodes if not t.is_leaf]


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise InvalidParameter(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumed("backward already run on this loss; rebuild the graph")
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._consumed = True
            node._vjp = None
    loss._consumed = True


# -- dense ops ------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def _bias_view(b, ndim):
    return b.reshape((1, -1) + (1,) * (ndim - 2))


def add_bias(x, b):
    """Add a per-feature (axis 1) bias vector."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim < 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis 1 of {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    return _record("add_bias", x.data + _bias_view(b.data, x.ndim), (x, b),
                   lambda g: (g, g.sum(axis=axes)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    _note_pattern(mask)
    # np.maximum propagates NaN, so a diverged pre-activation is not silently zeroed.
    return _record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    # exp(-|x|) keeps both branches overflow-free.
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


# -- convolution ----------------------------------------------------------------

def conv1d(x, w, b=None, pad=1):
    """Stride-1 cross-correlation. x: (N, Cin, L), w: (Cout, Cin, K)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    n, cin, length = x.shape
    cout, _, k = w.shape
    lout = length + 2 * pad - k + 1
    if lout < 1:
        raise ShapeError(f"conv1d: kernel {k} too long for input {x.shape} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, k, axis=2)  # (N, Cin, Lout, K)
    cols = cols.transpose(0, 2, 1, 3).reshape(n * lout, cin * k)
    wmat = w.data.reshape(cout, cin * k)
    out = (cols @ wmat.T).reshape(n, lout, cout).transpose(0, 2, 1)

    def vjp(g):
        g2 = g.transpose(0, 2, 1).reshape(n * lout, cout)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, lout, cin, k)
        dxp = np.zeros(xp.shape)
        for j in range(k):
            dxp[:, :, j:j + lout] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, pad:pad + length] if pad else dxp
        return dx, dw

    y = _record("conv1d", np.ascontiguousarray(out), (x, w), vjp)
    return y if b is None else add_bias(y, b)


def conv2d(x, w, b=None, pad=1):
    """Stride-1 2D cross-correlation. x: (N, Cin, H, W), w: (Cout, Cin, KH, KW)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    hout, wout = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} too large for input {x.shape} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, Cin, Hout, Wout, KH, KW)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * hout * wout, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, hout, wout, cout).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * hout * wout, cout)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, hout, wout, cin, kh, kw)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + hout, j:j + wout] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, dw

    y = _record("conv2d", np.ascontiguousarray(out), (x, w), vjp)
    return y if b is None else add_bias(y, b)


# -- pooling / resampling -------------------------------------------------------

def maxpool1d(x):
    """Non-overlapping max-pool of width 2; ties route the gradient to the first element."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] % 2:
        raise ShapeError(f"maxpool1d: need (N, C, even L), got {x.shape}")
    n, c, length = x.shape
    pairs = x.data.reshape(n, c, length // 2, 2)
    arg = pairs.argmax(axis=3)
    _note_pattern(arg)
    out = np.take_along_axis(pairs, arg[..., None], axis=3)[..., 0]

    def vjp(g):
        dx = np.zeros(pairs.shape)
        np.put_along_axis(dx, arg[..., None], g[..., None], axis=3)
        return (dx.reshape(x.shape),)

    return _record("maxpool1d", out, (x,), vjp)


def maxpool2d(x):
    """2x2 non-overlapping max-pool; ties go to the first element in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d: need (N, C, even H, even W), got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=4)
    _note_pattern(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=4)[..., 0]

    def vjp(g):
        db = np.zeros(blocks.shape)
        np.put_along_axis(db, arg[..., None], g[..., None], axis=4)
        dx = db.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (dx,)

    return _record("maxpool2d", out, (x,), vjp)


def upsample_nearest1d(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest1d: need (N, C, L), got {x.shape}")
    n, c, length = x.shape
    return _record("upsample_nearest1d", np.repeat(x.data, 2, axis=2), (x,),
                   lambda g: (g.reshape(n, c, length, 2).sum(axis=3),))


def upsample_nearest2d(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2d: need (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _record("upsample_nearest2d", out, (x,),
                   lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def global_avg_pool(x):
    """(N, C, *spatial) -> (N, C) channel means."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool: need (N, C, *spatial), got {x.shape}")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    shape = x.shape
    return _record("global_avg_pool", x.data.mean(axis=axes), (x,),
                   lambda g: (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / count, shape).copy(),))


def channel_scale(x, s):
    """Multiply each channel of x (N, C, *spatial) by the gain s (N, C)."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim < 3 or s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: gains {s.shape} do not match features {x.shape}")
    extra = (1,) * (x.ndim - 2)
    axes = tuple(range(2, x.ndim))
    sv = s.data.reshape(s.shape + extra)
    X = x.data
    return _record("channel_scale", X * sv, (x, s),
                   lambda g: (g * sv, (g * X).sum(axis=axes)))


def concat(tensors, axis=1):
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def mse_loss(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _record("mse_loss", np.array(np.mean(diff * diff)), (pred, target),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))
