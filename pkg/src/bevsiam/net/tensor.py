"""Reverse-mode autograd over numpy arrays.

Just enough machinery for the two Siamese networks: elementwise arithmetic
with broadcasting, matmul, valid/padded conv2d, max pooling, depthwise
cross-correlation, segment max pooling, and gathers. Gradients accumulate
through a topologically ordered sweep of closure-recorded backward steps.

Compute dtype follows the inputs; build parameters as float64 for gradient
checking, float32 for everything else. Forward-only callers should wrap
work in ``with no_grad():`` so no graph is recorded and the conv lowering
can recycle its scratch buffers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _tune_allocator() -> None:
    # the forward/backward passes churn through multi-megabyte temporaries;
    # keeping them on the heap instead of per-allocation mmap/munmap avoids
    # constant page-zeroing (roughly 4x on the conv/MLP chains)
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


@contextmanager
def no_grad():
    """Disable graph recording on this thread.

    Besides skipping closures, forward-only convolutions store their column
    matrices and outputs in thread-local scratch that is recycled by the
    next same-shaped call, so hold no references to raw conv outputs across
    calls; copy what must outlive the expression.
    """
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def grad_enabled() -> bool:
    return _grad_mode.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return _add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _add(-self, _as_tensor(other, self.dtype))

    def __neg__(self):
        out, rec = _result(-self.data, (self,))
        if rec:

            def backward():
                _acc(self, -out.grad)

            out._backward = backward
        return out

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        return _mul(self, other.pow(-1.0))

    def __matmul__(self, other):
        out, rec = _result(self.data @ other.data, (self, other))
        if rec:

            def backward():
                _acc(self, out.grad @ other.data.T)
                _acc(other, self.data.T @ out.grad)

            out._backward = backward
        return out

    def pow(self, exponent: float):
        out, rec = _result(self.data**exponent, (self,))
        if rec:

            def backward():
                _acc(self, out.grad * exponent * self.data ** (exponent - 1.0))

            out._backward = backward
        return out

    def sqrt(self):
        out, rec = _result(np.sqrt(self.data), (self,))
        if rec:

            def backward():
                _acc(self, out.grad * 0.5 / out.data)

            out._backward = backward
        return out

    def exp(self):
        out, rec = _result(np.exp(self.data), (self,))
        if rec:

            def backward():
                _acc(self, out.grad * out.data)

            out._backward = backward
        return out

    def log(self):
        out, rec = _result(np.log(self.data), (self,))
        if rec:

            def backward():
                _acc(self, out.grad / self.data)

            out._backward = backward
        return out

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes through only inside the range."""
        out, rec = _result(np.clip(self.data, lo, hi), (self,))
        if rec:

            def backward():
                mask = (self.data >= lo) & (self.data <= hi)
                _acc(self, out.grad * mask)

            out._backward = backward
        return out

    def relu(self):
        out, rec = _result(np.maximum(self.data, 0), (self,))
        if rec:

            def backward():
                _acc(self, out.grad * (self.data > 0))

            out._backward = backward
        return out

    def sigmoid(self):
        out, rec = _result(1.0 / (1.0 + np.exp(-self.data)), (self,))
        if rec:

            def backward():
                _acc(self, out.grad * out.data * (1.0 - out.data))

            out._backward = backward
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out, rec = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if rec:

            def backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _acc(self, np.broadcast_to(g, self.data.shape))

            out._backward = backward
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        out, rec = _result(self.data.reshape(*shape), (self,))
        if rec:

            def backward():
                _acc(self, out.grad.reshape(self.data.shape))

            out._backward = backward
        return out


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data, prev) -> tuple[Tensor, bool]:
    """Wrap op output; record graph edges only when a grad could flow."""
    record = _grad_mode.enabled and any(p.requires_grad for p in prev)
    out = Tensor(data, record)
    if record:
        out._prev = prev
    return out, record


def _acc(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    # assignment, never +=: the first gradient may alias another node's buffer
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    out, rec = _result(a.data + b.data, (a, b))
    if rec:

        def backward():
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(out.grad, b.data.shape))

        out._backward = backward
    return out


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out, rec = _result(a.data * b.data, (a, b))
    if rec:

        def backward():
            _acc(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _acc(b, _unbroadcast(out.grad * a.data, b.data.shape))

        out._backward = backward
    return out


# -- indexed access ----------------------------------------------------------


def take_flat(t: Tensor, indices) -> Tensor:
    """Gather scalar entries of the flattened tensor."""
    idx = np.asarray(indices)
    out, rec = _result(t.data.reshape(-1)[idx], (t,))
    if rec:

        def backward():
            g = np.zeros(t.data.size, dtype=t.data.dtype)
            np.add.at(g, idx, out.grad)
            _acc(t, g.reshape(t.data.shape))

        out._backward = backward
    return out


def take_rows(t: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor."""
    idx = np.asarray(indices)
    out, rec = _result(t.data[idx], (t,))
    if rec:

        def backward():
            g = np.zeros_like(t.data)
            np.add.at(g, idx, out.grad)
            _acc(t, g)

        out._backward = backward
    return out


# -- convolution stack -------------------------------------------------------


class _Scratch(threading.local):
    def __init__(self):
        self.buffers = {}


_scratch = _Scratch()


def _scratch_array(key: str, shape, dtype) -> np.ndarray:
    full_key = (key, tuple(shape), np.dtype(dtype).str)
    buf = _scratch.buffers.get(full_key)
    if buf is None:
        buf = np.empty(shape, dtype=dtype)
        _scratch.buffers[full_key] = buf
    return buf


def _gather(src: np.ndarray, reuse_key=None) -> np.ndarray:
    """Materialize a strided view.

    When ``reuse_key`` is given (forward-only mode), the destination comes
    from a thread-local scratch pool to avoid large-allocation churn.
    """
    if reuse_key is not None:
        key = (reuse_key, src.shape, src.dtype.str)
        dst = _scratch.buffers.get(key)
        if dst is None:
            dst = np.empty(src.shape, dtype=src.dtype)
            _scratch.buffers[key] = dst
    else:
        dst = np.empty(src.shape, dtype=src.dtype)
    np.copyto(dst, src)
    return dst


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, reuse_key=None):
    """Column matrix of shape (C*kh*kw, oh*ow), kernel-position major.

    Row order matches the flattening of an (F, C, kh, kw) weight. At stride
    1 the gather layout keeps output columns innermost, which the copy
    machinery turns into long contiguous runs.
    """
    c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    if stride == 1:
        cols = _gather(win.transpose(0, 3, 4, 1, 2), reuse_key).reshape(c * kh * kw, oh * ow)
    else:
        cols = _gather(win.transpose(1, 2, 0, 3, 4), reuse_key).reshape(oh * ow, c * kh * kw).T
    return cols, oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (C, H, W) input with (F, C, kh, kw) kernels."""
    f, c, kh, kw = weight.data.shape
    if x.data.ndim != 3 or x.data.shape[0] != c:
        raise ValueError(
            f"conv2d expects input (C={c}, H, W), got shape {x.data.shape}"
        )
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError(f"input {x.data.shape} smaller than kernel {kh}x{kw}")
    prev = (x, weight) if bias is None else (x, weight, bias)
    record = _grad_mode.enabled and any(p.requires_grad for p in prev)
    # backward captures cols, so scratch buffers are only safe to reuse when
    # no graph is being recorded; forward-only conv outputs likewise live in
    # scratch and are valid until the next same-shaped call on this thread
    cols, oh, ow = _im2col(xp, kh, kw, stride, reuse_key=None if record else "conv2d")
    wmat = weight.data.reshape(f, -1)
    if record:
        out_data = (wmat @ cols).reshape(f, oh, ow)
    else:
        out_flat = _scratch_array("conv2d.out", (f, oh * ow), wmat.dtype)
        np.matmul(wmat, cols, out=out_flat)
        out_data = out_flat.reshape(f, oh, ow)
    if bias is not None:
        out_data += bias.data[:, None, None]
    out = Tensor(out_data, record)
    if record:
        out._prev = prev

        def backward():
            dout = out.grad
            dmat = dout.reshape(f, -1)
            _acc(weight, (dmat @ cols.T).reshape(weight.data.shape))
            if bias is not None:
                _acc(bias, dout.sum(axis=(1, 2)))
            if x.requires_grad:
                _acc(x, _conv2d_input_grad(dout, weight.data, xp.shape, stride, padding))

        out._backward = backward
    return out


def _conv2d_input_grad(dout: np.ndarray, weight: np.ndarray, padded_shape, stride: int, padding: int) -> np.ndarray:
    f, c, kh, kw = weight.shape
    _, hp, wp = padded_shape
    oh, ow = dout.shape[1], dout.shape[2]
    if stride > 1:
        dil = np.zeros((f, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=dout.dtype)
        dil[:, ::stride, ::stride] = dout
    else:
        dil = dout
    full = np.pad(dil, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    # correlate with spatially flipped kernels, in/out channels swapped
    wflip = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols, gh, gw = _im2col(full, kh, kw, 1)
    gx = (wflip.reshape(c, -1) @ cols).reshape(c, gh, gw)
    # rows/cols past the last window start never influenced the output
    rh, rw = hp - gh, wp - gw
    if rh or rw:
        gx = np.pad(gx, ((0, 0), (0, rh), (0, rw)))
    if padding:
        gx = gx[:, padding:-padding, padding:-padding]
    return gx


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2) -> Tensor:
    c, h, w = x.data.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    # forward max over shifted strided views; argmax is only needed for the
    # backward pass and is recomputed there
    out_data = None
    for p in range(kernel):
        for q in range(kernel):
            view = x.data[:, p : p + stride * oh : stride, q : q + stride * ow : stride]
            if out_data is None:
                out_data = view.copy()
            else:
                np.maximum(out_data, view, out=out_data)
    out, rec = _result(out_data, (x,))
    if rec:

        def backward():
            win = sliding_window_view(x.data, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
            arg = win.reshape(c, oh, ow, kernel * kernel).argmax(axis=3)
            g = np.zeros_like(x.data)
            ci, oi, oj = np.indices((c, oh, ow))
            rows = oi * stride + arg // kernel
            cols = oj * stride + arg % kernel
            np.add.at(g, (ci.ravel(), rows.ravel(), cols.ravel()), out.grad.ravel())
            _acc(x, g)

        out._backward = backward
    return out


def xcorr_depthwise(search: Tensor, template: Tensor) -> Tensor:
    """Valid per-channel cross-correlation of a template over a search map.

    (D, H, W) search against (D, h, w) template gives (D, H-h+1, W-w+1).
    """
    d, h, w = search.data.shape
    dt, th, tw = template.data.shape
    if d != dt:
        raise ValueError(f"channel mismatch: search {d} vs template {dt}")
    if th > h or tw > w:
        raise ValueError("template must not be larger than search map")
    win = sliding_window_view(search.data, (th, tw), axis=(1, 2))
    out_data = np.einsum("dijpq,dpq->dij", win, template.data, optimize=True)
    out, rec = _result(out_data, (search, template))
    if rec:

        def backward():
            dout = out.grad
            if template.requires_grad:
                _acc(template, np.einsum("dijpq,dij->dpq", win, dout, optimize=True))
            if search.requires_grad:
                full = np.pad(dout, ((0, 0), (th - 1, th - 1), (tw - 1, tw - 1)))
                fwin = sliding_window_view(full, (th, tw), axis=(1, 2))
                flipped = template.data[:, ::-1, ::-1]
                _acc(search, np.einsum("dijpq,dpq->dij", fwin, flipped, optimize=True))

        out._backward = backward
    return out


def segment_max(x: Tensor, bounds) -> Tensor:
    """Per-segment column-wise max over contiguous row blocks of a 2-D tensor.

    ``bounds`` is a sequence of (start, end) row ranges; each must be
    non-empty. Output has one row per segment.
    """
    n_seg = len(bounds)
    d = x.data.shape[1]
    out_data = np.empty((n_seg, d), dtype=x.data.dtype)
    arg_rows = np.empty((n_seg, d), dtype=np.intp)
    for k, (start, end) in enumerate(bounds):
        if end <= start:
            raise ValueError(f"segment {k} is empty")
        block = x.data[start:end]
        arg = block.argmax(axis=0)
        arg_rows[k] = start + arg
        out_data[k] = block[arg, np.arange(d)]
    out, rec = _result(out_data, (x,))
    if rec:

        def backward():
            g = np.zeros_like(x.data)
            cols = np.tile(np.arange(d), n_seg)
            np.add.at(g, (arg_rows.ravel(), cols), out.grad.ravel())
            _acc(x, g)

        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of (n, d_in) rows by a (d_in, d_out) weight."""
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def point_shared_mlp(points: Tensor, layers) -> tuple[Tensor, Tensor]:
    """Apply shared (weight, bias) layers with ReLU to every point and
    max-pool a global feature over points.

    Returns (per-point features, pooled feature of shape (1, width)).
    Permutation-invariant in the pooled output.
    """
    n = points.data.shape[0]
    if n < 1:
        raise ValueError("point_shared_mlp requires at least one point")
    feats = points
    for w, b in layers:
        feats = linear(feats, w, b).relu()
    pooled = segment_max(feats, [(0, n)])
    return feats, pooled
