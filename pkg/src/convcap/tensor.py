"""Dense tensors with reverse-mode automatic differentiation.

Just enough operations for causal convolutional and LSTM sequence decoders:
matmul, left-padded causal 1-d convolution, gated linear units, pointwise
arithmetic, softmax, and a masked cross-entropy loss. Data is float32 by
default; tests build float64 graphs for finite-difference checks.

No general broadcasting: binary ops require identical shapes or a scalar
on one side, so shape bugs surface as errors instead of silent misuse.
"""

import numpy as np

FLOAT = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or FLOAT)
        self.requires_grad = requires_grad
        self.grad = None
        self._prev = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self):
        """Populate .grad on every reachable tensor with requires_grad.

        Must be called on a scalar exactly once per forward pass.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._done:
            raise RuntimeError("backward already ran on this tensor; rebuild the graph first")
        self._done = True

        # iterative post-order toposort; deep LSTM graphs overflow recursion
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _check_binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def _reduce_to(g, shape):
    # undo scalar-vs-tensor broadcasting
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "add")

    def back(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "mul")

    def back(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), back)


def scale(x: Tensor, s: float) -> Tensor:
    s = x.data.dtype.type(s)

    def back(g):
        if x.requires_grad:
            x._accumulate(g * s)

    return _make(x.data * s, (x,), back)


def _sigmoid(x):
    # piecewise form avoids exp overflow for |x| up to 1e4 and beyond
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def back(g):
        if x.requires_grad:
            x._accumulate(g * y * (1.0 - y))

    return _make(y, (x,), back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner extents {a.data.shape} x {b.data.shape} do not match")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Causal 1-d convolution: output[t] reads inputs t-K+1..t only.

    x: [T, C_in], w: [K, C_in, C_out], b: [C_out]. The sequence is
    left-padded with K-1 zero frames, so position t never sees the future.
    """
    t_len, c_in = x.data.shape
    k, wc_in, c_out = w.data.shape
    if k < 1:
        raise ValueError("conv1d_causal: kernel width must be >= 1")
    if wc_in != c_in:
        raise ValueError(f"conv1d_causal: input has {c_in} channels, kernel expects {wc_in}")
    if b.data.shape != (c_out,):
        raise ValueError(f"conv1d_causal: bias shape {b.data.shape} != ({c_out},)")

    xp = np.zeros((t_len + k - 1, c_in), dtype=x.data.dtype)
    xp[k - 1:] = x.data
    y = np.tile(b.data, (t_len, 1))
    # y[t] = sum_j xp[t+j] . w[j]; tap j reads offset j-(K-1) <= 0
    for j in range(k):
        y += xp[j:j + t_len] @ w.data[j]

    def back(g):
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = xp[j:j + t_len].T @ g
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + t_len] += g @ w.data[j].T
            x._accumulate(gxp[k - 1:])

    return _make(y, (x, w, b), back)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: split channels in half, emit a * sigmoid(g)."""
    c = x.data.shape[-1]
    if c % 2 != 0:
        raise ValueError(f"glu: channel count {c} is odd")
    h = c // 2
    a = x.data[..., :h]
    gate = _sigmoid(x.data[..., h:])
    y = a * gate

    def back(g):
        if x.requires_grad:
            gx = np.empty_like(x.data)
            gx[..., :h] = g * gate
            gx[..., h:] = g * a * gate * (1.0 - gate)
            x._accumulate(gx)

    return _make(y, (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - dot))

    return _make(y, (x,), back)


def log_softmax_rows(a: np.ndarray) -> np.ndarray:
    """Plain-numpy log softmax over the last axis (inference scoring)."""
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    logits: [T, V]; targets: int[T]; mask: {0,1}[T]. Gradient flows only
    through positions with mask == 1.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    t_len, v = logits.data.shape
    if targets.shape != (t_len,) or mask.shape != (t_len,):
        raise ValueError("cross_entropy_masked: targets/mask must be [T]")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError("cross_entropy_masked: target index out of range")
    denom = mask.sum()
    if denom == 0:
        raise ValueError("cross_entropy_masked: mask selects no positions")

    logp = log_softmax_rows(logits.data)
    picked = logp[np.arange(t_len), targets]
    loss = -(picked * mask).sum() / denom

    def back(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(t_len), targets] -= 1.0
            logits._accumulate(g * p * (mask / denom)[:, None])

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: ids int[T] -> [T, E] rows of the embedding table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise ValueError("embedding: index out of range")

    def back(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table._accumulate(gt)

    return _make(table.data[ids], (table,), back)


def repeat_row(x: Tensor, times: int) -> Tensor:
    """Tile a [1, N] row to [times, N]; gradient sums back over rows."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ValueError("repeat_row expects a [1, N] tensor")

    def back(g):
        if x.requires_grad:
            x._accumulate(g.sum(axis=0, keepdims=True))

    return _make(np.repeat(x.data, times, axis=0), (x,), back)


def concat_last(parts) -> Tensor:
    """Concatenate along the last axis."""
    parts = list(parts)
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise ValueError("concat_last: leading extents differ")
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[..., lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, back)


def concat_rows(parts) -> Tensor:
    """Concatenate 2-d tensors along axis 0 (sequence packing)."""
    parts = list(parts)
    width = parts[0].data.shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[-1] != width:
            raise ValueError("concat_rows: parts must be [*, N] with equal N")
    heights = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, back)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """View x[..., start:stop] as a new tensor."""
    if not (0 <= start < stop <= x.data.shape[-1]):
        raise ValueError(f"slice_last: [{start}:{stop}] out of range for {x.data.shape}")

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[..., start:stop] = g
            x._accumulate(gx)

    return _make(x.data[..., start:stop].copy(), (x,), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """View x[start:stop] of a 2-d tensor as a new tensor."""
    if x.data.ndim != 2 or not (0 <= start < stop <= x.data.shape[0]):
        raise ValueError(f"slice_rows: [{start}:{stop}] out of range for {x.data.shape}")

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            x._accumulate(gx)

    return _make(x.data[start:stop].copy(), (x,), back)


def sum_all(x: Tensor) -> Tensor:
    def back(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), back)
