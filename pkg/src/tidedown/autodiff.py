"""Minimal reverse-mode differentiable substrate over numpy arrays.

Only the operators the downscaling model needs exist here: 3x3 same-size
convolution, affine layers, ReLU, pixel shuffle, neighbourhood unfolding,
spatial gathers, concatenation/slicing, broadcast add, reductions, and a
masked L1 loss. Forward passes record a tape only while gradients are
enabled and at least one input requires them; `no_grad` turns inference
into plain numpy.

Conventions:
  * float32 throughout in production; build parameters as float64 for the
    tight finite-difference test mode.
  * `count_macs` tallies multiply-accumulates of conv2d/linear forwards
    (1 MAC = 1 FLOP; element-wise work and biases are not counted).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = [True]
_MAC_STACK: list["MacCounter"] = []


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class MacCounter:
    """Tallies multiply-accumulate counts of conv2d/linear forward passes."""

    def __init__(self):
        self.total = 0


@contextmanager
def count_macs():
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.pop()


def _add_macs(n: int) -> None:
    for counter in _MAC_STACK:
        counter.total += int(n)


class Tensor:
    """A numpy array plus an optional tape node for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        """Populate gradients of every reachable requires-grad tensor."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if self._backward is None:
            raise RuntimeError("backward called before a forward pass was recorded")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            gout = grads.pop(id(node), None)
            if gout is None:
                continue
            if node.requires_grad:
                node.grad += gout
            if node._backward is None:
                continue
            for parent, gpar in zip(node._parents, node._backward(gout)):
                if gpar is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += gpar
                else:
                    grads[id(parent)] = gpar

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operators


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    data = x.data + y.data

    def backward(gout):
        return _unbroadcast(gout, x.data.shape), _unbroadcast(gout, y.data.shape)

    return _node(data, (x, y), backward)


def mul_const(x, c) -> Tensor:
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.data.dtype)
    data = x.data * c

    def backward(gout):
        return (_unbroadcast(gout * c, x.data.shape),)

    return _node(data, (x,), backward)


def sub_const(x, c) -> Tensor:
    x = as_tensor(x)
    data = x.data - np.asarray(c, dtype=x.data.dtype)

    def backward(gout):
        return (gout,)

    return _node(data, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(gout):
        return (gout * (x.data > 0),)

    return _node(data, (x,), backward)


def tsum(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(gout):
        return (np.broadcast_to(gout, x.data.shape).astype(x.data.dtype),)

    return _node(data, (x,), backward)


def tmean(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = 1.0 / x.data.size

    def backward(gout):
        return (np.full_like(x.data, gout * inv),)

    return _node(data, (x,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """out = x @ weight.T + bias for x [R, Din], weight [Dout, Din]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape}, weight {weight.data.shape}")
    _add_macs(x.data.shape[0] * x.data.shape[1] * weight.data.shape[0])
    data = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[0],):
            raise ValueError(f"linear bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
        data = data + bias.data
        parents.append(bias)

    def backward(gout):
        gx = gout @ weight.data
        gw = gout.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, gout.sum(axis=0)

    return _node(data, tuple(parents), backward)


def conv2d(x, weight, bias=None) -> Tensor:
    """3x3 same-size cross-correlation, zero padding 1, stride 1."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects x [N,C,H,W] and weight [Cout,Cin,3,3]")
    n, c, h, w = x.data.shape
    c_out, c_in, kh, kw = weight.data.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d supports only 3x3 kernels, got {kh}x{kw}")
    if c_in != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c_in}")
    _add_macs(n * h * w * c_out * c_in * 9)

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)
    w2 = weight.data.reshape(c_out, c * 9)
    out = col @ w2.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (c_out,):
            raise ValueError(f"conv2d bias shape {bias.data.shape} != ({c_out},)")
        out = out + bias.data
        parents.append(bias)
    data = np.ascontiguousarray(out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))

    def backward(gout):
        gflat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * h * w, c_out)
        gw = (gflat.T @ col).reshape(weight.data.shape)
        gcol = (gflat @ w2).reshape(n, h, w, c, 3, 3)
        gxp = np.zeros((n, c, h + 2, w + 2), dtype=x.data.dtype)
        for ky in range(3):
            for kx in range(3):
                gxp[:, :, ky:ky + h, kx:kx + w] += gcol[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        gx = gxp[:, :, 1:h + 1, 1:w + 1]
        if bias is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=0)

    return _node(data, tuple(parents), backward)


def pixel_shuffle(x, r: int) -> Tensor:
    """Rearrange [N, C*r*r, H, W] into [N, C, H*r, W*r]; pure permutation."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("pixel_shuffle expects [N, C, H, W]")
    n, c_full, h, w = x.data.shape
    if r < 1 or c_full % (r * r) != 0:
        raise ValueError(f"channel count {c_full} not divisible by r^2 = {r * r}")
    c = c_full // (r * r)
    data = np.ascontiguousarray(
        x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    ).reshape(n, c, h * r, w * r)

    def backward(gout):
        g = gout.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(g).reshape(n, c_full, h, w),)

    return _node(data, (x,), backward)


def unfold3x3(x) -> Tensor:
    """Concatenate each cell's 3x3 neighbourhood channels (replicate-padded).

    Output channel block i (of 9) holds the neighbour at row-major offset
    (i // 3 - 1, i % 3 - 1), so the centre cell is block 4.
    """
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    blocks = [xp[:, :, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    data = np.ascontiguousarray(np.concatenate(blocks, axis=1))

    def backward(gout):
        gxp = np.zeros((n, c, h + 2, w + 2), dtype=x.data.dtype)
        for i in range(9):
            dy, dx = divmod(i, 3)
            gxp[:, :, dy:dy + h, dx:dx + w] += gout[:, i * c:(i + 1) * c]
        gx = gxp[:, :, 1:h + 1, 1:w + 1].copy()
        gx[:, :, 0, :] += gxp[:, :, 0, 1:w + 1]
        gx[:, :, -1, :] += gxp[:, :, -1, 1:w + 1]
        gx[:, :, :, 0] += gxp[:, :, 1:h + 1, 0]
        gx[:, :, :, -1] += gxp[:, :, 1:h + 1, -1]
        gx[:, :, 0, 0] += gxp[:, :, 0, 0]
        gx[:, :, 0, -1] += gxp[:, :, 0, -1]
        gx[:, :, -1, 0] += gxp[:, :, -1, 0]
        gx[:, :, -1, -1] += gxp[:, :, -1, -1]
        return (gx,)

    return _node(data, (x,), backward)


def gather_cells(x, flat_idx) -> Tensor:
    """Pick spatial cells of a [1, D, H, W] map: out[q] = x[0, :, idx[q]]."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ValueError("gather_cells expects a [1, D, H, W] tensor")
    _, d, h, w = x.data.shape
    idx = np.asarray(flat_idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("gather index must be a non-empty 1-D array")
    if idx.min() < 0 or idx.max() >= h * w:
        raise ValueError("gather index out of range")
    flat = x.data.reshape(d, h * w)
    data = np.ascontiguousarray(flat[:, idx].T)

    def backward(gout):
        acc = np.zeros((h * w, d), dtype=x.data.dtype)
        np.add.at(acc, idx, gout)
        return (np.ascontiguousarray(acc.T).reshape(1, d, h, w),)

    return _node(data, (x,), backward)


def concat(xs, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(gout):
        slicer = [slice(None)] * gout.ndim
        grads = []
        for i in range(len(xs)):
            slicer[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(np.ascontiguousarray(gout[tuple(slicer)]))
        return tuple(grads)

    return _node(data, tuple(xs), backward)


def slice_channels(x, start: int, stop: int) -> Tensor:
    """Contiguous channel slice of a [N, C, H, W] tensor."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if not 0 <= start < stop <= c:
        raise ValueError(f"bad channel slice [{start}, {stop}) for C={c}")
    data = np.ascontiguousarray(x.data[:, start:stop])

    def backward(gout):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = gout
        return (gx,)

    return _node(data, (x,), backward)


def take_mask(x, mask) -> Tensor:
    """Select elements where a boolean mask (broadcastable to x) is true."""
    x = as_tensor(x)
    sel = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    if not sel.any():
        raise ValueError("empty sea mask")
    data = x.data[sel]

    def backward(gout):
        gx = np.zeros_like(x.data)
        gx[sel] = gout
        return (gx,)

    return _node(data, (x,), backward)


def mean_abs(x) -> Tensor:
    """Mean absolute value; the L1 building block (subgradient 0 at zero)."""
    x = as_tensor(x)
    data = np.asarray(np.abs(x.data).mean(), dtype=x.data.dtype)
    inv = 1.0 / x.data.size

    def backward(gout):
        return ((np.sign(x.data) * (gout * inv)).astype(x.data.dtype),)

    return _node(data, (x,), backward)


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named, ordered learnable parameters with persistent gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def to_vector(self) -> np.ndarray:
        """All values concatenated in declaration order (checkpoint payload)."""
        if not self._params:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.n_values():
            raise ValueError(f"parameter payload size {vec.size} != {self.n_values()}")
        offset = 0
        for t in self._params.values():
            n = t.data.size
            t.data[...] = vec[offset:offset + n].reshape(t.data.shape).astype(t.data.dtype)
            offset += n
