"""A small deterministic tensor engine with reverse-mode differentiation.

Every tensor wraps a numpy array.  Operations that touch at least one tensor
with ``requires_grad`` record a :class:`Node` holding their inputs and a
closure that maps the output gradient to input gradients.  Nodes carry a
monotonically increasing sequence number, so sorting the reachable nodes by
that number gives a valid reverse topological order without an explicit
graph walk order dependency.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError

__all__ = [
    "Tensor",
    "Node",
    "ConvSpec",
    "no_grad",
    "grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "conv_nd",
    "adaptive_avg_pool",
    "resize_linear",
    "pixel_shuffle",
    "pixel_unshuffle",
    "instance_norm",
    "backward",
]

_sequence = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Node:
    """One recorded operation: its inputs and the rule mapping dL/dout to dL/dinputs."""

    __slots__ = ("seq", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """N-dimensional array that can participate in a differentiation graph."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` and, when any input needs gradients, record a graph node."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), rule)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), rule)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting.

    Broadcasting covers the single-channel map times multi-channel feature
    case: ``(N,1,D,H,W) * (N,C,D,H,W)``.
    """
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), rule)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def rule(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(out, "pow", (a,), rule)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    one = np.ones((), dtype=x.dtype)
    out = np.where(x >= 0, one / (one + e), e / (one + e))

    def rule(g):
        return (g * out * (one - out),)

    return _result(out, "sigmoid", (a,), rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, np.zeros((), dtype=a.dtype))
    return _result(out, "relu", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul: both operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: contraction extents differ ({a.shape} @ {b.shape})")

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), rule)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(out, "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join along ``axis``; the other axes broadcast (e.g. batch 1 against batch N)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    if any(t.ndim != ndim for t in tensors):
        raise ContractError(f"concat: ranks differ, {[t.shape for t in tensors]}")
    others = [tuple(n for i, n in enumerate(t.shape) if i != axis) for t in tensors]
    try:
        common = np.broadcast_shapes(*others)
    except ValueError:
        raise ContractError(f"concat: shapes {[t.shape for t in tensors]} incompatible along axis {axis}") from None
    parts = []
    for t in tensors:
        target = common[:axis] + (t.shape[axis],) + common[axis:]
        parts.append(t.data if t.shape == target else np.broadcast_to(t.data, target))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        out = []
        for i, t in enumerate(tensors):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[i], bounds[i + 1])
            out.append(_unbroadcast(g[tuple(index)], t.shape))
        return tuple(out)

    return _result(np.concatenate(parts, axis=axis), "concat", tensors, rule)


def _getitem(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index], copy=True)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(out, "getitem", (a,), rule)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def rule(g):
        return (np.broadcast_to(g.reshape(kept), a.shape).copy(),)

    return _result(np.asarray(out), "reduce_sum", (a,), rule)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    scale = np.asarray(1.0 / count, dtype=a.dtype)

    def rule(g):
        return (np.broadcast_to(g.reshape(kept) * scale, a.shape).copy(),)

    return _result(np.asarray(out), "reduce_mean", (a,), rule)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def _per_axis(value, rank, name):
    if isinstance(value, (int, np.integer)):
        return (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ConfigError(f"{name} has {len(value)} entries, expected {rank}")
    return value


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: kernel, dilation, stride and zero padding per axis."""

    in_channels: int
    out_channels: int
    kernel: Tuple[int, ...]
    dilation: Tuple[int, ...]
    stride: Tuple[int, ...]
    padding: Tuple[int, ...]

    def __post_init__(self):
        rank = len(self.kernel)
        if rank == 0:
            raise ConfigError("ConvSpec needs at least one spatial axis")
        for name in ("dilation", "stride", "padding"):
            if len(getattr(self, name)) != rank:
                raise ConfigError(f"ConvSpec.{name} rank differs from kernel rank {rank}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("ConvSpec channel counts must be positive")
        for axis, k in enumerate(self.kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel extent on axis {axis} must be odd and positive, got {k}")
        if any(d < 1 for d in self.dilation) or any(s < 1 for s in self.stride):
            raise ConfigError("dilation and stride must be positive")
        if any(p < 0 for p in self.padding):
            raise ConfigError("padding must be non-negative")

    @classmethod
    def make(cls, in_channels, out_channels, kernel=3, dilation=1, stride=1, padding=None, rank=3):
        kernel = _per_axis(kernel, rank, "kernel")
        dilation = _per_axis(dilation, rank, "dilation")
        stride = _per_axis(stride, rank, "stride")
        if padding is None:
            # "same" extent for stride 1
            padding = tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))
        padding = _per_axis(padding, rank, "padding")
        return cls(int(in_channels), int(out_channels), kernel, dilation, stride, padding)

    @property
    def rank(self) -> int:
        return len(self.kernel)

    def output_extent(self, extents: Sequence[int]) -> Tuple[int, ...]:
        out = []
        for axis, (n, k, d, s, p) in enumerate(
            zip(extents, self.kernel, self.dilation, self.stride, self.padding)
        ):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ConfigError(f"convolution output extent on spatial axis {axis} would be {o}")
            out.append(o)
        return tuple(out)


def _tap_layout(spec: ConvSpec, spatial: Sequence[int], out_ext: Sequence[int]):
    """Kernel taps that can touch real input, and the padding they actually need.

    Returns (taps, left, right): ``taps`` lists (kernel index, per-axis shift)
    where input index = output index * stride + shift; taps whose reads fall
    entirely in the zero padding are dropped.
    """
    per_axis = []
    for n, k, d, s, p, o in zip(spatial, spec.kernel, spec.dilation, spec.stride, spec.padding, out_ext):
        last = s * (o - 1)
        per_axis.append([(j, j * d - p) for j in range(k) if j * d - p + last >= 0 and j * d - p <= n - 1])
    left, right = [], []
    for n, axis, s, o in zip(spatial, per_axis, spec.stride, out_ext):
        shifts = [t for _, t in axis]
        left.append(max(0, -min(shifts)))
        right.append(max(0, max(shifts) + s * (o - 1) - (n - 1)))
    taps = [
        (tuple(j for j, _ in combo), tuple(t for _, t in combo)) for combo in itertools.product(*per_axis)
    ]
    return taps, left, right


def conv_nd(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Zero-padded, dilated, strided cross-correlation over any number of spatial axes.

    ``weight`` may carry a leading batch axis, (N, C_out, C_in, k...), to give
    every sample its own kernel; ``bias`` may likewise be (N, C_out).  A single
    input sample broadcasts against them.  Kernel taps that only ever read
    padding are skipped.  Two equivalent lowerings are used, whichever moves
    less memory: a gathered-patch (im2col) matrix product, or one matrix
    product per tap over a flattened padded buffer.
    """
    rank = spec.rank
    if x.ndim != rank + 2:
        raise ContractError(f"conv_nd: input rank {x.ndim} does not match spatial rank {rank} + 2")
    if x.shape[1] != spec.in_channels:
        raise ContractError(f"conv_nd: input axis 1 has {x.shape[1]} channels, expected {spec.in_channels}")
    nx, c = x.shape[:2]
    o_ch = spec.out_channels
    per_sample = weight.ndim == rank + 3
    bias_per_sample = bias is not None and bias.ndim == 2
    n = nx
    if per_sample and nx == 1:
        n = weight.shape[0]
    elif bias_per_sample and nx == 1:
        n = bias.shape[0]
    wshape = (o_ch, c) + spec.kernel
    if per_sample:
        wshape = (n,) + wshape
    if weight.shape != wshape:
        for axis, (got, want) in enumerate(zip(weight.shape, wshape)):
            if got != want:
                raise ContractError(f"conv_nd: weight axis {axis} has extent {got}, expected {want}")
        raise ContractError(f"conv_nd: weight shape {weight.shape}, expected {wshape}")
    bshape = ((n,) if bias_per_sample else ()) + (o_ch,)
    if bias is not None and bias.shape != bshape:
        raise ContractError(f"conv_nd: bias shape {bias.shape}, expected {bshape}")

    spatial = x.shape[2:]
    geo = _geometry(spec, spatial)
    kvol, kept = geo.kvol, geo.kept
    wsel = weight.data.reshape(wshape[:-rank] + (kvol,))[..., kept]  # (..., O, C, T)

    # per-sample kernels over a real batch are only supported by the gathered lowering
    flat_ok = not (per_sample and nx > 1)
    lowering = _FlatConv if flat_ok and geo.bvol <= _FLAT_RATIO * geo.ovol else _ColsConv
    conv = lowering(x.data, wsel, geo)
    out = conv.forward()
    if bias is not None:
        out = out + bias.data.reshape(bshape + (1,) * rank)

    def rule(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            sp = tuple(range(2, 2 + rank))
            gb = g.sum(axis=sp) if bias_per_sample else g.sum(axis=(0,) + sp)
        if weight.requires_grad or x.requires_grad:
            gc = g.sum(axis=0, keepdims=True) if (nx != n and not per_sample) else g
            gx, gsel = conv.backward(gc, x.requires_grad, weight.requires_grad)
            if gsel is not None:
                gw = np.zeros(wshape[:-rank] + (kvol,), dtype=g.dtype)
                gw[..., kept] = gsel
                gw = gw.reshape(wshape)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(np.ascontiguousarray(out), "conv_nd", inputs, rule)


@lru_cache(maxsize=256)
def _geometry(spec: ConvSpec, spatial: Tuple[int, ...]) -> "_Geometry":
    out_ext = spec.output_extent(spatial)
    taps, left, right = _tap_layout(spec, spatial, out_ext)
    return _Geometry(spec, spatial, out_ext, taps, left, right)


class _Geometry:
    """Index bookkeeping shared by both convolution lowerings."""

    def __init__(self, spec, spatial, out_ext, taps, left, right):
        self.rank = spec.rank
        self.kvol = int(np.prod(spec.kernel))
        self.kept = [int(np.ravel_multi_index(kidx, spec.kernel)) for kidx, _ in taps]
        self.spatial = tuple(spatial)
        self.out_ext = tuple(out_ext)
        self.ovol = int(np.prod(out_ext))
        # explicit zero padding on both sides, for the gathered-patch lowering
        self.padded = tuple(s + a + b for s, a, b in zip(spatial, left, right))
        self.interior = tuple(slice(a, a + s) for a, s in zip(left, spatial))
        self.windows = [
            tuple(slice(t + a, t + a + st * (o - 1) + 1, st) for t, a, st, o in zip(shift, left, spec.stride, out_ext))
            for _, shift in taps
        ]
        # shared-halo layout for the flat lowering: every row is followed by a
        # zero gap wide enough for the reads on both sides, so neighbouring rows
        # (and samples) share one gap and a tap is a constant flat offset
        last = [st * (o - 1) for st, o in zip(spec.stride, out_ext)]
        self.block = tuple(
            n + max(a, b, l + 1 - n) for n, a, b, l in zip(spatial, left, right, last)
        )
        self.bvol = int(np.prod(self.block))
        strides = [int(np.prod(self.block[i + 1 :])) for i in range(self.rank)]
        offs = [sum(t * st for t, st in zip(shift, strides)) for _, shift in taps]
        self.lead = max(0, -min(offs))
        self.tail = max(0, max(offs))
        self.offsets = [self.lead + o for o in offs]
        self.data_region = tuple(slice(0, n) for n in spatial)
        self.valid = tuple(slice(0, l + 1, st) for l, st in zip(last, spec.stride))


_ALL2 = (slice(None), slice(None))
# the flat lowering computes on the haloed grid; beyond this much waste the
# gathered-patch lowering is cheaper
_FLAT_RATIO = 3.0


class _ColsConv:
    """Gather every tap's input window into a (N, C*T, P) buffer, then one batched product."""

    def __init__(self, xdata, wsel, geo: _Geometry):
        self.geo = geo
        nx, c = xdata.shape[:2]
        t = len(geo.windows)
        self.buf_shape = (nx, c) + geo.padded
        buf = np.zeros(self.buf_shape, dtype=xdata.dtype)
        buf[_ALL2 + geo.interior] = xdata
        cols = np.empty((nx, c, t) + geo.out_ext, dtype=xdata.dtype)
        for i, win in enumerate(geo.windows):
            cols[:, :, i] = buf[_ALL2 + win]
        self.cols = cols.reshape(nx, c * t, geo.ovol)
        self.wmat = np.ascontiguousarray(wsel.reshape(wsel.shape[:-2] + (c * t,)))
        self.nx, self.c, self.t = nx, c, t

    def forward(self):
        out = np.matmul(self.wmat, self.cols)
        return out.reshape(out.shape[:2] + self.geo.out_ext)

    def backward(self, g, need_x, need_w):
        g2 = g.reshape(g.shape[:2] + (self.geo.ovol,))
        gx = gsel = None
        if need_w:
            gw = np.matmul(g2, np.swapaxes(self.cols, 1, 2))
            if self.wmat.ndim == 2:
                gw = gw.sum(axis=0)
            gsel = gw.reshape(gw.shape[:-1] + (self.c, self.t))
        if need_x:
            gcols = np.matmul(np.swapaxes(self.wmat, -1, -2), g2)
            if gcols.shape[0] != self.nx:
                gcols = gcols.sum(axis=0, keepdims=True)
            gcols = gcols.reshape((self.nx, self.c, self.t) + self.geo.out_ext)
            gbuf = np.zeros(self.buf_shape, dtype=g.dtype)
            for i, win in enumerate(self.geo.windows):
                gbuf[_ALL2 + win] += gcols[:, :, i]
            gx = np.ascontiguousarray(gbuf[_ALL2 + self.geo.interior])
        return gx, gsel


class _FlatConv:
    """Convolution on a flattened zero-haloed buffer, processed in column blocks.

    Per-sample kernels are supported for a single broadcast input sample.

    Channels are rows and all samples' voxels are laid end to end along the
    columns, each kernel tap being a constant column offset.  For every block
    of output columns the T shifted slices are stacked into a (C*T, B) panel
    and multiplied once by the (C_out, C*T) kernel matrix; blocks are sized
    to stay in cache.  Outputs are produced on the whole haloed grid and the
    valid positions picked out.
    """

    def __init__(self, xdata, wsel, geo: _Geometry):
        self.geo = geo
        nx, c = xdata.shape[:2]
        t = len(geo.offsets)
        self.nx, self.c, self.t = nx, c, t
        self.wmat = np.ascontiguousarray(np.swapaxes(wsel, -1, -2).reshape(wsel.shape[:-2] + (t * c,)))
        self.o = self.wmat.shape[-2]
        self.cols_total = nx * geo.bvol
        buf = np.zeros((c, geo.lead + self.cols_total + geo.tail), dtype=xdata.dtype)
        core = buf[:, geo.lead : geo.lead + self.cols_total].reshape((c, nx) + geo.block)
        core[_ALL2 + geo.data_region] = np.swapaxes(xdata, 0, 1)
        self.buf = buf
        self.step = max(256, (1 << 18) // (t * c + self.o))

    def _blocks(self):
        return [(lo, min(lo + self.step, self.cols_total)) for lo in range(0, self.cols_total, self.step)]

    def _panel(self, lo, hi, out=None):
        c = self.c
        panel = np.empty((self.t * c, hi - lo), dtype=self.buf.dtype) if out is None else out[:, : hi - lo]
        for i, off in enumerate(self.geo.offsets):
            panel[i * c : (i + 1) * c] = self.buf[:, off + lo : off + hi]
        return panel

    def _pick(self, acc, lead_shape):
        grid = acc.reshape(lead_shape + (self.nx,) + self.geo.block)
        return grid[(slice(None),) * (len(lead_shape) + 1) + self.geo.valid]

    def forward(self):
        scratch = np.empty((self.t * self.c, self.step), dtype=self.buf.dtype)
        if self.wmat.ndim == 3:
            n = self.wmat.shape[0]
            acc = np.empty((n, self.o, self.cols_total), dtype=self.buf.dtype)
            for lo, hi in self._blocks():
                acc[:, :, lo:hi] = np.matmul(self.wmat, self._panel(lo, hi, scratch))
            return self._pick(acc, (n, self.o))[:, :, 0]
        acc = np.empty((self.o, self.cols_total), dtype=self.buf.dtype)
        for lo, hi in self._blocks():
            np.matmul(self.wmat, self._panel(lo, hi, scratch), out=acc[:, lo:hi])
        return np.swapaxes(self._pick(acc, (self.o,)), 0, 1)

    def backward(self, g, need_x, need_w):
        geo = self.geo
        per_sample = self.wmat.ndim == 3
        n = g.shape[0]
        # scatter the output gradient onto the haloed grid, (O, nx*B) or (n, O, nx*B)
        if per_sample:
            gacc = np.zeros((n, self.o, 1) + geo.block, dtype=g.dtype)
            gacc[(slice(None), slice(None), 0) + geo.valid] = g
            gout = gacc.reshape(n, self.o, self.cols_total)
        else:
            gacc = np.zeros((self.o, self.nx) + geo.block, dtype=g.dtype)
            gacc[_ALL2 + geo.valid] = np.swapaxes(g, 0, 1)
            gout = gacc.reshape(self.o, self.cols_total)
        gw = np.zeros(self.wmat.shape, dtype=g.dtype) if need_w else None
        gbuf = np.zeros(self.buf.shape, dtype=g.dtype) if need_x else None
        wt = np.swapaxes(self.wmat, -1, -2)
        scratch = np.empty((self.t * self.c, self.step), dtype=g.dtype)
        c = self.c
        for lo, hi in self._blocks():
            gblk = gout[..., lo:hi]
            if need_w:
                panel = self._panel(lo, hi, scratch)
                gw += np.matmul(gblk, panel.T)
            if need_x:
                gpanel = np.matmul(wt, gblk)
                if per_sample:
                    gpanel = gpanel.sum(axis=0)
                for i, off in enumerate(geo.offsets):
                    gbuf[:, off + lo : off + hi] += gpanel[i * c : (i + 1) * c]
        gx = gsel = None
        if need_x:
            core = gbuf[:, geo.lead : geo.lead + self.cols_total].reshape((c, self.nx) + geo.block)
            gx = np.ascontiguousarray(np.swapaxes(core[_ALL2 + geo.data_region], 0, 1))
        if need_w:
            gsel = np.swapaxes(gw.reshape(gw.shape[:-1] + (self.t, c)), -1, -2)
        return gx, gsel


# ---------------------------------------------------------------------------
# resampling (separable linear maps along each spatial axis)
# ---------------------------------------------------------------------------
def _apply_separable(data: np.ndarray, mats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    for i, m in enumerate(mats):
        if m is None:
            continue
        axis = 2 + i
        data = np.moveaxis(np.tensordot(data, m, axes=([axis], [1])), -1, axis)
    return np.ascontiguousarray(data)


def _targets(x: Tensor, target, op: str) -> Tuple[int, ...]:
    rank = x.ndim - 2
    if rank < 1:
        raise ContractError(f"{op}: input must be (N, C, spatial...), got {x.shape}")
    target = _per_axis(target, rank, f"{op} target")
    for axis, t in enumerate(target):
        if t < 1:
            raise ConfigError(f"{op}: target extent on spatial axis {axis} must be positive, got {t}")
    return target


@lru_cache(maxsize=256)
def _pool_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = ((i + 1) * n_in) // n_out
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _separable_op(x: Tensor, mats, op: str) -> Tensor:
    out = _apply_separable(x.data, mats)
    back = [None if m is None else m.T for m in mats]
    return _result(out, op, (x,), lambda g: (_apply_separable(g, back),))


def adaptive_avg_pool(x: Tensor, target) -> Tensor:
    """Average over contiguous bins that partition each spatial axis.

    Bin ``i`` of an axis of extent ``n`` pooled to ``t`` covers
    ``[floor(i*n/t), floor((i+1)*n/t))``.
    """
    target = _targets(x, target, "adaptive_avg_pool")
    for axis, (t, n) in enumerate(zip(target, x.shape[2:])):
        if t > n:
            raise ConfigError(f"adaptive_avg_pool: target {t} exceeds input extent {n} on spatial axis {axis}")
    mats = [None if t == n else _pool_matrix(n, t, x.dtype.type) for t, n in zip(target, x.shape[2:])]
    return _separable_op(x, mats, "adaptive_avg_pool")


def resize_linear(x: Tensor, target) -> Tensor:
    """Multi-linear resampling with half-pixel centres (align_corners=False)."""
    target = _targets(x, target, "resize_linear")
    mats = [None if t == n else _interp_matrix(n, t, x.dtype.type) for t, n in zip(target, x.shape[2:])]
    return _separable_op(x, mats, "resize_linear")


# ---------------------------------------------------------------------------
# sub-pixel rearrangement
# ---------------------------------------------------------------------------
def _shuffle(data: np.ndarray, r: int) -> np.ndarray:
    n, cr = data.shape[:2]
    spatial = data.shape[2:]
    d = len(spatial)
    c = cr // r**d
    v = data.reshape((n, c) + (r,) * d + spatial)
    perm = [0, 1]
    for i in range(d):
        perm += [2 + d + i, 2 + i]
    v = v.transpose(perm)
    return np.ascontiguousarray(v).reshape((n, c) + tuple(s * r for s in spatial))


def _unshuffle(data: np.ndarray, r: int) -> np.ndarray:
    n, c = data.shape[:2]
    spatial = data.shape[2:]
    d = len(spatial)
    small = tuple(s // r for s in spatial)
    shape = (n, c)
    for s in small:
        shape += (s, r)
    v = data.reshape(shape)
    perm = [0, 1] + [3 + 2 * i for i in range(d)] + [2 + 2 * i for i in range(d)]
    v = v.transpose(perm)
    return np.ascontiguousarray(v).reshape((n, c * r**d) + small)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Move blocks of ``r**d`` channels into an ``r``-times finer spatial grid."""
    r = int(r)
    d = x.ndim - 2
    if r < 1 or d < 1:
        raise ConfigError(f"pixel_shuffle: need r >= 1 and a spatial axis, got r={r}, shape {x.shape}")
    if x.shape[1] % r**d:
        raise ConfigError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^d = {r**d}")
    return _result(_shuffle(x.data, r), "pixel_shuffle", (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    r = int(r)
    if r < 1 or x.ndim < 3:
        raise ConfigError(f"pixel_unshuffle: need r >= 1 and a spatial axis, got r={r}, shape {x.shape}")
    for axis, s in enumerate(x.shape[2:]):
        if s % r:
            raise ConfigError(f"pixel_unshuffle: spatial axis {axis} extent {s} not divisible by {r}")
    return _result(_unshuffle(x.data, r), "pixel_unshuffle", (x,), lambda g: (_shuffle(g, r),))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial extent; no affine part."""
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = xc * inv

    def rule(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y, "instance_norm", (x,), rule)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf needing it."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must have exactly one element, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward: loss is not attached to a differentiation graph")

    reachable = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable[id(t)] = t
        if t.node is not None:
            stack.extend(p for p in t.node.inputs if p.requires_grad)
    order = sorted((t for t in reachable.values() if t.node is not None), key=lambda t: -t.node.seq)

    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = np.array(pg, dtype=parent.dtype) if parent.grad is None else parent.grad + pg
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
