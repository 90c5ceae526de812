"""Minimal dense tensors with reverse-mode differentiation.

Only the operations the segmentation/regression network needs are provided.
Every op accepts a single ``(C, H, W)`` sample or a batch ``(N, C, H, W)``
where that makes sense, records a node in the graph when any input requires
gradients, and supplies an exact backward rule.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs and the rule mapping d(out) to d(inputs)."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense row-major array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, *, node: Node | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        op = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
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

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: forward produced non-finite values")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    node = Node(op, inputs, rule) if needs else None
    return Tensor(out, requires_grad=needs, node=node)


@dataclass
class Graph:
    """Topologically ordered op records reachable from one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def backward(self, output: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def backward(output: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf feeding ``output``.

    Gradients accumulate into existing ``.grad`` slots; call ``zero_grad`` on
    parameters between steps.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any tensor requiring grad")
    Graph.from_output(output).backward(output)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record("relu", a.data * pos, (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("softplus", out, (a,), lambda g: (g * sig,))


# ----------------------------------------------------------------- reductions


def reduce_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", np.asarray(a.data.sum(dtype=DTYPE)), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _record("mean", np.asarray(a.data.mean(dtype=DTYPE)), (a,),
                   lambda g: (np.full(shape, float(g) / n, dtype=DTYPE),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``W @ x + b``.

    A 1-D ``x`` is one vector of length fan_in; otherwise axis 0 is the batch
    and the remaining axes are flattened to fan_in.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    fan_out, fan_in = weight.shape
    batched = x.ndim > 1
    xm = x.data.reshape(x.shape[0], -1) if batched else x.data.reshape(1, -1)
    if xm.shape[1] != fan_in:
        raise ValueError(f"linear: input has {xm.shape[1]} features, weight expects fan_in={fan_in}")
    wd = weight.data
    out = xm @ wd.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (fan_out,):
            raise ValueError(f"linear: bias shape {bias.shape} != ({fan_out},)")
        out = out + bias.data
        inputs = (x, weight, bias)
    xshape = x.shape

    def rule(g):
        gm = g.reshape(-1, fan_out)
        grads = [(gm @ wd).reshape(xshape), gm.T @ xm]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    return _record("linear", out if batched else out.reshape(fan_out), inputs, rule)


# ------------------------------------------------------------ spatial layers


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv2d(x, kernel, bias=None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation.

    Computed as one GEMM per kernel tap over a channels-last, zero-padded and
    flattened copy of the input: tap ``(i, j)`` reads the same buffer shifted
    by ``i * Wp + j`` rows, so every GEMM operand is a contiguous slice.
    Positions that straddle row or sample boundaries land in the padding
    columns of the output grid and are discarded.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, batched = _as_batch(x)
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-D (C_out,C_in,kH,kW), got {kernel.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, kh, kw = kernel.shape
    if c_in != c:
        raise ValueError(f"conv2d: input channels C_in={c} but kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel height/width must be odd, got kH={kh}, kW={kw}")
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1:
        raise ValueError(f"conv2d: output height H'={ho} < 1")
    if wo < 1:
        raise ValueError(f"conv2d: output width W'={wo} < 1")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv2d: bias length {bias.shape} != C_out={c_out}")

    xp = np.zeros((n, hp, wp, c), dtype=DTYPE)
    xp[:, padding:padding + h, padding:padding + w, :] = xd.transpose(0, 2, 3, 1)
    flat = xp.reshape(-1, c)
    rows = flat.shape[0]
    span = rows - ((kh - 1) * wp + (kw - 1))
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0), dtype=DTYPE)  # kh,kw,C_in,C_out

    acc = np.zeros((rows, c_out), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            acc[:span] += flat[off:off + span] @ taps[i, j]
    out = acc.reshape(n, hp, wp, c_out)[:, :ho, :wo, :].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    inputs: tuple[Tensor, ...] = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        g4 = g if batched else g[None]
        gp = np.zeros((n, hp, wp, c_out), dtype=DTYPE)
        gp[:, :ho, :wo, :] = g4.transpose(0, 2, 3, 1)
        gflat = gp.reshape(-1, c_out)[:span]
        gx = np.zeros((rows, c), dtype=DTYPE)
        gk = np.empty((kh, kw, c, c_out), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                gk[i, j] = flat[off:off + span].T @ gflat
                gx[off:off + span] += gflat @ taps[i, j].T
        gx = gx.reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w, :]
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        grads = [gx if batched else gx[0], gk.transpose(3, 2, 0, 1).copy()]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return _record("conv2d", out if batched else out[0], inputs, rule)


def max_pool2d(x, k: int) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping k×k max-pool.

    Returns the pooled tensor and, per output cell, the row-major offset of
    the winning element inside its window. Ties go to the first maximum.
    """
    x = as_tensor(x)
    xd, batched = _as_batch(x)
    n, c, h, w = xd.shape
    if k < 1:
        raise ValueError("max_pool2d: k must be >= 1")
    if h % k:
        raise ValueError(f"max_pool2d: height H={h} not divisible by k={k}")
    if w % k:
        raise ValueError(f"max_pool2d: width W={w} not divisible by k={k}")
    ho, wo = h // k, w // k
    win = xd.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        g4 = g if batched else g[None]
        gw = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
        np.put_along_axis(gw, idx[..., None], g4[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx if batched else gx[0],)

    t = _record("max_pool2d", out if batched else out[0], (x,), rule)
    return t, (idx if batched else idx[0])


def transposed_conv2d(x, kernel, bias=None) -> Tensor:
    """2×2 stride-2 transposed convolution; doubles both spatial extents.

    ``out[co, 2i+a, 2j+b] = sum_ci x[ci, i, j] * kernel[ci, co, a, b] (+ bias[co])``
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, batched = _as_batch(x)
    n, c, h, w = xd.shape
    if kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ValueError(f"transposed_conv2d: kernel must be (C_in,C_out,2,2), got {kernel.shape}")
    c_in, c_out = kernel.shape[:2]
    if c_in != c:
        raise ValueError(f"transposed_conv2d: input channels C_in={c} but kernel expects {c_in}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"transposed_conv2d: bias length {bias.shape} != C_out={c_out}")
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    km = kernel.data.reshape(c_in, c_out * 4)
    ym = xm @ km  # (n*h*w, c_out*2*2)
    out = ym.reshape(n, h, w, c_out, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    inputs: tuple[Tensor, ...] = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        g4 = g if batched else g[None]
        gm = g4.reshape(n, c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c_out * 4)
        gx = (gm @ km.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gx = np.ascontiguousarray(gx)
        grads = [gx if batched else gx[0], (xm.T @ gm).reshape(kernel.shape)]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return _record("transposed_conv2d", out if batched else out[0], inputs, rule)


def concat_channels(a, b) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ValueError(f"concat_channels: incompatible ranks {a.shape} and {b.shape}")
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: spatial extents differ, {a.shape[-2:]} vs {b.shape[-2:]}")
    if a.ndim == 4 and a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_channels: batch sizes differ, {a.shape[0]} vs {b.shape[0]}")
    axis = a.ndim - 3
    c1 = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    lead = (slice(None),) * axis

    def rule(g):
        return g[lead + (slice(0, c1),)], g[lead + (slice(c1, None),)]

    return _record("concat_channels", out, (a, b), rule)


# -------------------------------------------------------------- test oracle


def finite_diff_grad(f: Callable[[], float], params: Iterable, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. each array in ``params``.

    ``f`` takes no arguments and reads the parameters, which are perturbed in
    place one coordinate at a time and restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = []
    for p in params:
        arr = p.data if isinstance(p, Tensor) else p
        g = np.zeros(arr.shape, dtype=DTYPE)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


# ------------------------------------------------------------ serialization

_MAGIC = b"TNSR v1"


def write_tensor(fp: BinaryIO, arr) -> None:
    """Write ``TNSR v1 <ndim> <d0> ...\\n`` then little-endian float64 data."""
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    header = " ".join([_MAGIC.decode(), str(a.ndim), *map(str, a.shape)]) + "\n"
    fp.write(header.encode("ascii"))
    fp.write(np.ascontiguousarray(a).tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    line = fp.readline()
    parts = line.split()
    if len(parts) < 3 or b" ".join(parts[:2]) != _MAGIC:
        raise ValueError(f"not a TNSR block: {line[:40]!r}")
    ndim = int(parts[2])
    shape = tuple(int(d) for d in parts[3:3 + ndim])
    if len(shape) != ndim:
        raise ValueError("TNSR header: dimension count mismatch")
    count = int(np.prod(shape, dtype=np.int64))
    raw = fp.read(count * struct.calcsize("<d"))
    if len(raw) != count * 8:
        raise ValueError("TNSR block truncated")
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)
