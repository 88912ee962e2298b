"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every op checks its shape rules up front. Broadcasting is limited to a
python scalar (or 0-d tensor) combined with a tensor; anything else has to
be spelled out with ``expand``/``reshape``. The tape lives in thread-local
storage, so a graph must not be shared between threads.
"""

from __future__ import annotations

import contextlib
import enum
import math
import struct
import threading
from pathlib import Path

import numpy as np

DTYPE = np.float32
_NEG_INF = -1e30


class ShapeError(ValueError):
    """Inputs do not conform to an op's shape rules."""

    def __init__(self, kind, *shapes, detail=""):
        shape_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{kind}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DTYPE, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "out", "inputs", "backward")

    def __init__(self, kind, out, inputs, backward):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Operations recorded in execution order."""

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def record(self, kind, out, inputs, backward):
        self.nodes.append(_Node(kind, out, inputs, backward))

    def clear(self):
        self.nodes = []


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


@contextlib.contextmanager
def no_grad():
    g = current_graph()
    prev = g.enabled
    g.enabled = False
    try:
        yield
    finally:
        g.enabled = prev


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _is_scalar(x):
    return not isinstance(x, Tensor) or x.data.ndim == 0


def _make(kind, data, inputs, backward):
    """Wrap an op result and record it when any input needs a gradient."""
    g = current_graph()
    track = g.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        g.record(kind, out, inputs, backward)
    return out


# -- elementwise -------------------------------------------------------------

def _binary(kind, a, b, fwd, grad_a, grad_b):
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.ndim and b.ndim:
        if a.shape != b.shape:
            raise ShapeError(kind, a.shape, b.shape, "no implicit broadcasting")
    if not isinstance(a, Tensor):
        a, b = b, a
        grad_a, grad_b = grad_b, grad_a
    b_t = _as_tensor(b)
    av, bv = a.data, b_t.data
    out = fwd(av, bv)

    def backward(g):
        ga = grad_a(g, av, bv)
        gb = grad_b(g, av, bv)
        if a.ndim == 0 and ga is not None:
            ga = ga.sum()
        if b_t.ndim == 0 and gb is not None:
            gb = gb.sum()
        return ga, gb

    return _make(kind, out, (a, b_t), backward)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xv = x.data
    x2 = xv * xv
    th = np.tanh(c * xv * (1.0 + 0.044715 * x2))
    out = 0.5 * xv * (1.0 + th)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * du),)

    return _make("gelu", out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    xv = x.data
    sig = 1.0 / (1.0 + np.exp(-xv))
    out = xv * sig

    def backward(g):
        return (g * sig * (1.0 + xv * (1.0 - sig)),)

    return _make("silu", out, (x,), backward)


# -- contractions and normalisation -----------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` is either 2-D (one matrix shared by every leading index of ``a``)
    or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, "leading axes differ")
    av, bv = a.data, b.data
    out = av @ bv

    def backward(g):
        # frozen operands skip their product entirely
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def softmax_lastdim(x: Tensor, keep=None) -> Tensor:
    """Softmax over the last axis. ``keep`` is an optional boolean array,
    broadcastable to ``x``, marking entries allowed to receive mass."""
    xv = x.data
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        try:
            np.broadcast_shapes(keep.shape, xv.shape)
        except ValueError:
            raise ShapeError("softmax_lastdim", x.shape, keep.shape, "mask") from None
        xv = np.where(keep, xv, _NEG_INF)
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    if keep is not None:
        e = np.where(keep, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    y = y.astype(x.data.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax_lastdim", y, (x,), backward)


def rmsnorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each last-axis vector to unit root-mean-square (no gain)."""
    if x.ndim < 1:
        raise ShapeError("rmsnorm", x.shape)
    xv = x.data
    r = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    y = xv * r

    def backward(g):
        return (r * (g - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _make("rmsnorm", y, (x,), backward)


def bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` to every last-axis row of ``x``."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("bias", x.shape, b.shape)
    out = x.data + b.data

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make("bias", out, (x, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else bias(y, b)


# -- structural ---------------------------------------------------------------

def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *(t.shape for t in tensors))
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, tuple(tensors), backward)


def concat_lastdim(tensors) -> Tensor:
    return concat(tensors, axis=-1)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError("slice", x.shape, detail=f"[{start}:{stop}] on axis {ax}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make("slice", out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("permute", x.shape, detail=f"axes {axes}")
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make("permute", out, (x,), backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    ax = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)

    def backward(g):
        return (g.sum(axis=ax),)

    return _make("expand", out, (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather_rows", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("gather_rows", table.shape, ids.shape, "index out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("gather_rows", out, (table,), backward)


# -- reductions ---------------------------------------------------------------

def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum() / n, dtype=x.data.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return _make("mean", out, (x,), backward)


def sum_sq(x: Tensor) -> Tensor:
    xv = x.data
    out = np.asarray((xv * xv).sum(), dtype=xv.dtype)

    def backward(g):
        return (2.0 * g * xv,)

    return _make("sum_sq", out, (x,), backward)


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax_lastdim": softmax_lastdim,
    "rmsnorm": rmsnorm,
    "gelu": gelu,
    "concat_lastdim": lambda *ts: concat(ts, axis=-1),
    "slice": slice_,
    "reshape": reshape,
    "mean": mean,
    "sum_sq": sum_sq,
}


def op_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name; mostly useful for table-driven tests."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- differentiation ------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad ancestor of ``loss``.

    Gradients accumulate into leaves that already hold one. The tape is
    cleared afterwards, including on error.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    g = current_graph()
    try:
        if not g.nodes:
            raise RuntimeError("backward called on an empty graph")
        loss.grad = np.ones_like(loss.data)
        touched = []
        for node in reversed(g.nodes):
            gout = node.out.grad
            if gout is None:
                continue
            for t, gi in zip(node.inputs, node.backward(gout)):
                if not t.requires_grad:
                    continue
                touched.append(t)
                if gi is None:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                if t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
        for t in touched:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    finally:
        g.clear()


def grad_check(f, x: Tensor, eps: float = 1e-4, max_elements=None, seed=0) -> float:
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    The numeric side re-evaluates ``f`` with ``x`` promoted to float64, so
    every value depending on ``x`` is computed in double precision. ``x`` is
    mutated in place during the check and restored afterwards, which lets
    ``f`` close over a model that owns ``x``. Returns
    max |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    orig = x.data
    prev_flag, prev_grad = x.requires_grad, x.grad
    try:
        x.requires_grad = True
        x.grad = None
        out = f(x)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("non-finite function value")
        backward(out)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError("non-finite analytic gradient")

        base = orig.astype(np.float64)
        flat = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            flat = np.sort(np.random.default_rng(seed).choice(base.size, max_elements, replace=False))
        worst = 0.0
        with no_grad():
            for i in flat:
                idx = np.unravel_index(i, base.shape)
                vals = []
                for sign in (1.0, -1.0):
                    probe = base.copy()
                    probe[idx] += sign * eps
                    x.data = probe
                    vals.append(float(np.asarray(f(x).data, dtype=np.float64).reshape(-1)[0]))
                num = (vals[0] - vals[1]) / (2 * eps)
                if not math.isfinite(num):
                    raise FloatingPointError(f"non-finite numeric gradient at {idx}")
                err = abs(analytic[idx] - num) / max(1.0, abs(num))
                worst = max(worst, err)
        return worst
    finally:
        x.data = orig
        x.requires_grad = prev_flag
        x.grad = prev_grad
        current_graph().clear()


# -- parameter groups and checkpoints -------------------------------------------

class ParamGroup(enum.IntEnum):
    TXT_ATTN = 0
    IMG_ATTN = 1
    MM_OTHER = 2
    SINGLE_DIT = 3
    TOKEN_EMBED = 4
    OTHER = 5
    SCA = 6

    @property
    def label(self):
        return _GROUP_LABELS[self]

    @classmethod
    def from_label(cls, label):
        for g, name in _GROUP_LABELS.items():
            if name == label:
                return g
        raise ValueError(f"unknown parameter group {label!r}")


_GROUP_LABELS = {
    ParamGroup.TXT_ATTN: "TxtAttn",
    ParamGroup.IMG_ATTN: "ImgAttn",
    ParamGroup.MM_OTHER: "MMOther",
    ParamGroup.SINGLE_DIT: "SingleDiT",
    ParamGroup.TOKEN_EMBED: "TokenEmbed",
    ParamGroup.OTHER: "Other",
    ParamGroup.SCA: "SCA",
}

MAGIC = b"FFWT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, records) -> None:
    """Write ``(name, group, array)`` records in the FFWT1 layout.

    Per record: u32 name length, UTF-8 name, u8 group tag, u8 rank,
    rank x u64 extents, then the float32 payload; all little-endian.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, group, arr in records:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", int(group), arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read an FFWT1 file into a list of ``(name, ParamGroup, array)``."""
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    out = []
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            out.append((name, ParamGroup(tag), arr.astype(DTYPE)))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record at byte {pos}") from exc
    return out
