"""Minimal reverse-mode autodiff on float64 numpy arrays.

Values are wrapped in :class:`Node`; while a :class:`Tape` is installed
(``with Tape():``) every primitive op appends its adjoint to the tape.
Without an active tape the same functions are plain numpy computations,
which doubles as the fast inference path.

The primitive set is closed and auditable: affine maps, a handful of
elementwise functions, reductions, and the structural ops (gather,
concat, reshape, batched matmul, 3-vector cross) needed by the kinematic
chain and the sample-based losses.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Callable, Sequence

import numpy as np

_active_tape: "Tape | None" = None


class Node:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Node(shape={self.data.shape}, requires_grad={self.requires_grad})"

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


class Param(Node):
    """Named parameter with a persistent, pre-allocated gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


class Tape:
    """Ordered record of primitive ops; backward() replays them in reverse.

    A tape is single-use: the backward pass consumes it.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self):
        return len(self._records)

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, out: Node, seed=1.0) -> None:
        """Accumulate d(out)/d(leaf) into every reachable gradient buffer."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self._consumed = True
        seed_arr = np.broadcast_to(np.asarray(seed, dtype=np.float64), out.data.shape)
        if out.grad is None:
            out.grad = np.array(seed_arr)
        else:
            out.grad = out.grad + seed_arr
        for fn in reversed(self._records):
            fn()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    g = _unbroadcast(g, node.data.shape)
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _register(out: Node, bwd: Callable[[np.ndarray], None]) -> None:
    if _active_tape is None or not out.requires_grad:
        return

    def runner():
        if out.grad is not None:
            bwd(out.grad)

    _active_tape.record(runner)


# -- binary elementwise (broadcasting) ---------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.data + b.data, a.requires_grad or b.requires_grad)
    _register(out, lambda g: (_accum(a, g), _accum(b, g)))
    return out


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.data - b.data, a.requires_grad or b.requires_grad)
    _register(out, lambda g: (_accum(a, g), _accum(b, -g)))
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.data * b.data, a.requires_grad or b.requires_grad)
    _register(out, lambda g: (_accum(a, g * b.data), _accum(b, g * a.data)))
    return out


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.data / b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * out.data / b.data)

    _register(out, bwd)
    return out


def neg(a) -> Node:
    a = as_node(a)
    out = Node(-a.data, a.requires_grad)
    _register(out, lambda g: _accum(a, -g))
    return out


# -- elementwise unary --------------------------------------------------------

def relu(a) -> Node:
    a = as_node(a)
    out = Node(np.maximum(a.data, 0.0), a.requires_grad)
    # subgradient at 0 is 0
    _register(out, lambda g: _accum(a, g * (a.data > 0.0)))
    return out


def exp(a) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.data), a.requires_grad)
    _register(out, lambda g: _accum(a, g * out.data))
    return out


def log(a) -> Node:
    a = as_node(a)
    out = Node(np.log(a.data), a.requires_grad)
    _register(out, lambda g: _accum(a, g / a.data))
    return out


def sqrt(a) -> Node:
    a = as_node(a)
    out = Node(np.sqrt(a.data), a.requires_grad)
    _register(out, lambda g: _accum(a, g * 0.5 / out.data))
    return out


def arctan(a) -> Node:
    a = as_node(a)
    out = Node(np.arctan(a.data), a.requires_grad)
    _register(out, lambda g: _accum(a, g / (1.0 + a.data * a.data)))
    return out


def absolute(a) -> Node:
    a = as_node(a)
    out = Node(np.abs(a.data), a.requires_grad)
    # subgradient at 0 is 0, mirroring the relu convention
    _register(out, lambda g: _accum(a, g * np.sign(a.data)))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Node:
    a = as_node(a)
    out = Node(np.logaddexp(0.0, a.data), a.requires_grad)
    _register(out, lambda g: _accum(a, g * _sigmoid(a.data)))
    return out


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g: np.ndarray, axis, keepdims: bool, shape: tuple) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = Node(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    _register(out, lambda g: _accum(a, _expand_reduced(g, axis, keepdims, a.data.shape)))
    return out


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = Node(a.data.mean(axis=axis, keepdims=keepdims), a.requires_grad)
    scale = out.data.size / a.data.size

    def bwd(g):
        _accum(a, _expand_reduced(g * scale, axis, keepdims, a.data.shape))

    _register(out, bwd)
    return out


def sumsq(a, axis=None, keepdims: bool = False) -> Node:
    """Squared euclidean norm: sum(a**2) over the given axes."""
    a = as_node(a)
    out = Node((a.data * a.data).sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def bwd(g):
        _accum(a, _expand_reduced(g, axis, keepdims, a.data.shape) * (2.0 * a.data))

    _register(out, bwd)
    return out


# -- structural ---------------------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product with numpy batching semantics; operands must be >= 2-D."""
    a, b = as_node(a), as_node(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands of rank >= 2")
    out = Node(np.matmul(a.data, b.data), a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    _register(out, bwd)
    return out


def linear(x, w, b) -> Node:
    """Fused affine map x @ w + b (one tape record)."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    out = Node(np.matmul(x.data, w.data) + b.data,
               x.requires_grad or w.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(x, np.matmul(g, w.data.T))
        _accum(w, np.matmul(np.swapaxes(x.data, -1, -2), g))
        _accum(b, g)

    _register(out, bwd)
    return out


def reshape(a, shape) -> Node:
    a = as_node(a)
    out = Node(a.data.reshape(shape), a.requires_grad)
    _register(out, lambda g: _accum(a, g.reshape(a.data.shape)))
    return out


def transpose_last2(a) -> Node:
    a = as_node(a)
    out = Node(np.swapaxes(a.data, -1, -2), a.requires_grad)
    _register(out, lambda g: _accum(a, np.swapaxes(g, -1, -2)))
    return out


def concat(parts: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(p) for p in parts]
    out = Node(
        np.concatenate([n.data for n in nodes], axis=axis),
        any(n.requires_grad for n in nodes),
    )
    sizes = [n.data.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            _accum(n, piece)

    _register(out, bwd)
    return out


def gather(a, idx) -> Node:
    """a[idx] for a basic/advanced numpy index tuple.

    The adjoint scatter-adds, so duplicate indices accumulate correctly.
    """
    a = as_node(a)
    out = Node(a.data[idx], a.requires_grad)

    def bwd(g):
        buf = np.zeros_like(a.data)
        if (
            isinstance(idx, tuple)
            and len(idx) == 2
            and isinstance(idx[0], slice)
            and idx[0] == slice(None)
            and isinstance(idx[1], np.ndarray)
        ):
            # column permutation fast path (indices unique by construction)
            buf[:, idx[1]] = g
        else:
            np.add.at(buf, idx, g)
        _accum(a, buf)

    _register(out, bwd)
    return out


def repeat_rows(a, n: int) -> Node:
    """Repeat each leading-axis row n times: (B, ...) -> (B*n, ...)."""
    a = as_node(a)
    out = Node(np.repeat(a.data, n, axis=0), a.requires_grad)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape[0], n, *a.data.shape[1:]).sum(axis=1))

    _register(out, bwd)
    return out


def cross(a, b) -> Node:
    """Cross product along the last axis (length 3)."""
    a, b = as_node(a), as_node(b)
    out = Node(np.cross(a.data, b.data), a.requires_grad or b.requires_grad)

    def bwd(g):
        _accum(a, np.cross(b.data, g))
        _accum(b, np.cross(g, a.data))

    _register(out, bwd)
    return out


# -- parameters ---------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with gradient buffers and a version counter.

    Single writer during training; the version increments exactly once per
    optimizer step (see trainer.adam_step).
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.version = 0

    def create(self, name: str, value) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def params(self) -> list[Param]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def bump_version(self) -> None:
        self.version += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, value in state.items():
            p = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.data[...] = value


def init_linear(store: ParamStore, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False) -> tuple[Param, Param]:
    """Create (W, b) for one linear layer; uniform +-1/sqrt(fan_in) or zeros."""
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return store.create(f"{prefix}.w", w), store.create(f"{prefix}.b", np.zeros(fan_out))


def init_mlp(store: ParamStore, prefix: str, dims: Sequence[int],
             rng: np.random.Generator, zero_last: bool = True) -> list[tuple[Param, Param]]:
    """Stack of linear layers; the final layer starts at zero so the owning
    model begins as an identity/constant map."""
    layers = []
    for i in range(len(dims) - 1):
        zero = zero_last and i == len(dims) - 2
        layers.append(init_linear(store, f"{prefix}.l{i}", dims[i], dims[i + 1], rng, zero=zero))
    return layers


def mlp_forward(x, layers: Sequence[tuple[Node, Node]], activation: str = "relu") -> Node:
    """Affine stack with the activation between (not after) layers."""
    if activation != "relu":
        raise ValueError(f"unsupported activation: {activation}")
    x = as_node(x)
    d = x.data.shape[-1]
    for i, (w, _b) in enumerate(layers):
        if w.data.shape[0] != d:
            raise ValueError(
                f"mlp layer {i} expects input dim {w.data.shape[0]}, got {d}"
            )
        d = w.data.shape[1]
    out = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        out = linear(out, w, b)
        if i < last:
            out = relu(out)
    return out


# -- gradient checking ----------------------------------------------------------

def grad_check(f, point: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |cd|).

    ``f`` maps a float64 vector to ``(value, grad)`` where grad has the
    same shape as the input.
    """
    point = np.asarray(point, dtype=np.float64)
    value, grad = f(point)
    value = float(value)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value):
        raise ValueError("non-finite evaluation at the base point")
    worst = 0.0
    for i in range(point.size):
        xp = point.copy()
        xp.flat[i] += h
        xm = point.copy()
        xm.flat[i] -= h
        fp = float(f(xp)[0])
        fm = float(f(xm)[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        cd = (fp - fm) / (2.0 * h)
        err = abs(float(grad.flat[i]) - cd) / max(1.0, abs(cd))
        worst = max(worst, err)
    return worst


# -- checkpoint container --------------------------------------------------------

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: "ParamStore | dict[str, np.ndarray]",
                    metadata: dict | None = None) -> None:
    """Versioned binary container: magic, u32 version, JSON metadata block,
    per-parameter records (name, shape, row-major little-endian f64), and a
    trailing CRC32 of everything before it. Written atomically."""
    if isinstance(params, ParamStore):
        items = [(name, p.data) for name, p in zip(params.names(), params.params())]
    else:
        items = list(params.items())
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(items))
    for name, value in items:
        value = np.ascontiguousarray(value, dtype=np.float64)
        name_b = name.encode("utf-8")
        buf += struct.pack("<I", len(name_b))
        buf += name_b
        buf += struct.pack("<I", value.ndim)
        for dim in value.shape:
            buf += struct.pack("<I", dim)
        buf += value.astype("<f8", copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not an AFCK checkpoint: {path}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError(f"checkpoint CRC mismatch: {path}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    metadata = json.loads(blob[off:off + meta_len].decode("utf-8")) if meta_len else {}
    off += meta_len
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        out[name] = arr.astype(np.float64)
    return out, metadata
