"""Reverse-mode differentiation over sparse-grid array operations.

Every value on the tape is a 2D ``(n_voxels, channels)`` float64 array (or a
0-d array for scalar losses) aligned with some :class:`~ntkdp.grid.DomainSet`.
Operations append a :class:`Node` holding the forward value and a closure that
maps the output cotangent to the parents' cotangents.  :meth:`Tape.backward`
never mutates the nodes, so it can be called repeatedly with different seeds,
which is how per-voxel tangent features are extracted.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from collections import OrderedDict
from functools import cached_property
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .grid import DomainSet, GridError, SparseGrid, coarse_dim, encode

LEAKY_SLOPE = 0.2
IN_EPS = 1e-5


class TapeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter tensors with gradient buffers of identical shape."""

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        pos = 0
        for p in self.params.values():
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, p in self.params.items():
            out[name] = slice(pos, pos + p.size)
            pos += p.size
        return out

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self.params.items():
            other.add(name, p.copy())
        return other


def init_conv(store: ParamStore, name: str, n_offsets: int, cin: int, cout: int,
              rng: np.random.Generator, zero_bias: bool = True) -> None:
    """Uniform in ``[-b, b]`` with ``b = sqrt(6 / fan_in)``; zero bias."""
    bound = np.sqrt(6.0 / (n_offsets * cin))
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(n_offsets, cin, cout)))
    store.add(f"{name}.bias", np.zeros(cout))


# --------------------------------------------------------------------------
# the tape


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    parents: tuple["Node", ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    param: str | None = None
    tape: "Tape" = field(default=None, repr=False)
    scope: str = ""

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


class Tape:
    def __init__(self, store: ParamStore | None = None):
        self.store = store
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}
        self.scope = ""

    def _push(self, kind, parents, value, vjp=None, param=None) -> Node:
        node = Node(len(self.nodes), kind, tuple(parents), value, vjp, param, self, self.scope)
        self.nodes.append(node)
        return node

    def release(self) -> None:
        """Drop the recorded graph.

        Nodes and the tape reference each other, so without this the
        activations wait for the cyclic garbage collector.
        """
        self.nodes = []
        self._param_nodes = {}

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    @contextmanager
    def scoped(self, name: str):
        """Label nodes created inside the block (used to inspect network topology)."""
        old, self.scope = self.scope, name
        try:
            yield
        finally:
            self.scope = old

    def constant(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._push("const", (), value)

    def variable(self, value) -> Node:
        """A differentiable leaf that is not a stored parameter (used for input gradients)."""
        value = np.asarray(value, dtype=np.float64)
        return self._push("input", (), value)

    def param(self, name: str) -> Node:
        if self.store is None:
            raise TapeError("tape has no parameter store")
        if name not in self._param_nodes:
            self._param_nodes[name] = self._push("param", (), self.store[name], param=name)
        return self._param_nodes[name]

    def backward(self, out: Node, seed: np.ndarray | None = None, accumulate: bool = True,
                 wrt: Sequence[Node] = ()) -> dict:
        """Propagate cotangents from ``out``.

        Parameter gradients are added into the store's gradient buffers when
        ``accumulate`` is true.  The returned dict maps parameter names and the
        ids of any nodes listed in ``wrt`` to their cotangents.
        """
        if out.tape is not self:
            raise TapeError("node belongs to another tape")
        if seed is None:
            if out.value.size != 1:
                raise TapeError("backward without a seed needs a scalar output")
            seed = np.ones_like(out.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out.value.shape:
            raise TapeError(f"seed shape {seed.shape} does not match output {out.value.shape}")
        want = {n.id for n in wrt}
        grads: dict[int, np.ndarray] = {out.id: seed}
        result: dict = {}
        for node in reversed(self.nodes[: out.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in want:
                result[node.id] = g
            if node.kind == "param":
                result[node.param] = g
                if accumulate:
                    self.store.grads[node.param] += g
                continue
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                assert parent.id < node.id, "tape order violated"
                if pg is None:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return result


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise TapeError("operands live on different tapes")
    return tape


# --------------------------------------------------------------------------
# convolution rulebooks


def cube_offsets(size: int) -> np.ndarray:
    r = np.arange(size)
    return np.array([(a, b, c) for a in r for b in r for c in r], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class ConvRule:
    """Gather table for a sparse convolution.

    ``neighbors[o, p]`` is the input row read by output ``p`` through kernel
    offset ``o``, or ``n_in`` (the zero row) when that input is absent.
    """

    in_domain: DomainSet
    out_domain: DomainSet
    offsets: np.ndarray
    neighbors: np.ndarray
    stride: int
    padding: int

    @property
    def pointwise(self) -> bool:
        return self.in_domain is self.out_domain and self.n_offsets == 1 and not self.offsets.any()

    @property
    def n_in(self) -> int:
        return len(self.in_domain)

    @property
    def n_out(self) -> int:
        return len(self.out_domain)

    @property
    def n_offsets(self) -> int:
        return len(self.offsets)

    @cached_property
    def active(self) -> np.ndarray:
        """Offsets that read at least one present input."""
        return np.flatnonzero(np.any(self.neighbors != self.n_in, axis=1))

    @cached_property
    def readers(self) -> np.ndarray:
        """``readers[o, i]``: the output row reading input ``i`` through offset ``o``, else ``n_out``.

        Each offset reads every input at most once, so the backward pass can
        gather through this table instead of scatter-adding.
        """
        inv = np.full((self.n_offsets, self.n_in + 1), self.n_out, dtype=np.int64)
        out_rows = np.arange(self.n_out)
        for o in range(self.n_offsets):
            inv[o, self.neighbors[o]] = out_rows
        inv = inv[:, : self.n_in]
        inv.setflags(write=False)
        return inv


def make_rule(in_domain: DomainSet, kernel: int | np.ndarray = 3, stride: int = 1,
              padding: int | None = None, out_domain: DomainSet | None = None) -> ConvRule:
    """Build the rulebook for ``y(p) = b + sum_o w[o] x(stride*p + o - padding)``.

    ``kernel`` is a cube size or an explicit ``(K, 3)`` array of offsets.
    With stride 1 the output domain is the input domain; with stride 2 it is
    the occupancy-pooled input domain.
    """
    offsets = cube_offsets(kernel) if np.isscalar(kernel) else np.asarray(kernel, np.int64)
    if padding is None:
        padding = (int(kernel) - 1) // 2 if np.isscalar(kernel) else 0
    if stride not in (1, 2):
        raise GridError("stride must be 1 or 2")
    if out_domain is None:
        if stride == 1:
            out_domain = in_domain
        else:
            coarse = encode(in_domain.coords // 2, coarse_dim(in_domain.dim))
            out_domain = DomainSet(coarse_dim(in_domain.dim), np.unique(coarse))
    base = out_domain.coords * stride - padding
    nbr = np.empty((len(offsets), len(out_domain)), dtype=np.int64)
    for o, off in enumerate(offsets):
        idx = in_domain.index_of(base + off)
        idx[idx < 0] = len(in_domain)
        nbr[o] = idx
    nbr.setflags(write=False)
    return ConvRule(in_domain, out_domain, offsets, nbr, stride, padding)


# --------------------------------------------------------------------------
# differentiable operations


def sparse_conv(x: Node, w: Node, b: Node | None, rule: ConvRule) -> Node:
    tape = _tape_of(x, w) if b is None else _tape_of(x, w, b)
    xv, wv = x.value, w.value
    if xv.shape[0] != rule.n_in:
        raise TapeError(f"input has {xv.shape[0]} rows, rule expects {rule.n_in}")
    if wv.shape[0] != rule.n_offsets or wv.shape[1] != xv.shape[1]:
        raise TapeError(f"channel mismatch: weights {wv.shape} vs input {xv.shape}")
    cin, cout = wv.shape[1], wv.shape[2]
    if rule.pointwise:
        return _pointwise_conv(tape, x, w, b)
    xpad = np.vstack([xv, np.zeros((1, cin))])
    active = rule.active
    y = np.zeros((rule.n_out, cout))
    for o in active:
        y += xpad[rule.neighbors[o]] @ wv[o]
    if b is not None:
        y += b.value

    def vjp(g):
        gw = np.zeros_like(wv)
        gx = np.zeros_like(xv)
        gpad = np.zeros((rule.n_out + 1, cin))
        readers = rule.readers
        for o in active:
            gw[o] = xpad[rule.neighbors[o]].T @ g
            gpad[:-1] = g @ wv[o].T
            gx += gpad[readers[o]]
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=0))
        return out

    parents = (x, w) if b is None else (x, w, b)
    return tape._push("conv", parents, y, vjp)


def _pointwise_conv(tape: Tape, x: Node, w: Node, b: Node | None) -> Node:
    xv, wv = x.value, w.value[0]
    y = xv @ wv
    if b is not None:
        y += b.value

    def vjp(g):
        out = [g @ wv.T, (xv.T @ g)[None]]
        if b is not None:
            out.append(g.sum(axis=0))
        return out

    parents = (x, w) if b is None else (x, w, b)
    return tape._push("conv", parents, y, vjp)


def instance_norm(x: Node, eps: float = IN_EPS) -> Node:
    xv = x.value
    if xv.shape[0] == 0:
        raise TapeError("instance norm over an empty domain")
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xv - mu) * inv

    def vjp(g):
        return [inv * (g - g.mean(axis=0) - xh * (g * xh).mean(axis=0))]

    return x.tape._push("instance_norm", (x,), xh, vjp)


def leaky_relu(x: Node, slope: float = LEAKY_SLOPE) -> Node:
    pos = x.value >= 0
    d = np.where(pos, 1.0, slope)

    def vjp(g):
        return [g * d]

    return x.tape._push("leaky_relu", (x,), x.value * d, vjp)


def concat_channels(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    if a.value.shape[0] != b.value.shape[0]:
        raise TapeError("concatenated grids must share a domain")
    ca = a.value.shape[1]

    def vjp(g):
        return [g[:, :ca], g[:, ca:]]

    return tape._push("concat", (a, b), np.hstack([a.value, b.value]), vjp)


def clip(x: Node, eta: float) -> Node:
    inside = (x.value > -eta) & (x.value < eta)

    def vjp(g):
        return [g * inside]

    return x.tape._push("clip", (x,), np.clip(x.value, -eta, eta), vjp)


def gather_rows(x: Node, index: np.ndarray, n_rows: int | None = None) -> Node:
    """``y[p] = x[index[p]]``; the adjoint scatters-adds back into ``x``."""
    index = np.asarray(index, dtype=np.int64)
    n = x.value.shape[0]

    def vjp(g):
        flat = np.zeros((n, g.shape[1]))
        for c in range(g.shape[1]):
            flat[:, c] = np.bincount(index, weights=g[:, c], minlength=n)
        return [flat]

    return x.tape._push("gather", (x,), x.value[index], vjp)


def linear_map(x: Node, mat: sparse.spmatrix, kind: str = "linear") -> Node:
    """``y = mat @ x`` for a fixed sparse operator (pooling, Laplacian)."""
    mat = sparse.csr_matrix(mat)
    mat_t = mat.T.tocsr()

    def vjp(g):
        return [mat_t @ g]

    return x.tape._push(kind, (x,), mat @ x.value, vjp)


def sq_norm(x: Node) -> Node:
    xv = x.value

    def vjp(g):
        return [2.0 * g * xv]

    return x.tape._push("sq_norm", (x,), np.asarray(np.sum(xv * xv)), vjp)


def masked_sq_diff(pred: Node, target: np.ndarray, rows: np.ndarray) -> Node:
    """``sum_r (pred[rows[r]] - target[r])^2`` over the channel-0 column."""
    rows = np.asarray(rows, dtype=np.int64)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if rows.size == 0:
        raise TapeError("empty mask")
    if target.size != rows.size:
        raise TapeError("target and mask sizes differ")
    diff = pred.value[rows, 0] - target
    shape = pred.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out[:, 0], rows, 2.0 * g * diff)
        return [out]

    return pred.tape._push("masked_sq", (pred,), np.asarray(np.sum(diff * diff)), vjp)


def masked_sq_loss(pred: Node, target: SparseGrid, mask_domain: DomainSet,
                   pred_domain: DomainSet) -> Node:
    """Squared difference summed over ``mask_domain``; ``pred`` rows follow ``pred_domain``."""
    if not len(mask_domain):
        raise TapeError("empty mask")
    t_idx = target.domain.index_of(mask_domain.coords)
    if np.any(t_idx < 0):
        raise TapeError("target missing on part of the mask")
    p_idx = pred_domain.index_of(mask_domain.coords)
    tv = target.values[t_idx, 0]
    if np.any(p_idx < 0):
        # prediction absent on a masked voxel reads as zero
        keep = p_idx >= 0
        missing = np.sum(tv[~keep] ** 2)
        core = masked_sq_diff(pred, tv[keep], p_idx[keep]) if keep.any() else None
        const = pred.tape.constant(missing)
        return const if core is None else add(core, const)
    return masked_sq_diff(pred, tv, p_idx)


def add(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)

    def vjp(g):
        return [g, g]

    return tape._push("add", (a, b), a.value + b.value, vjp)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def vjp(g):
        return [g * c]

    return a.tape._push("scale", (a,), a.value * c, vjp)


def total(nodes: Sequence[Node]) -> Node:
    out = nodes[0]
    for n in nodes[1:]:
        out = add(out, n)
    return out


def select(x: Node, row: int, channel: int = 0) -> Node:
    """The scalar ``x[row, channel]``."""
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[row, channel] = g
        return [out]

    return x.tape._push("select", (x,), np.asarray(x.value[row, channel]), vjp)


def jacobian_row(tape: Tape, output: Node, row: int, channel: int = 0) -> np.ndarray:
    """Gradient of one output entry with respect to every stored parameter, flattened."""
    seed = np.zeros_like(output.value)
    seed[row, channel] = 1.0
    grads = tape.backward(output, seed, accumulate=False)
    store = tape.store
    return np.concatenate([
        grads[name].ravel() if name in grads else np.zeros(p.size)
        for name, p in store.params.items()
    ])


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, lr: float, state: AdamState) -> None:
    """One bias-corrected Adam update in place, using ``store.grads``."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in store.params.items():
        g = store.grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# NTKP v1 checkpoints

_MAGIC = b"NTKP"


def save_checkpoint(path, store: ParamStore) -> None:
    parts = [_MAGIC, struct.pack("<IIQ", 1, len(store), store.size)]
    for name, p in store.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ParamStore:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise TapeError(f"truncated or corrupt checkpoint: {exc}") from None


def _parse_checkpoint(data: bytes) -> ParamStore:
    if data[:4] != _MAGIC:
        raise TapeError("not an NTKP checkpoint")
    version, n_tensors, n_values = struct.unpack_from("<IIQ", data, 4)
    if version != 1:
        raise TapeError(f"unsupported NTKP version {version}")
    pos = 4 + 16
    store = ParamStore()
    for _ in range(n_tensors):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if name in store:
            raise TapeError(f"duplicate tensor {name!r}")
        store.add(name, arr.astype(np.float64))
    if store.size != n_values:
        raise TapeError("checkpoint parameter count does not match its payload")
    if pos != len(data):
        raise TapeError("trailing bytes after the last tensor")
    return store
