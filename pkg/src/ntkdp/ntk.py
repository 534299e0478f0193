"""Empirical tangent kernels of the completion network and the checks built on them."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import tape as T
from .grid import DomainSet
from .net import DeepPriorNet, NetPlan, NetworkConfig
from .surface import TriMesh, sample_surface, voxel_to_world, world_to_voxel, write_ply

DEFAULT_SAMPLE_CAP = 512
PINV_RTOL = 1e-10
ROW_BUDGET_BYTES = 512 * 2**20  # Jacobian rows beyond this spill to a disk-backed buffer
CHUNK_COLUMNS = 2**17


class NtkError(ValueError):
    pass


@dataclass
class KernelGram:
    ids: list
    K: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.K.shape != (len(self.ids), len(self.ids)):
            raise NtkError("gram shape does not match the sample list")

    def __len__(self) -> int:
        return len(self.ids)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.K)[0]) if len(self) else 0.0

    def is_psd(self) -> bool:
        n = len(self)
        return n == 0 or self.min_eigenvalue() >= -1e-8 * float(np.trace(self.K)) / n

    def correlation(self) -> np.ndarray:
        return normalized(self.K)

    def write_csv(self, path) -> None:
        lines = [",".join(self.ids)]
        lines += [",".join(repr(float(v)) for v in row) for row in self.K]
        Path(path).write_text("\n".join(lines) + "\n")


def read_gram_csv(path) -> KernelGram:
    rows = Path(path).read_text().splitlines()
    ids = rows[0].split(",") if rows and rows[0] else []
    K = np.array([[float(v) for v in r.split(",")] for r in rows[1:] if r], dtype=np.float64)
    return KernelGram(ids, K.reshape(len(ids), len(ids)))


def normalized(K: np.ndarray) -> np.ndarray:
    """``K_ij / sqrt(K_ii K_jj)`` with zero where a diagonal entry vanishes."""
    d = np.sqrt(np.clip(np.diag(K), 0.0, None))
    denom = np.outer(d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, K / np.where(denom > 0, denom, 1.0), 0.0)


# --------------------------------------------------------------------------
# Jacobian features


class _RowBuffer:
    """``(n, P)`` float64 rows kept in memory, or in a temporary memmap when large."""

    def __init__(self, n: int, p: int, budget: int = ROW_BUDGET_BYTES):
        self._tmp = None
        if n * p * 8 > budget:
            fd, self._tmp = tempfile.mkstemp(suffix=".jac")
            os.close(fd)
            self.rows = np.memmap(self._tmp, dtype=np.float64, mode="w+", shape=(n, p))
        else:
            self.rows = np.zeros((n, p))

    def gram(self) -> np.ndarray:
        n, p = self.rows.shape
        K = np.zeros((n, n))
        for start in range(0, p, CHUNK_COLUMNS):
            block = np.asarray(self.rows[:, start : start + CHUNK_COLUMNS])
            K += block @ block.T
        return 0.5 * (K + K.T)

    def close(self) -> None:
        if self._tmp is not None:
            del self.rows
            Path(self._tmp).unlink(missing_ok=True)
            self._tmp = None


@dataclass
class SampleSet:
    """Output rows of one instance whose tangent features enter a Gram matrix."""

    plan: NetPlan
    noise: list
    rows: np.ndarray
    instance: int = 0
    scale: int = 0

    def coords(self) -> np.ndarray:
        return self.plan.domains[self.scale].coords[self.rows]

    def ids(self) -> list[str]:
        return [f"i{self.instance}_{a}_{b}_{c}" for a, b, c in self.coords().tolist()]


def jacobian_rows(net: DeepPriorNet, samples: SampleSet):
    """Yield the flattened parameter gradient of each sampled output voxel."""
    dom = samples.plan.domains[samples.scale]
    rows = np.asarray(samples.rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= len(dom)):
        raise NtkError("sample voxel outside the output domain")
    with T.Tape(net.store) as tape:
        out = net.forward(tape, samples.plan, samples.noise).outputs[samples.scale]
        for r in rows:
            yield T.jacobian_row(tape, out, int(r))


def gram(net: DeepPriorNet, samples: SampleSet | list, cap: int = DEFAULT_SAMPLE_CAP) -> KernelGram:
    """Tangent-kernel Gram matrix over one or several sample sets at the current parameters."""
    sets = [samples] if isinstance(samples, SampleSet) else list(samples)
    n = sum(len(s.rows) for s in sets)
    if n > cap:
        raise NtkError(f"{n} samples exceed the gram cap of {cap}")
    buf = _RowBuffer(n, net.store.size)
    try:
        i = 0
        ids = []
        for s in sets:
            for row in jacobian_rows(net, s):
                buf.rows[i] = row
                i += 1
            ids += s.ids()
        return KernelGram(ids, buf.gram())
    finally:
        buf.close()


def sample_voxels(mesh: TriMesh, domain: DomainSet, n: int, seed: int = 0) -> np.ndarray:
    """Rows of ``domain`` nearest to area-weighted surface samples, unique, in draw order."""
    if not len(domain):
        raise NtkError("empty output domain")
    tree = cKDTree(domain.coords.astype(np.float64))
    picked: list[int] = []
    seen = set()
    for attempt in range(8):
        pts = sample_surface(mesh, 4 * n, seed + attempt).points
        _, idx = tree.query(world_to_voxel(pts, domain.dim))
        for r in idx.tolist():
            if r not in seen:
                seen.add(r)
                picked.append(r)
                if len(picked) == n:
                    return np.array(picked, dtype=np.int64)
    return np.array(picked, dtype=np.int64)


# --------------------------------------------------------------------------
# 1D convolution oracle


@dataclass
class Conv1dSpec:
    """Stride-1 zero-padded 1D CNN; the output is channel 0 of the last layer."""

    channels: tuple  # C^(0) .. C^(L)
    size: int  # P, unchanged by every layer
    filters: tuple  # odd Q^(h) per layer
    weights: list = field(default_factory=list)  # theta^(h): (C_out, C_in, Q)
    biases: list = field(default_factory=list)
    activation: str = "leaky_relu"
    slope: float = T.LEAKY_SLOPE

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.filters = tuple(int(q) for q in self.filters)
        if len(self.filters) != self.n_layers or self.n_layers < 1:
            raise NtkError("need one filter size per layer")
        if any(q % 2 == 0 or q < 1 for q in self.filters):
            raise NtkError("filter sizes must be odd")
        if self.activation not in ("linear", "leaky_relu"):
            raise NtkError(f"unknown activation {self.activation!r}")
        for h, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.channels[h + 1], self.channels[h], self.filters[h]) or b.shape != (self.channels[h + 1],):
                raise NtkError(f"layer {h + 1} parameters have inconsistent shapes")

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    @classmethod
    def random(cls, rng: np.random.Generator, layers: int, max_channels: int = 4, size: int = 16,
               activation: str = "leaky_relu") -> "Conv1dSpec":
        chans = tuple(int(c) for c in rng.integers(1, max_channels + 1, size=layers + 1))
        filters = tuple(int(q) for q in rng.choice([1, 3, 5], size=layers))
        ws = [rng.normal(size=(chans[h + 1], chans[h], filters[h])) / math.sqrt(chans[h] * filters[h])
              for h in range(layers)]
        bs = [rng.normal(size=chans[h + 1]) * 0.1 for h in range(layers)]
        return cls(chans, size, filters, ws, bs, activation)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _act(self, z):
        if self.activation == "linear":
            return z
        return np.where(z >= 0, z, self.slope * z)

    def _dact(self, z):
        if self.activation == "linear":
            return np.ones_like(z)
        return np.where(z >= 0, 1.0, self.slope)


def structure_tensor(p_in: int, p_out: int, q: int) -> np.ndarray:
    """``S[i, j, k] = 1`` iff ``i = j - (q - 1)/2 + k``; zero padding falls off the ends."""
    S = np.zeros((p_in, p_out, q))
    half = (q - 1) // 2
    for j in range(p_out):
        for k in range(q):
            i = j - half + k
            if 0 <= i < p_in:
                S[i, j, k] = 1.0
    return S


def analytic_jacobian_1d(spec: Conv1dSpec, x: np.ndarray) -> list[list[np.ndarray]]:
    """Per-output-point parameter gradients via explicit structure-tensor contractions.

    Returns, for each output point, the list ``[dtheta^(1), db^(1), ...]``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(spec.channels[0], spec.size)
    P = spec.size
    tensors = [structure_tensor(P, P, q) for q in spec.filters]
    acts, pre = [x], []
    for h in range(spec.n_layers):
        # x~[c, j] = sum_{i, ci, k} S[i, j, k] x[ci, i] theta[c, ci, k] + b[c]
        z = np.einsum("ijk,ai,cak->cj", tensors[h], acts[-1], spec.weights[h]) + spec.biases[h][:, None]
        pre.append(z)
        acts.append(spec._act(z) if h < spec.n_layers - 1 else z)
    out = []
    for p in range(P):
        g = np.zeros((spec.channels[-1], P))
        g[0, p] = 1.0
        grads: list = [None] * (2 * spec.n_layers)
        for h in range(spec.n_layers - 1, -1, -1):
            S = tensors[h]
            grads[2 * h] = np.einsum("ijk,ai,cj->cak", S, acts[h], g)
            grads[2 * h + 1] = g.sum(axis=1)
            if h > 0:
                gx = np.einsum("ijk,cak,cj->ai", S, spec.weights[h], g)
                g = gx * spec._dact(pre[h - 1])
        out.append(grads)
    return out


def analytic_gram_1d(spec: Conv1dSpec, x: np.ndarray) -> KernelGram:
    rows = [np.concatenate([g.ravel() for g in grads]) for grads in analytic_jacobian_1d(spec, x)]
    J = np.array(rows)
    K = J @ J.T
    return KernelGram([f"p{i}" for i in range(spec.size)], 0.5 * (K + K.T))


def _tape_1d(spec: Conv1dSpec, x: np.ndarray):
    """Forward the 1D network on the tape using the sparse 3D operators along one axis."""
    P = spec.size
    store = T.ParamStore()
    for h in range(spec.n_layers):
        # tape weights are (offset, C_in, C_out)
        store.add(f"l{h + 1}.weight", np.transpose(spec.weights[h], (2, 1, 0)).copy())
        store.add(f"l{h + 1}.bias", spec.biases[h].copy())
    dom = DomainSet.from_coords(np.c_[np.arange(P), np.zeros((P, 2), np.int64)], P)
    tape = T.Tape(store)
    h_node = tape.constant(np.asarray(x, dtype=np.float64).reshape(spec.channels[0], P).T)
    for h in range(spec.n_layers):
        q = spec.filters[h]
        offsets = np.c_[np.arange(q) - (q - 1) // 2, np.zeros((q, 2), np.int64)]
        rule = T.make_rule(dom, kernel=offsets, padding=0)
        h_node = T.sparse_conv(h_node, tape.param(f"l{h + 1}.weight"), tape.param(f"l{h + 1}.bias"), rule)
        if h < spec.n_layers - 1 and spec.activation == "leaky_relu":
            h_node = T.leaky_relu(h_node, spec.slope)
    return tape, h_node


def tape_jacobian_1d(spec: Conv1dSpec, x: np.ndarray) -> np.ndarray:
    """``(P, n_params)`` Jacobian from the tape, parameters ordered layer by layer as (theta, b)."""
    tape, out = _tape_1d(spec, x)
    rows = []
    for p in range(spec.size):
        seed = np.zeros_like(out.value)
        seed[p, 0] = 1.0
        g = tape.backward(out, seed, accumulate=False)
        parts = []
        for h in range(spec.n_layers):
            parts.append(np.transpose(g[f"l{h + 1}.weight"], (2, 1, 0)).ravel())
            parts.append(g[f"l{h + 1}.bias"].ravel())
        rows.append(np.concatenate(parts))
    return np.array(rows)


def tape_gram_1d(spec: Conv1dSpec, x: np.ndarray) -> KernelGram:
    J = tape_jacobian_1d(spec, x)
    K = J @ J.T
    return KernelGram([f"p{i}" for i in range(spec.size)], 0.5 * (K + K.T))


def relative_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else float(np.linalg.norm(a - b))


def receptive_overlap(spec: Conv1dSpec | int, depth: int, distance: int) -> int:
    """Shared input length of two outputs ``distance`` apart, ``depth`` layers down."""
    if depth < 0 or distance < 0:
        raise NtkError("depth and distance must be non-negative")
    if isinstance(spec, Conv1dSpec):
        if depth > spec.n_layers:
            raise NtkError("depth exceeds the layer count")
        radius = sum((q - 1) // 2 for q in spec.filters[spec.n_layers - depth :])
    else:
        radius = depth * (int(spec) - 1) // 2
    return max(0, 2 * radius + 1 - distance)


# --------------------------------------------------------------------------
# kernel dynamics and regression


@dataclass(frozen=True)
class DynamicsResult:
    lr: float
    residual: float
    informative: bool = True


def verify_dynamics(net: DeepPriorNet, samples: SampleSet, targets: np.ndarray, lr: float,
                    K: np.ndarray | None = None) -> DynamicsResult:
    """Compare one plain gradient step on ``0.5 * ||y - u||^2`` with ``lr * K (u - y)``."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    rows = np.asarray(samples.rows, dtype=np.int64)
    if targets.size != rows.size:
        raise NtkError("one target per sample is required")
    if K is None:
        K = gram(net, samples, cap=max(DEFAULT_SAMPLE_CAP, rows.size)).K
    store = net.store
    theta = store.flat()
    with T.Tape(store) as tape:
        out = net.forward(tape, samples.plan, samples.noise).outputs[samples.scale]
        y0 = out.value[rows, 0].copy()
        loss = T.scale(T.masked_sq_diff(out, targets, rows), 0.5)
        grads = tape.backward(loss, accumulate=False)
    step = np.concatenate([
        grads[name].ravel() if name in grads else np.zeros(p.size) for name, p in store.params.items()
    ])
    try:
        store.set_flat(theta - lr * step)
        y1 = net.predict(samples.plan, samples.noise)[samples.scale].values[rows, 0]
    finally:
        store.set_flat(theta)
    expected = lr * (K @ (targets - y0))
    denom = float(np.linalg.norm(expected))
    if denom < 1e-12:
        return DynamicsResult(lr, float("nan"), informative=False)
    return DynamicsResult(lr, float(np.linalg.norm((y1 - y0) - expected)) / denom)


def loglog_slope(a: DynamicsResult, b: DynamicsResult) -> float:
    return math.log(b.residual / a.residual) / math.log(b.lr / a.lr)


PROBE_NET = {"encoder_sizes": ((6, 6),), "noise_channels": 8}


def dynamics_probe(seed: int = 0, dim: int = 12, warmup: int = 100, warmup_lr: float = 2e-3,
                   n_samples: int = 4, lrs: tuple = (1e-4, 5e-5)) -> list[DynamicsResult]:
    """Kernel-dynamics check on a small network fitted briefly to a cube shell.

    At initialisation the instance-normalised network has a large kernel
    spectrum and the linear prediction breaks down after a single step, so the
    probe first runs ``warmup`` Adam steps on the shell's known voxels.
    """
    net = DeepPriorNet(NetworkConfig(**PROBE_NET), seed)
    dom = DomainSet.full(dim)
    plan = net.plan(dom)
    noise = net.noise(plan, seed + 1)
    c = dom.coords.astype(np.float64)
    half = (dim - 1) / 2
    u = np.clip((np.linalg.norm(c - half, axis=1) - (half - 2)) / 3, -1.0, 1.0)
    known = np.flatnonzero(np.abs(u) < 1)
    state = T.AdamState()
    for _ in range(warmup):
        net.store.zero_grad()
        with T.Tape(net.store) as tape:
            out = net.forward(tape, plan, noise).outputs[0]
            loss = T.scale(T.masked_sq_diff(out, u[known], known), 1.0 / known.size)
            tape.backward(loss)
        T.adam_step(net.store, warmup_lr, state)
    rows = np.sort(np.random.default_rng(seed).choice(known, n_samples, replace=False))
    samples = SampleSet(plan, noise, rows)
    K = gram(net, samples).K
    return [verify_dynamics(net, samples, u[rows], lr, K) for lr in lrs]


def pinv_psd(K: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    lam, vec = np.linalg.eigh(0.5 * (K + K.T))
    lmax = lam.max() if lam.size else 0.0
    keep = lam > rtol * lmax
    return (vec[:, keep] / lam[keep]) @ vec[:, keep].T


def kernel_regress(K: np.ndarray, labels: np.ndarray, query) -> np.ndarray:
    """Kernel regression ``k(x, X) K^+ u``.

    ``query`` is either row indices into ``K`` (training points) or an explicit
    ``(m, n)`` cross-kernel block.
    """
    K = np.asarray(K, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size != K.shape[0]:
        raise NtkError("one label per training sample is required")
    q = np.asarray(query)
    cross = K[q.astype(np.int64)] if q.ndim == 1 else q.astype(np.float64)
    return cross @ (pinv_psd(K) @ labels)


# --------------------------------------------------------------------------
# kernel PCA and smoothness


@dataclass
class PcaEmbedding:
    coords: np.ndarray  # (n, k)
    eigenvalues: np.ndarray  # (k,), descending
    colors: np.ndarray | None  # (n, 3) in [0, 1] when k == 3


def center_gram(K: np.ndarray) -> np.ndarray:
    n = K.shape[0]
    H = np.eye(n) - np.full((n, n), 1.0 / n)
    Kc = H @ K @ H
    return 0.5 * (Kc + Kc.T)


def kernel_pca(K: np.ndarray, k: int = 3) -> PcaEmbedding:
    """Top-``k`` kernel principal coordinates with 3-sigma clamped colours."""
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if not 1 <= k <= n:
        raise NtkError("k must lie in [1, n]")
    lam, vec = np.linalg.eigh(center_gram(K))
    order = np.argsort(-lam, kind="stable")[:k]
    lam, vec = lam[order], vec[:, order]
    for c in range(k):
        nz = np.flatnonzero(np.abs(vec[:, c]) > 1e-12)
        if nz.size and vec[nz[0], c] < 0:
            vec[:, c] = -vec[:, c]
    coords = vec * np.sqrt(np.clip(lam, 0.0, None))
    colors = None
    if k == 3:
        sigma = float(np.std(coords[:, 0]))
        clamped = np.clip(coords, -3 * sigma, 3 * sigma)
        lo, hi = float(clamped.min()), float(clamped.max())
        colors = np.full_like(clamped, 0.5) if hi <= lo else (clamped - lo) / (hi - lo)
    return PcaEmbedding(coords, lam, colors)


@dataclass(frozen=True)
class Smoothness:
    near_mean: float
    far_mean: float

    @property
    def contrast(self) -> float:
        return self.near_mean - self.far_mean


def smoothness_score(K: np.ndarray, coords: np.ndarray, neighbors: int = 5, seed: int = 0) -> Smoothness:
    """Mean normalised correlation over nearest-neighbour pairs versus random pairs."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if n < 2:
        raise NtkError("need at least two samples")
    C = normalized(np.asarray(K, dtype=np.float64))
    k = min(neighbors, n - 1)
    _, idx = cKDTree(coords).query(coords, k=k + 1)
    near_i, near_j = [], []
    for i in range(n):
        others = [j for j in np.atleast_1d(idx[i]).tolist() if j != i][:k]
        near_i += [i] * len(others)
        near_j += others
    rng = np.random.default_rng(seed)
    m = len(near_i)
    a = rng.integers(0, n, size=m)
    b = (a + rng.integers(1, n, size=m)) % n  # uniform over pairs with a != b
    return Smoothness(float(C[near_i, near_j].mean()), float(C[a, b].mean()))


def cross_correlation(K: np.ndarray, first: np.ndarray, second: np.ndarray) -> float:
    """Mean normalised kernel correlation between two disjoint sample groups."""
    C = normalized(np.asarray(K, dtype=np.float64))
    return float(C[np.ix_(first, second)].mean())


# --------------------------------------------------------------------------
# outputs


def write_pca_ply(path, samples_world: np.ndarray, emb: PcaEmbedding) -> None:
    write_ply(path, samples_world, emb.colors)


def write_scatter(path, ids: list, emb: PcaEmbedding) -> None:
    lines = ["sample_id,pc1,pc2"]
    second = emb.coords[:, 1] if emb.coords.shape[1] > 1 else np.zeros(len(ids))
    for sid, a, b in zip(ids, emb.coords[:, 0].tolist(), second.tolist()):
        lines.append(f"{sid},{a!r},{b!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_dynamics(path, results: list[DynamicsResult]) -> None:
    lines = ["lr residual"]
    lines += [f"{r.lr!r} {r.residual!r}" if r.informative else f"{r.lr!r} converged, probe uninformative"
              for r in results]
    if len(results) == 2 and all(r.informative for r in results):
        lines.append(f"slope {loglog_slope(results[0], results[1])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def sample_world(samples: SampleSet) -> np.ndarray:
    return voxel_to_world(samples.coords(), samples.plan.domains[samples.scale].dim)
