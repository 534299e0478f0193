"""Sparse voxel lattices and the non-differentiable spatial operations on them.

A lattice of side ``H`` is addressed by integer coordinates ``(i, j, k)`` with
``0 <= i, j, k < H``.  Every coordinate is mapped to the linear key
``(i * H + j) * H + k``; sets of coordinates are stored as sorted, unique key
arrays, which gives a deterministic lexicographic traversal order for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage, sparse

# 26-neighbourhood and 6-neighbourhood offsets, in lexicographic order.
BOX_OFFSETS = np.array(
    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64
)
FACE_OFFSETS = np.array(
    [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64
)


class GridError(ValueError):
    pass


def coarse_dim(dim: int) -> int:
    return (dim + 1) // 2


def encode(coords: np.ndarray, dim: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (coords[:, 0] * dim + coords[:, 1]) * dim + coords[:, 2]


def decode(keys: np.ndarray, dim: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    k = keys % dim
    j = (keys // dim) % dim
    i = keys // (dim * dim)
    return np.stack([i, j, k], axis=1)


def in_bounds(coords: np.ndarray, dim: int) -> np.ndarray:
    coords = np.asarray(coords)
    return np.all((coords >= 0) & (coords < dim), axis=1)


@dataclass(frozen=True, eq=False)
class DomainSet:
    """A finite set of lattice coordinates inside a cube of side ``dim``."""

    dim: int
    keys: np.ndarray = field(repr=False)

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.int64)
        if keys.ndim != 1:
            raise GridError("domain keys must be one-dimensional")
        if keys.size and (keys[0] < 0 or keys[-1] >= self.dim**3):
            raise GridError("domain key out of bounds")
        keys.setflags(write=False)
        object.__setattr__(self, "keys", keys)

    @classmethod
    def empty(cls, dim: int) -> "DomainSet":
        return cls(dim, np.zeros(0, dtype=np.int64))

    @classmethod
    def from_coords(cls, coords, dim: int) -> "DomainSet":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if not np.all(in_bounds(coords, dim)):
            raise GridError(f"coordinates outside a lattice of side {dim}")
        return cls(dim, np.unique(encode(coords, dim)))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "DomainSet":
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3 or len(set(mask.shape)) != 1:
            raise GridError("mask must be a cubic 3D array")
        return cls(mask.shape[0], np.flatnonzero(mask.ravel()))

    @classmethod
    def full(cls, dim: int) -> "DomainSet":
        return cls(dim, np.arange(dim**3, dtype=np.int64))

    @property
    def coords(self) -> np.ndarray:
        return decode(self.keys, self.dim)

    def to_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim**3, dtype=bool)
        mask[self.keys] = True
        return mask.reshape(self.dim, self.dim, self.dim)

    def __len__(self) -> int:
        return int(self.keys.size)

    def __iter__(self):
        return (tuple(int(v) for v in c) for c in self.coords)

    def __contains__(self, coord) -> bool:
        coord = np.asarray(coord).reshape(1, 3)
        if not in_bounds(coord, self.dim)[0]:
            return False
        return bool(self.index_of(coord)[0] >= 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DomainSet):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.keys, other.keys)

    def __hash__(self):
        return hash((self.dim, self.keys.tobytes()))

    def _check(self, other: "DomainSet"):
        if other.dim != self.dim:
            raise GridError(f"lattice size mismatch: {self.dim} vs {other.dim}")

    def union(self, other: "DomainSet") -> "DomainSet":
        self._check(other)
        return DomainSet(self.dim, np.union1d(self.keys, other.keys))

    def difference(self, other: "DomainSet") -> "DomainSet":
        self._check(other)
        return DomainSet(self.dim, np.setdiff1d(self.keys, other.keys, assume_unique=True))

    def intersection(self, other: "DomainSet") -> "DomainSet":
        self._check(other)
        return DomainSet(self.dim, np.intersect1d(self.keys, other.keys, assume_unique=True))

    __or__ = union
    __sub__ = difference
    __and__ = intersection

    def issubset(self, other: "DomainSet") -> bool:
        self._check(other)
        return bool(np.all(np.isin(self.keys, other.keys, assume_unique=True)))

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each coordinate in this set, ``-1`` where absent or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        ok = in_bounds(coords, self.dim)
        out = np.full(len(coords), -1, dtype=np.int64)
        if not ok.any() or not len(self):
            return out
        keys = encode(coords[ok], self.dim)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self) - 1)
        hit = self.keys[pos_c] == keys
        sub = np.where(hit, pos_c, -1)
        out[ok] = sub
        return out


@dataclass(eq=False)
class SparseGrid:
    """Multi-channel values attached to the members of a :class:`DomainSet`.

    ``values[n]`` belongs to ``domain.coords[n]``.  Coordinates outside the
    domain are *not in the domain*; that is different from storing zero.
    """

    domain: DomainSet
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != len(self.domain):
            raise GridError(
                f"values of shape {values.shape} do not match a domain of {len(self.domain)} voxels"
            )
        if values.shape[1] < 1:
            raise GridError("a grid needs at least one channel")
        self.values = values

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def coords(self) -> np.ndarray:
        return self.domain.coords

    def __len__(self) -> int:
        return len(self.domain)

    @classmethod
    def constant(cls, domain: DomainSet, value: float, channels: int = 1) -> "SparseGrid":
        return cls(domain, np.full((len(domain), channels), float(value)))

    @classmethod
    def from_dense(cls, dense: np.ndarray, domain: DomainSet | None = None) -> "SparseGrid":
        """Sample a dense ``(H, H, H[, C])`` array on ``domain`` (all voxels when omitted)."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim == 3:
            dense = dense[..., None]
        dim = dense.shape[0]
        if domain is None:
            domain = DomainSet.full(dim)
        flat = dense.reshape(dim**3, dense.shape[-1])
        return cls(domain, flat[domain.keys])

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full((self.dim**3, self.channels), fill, dtype=np.float64)
        out[self.domain.keys] = self.values
        return out.reshape(self.dim, self.dim, self.dim, self.channels)

    def value_at(self, coord) -> np.ndarray:
        idx = self.domain.index_of(np.asarray(coord).reshape(1, 3))[0]
        if idx < 0:
            raise KeyError(tuple(coord))
        return self.values[idx]

    def restrict(self, domain: DomainSet) -> "SparseGrid":
        idx = self.domain.index_of(domain.coords)
        if np.any(idx < 0):
            missing = domain.coords[np.argmax(idx < 0)]
            raise GridError(f"voxel {tuple(int(v) for v in missing)} is not in the grid")
        return SparseGrid(domain, self.values[idx])


@dataclass(eq=False)
class MaskedTsdf:
    """A completion problem: known narrowband values, vacant voxels and the completion domain.

    ``values`` is a single-channel grid over ``omega``; the binary mask is 1 on
    ``omega`` and 0 on ``domain - omega``.
    """

    dim: int
    tau_voxels: float
    values: SparseGrid
    vacant: DomainSet
    domain: DomainSet

    def __post_init__(self):
        if self.domain is None:
            self.domain = DomainSet.empty(self.dim)

    @property
    def omega(self) -> DomainSet:
        return self.values.domain

    def mask(self, domain: DomainSet | None = None) -> SparseGrid:
        domain = self.domain if domain is None else domain
        return SparseGrid(domain, np.isin(domain.keys, self.omega.keys).astype(np.float64))

    def validate(self) -> "MaskedTsdf":
        om = self.omega
        if om.dim != self.dim or self.vacant.dim != self.dim or self.domain.dim != self.dim:
            raise GridError("all sets must live on the same lattice")
        if self.values.channels != 1:
            raise GridError("TSDF values must be single-channel")
        if np.any(np.abs(self.values.values) > 1.0):
            raise GridError("TSDF values must lie in [-1, 1]")
        if len(om & self.vacant):
            raise GridError("known and vacant sets overlap")
        if len(self.domain) and not om.issubset(self.domain):
            raise GridError("completion domain must contain the known narrowband")
        return self

    def with_domain(self, domain: DomainSet) -> "MaskedTsdf":
        return MaskedTsdf(self.dim, self.tau_voxels, self.values, self.vacant, domain)


# --------------------------------------------------------------------------
# spatial operations


def dilate(d: DomainSet, n: int) -> DomainSet:
    """``n`` rounds of 3x3x3 box dilation, clipped to the lattice."""
    if n < 0:
        raise GridError("dilation count must be non-negative")
    if n == 0 or not len(d):
        return d
    # scipy treats iterations=0 as "until convergence", hence the guard above
    out = ndimage.binary_dilation(d.to_mask(), structure=np.ones((3, 3, 3), bool), iterations=n)
    return DomainSet.from_mask(out)


def parent_keys(d: DomainSet) -> np.ndarray:
    return encode(d.coords // 2, coarse_dim(d.dim))


def max_pool_occupancy(d: DomainSet) -> DomainSet:
    """Coarse voxel present iff any of its 2x2x2 children is present."""
    return DomainSet(coarse_dim(d.dim), np.unique(parent_keys(d)))


def avg_pool_matrix(fine: DomainSet) -> tuple[DomainSet, sparse.csr_matrix]:
    """Coarse domain and the ``(n_coarse, n_fine)`` averaging operator over present children."""
    coarse_keys, inverse, counts = np.unique(parent_keys(fine), return_inverse=True, return_counts=True)
    n = len(fine)
    weights = 1.0 / counts[inverse]
    mat = sparse.csr_matrix((weights, (inverse, np.arange(n))), shape=(len(coarse_keys), n))
    return DomainSet(coarse_dim(fine.dim), coarse_keys), mat


def downsample_avg(g: SparseGrid) -> SparseGrid:
    coarse, mat = avg_pool_matrix(g.domain)
    return SparseGrid(coarse, mat @ g.values)


def downsample_min_mask(m: SparseGrid) -> SparseGrid:
    """Minimum over the present children of each coarse voxel."""
    if np.any((m.values != 0.0) & (m.values != 1.0)):
        raise GridError("mask values must be 0 or 1")
    coarse_keys, inverse = np.unique(parent_keys(m.domain), return_inverse=True)
    out = np.ones((len(coarse_keys), m.channels))
    np.minimum.at(out, inverse, m.values)
    return SparseGrid(DomainSet(coarse_dim(m.dim), coarse_keys), out)


def upsample_index(coarse: DomainSet, fine: DomainSet) -> np.ndarray:
    """Row of ``coarse`` holding the parent of every ``fine`` voxel."""
    if coarse_dim(fine.dim) != coarse.dim:
        raise GridError(f"a lattice of side {fine.dim} does not refine one of side {coarse.dim}")
    idx = coarse.index_of(fine.coords // 2)
    if np.any(idx < 0):
        bad = fine.coords[np.argmax(idx < 0)]
        raise GridError(f"fine voxel {tuple(int(v) for v in bad)} has no parent in the coarse grid")
    return idx


def upsample_nn(g: SparseGrid, fine: DomainSet) -> SparseGrid:
    return SparseGrid(fine, g.values[upsample_index(g.domain, fine)])


def laplacian_matrix(d: DomainSet) -> sparse.csr_matrix:
    """Unnormalised 6-neighbour graph Laplacian restricted to ``d``: ``(Lx)_v = sum_u (x_u - x_v)``."""
    n = len(d)
    coords = d.coords
    rows, cols = [], []
    for off in FACE_OFFSETS:
        idx = d.index_of(coords + off)
        ok = idx >= 0
        rows.append(np.flatnonzero(ok))
        cols.append(idx[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (adj - sparse.diags(degree)).tocsr()


def graph_laplacian(g: SparseGrid) -> SparseGrid:
    return SparseGrid(g.domain, laplacian_matrix(g.domain) @ g.values)


# --------------------------------------------------------------------------
# SPTSDF v1 text format


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_sptsdf(path, tsdf: MaskedTsdf) -> None:
    lines = [f"SPTSDF 1 H={tsdf.dim} TAU={_fmt(tsdf.tau_voxels)}"]
    om = tsdf.values
    lines.append(f"OMEGA {len(om)}")
    for (i, j, k), v in zip(om.coords, om.values[:, 0]):
        lines.append(f"{i} {j} {k} {_fmt(v)}")
    for name, d in (("VACANT", tsdf.vacant), ("DOMAIN", tsdf.domain)):
        lines.append(f"{name} {len(d)}")
        lines.extend(f"{i} {j} {k}" for i, j, k in d.coords)
    Path(path).write_text("\n".join(lines) + "\n")


def read_sptsdf(path) -> MaskedTsdf:
    text = Path(path).read_text().split("\n")
    try:
        head = text[0].split()
        if head[:2] != ["SPTSDF", "1"]:
            raise GridError("not an SPTSDF v1 file")
        fields = dict(tok.split("=", 1) for tok in head[2:])
        dim = int(fields["H"])
        tau = float(fields["TAU"])
        pos = 1
        sections: dict[str, np.ndarray] = {}
        for name, width in (("OMEGA", 4), ("VACANT", 3), ("DOMAIN", 3)):
            tag, count = text[pos].split()
            if tag != name:
                raise GridError(f"expected section {name}, found {tag}")
            count = int(count)
            rows = text[pos + 1 : pos + 1 + count]
            if len(rows) != count:
                raise GridError(f"section {name} is truncated")
            arr = np.array([r.split() for r in rows], dtype=np.float64).reshape(count, width)
            sections[name] = arr
            pos += 1 + count
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, GridError):
            raise
        raise GridError(f"malformed SPTSDF file: {exc}") from exc

    om = sections["OMEGA"]
    coords = om[:, :3].astype(np.int64)
    omega = DomainSet.from_coords(coords, dim)
    if len(omega) != len(coords):
        raise GridError("duplicate OMEGA voxels")
    order = np.argsort(encode(coords, dim))
    values = SparseGrid(omega, om[order, 3])
    vacant = DomainSet.from_coords(sections["VACANT"].astype(np.int64), dim)
    domain = DomainSet.from_coords(sections["DOMAIN"].astype(np.int64), dim)
    return MaskedTsdf(dim, tau, values, vacant, domain).validate()


def domain_from_iterable(coords: Iterable, dim: int) -> DomainSet:
    return DomainSet.from_coords(np.array(list(coords), dtype=np.int64).reshape(-1, 3), dim)
