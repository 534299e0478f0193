"""Triangle meshes: isosurface extraction, open-edge detection, sampling and F-score."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _sk_marching_cubes

from .grid import DomainSet, SparseGrid, encode

DEGENERATE_AREA = 1e-12


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def transformed(self, scale: float = 1.0, offset=(0.0, 0.0, 0.0)) -> "TriMesh":
        return TriMesh(self.vertices * scale + np.asarray(offset, dtype=np.float64), self.faces.copy())

    def compact(self) -> "TriMesh":
        """Drop degenerate faces and unreferenced vertices."""
        faces = self.faces[self.areas() > DEGENERATE_AREA] if len(self.faces) else self.faces
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        return TriMesh(self.vertices[used], remap[faces])


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


# --------------------------------------------------------------------------
# coordinate frames: voxel (i, j, k) has its centre at (i + 0.5) / H - 0.5


def voxel_to_world(p: np.ndarray, dim: int) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) + 0.5) / dim - 0.5


def world_to_voxel(p: np.ndarray, dim: int) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) + 0.5) * dim - 0.5


# --------------------------------------------------------------------------
# extraction


def marching_cubes(tsdf: SparseGrid, iso: float = 0.0, space: str = "world") -> TriMesh:
    """Zero isosurface over cells whose eight corners all belong to the grid's domain.

    ``space="voxel"`` returns vertices in lattice index units instead of the
    unit-cube world frame.
    """
    if tsdf.channels != 1:
        raise ValueError("marching cubes needs a single-channel grid")
    dim = tsdf.dim
    present = tsdf.domain.to_mask()
    if dim < 2 or not present.any():
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    cells = np.ones((dim - 1,) * 3, dtype=bool)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                cells &= present[a : dim - 1 + a, b : dim - 1 + b, c : dim - 1 + c]
    vol = tsdf.to_dense(fill=np.nan)[..., 0]
    known = vol[present]
    if not cells.any() or known.min() > iso or known.max() < iso:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    # absent voxels only feed cells that are discarded below
    vol = np.where(present, vol, iso + 1.0)
    try:
        verts, faces, _, _ = _sk_marching_cubes(
            vol, iso, method="lorensen", gradient_direction="ascent", allow_degenerate=False
        )
    except (ValueError, RuntimeError):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts = verts.astype(np.float64)
    if len(faces):
        cell = np.floor(verts[faces].mean(axis=1) - 1e-7).astype(np.int64)
        cell = np.clip(cell, 0, dim - 2)
        faces = faces[cells[cell[:, 0], cell[:, 1], cell[:, 2]]]
    mesh = TriMesh(verts, faces).compact()
    if space == "world":
        mesh.vertices = voxel_to_world(mesh.vertices, dim)
    elif space != "voxel":
        raise ValueError(f"unknown space {space!r}")
    return mesh


def edge_incidence(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and how many faces use each."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def open_edges(mesh: TriMesh) -> np.ndarray:
    if not len(mesh.faces):
        return np.zeros((0, 2), dtype=np.int64)
    uniq, counts = edge_incidence(mesh)
    return uniq[counts == 1]


def find_open_edge_grids(mesh: TriMesh, dim: int, space: str = "world") -> DomainSet:
    """Lattice points bounding the cells crossed by any open (single-face) edge.

    Each open edge is sampled at quarter-voxel spacing; every sample
    contributes the eight lattice corners of the cell enclosing it.
    """
    edges = open_edges(mesh)
    if not len(edges):
        return DomainSet.empty(dim)
    verts = mesh.vertices if space == "voxel" else world_to_voxel(mesh.vertices, dim)
    a, b = verts[edges[:, 0]], verts[edges[:, 1]]
    length = np.linalg.norm(b - a, axis=1)
    steps = np.maximum(1, np.ceil(length * 4).astype(np.int64))
    pts = []
    for n in np.unique(steps):
        sel = steps == n
        t = np.linspace(0.0, 1.0, n + 1)
        pts.append((a[sel, None, :] + t[None, :, None] * (b - a)[sel, None, :]).reshape(-1, 3))
    pts = np.concatenate(pts)
    base = np.floor(pts).astype(np.int64)
    corners = (base[:, None, :] + np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)])[None])
    corners = corners.reshape(-1, 3)
    corners = corners[np.all((corners >= 0) & (corners < dim), axis=1)]
    return DomainSet(dim, np.unique(encode(corners, dim)))


# --------------------------------------------------------------------------
# sampling and evaluation


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    if not len(mesh.faces):
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri_idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[tri_idx]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return PointCloud(pts)


@dataclass(frozen=True)
class FScore:
    precision: float
    recall: float
    fscore: float


def _fraction_within(src: np.ndarray, dst: np.ndarray, delta: float) -> float:
    dist, _ = cKDTree(dst).query(src, k=1, distance_upper_bound=delta)
    return float(np.mean(dist <= delta))


def fscore(pred: PointCloud, gt: PointCloud, delta: float) -> FScore:
    """Precision, recall and their harmonic mean, all in percent."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not len(pred) or not len(gt):
        raise ValueError("point clouds must be nonempty")
    p = 100.0 * _fraction_within(pred.points, gt.points, delta)
    r = 100.0 * _fraction_within(gt.points, pred.points, delta)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return FScore(p, r, f)


# --------------------------------------------------------------------------
# file formats


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for t in range(1, len(idx) - 1):
                faces.append([idx[0], idx[t], idx[t + 1]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII PLY point cloud; ``colors`` in [0, 1] are stored as uchar RGB."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
            "property double x", "property double y", "property double z"]
    rows = [f"{x!r} {y!r} {z!r}" for x, y, z in points.tolist()]
    if colors is not None:
        rgb = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(np.int64)
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        rows = [f"{r} {c[0]} {c[1]} {c[2]}" for r, c in zip(rows, rgb.tolist())]
    head.append("end_header")
    Path(path).write_text("\n".join(head + rows) + "\n")


def write_metrics(path, score: FScore) -> None:
    Path(path).write_text(
        f"precision,recall,fscore\n{score.precision:.6f},{score.recall:.6f},{score.fscore:.6f}\n"
    )


def uv_sphere(radius: float = 1.0, n_lat: int = 32, n_lon: int = 64, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed latitude/longitude sphere mesh."""
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append((radius * np.sin(th) * np.cos(ph), radius * np.sin(th) * np.sin(ph), radius * np.cos(th)))
    verts.append((0.0, 0.0, -radius))
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    last = len(verts) - 1
    for j in range(n_lon):
        faces.append((last, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return TriMesh(np.array(verts) + np.asarray(center, dtype=np.float64), np.array(faces))
