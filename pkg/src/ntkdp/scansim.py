"""Simulated partial scans: camera placement, depth rendering and TSDF fusion.

World space is the unit cube ``[-0.5, 0.5]^3``; voxel ``(i, j, k)`` of an
``H^3`` lattice is centred at ``(idx + 0.5) / H - 0.5``.  Depth maps store the
distance along each pixel's ray, with ``inf`` meaning the ray hit nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import DomainSet, MaskedTsdf, SparseGrid
from .surface import TriMesh

NO_HIT = np.inf
CUBE_CIRCUMRADIUS = np.sqrt(3.0) / 2.0
VIEW_RADIUS = 1.5 * CUBE_CIRCUMRADIUS
N_CANDIDATES = 1024


class ScanError(RuntimeError):
    pass


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    width: int = 512
    height: int = 512
    fov_y: float = np.pi / 3

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        fwd = self.look_at - self.position
        if np.linalg.norm(fwd) < 1e-12:
            raise ValueError("camera position coincides with its target")
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise ValueError("up vector is parallel to the view direction")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unit forward, right and up axes."""
        fwd = self.look_at - self.position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction per pixel, shape ``(height, width, 3)``."""
        fwd, right, up = self.frame()
        cols = (np.arange(self.width) + 0.5 - 0.5 * self.width) / self.focal
        rows = -(np.arange(self.height) + 0.5 - 0.5 * self.height) / self.focal
        d = fwd[None, None] + cols[None, :, None] * right[None, None] + rows[:, None, None] * up[None, None]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel column, row (continuous) and camera-axis depth of world points."""
        fwd, right, up = self.frame()
        rel = np.asarray(points, dtype=np.float64) - self.position
        z = rel @ fwd
        with np.errstate(divide="ignore", invalid="ignore"):
            col = (rel @ right) / z * self.focal + 0.5 * self.width
            row = -(rel @ up) / z * self.focal + 0.5 * self.height
        return col, row, z


def _default_up(direction: np.ndarray) -> np.ndarray:
    z = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(direction, z)) > 0.99 * np.linalg.norm(direction):
        return np.array([0.0, 1.0, 0.0])
    return z


def camera_at(direction, radius: float = VIEW_RADIUS, **kw) -> Camera:
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return Camera(d * radius, np.zeros(3), _default_up(d), **kw)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def sample_view_directions(n: int, seed: int) -> np.ndarray:
    """Seeded random first direction, then furthest-point picks from a fixed candidate set."""
    if n < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    first = rng.normal(size=3)
    chosen = [first / np.linalg.norm(first)]
    cands = fibonacci_sphere(N_CANDIDATES)
    for _ in range(1, n):
        ang = np.arccos(np.clip(cands @ np.array(chosen).T, -1.0, 1.0))
        chosen.append(cands[np.argmax(ang.min(axis=1))])
    return np.array(chosen)


def sample_views(n: int, seed: int, **camera_kw) -> list[Camera]:
    return [camera_at(d, **camera_kw) for d in sample_view_directions(n, seed)]


# --------------------------------------------------------------------------
# rendering


def _intersect(orig: np.ndarray, dirs: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Moller-Trumbore distances of many rays against one triangle (inf on miss)."""
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    p = np.cross(dirs, e2)
    det = p @ e1
    out = np.full(len(dirs), np.inf)
    ok = np.abs(det) > 1e-14
    if not ok.any():
        return out
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    s = orig - tri[0]
    u = (p @ s) * inv
    q = np.cross(s, e1)
    v = (dirs @ q) * inv
    t = (q @ e2) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
    out[hit] = t[hit]
    return out


def render_depth(mesh: TriMesh, cam: Camera) -> np.ndarray:
    """Nearest hit distance along each pixel ray; ``inf`` where the ray misses."""
    if not len(mesh.faces):
        raise ScanError("mesh has no faces")
    dirs = cam.ray_directions().reshape(-1, 3)
    depth = np.full(cam.width * cam.height, NO_HIT)
    tris = mesh.triangles
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    col, row, z = cam.project(tris.reshape(-1, 3))
    col, row, z = col.reshape(-1, 3), row.reshape(-1, 3), z.reshape(-1, 3)
    for f in range(len(tris)):
        if areas[f] <= 1e-15:
            continue
        if np.all(z[f] > 1e-9):
            c0 = max(int(np.floor(col[f].min())) - 1, 0)
            c1 = min(int(np.ceil(col[f].max())) + 1, cam.width - 1)
            r0 = max(int(np.floor(row[f].min())) - 1, 0)
            r1 = min(int(np.ceil(row[f].max())) + 1, cam.height - 1)
            if c0 > c1 or r0 > r1:
                continue
            rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
            pix = (rr * cam.width + cc).ravel()
        elif np.all(z[f] <= 0):
            continue
        else:
            pix = np.arange(cam.width * cam.height)
        t = _intersect(cam.position, dirs[pix], tris[f])
        depth[pix] = np.minimum(depth[pix], t)
    return depth.reshape(cam.height, cam.width)


def add_depth_noise(depth: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Independent Gaussian perturbation of every hit pixel; misses stay misses."""
    out = np.array(depth, dtype=np.float64)
    if sigma == 0:
        return out
    hit = np.isfinite(out)
    rng = np.random.default_rng(seed)
    out[hit] += rng.normal(0.0, sigma, size=int(hit.sum()))
    return out


# --------------------------------------------------------------------------
# fusion


@dataclass
class FusionConfig:
    dim: int = 64
    tau_voxels: float = 3.0

    def __post_init__(self):
        if self.tau_voxels < 1:
            raise ValueError("truncation must be at least one voxel")


def voxel_centers(dim: int) -> np.ndarray:
    idx = np.indices((dim, dim, dim)).reshape(3, -1).T
    return (idx + 0.5) / dim - 0.5


def view_tsdf(depth: np.ndarray, cam: Camera, cfg: FusionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel normalised truncated distance for one view and the observed flag."""
    centers = voxel_centers(cfg.dim)
    tau = cfg.tau_voxels / cfg.dim
    col, row, z = cam.project(centers)
    inside = (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    values = np.zeros(len(centers))
    observed = np.zeros(len(centers), dtype=bool)
    c = np.floor(col[inside]).astype(np.int64)
    r = np.floor(row[inside]).astype(np.int64)
    d_pix = depth[r, c]
    d_vox = np.linalg.norm(centers[inside] - cam.position, axis=1)
    sdf = d_pix - d_vox  # +inf for rays that hit nothing
    seen = sdf >= -tau
    idx = np.flatnonzero(inside)[seen]
    observed[idx] = True
    values[idx] = np.clip(sdf[seen] / tau, -1.0, 1.0)
    return values, observed


def integrate_tsdf(maps: list, cams: list, cfg: FusionConfig) -> MaskedTsdf:
    """Average per-view TSDFs with unit weights; derive known and vacant sets."""
    if len(maps) != len(cams) or not maps:
        raise ScanError("need matching, nonempty lists of depth maps and cameras")
    n = cfg.dim**3
    acc = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for depth, cam in zip(maps, cams):
        v, obs = view_tsdf(depth, cam, cfg)
        acc[obs] += v[obs]
        count[obs] += 1
    seen = count > 0
    mean = np.zeros(n)
    mean[seen] = acc[seen] / count[seen]
    known = seen & (np.abs(mean) < 1.0)
    vacant = seen & (mean >= 1.0)
    if not known.any():
        raise ScanError("no surface observed")
    omega = DomainSet(cfg.dim, np.flatnonzero(known))
    return MaskedTsdf(
        cfg.dim, cfg.tau_voxels, SparseGrid(omega, mean[known]),
        DomainSet(cfg.dim, np.flatnonzero(vacant)), DomainSet.empty(cfg.dim),
    ).validate()


def normalize_mesh(mesh: TriMesh, margin: float = 0.05) -> tuple[TriMesh, float, np.ndarray]:
    """Fit the mesh into the unit cube with ``margin`` on every side.

    A mesh that already fits is returned unchanged so that reconstructions stay
    comparable with the original file; otherwise its bounding box is centred
    and uniformly shrunk.
    """
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    limit = 0.5 - margin
    if np.all(lo >= -limit) and np.all(hi <= limit):
        return mesh, 1.0, np.zeros(3)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    scale = 2.0 * limit / extent
    offset = -center * scale
    return mesh.transformed(scale, offset), scale, offset


def scan(mesh: TriMesh, n_views: int, seed: int, cfg: FusionConfig, noise: float = 0.0,
         cams: list | None = None, **camera_kw) -> tuple[MaskedTsdf, list, list]:
    """Render, optionally perturb and fuse ``n_views`` depth maps of ``mesh``.

    ``noise`` is a standard deviation relative to the mesh's largest bounding-box side.
    """
    if cams is None:
        cams = sample_views(n_views, seed, **camera_kw)
    side = float(np.ptp(mesh.vertices, axis=0).max())
    maps = []
    for v, cam in enumerate(cams):
        d = render_depth(mesh, cam)
        if noise > 0:
            d = add_depth_noise(d, noise * side, seed * 7919 + v)
        maps.append(d)
    return integrate_tsdf(maps, cams, cfg), maps, cams


def write_pgm(path, depth: np.ndarray) -> None:
    """16-bit PGM depth dump scaled to the finite range; misses are 0."""
    finite = np.isfinite(depth)
    img = np.zeros(depth.shape, dtype=">u2")
    if finite.any():
        lo, hi = depth[finite].min(), depth[finite].max()
        span = hi - lo if hi > lo else 1.0
        img[finite] = 1 + np.round((depth[finite] - lo) / span * 65534).astype(np.int64)
    h, w = depth.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + img.tobytes())
