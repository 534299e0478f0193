"""Optimisation loop: completion domains, losses, rotation augmentation and training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from . import tape as T
from .grid import (
    DomainSet, GridError, MaskedTsdf, SparseGrid, avg_pool_matrix, dilate, downsample_avg,
    downsample_min_mask, laplacian_matrix,
)
from .net import DeepPriorNet, NetPlan, sample_noise
from .surface import find_open_edge_grids, marching_cubes, world_to_voxel, voxel_to_world

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss_total", "loss_fit_s0", "loss_fit_s1", "loss_fit_s2",
              "loss_smooth", "loss_scale", "domain_size_s0")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, last_good: np.ndarray | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good  # flat parameters of the last epoch with a finite loss


@dataclass
class TrainConfig:
    max_epochs: int = 2000
    update_interval: int = 250
    dilations: int = 4
    boundary_dilations: int = 2
    eta: float = 0.5
    w1: float = 0.001
    w2: float = 0.1
    lr: float = 2e-3
    augmentations: int = 23
    batch_augmentations: int = 3
    seed: int = 0
    hierarchy: bool = True
    laplacian: bool = True
    augment: bool = True

    def __post_init__(self):
        for name in ("max_epochs", "update_interval", "dilations", "batch_augmentations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.augmentations < 0 or self.boundary_dilations < 0:
            raise ValueError("counts must be non-negative")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# completion domains


def init_domain(omega: DomainSet, vacant: DomainSet, boundary: DomainSet, n: int,
                boundary_dilations: int = 2) -> DomainSet:
    """``(dilate(omega, n) - vacant) | dilate(boundary, boundary_dilations)``."""
    return (dilate(omega, n) - vacant) | dilate(boundary, boundary_dilations)


def update_domain(pred: SparseGrid, eta: float, omega: DomainSet, n: int) -> DomainSet:
    """``dilate({|y| < eta}, n) | omega`` on the unclipped prediction."""
    near = DomainSet(pred.dim, pred.domain.keys[np.abs(pred.values[:, 0]) < eta])
    return dilate(near, n) | omega


def boundary_grids(tsdf: MaskedTsdf) -> DomainSet:
    """Lattice points bounding the open edges of the mesh extracted from the known values."""
    mesh = marching_cubes(tsdf.values, space="voxel")
    return find_open_edge_grids(mesh, tsdf.dim, space="voxel")


# --------------------------------------------------------------------------
# augmentation


def rotate_tsdf(tsdf: MaskedTsdf, rot: np.ndarray) -> MaskedTsdf:
    """Resample a TSDF under a rotation about the cube centre.

    Values are trilinearly interpolated; a voxel joins the rotated known (or
    vacant) set only when every interpolation corner with nonzero weight is
    known (or vacant).
    """
    dim = tsdf.dim
    rot = np.asarray(rot, dtype=np.float64)
    target = DomainSet.full(dim)
    src = world_to_voxel(voxel_to_world(target.coords, dim) @ rot, dim)  # R^T p, row-vector form
    snapped = np.round(src)
    src = np.where(np.abs(src - snapped) < 1e-9, snapped, src)
    base = np.floor(src).astype(np.int64)
    frac = src - base

    om_mask = tsdf.omega.to_mask()
    vac_mask = tsdf.vacant.to_mask()
    dense_u = tsdf.values.to_dense()[..., 0]
    all_known = np.ones(len(src), dtype=bool)
    all_vacant = np.ones(len(src), dtype=bool)
    value = np.zeros(len(src))
    for corner in np.ndindex(2, 2, 2):
        c = np.asarray(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        need = w > 0
        pos = base + c
        inb = np.all((pos >= 0) & (pos < dim), axis=1)
        pc = np.clip(pos, 0, dim - 1)
        k = om_mask[pc[:, 0], pc[:, 1], pc[:, 2]] & inb
        v = vac_mask[pc[:, 0], pc[:, 1], pc[:, 2]] & inb
        all_known &= k | ~need
        all_vacant &= v | ~need
        value += np.where(need, w * dense_u[pc[:, 0], pc[:, 1], pc[:, 2]], 0.0)
    omega = DomainSet(dim, target.keys[all_known])
    vacant = DomainSet(dim, target.keys[all_vacant & ~all_known])
    values = np.clip(value[all_known], -1.0, 1.0)
    return MaskedTsdf(dim, tsdf.tau_voxels, SparseGrid(omega, values), vacant, DomainSet.empty(dim))


def augment(tsdf: MaskedTsdf, k: int, seed: int) -> list[tuple[MaskedTsdf, np.ndarray]]:
    """``k`` uniformly random proper rotations of ``tsdf`` with their matrices."""
    if k == 0:
        return []
    mats = Rotation.random(k, random_state=seed).as_matrix().reshape(k, 3, 3)
    out = []
    for r in mats:
        rotated = rotate_tsdf(tsdf, r)
        if len(rotated.omega):
            out.append((rotated, r))
    return out


# --------------------------------------------------------------------------
# losses on grids (reference API; training uses the tape versions below)


def _clip(x, eta):
    return np.clip(x, -eta, eta)


def fit_loss(pred: SparseGrid, target: SparseGrid, mask: SparseGrid, eta: float) -> float:
    """``|| m * (clip(f) - clip(u)) ||^2`` over the voxels where the mask is 1."""
    on = DomainSet(mask.dim, mask.domain.keys[mask.values[:, 0] > 0])
    if not len(on):
        return 0.0
    p = pred.restrict(on).values[:, 0]
    u = target.restrict(on).values[:, 0]
    return float(np.sum((_clip(p, eta) - _clip(u, eta)) ** 2))


def scale_loss(fine: SparseGrid, target: SparseGrid, mask: SparseGrid, eta: float) -> float:
    return fit_loss(downsample_avg(fine), target, mask, eta)


def smooth_loss(features: SparseGrid) -> float:
    lap = laplacian_matrix(features.domain) @ features.values
    return float(np.sum(lap * lap))


# --------------------------------------------------------------------------
# problem instances


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class ScaleTargets:
    rows: np.ndarray  # rows of the scale domain with mask 1
    target: np.ndarray  # clipped downsampled target on those rows
    laplacian: object
    pool: object | None  # averaging operator from the finer scale's domain


@dataclass
class Instance:
    tsdf: MaskedTsdf
    rotation: np.ndarray
    seed: int
    plan: NetPlan | None = None
    noise: list = field(default_factory=list)
    targets: list = field(default_factory=list)

    @property
    def domain(self) -> DomainSet:
        return self.tsdf.domain


def prepare(inst: Instance, net: DeepPriorNet, eta: float) -> None:
    """(Re)build plan, noise and per-scale targets after a domain change."""
    plan = net.plan(inst.tsdf.domain)
    inst.plan = plan
    inst.noise = [sample_noise(d, inst.seed, s, net.config.noise_channels) for s, d in enumerate(plan.domains)]
    mask = inst.tsdf.mask(plan.domains[0])
    u = inst.tsdf.values
    targets = []
    for s, dom in enumerate(plan.domains):
        if s > 0:
            mask = downsample_min_mask(mask)
            u = downsample_avg(u)
        if mask.domain != dom:
            raise GridError("mask pyramid diverged from the network domains")
        rows = np.flatnonzero(mask.values[:, 0] > 0)
        if not rows.size:
            # min-pooling empties coarse masks of thin shells; those scales just lose their terms
            if s == 0:
                raise TrainingError("no known voxels in the completion domain")
            log.info("no fully known blocks at scale %d; its fit and consistency terms are skipped", s)
        on = DomainSet(dom.dim, dom.keys[rows])
        tgt = _clip(u.restrict(on).values[:, 0], eta)
        pool = avg_pool_matrix(plan.domains[s - 1])[1] if s > 0 else None
        targets.append(ScaleTargets(rows, tgt, laplacian_matrix(dom), pool))
    inst.targets = targets


def instance_loss(tape: T.Tape, net: DeepPriorNet, inst: Instance, cfg: TrainConfig):
    """Forward pass and the normalised multi-scale objective; returns (loss node, parts, result)."""
    res = net.forward(tape, inst.plan, inst.noise)
    n = net.config.n_scales
    terms = []
    parts = {"fit": [0.0, 0.0, 0.0], "smooth": 0.0, "scale": 0.0}
    for s in range(n):
        tg = inst.targets[s]
        if not tg.rows.size:
            continue
        norm = 1.0 / tg.rows.size
        fit = T.masked_sq_diff(T.clip(res.outputs[s], cfg.eta), tg.target, tg.rows)
        parts["fit"][s] = float(fit.value) * norm
        terms.append(T.scale(fit, norm))
        if cfg.laplacian and cfg.w1 > 0:
            sm = T.sq_norm(T.linear_map(res.penultimate[s], tg.laplacian, "laplacian"))
            parts["smooth"] += float(sm.value) * norm
            terms.append(T.scale(sm, cfg.w1 * norm))
        if s > 0:
            down = T.linear_map(res.outputs[s - 1], tg.pool, "avg_pool")
            sc = T.masked_sq_diff(T.clip(down, cfg.eta), tg.target, tg.rows)
            parts["scale"] += float(sc.value) * norm
            terms.append(T.scale(sc, cfg.w2 * norm))
    return T.total(terms), parts, res


def total_loss(net: DeepPriorNet, inst: Instance, cfg: TrainConfig) -> float:
    with T.Tape(net.store) as tape:
        loss, _, _ = instance_loss(tape, net, inst, cfg)
        return float(loss.value)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    completed: SparseGrid
    log: list
    instances: list
    net: DeepPriorNet

    def completed_tsdf(self) -> MaskedTsdf:
        orig = self.instances[0].tsdf
        vals = np.clip(self.completed.values[:, 0], -1.0, 1.0)
        dom = self.completed.domain
        return MaskedTsdf(orig.dim, orig.tau_voxels, SparseGrid(dom, vals), orig.vacant - dom, dom)


def make_instances(tsdf: MaskedTsdf, cfg: TrainConfig) -> list[Instance]:
    insts = [Instance(tsdf, np.eye(3), derive_seed(cfg.seed, 0))]
    if cfg.augment and cfg.augmentations > 0:
        for i, (rot_tsdf, r) in enumerate(augment(tsdf, cfg.augmentations, cfg.seed), start=1):
            insts.append(Instance(rot_tsdf, r, derive_seed(cfg.seed, i)))
    for inst in insts:
        if not len(inst.tsdf.domain):
            dom = init_domain(inst.tsdf.omega, inst.tsdf.vacant, boundary_grids(inst.tsdf),
                              cfg.dilations, cfg.boundary_dilations)
            inst.tsdf = inst.tsdf.with_domain(dom)
        inst.tsdf.validate()
    return insts


def predict_instance(net: DeepPriorNet, inst: Instance) -> SparseGrid:
    return net.predict(inst.plan, inst.noise)[0]


def train(instances: list[Instance], net: DeepPriorNet, cfg: TrainConfig,
          on_update: Callable[[int, SparseGrid], None] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the fixed-budget optimisation; the original instance must come first."""
    for inst in instances:
        prepare(inst, net, cfg.eta)
    rng = np.random.default_rng(cfg.seed)
    state = T.AdamState()
    history = []
    last_good = net.store.flat()
    n_aug = len(instances) - 1
    for epoch in range(cfg.max_epochs):
        if epoch > 0 and epoch % cfg.update_interval == 0:
            preds = [predict_instance(net, inst) for inst in instances]
            for inst, y in zip(instances, preds):
                dom = update_domain(y, cfg.eta, inst.tsdf.omega, cfg.dilations)
                inst.tsdf = inst.tsdf.with_domain(dom)
                prepare(inst, net, cfg.eta)
            if on_update is not None:
                on_update(epoch, preds[0])
        batch = [0]
        if cfg.augment and n_aug > 0:
            k = min(cfg.batch_augmentations, n_aug)
            batch += sorted(int(i) + 1 for i in rng.choice(n_aug, size=k, replace=False))
        net.store.zero_grad()
        totals, fits, smooth, scale = [], np.zeros(3), 0.0, 0.0
        for i in batch:
            with T.Tape(net.store) as tape:
                loss, parts, _ = instance_loss(tape, net, instances[i], cfg)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} (instance {i})", epoch, last_good)
                tape.backward(loss, np.asarray(1.0 / len(batch)))
            totals.append(value)
            fits += np.asarray(parts["fit"])
            smooth += parts["smooth"]
            scale += parts["scale"]
        b = len(batch)
        row = {
            "epoch": epoch, "loss_total": sum(totals) / b,
            "loss_fit_s0": fits[0] / b, "loss_fit_s1": fits[1] / b, "loss_fit_s2": fits[2] / b,
            "loss_smooth": smooth / b, "loss_scale": scale / b,
            "domain_size_s0": len(instances[0].domain),
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if not np.all(np.isfinite(net.store.flat_grad())):
            raise TrainingError(f"non-finite gradient at epoch {epoch}", epoch, last_good)
        last_good = net.store.flat()
        T.adam_step(net.store, cfg.lr, state)
    completed = predict_instance(net, instances[0])
    return TrainResult(completed, history, instances, net)


def write_log(path, history: list) -> None:
    lines = [",".join(LOG_FIELDS)]
    for row in history:
        lines.append(",".join(
            str(row[k]) if k in ("epoch", "domain_size_s0") else repr(float(row[k])) for k in LOG_FIELDS
        ))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
