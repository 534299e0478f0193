import numpy as np
import pytest

from ntkdp.grid import DomainSet, MaskedTsdf, SparseGrid
from ntkdp.net import DeepPriorNet, NetworkConfig
from ntkdp.surface import voxel_to_world, world_to_voxel
from ntkdp.trainer import (
    LOG_FIELDS, Instance, TrainConfig, TrainingError, augment, derive_seed, fit_loss, init_domain,
    make_instances, rotate_tsdf, scale_loss, smooth_loss, train, update_domain, write_log,
)

from oracles import alg1_configs, brute_init_domain, brute_update_domain, sphere_sdf_grid

TINY = NetworkConfig(encoder_sizes=((4, 4), (4,), (4,)), noise_channels=4)


def as_set(d):
    return {tuple(c) for c in d.coords.tolist()}


def test_alg1_matches_brute_force():
    for omega, vacant, boundary, pred, eta, n, dim in alg1_configs():
        got = init_domain(omega, vacant, boundary, n)
        assert as_set(got) == brute_init_domain(as_set(omega), as_set(vacant), as_set(boundary), dim, n)
        vals = {tuple(c): v for c, v in zip(pred.domain.coords.tolist(), pred.values[:, 0])}
        got = update_domain(pred, eta, omega, n)
        assert as_set(got) == brute_update_domain(vals, eta, as_set(omega), dim, n)


def test_init_domain_example():
    omega = DomainSet.from_coords([(4, 4, 4)], 10)
    vacant = DomainSet.from_coords([(5, 5, 5), (9, 9, 9)], 10)
    boundary = DomainSet.from_coords([(0, 0, 0)], 10)
    d = init_domain(omega, vacant, boundary, 1)
    assert len(d) == 27 - 1 + 27
    assert (5, 5, 5) not in d and (2, 2, 2) in d


def test_update_domain_uses_unclipped_values():
    d = DomainSet.from_coords([(2, 2, 2), (7, 7, 7)], 10)
    pred = SparseGrid(d, np.array([0.49, 0.5]))
    out = update_domain(pred, 0.5, DomainSet.empty(10), 0)
    assert as_set(out) == {(2, 2, 2)}


class TestLosses:
    def test_fit_loss_example(self):
        d = DomainSet.from_coords([(0, 0, 0), (1, 0, 0), (2, 0, 0)], 4)
        pred = SparseGrid(d, np.array([0.9, 0.1, -0.2]))
        target = SparseGrid(d, np.array([0.2, 0.3, 5.0]))
        mask = SparseGrid(d, np.array([1.0, 1.0, 0.0]))
        # clip to 0.5: (0.5 - 0.2)^2 + (0.1 - 0.3)^2
        assert fit_loss(pred, target, mask, 0.5) == pytest.approx(0.09 + 0.04)

    def test_smooth_loss_constant_zero(self):
        assert smooth_loss(SparseGrid.constant(DomainSet.full(3), 2.0, channels=4)) == 0.0

    def test_smooth_loss_spike(self):
        dense = np.zeros((3, 3, 3, 1))
        dense[1, 1, 1] = 1.0
        # centre -6, six neighbours +1
        assert smooth_loss(SparseGrid.from_dense(dense)) == pytest.approx(36 + 6)

    def test_scale_loss_uses_average(self):
        fine = SparseGrid.from_dense(np.arange(8, dtype=float).reshape(2, 2, 2, 1) / 10)
        coarse_d = DomainSet.full(1)
        target = SparseGrid(coarse_d, np.array([0.0]))
        mask = SparseGrid(coarse_d, np.array([1.0]))
        assert scale_loss(fine, target, mask, 1.0) == pytest.approx(0.35**2)


def sphere_tsdf(dim=16, r=0.3, tau=3.0):
    sdf = sphere_sdf_grid(dim, r) * dim / tau
    flat = sdf.ravel()
    full = DomainSet.full(dim)
    known = np.abs(flat) < 1
    cut = full.coords[:, 2] < dim // 2 + 2  # leave the top unobserved
    omega = DomainSet(dim, full.keys[known & cut])
    vacant = DomainSet(dim, full.keys[(flat >= 1) & cut])
    return MaskedTsdf(dim, tau, SparseGrid(omega, flat[known & cut]), vacant, DomainSet.empty(dim))


class TestAugment:
    def test_identity(self):
        t = sphere_tsdf()
        r = rotate_tsdf(t, np.eye(3))
        assert r.omega == t.omega and r.vacant == t.vacant
        np.testing.assert_array_equal(r.values.values, t.values.values)

    def test_quarter_turn_is_permutation(self):
        t = sphere_tsdf(12)
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        r = rotate_tsdf(t, rot)
        src = np.rint(world_to_voxel(voxel_to_world(r.omega.coords, 12) @ rot, 12)).astype(int)
        assert len(r.omega) == len(t.omega)
        idx = t.omega.index_of(src)
        assert np.all(idx >= 0)
        np.testing.assert_array_equal(r.values.values[:, 0], t.values.values[idx, 0])

    def test_conservative(self):
        t = sphere_tsdf(12)
        rot = augment(t, 1, 5)[0][1]
        r = rotate_tsdf(t, rot)
        src = world_to_voxel(voxel_to_world(r.omega.coords, 12) @ rot, 12)
        base = np.floor(src).astype(int)
        known = t.omega.to_mask()
        for p, b in zip(src, base):
            for c in np.ndindex(2, 2, 2):
                w = np.prod([f if ci else 1 - f for f, ci in zip(p - b, c)])
                if w > 0:
                    q = b + np.array(c)
                    assert np.all((q >= 0) & (q < 12)) and known[tuple(q)]
        assert not (r.omega & r.vacant)

    def test_seeded(self):
        t = sphere_tsdf(8)
        a = [m for _, m in augment(t, 3, 1)]
        b = [m for _, m in augment(t, 3, 1)]
        np.testing.assert_array_equal(np.array(a), np.array(b))
        for m in a:
            np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(m) == pytest.approx(1.0)


def test_derive_seed_distinct():
    seeds = {derive_seed(0, i) for i in range(100)}
    assert len(seeds) == 100 and derive_seed(0, 1) == derive_seed(0, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(update_interval=0)


class TestTraining:
    def run(self, **kw):
        cfg = TrainConfig(**{"max_epochs": 6, "update_interval": 3, "augmentations": 2, "seed": 0, **kw})
        net = DeepPriorNet(TINY if cfg.hierarchy else NetworkConfig(((4, 4),), 4, hierarchy=False), 0)
        insts = make_instances(sphere_tsdf(16), cfg)
        return train(insts, net, cfg), insts, cfg

    def test_log_rows(self, tmp_path):
        res, _, cfg = self.run()
        assert len(res.log) == cfg.max_epochs
        assert [r["epoch"] for r in res.log] == list(range(cfg.max_epochs))
        write_log(tmp_path / "log.csv", res.log)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == ",".join(LOG_FIELDS) and len(lines) == 1 + cfg.max_epochs

    def test_domain_changes_only_at_updates(self):
        res, _, _ = self.run()
        sizes = [r["domain_size_s0"] for r in res.log]
        assert sizes[0] == sizes[1] == sizes[2] and sizes[3] == sizes[4] == sizes[5]

    def test_loss_decreases(self):
        res, _, _ = self.run(max_epochs=30, update_interval=100, augment=False)
        assert res.log[-1]["loss_total"] < 0.5 * res.log[0]["loss_total"]

    def test_deterministic(self):
        a, _, _ = self.run()
        b, _, _ = self.run()
        assert a.log == b.log
        np.testing.assert_array_equal(a.completed.values, b.completed.values)

    def test_no_augment_single_instance(self):
        res, insts, _ = self.run(augment=False)
        assert len(insts) == 1

    def test_no_hierarchy(self):
        res, _, _ = self.run(hierarchy=False)
        assert all(r["loss_fit_s1"] == 0 and r["loss_scale"] == 0 for r in res.log)

    def test_completed_tsdf(self):
        res, insts, _ = self.run()
        c = res.completed_tsdf()
        c.validate()
        assert c.omega == c.domain == res.completed.domain
        assert np.all(np.abs(c.values.values) <= 1)

    def test_non_finite_raises(self):
        cfg = TrainConfig(max_epochs=3, augment=False)
        net = DeepPriorNet(TINY, 0)
        name = next(iter(net.store))
        net.store[name][...] = np.nan
        with pytest.raises(TrainingError) as info:
            train(make_instances(sphere_tsdf(16), cfg), net, cfg)
        assert info.value.epoch == 0 and info.value.last_good is not None

    def test_instance_order(self):
        _, insts, _ = self.run()
        assert isinstance(insts[0], Instance)
        np.testing.assert_array_equal(insts[0].rotation, np.eye(3))
