import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntkdp.grid import (
    DomainSet, GridError, MaskedTsdf, SparseGrid, dilate, downsample_avg, downsample_min_mask,
    graph_laplacian, max_pool_occupancy, read_sptsdf, upsample_nn, write_sptsdf,
)

BOX = list(itertools.product((-1, 0, 1), repeat=3))


def brute_dilate(coords, dim, n):
    cur = {tuple(c) for c in coords}
    for _ in range(n):
        nxt = set(cur)
        for c in cur:
            for o in BOX:
                p = (c[0] + o[0], c[1] + o[1], c[2] + o[2])
                if all(0 <= v < dim for v in p):
                    nxt.add(p)
        cur = nxt
    return cur


def as_set(d: DomainSet):
    return {tuple(c) for c in d.coords.tolist()}


coord_sets = st.lists(st.tuples(*[st.integers(0, 9)] * 3), max_size=12)


class TestDomainSet:
    def test_roundtrip_coords(self):
        d = DomainSet.from_coords([(1, 2, 3), (0, 0, 0), (1, 2, 3)], 5)
        assert len(d) == 2
        assert (1, 2, 3) in d and (4, 4, 4) not in d

    def test_out_of_bounds_rejected(self):
        with pytest.raises(GridError):
            DomainSet.from_coords([(5, 0, 0)], 5)

    def test_set_algebra(self):
        a = DomainSet.from_coords([(0, 0, 0), (1, 1, 1)], 4)
        b = DomainSet.from_coords([(1, 1, 1), (2, 2, 2)], 4)
        assert as_set(a | b) == {(0, 0, 0), (1, 1, 1), (2, 2, 2)}
        assert as_set(a - b) == {(0, 0, 0)}
        assert as_set(a & b) == {(1, 1, 1)}
        assert (a & b).issubset(a)

    def test_index_of_absent(self):
        d = DomainSet.from_coords([(0, 0, 1)], 3)
        assert d.index_of(np.array([[0, 0, 1], [2, 2, 2], [-1, 0, 0]])).tolist() == [0, -1, -1]


class TestDilate:
    def test_single_voxel_box(self):
        d = dilate(DomainSet.from_coords([(5, 5, 5)], 12), 1)
        assert as_set(d) == {(5 + a, 5 + b, 5 + c) for a, b, c in BOX}

    def test_identity(self):
        d = DomainSet.from_coords([(1, 2, 3), (4, 4, 4)], 8)
        assert dilate(d, 0) == d

    def test_two_overlapping_boxes(self):
        assert len(dilate(DomainSet.from_coords([(4, 4, 4), (5, 4, 4)], 10), 1)) == 36

    def test_empty(self):
        assert len(dilate(DomainSet.empty(6), 3)) == 0

    @settings(max_examples=40, deadline=None)
    @given(coord_sets, st.integers(0, 3))
    def test_matches_brute_force(self, coords, n):
        d = DomainSet.from_coords(np.array(coords, dtype=np.int64).reshape(-1, 3), 10)
        assert as_set(dilate(d, n)) == brute_dilate(coords, 10, n)

    @settings(max_examples=30, deadline=None)
    @given(coord_sets, coord_sets, st.integers(0, 2))
    def test_monotone_and_extensive(self, a, b, n):
        A = DomainSet.from_coords(np.array(a, dtype=np.int64).reshape(-1, 3), 10)
        B = A | DomainSet.from_coords(np.array(b, dtype=np.int64).reshape(-1, 3), 10)
        assert A.issubset(dilate(A, n))
        assert dilate(A, n).issubset(dilate(B, n))

    @settings(max_examples=30, deadline=None)
    @given(coord_sets, st.integers(1, 2))
    def test_pool_of_dilation_covers_dilation_of_pool(self, coords, n):
        A = DomainSet.from_coords(np.array(coords, dtype=np.int64).reshape(-1, 3), 10)
        lhs = max_pool_occupancy(dilate(A, 2 * n))
        rhs = dilate(max_pool_occupancy(A), n)
        assert rhs.issubset(lhs)


class TestPooling:
    def test_avg_full_block(self):
        g = SparseGrid.from_dense(np.arange(8, dtype=float).reshape(2, 2, 2, 1))
        out = downsample_avg(g)
        assert len(out) == 1 and out.values[0, 0] == 3.5

    def test_avg_present_children_only(self):
        d = DomainSet.from_coords([(0, 0, 0), (1, 0, 0), (0, 1, 1)], 4)
        out = downsample_avg(SparseGrid(d, np.array([1.0, 2.0, 3.0])))
        assert out.values[:, 0].tolist() == [2.0]

    def test_avg_constant(self):
        d = DomainSet.from_coords(np.random.default_rng(0).integers(0, 8, (30, 3)), 8)
        out = downsample_avg(SparseGrid.constant(d, 0.25))
        assert np.all(out.values == 0.25)

    def test_min_mask(self):
        d = DomainSet.from_coords([(0, 0, 0), (1, 1, 1), (2, 0, 0), (3, 0, 0)], 4)
        out = downsample_min_mask(SparseGrid(d, np.array([1.0, 1.0, 1.0, 0.0])))
        assert out.values[:, 0].tolist() == [1.0, 0.0]

    def test_min_mask_rejects_nonbinary(self):
        with pytest.raises(GridError):
            downsample_min_mask(SparseGrid(DomainSet.full(2), np.full(8, 0.5)))

    def test_max_pool(self):
        d = DomainSet.from_coords([(0, 0, 0), (1, 1, 1)], 4)
        assert as_set(max_pool_occupancy(d)) == {(0, 0, 0)}
        assert max_pool_occupancy(DomainSet.full(8)) == DomainSet.full(4)

    def test_odd_dim_pools_to_ceiling(self):
        assert max_pool_occupancy(DomainSet.full(5)).dim == 3


class TestUpsample:
    def test_broadcast(self):
        coarse = SparseGrid(DomainSet.from_coords([(0, 0, 0)], 2), np.array([7.0]))
        out = upsample_nn(coarse, DomainSet.from_coords(list(itertools.product((0, 1), repeat=3)), 4))
        assert np.all(out.values == 7.0) and len(out) == 8

    def test_missing_parent_reported(self):
        coarse = SparseGrid(DomainSet.from_coords([(0, 0, 0)], 2), np.array([1.0]))
        with pytest.raises(GridError, match=r"\(2, 2, 2\)"):
            upsample_nn(coarse, DomainSet.from_coords([(2, 2, 2)], 4))

    def test_roundtrip_full(self):
        rng = np.random.default_rng(1)
        g = SparseGrid(DomainSet.full(4), rng.normal(size=(64, 2)))
        back = downsample_avg(upsample_nn(g, DomainSet.full(8)))
        np.testing.assert_allclose(back.values, g.values, rtol=0, atol=1e-14)
        again = downsample_avg(upsample_nn(back, DomainSet.full(8)))
        np.testing.assert_allclose(again.values, back.values, rtol=0, atol=1e-14)


class TestLaplacian:
    def test_constant(self):
        out = graph_laplacian(SparseGrid.constant(DomainSet.full(4), 3.0))
        assert np.all(out.values == 0)

    def test_linear_interior(self):
        d = DomainSet.full(6)
        out = graph_laplacian(SparseGrid(d, d.coords[:, 0].astype(float)))
        interior = np.all((d.coords > 0) & (d.coords < 5), axis=1)
        assert np.all(out.values[interior] == 0)

    def test_spike(self):
        dense = np.zeros((3, 3, 3, 1))
        dense[1, 1, 1] = 1.0
        out = graph_laplacian(SparseGrid.from_dense(dense)).to_dense()
        assert out[1, 1, 1, 0] == -6.0
        assert out[0, 1, 1, 0] == 1.0 and out[0, 0, 0, 0] == 0.0

    @settings(max_examples=30, deadline=None)
    @given(coord_sets.filter(lambda c: len(c) > 0), st.integers(0, 2**31))
    def test_sums_to_zero(self, coords, seed):
        d = DomainSet.from_coords(np.array(coords, dtype=np.int64), 10)
        x = np.random.default_rng(seed).normal(size=(len(d), 2))
        out = graph_laplacian(SparseGrid(d, x))
        np.testing.assert_allclose(out.values.sum(axis=0), 0.0, atol=1e-12)

    def test_matches_brute_stencil(self):
        rng = np.random.default_rng(2)
        d = DomainSet.from_coords(rng.integers(0, 6, (80, 3)), 6)
        x = rng.normal(size=len(d))
        out = graph_laplacian(SparseGrid(d, x)).values[:, 0]
        lookup = {tuple(c): v for c, v in zip(d.coords.tolist(), x)}
        for c, v, got in zip(d.coords.tolist(), x, out):
            want = 0.0
            for o in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
                nb = (c[0] + o[0], c[1] + o[1], c[2] + o[2])
                if nb in lookup:
                    want += lookup[nb] - v
            assert got == pytest.approx(want, abs=1e-12)


class TestMaskedTsdf:
    def make(self):
        om = DomainSet.from_coords([(1, 1, 1), (1, 1, 2)], 4)
        return MaskedTsdf(4, 3.0, SparseGrid(om, np.array([-0.25, 0.5])),
                          DomainSet.from_coords([(3, 3, 3)], 4), DomainSet.empty(4))

    def test_validate_domain_superset(self):
        t = self.make()
        with pytest.raises(GridError):
            t.with_domain(DomainSet.from_coords([(1, 1, 1)], 4)).validate()

    def test_validate_overlap(self):
        t = self.make()
        bad = MaskedTsdf(4, 3.0, t.values, t.omega, DomainSet.empty(4))
        with pytest.raises(GridError):
            bad.validate()

    def test_mask(self):
        t = self.make()
        dom = t.omega | DomainSet.from_coords([(0, 0, 0)], 4)
        m = t.mask(dom)
        assert m.values[:, 0].tolist() == [0.0, 1.0, 1.0]

    def test_sptsdf_roundtrip(self, tmp_path):
        t = self.make().with_domain(dilate(self.make().omega, 1))
        write_sptsdf(tmp_path / "a.sptsdf", t)
        back = read_sptsdf(tmp_path / "a.sptsdf")
        assert back.omega == t.omega and back.vacant == t.vacant and back.domain == t.domain
        np.testing.assert_array_equal(back.values.values, t.values.values)
        head = (tmp_path / "a.sptsdf").read_text().splitlines()[0]
        assert head == "SPTSDF 1 H=4 TAU=3"

    @pytest.mark.parametrize("text", [
        "", "SPTSDF 2 H=4 TAU=3\n", "SPTSDF 1 H=4 TAU=3\nOMEGA 2\n0 0 0 0.1\n",
        "SPTSDF 1 H=4 TAU=3\nOMEGA 1\n0 0 0 0.1\nDOMAIN 0\nVACANT 0\n",
        "SPTSDF 1 H=4 TAU=3\nOMEGA 1\n9 0 0 0.1\nVACANT 0\nDOMAIN 0\n",
    ])
    def test_malformed(self, tmp_path, text):
        p = tmp_path / "bad.sptsdf"
        p.write_text(text)
        with pytest.raises(GridError):
            read_sptsdf(p)
