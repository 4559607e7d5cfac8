import numpy as np
import pytest

from sfpnet.errors import ConfigError, ConsistencyError, ContractError, InputError, RangeError
from sfpnet.sparse import (SparseTensor, VoxelMap, build_rulebook, concat_batches, devoxelize,
                           strided_rulebook, voxelize)

from conftest import random_coords


def coords_of(*xyz, batch=0):
    return np.array([(batch, *c) for c in xyz], dtype=np.int32)


class TestVoxelize:
    def test_single_point(self):
        t, m = voxelize([(0.04, 0.04, 0.04, 1.0)], 0.05)
        assert t.coords.tolist() == [[0, 0, 0, 0]]
        assert t.features[0, 3] == 1.0
        assert m.point_to_voxel.tolist() == [0]

    def test_floor_division(self):
        t, _ = voxelize([(0.04, 0.01, 0.01, 1.0), (0.06, 0.01, 0.01, 0.5)], 0.05)
        assert t.coords[:, 1:].tolist() == [[0, 0, 0], [1, 0, 0]]

    def test_mean_intensity(self):
        t, m = voxelize([(0.01, 0.01, 0.01, 0.2), (0.02, 0.02, 0.02, 0.8)], 0.05)
        assert len(t) == 1
        assert t.features[0, 3] == pytest.approx(0.5)
        assert m.voxel_point_count.tolist() == [2]

    def test_offsets_are_centred_and_scaled(self):
        t, _ = voxelize([(0.0, 0.25, 0.5, 0.0)], 0.5)
        np.testing.assert_allclose(t.features[0, :3], [-0.5, 0.0, -0.5])

    def test_negative_coordinates_floor(self):
        t, _ = voxelize([(-0.01, 0.0, 0.0, 0.0)], 0.1)
        assert t.coords[0, 1] == -1

    def test_sorted_by_batch_z_y_x(self, rng):
        pts = np.column_stack([rng.uniform(-2, 2, (300, 3)), rng.uniform(0, 1, 300)])
        t, _ = voxelize(pts, 0.3, batch=2)
        assert t.is_sorted()
        assert (t.batch == 2).all()

    def test_shuffle_invariant(self, rng):
        pts = np.column_stack([rng.uniform(-1, 1, (500, 3)), rng.uniform(0, 1, 500)])
        a, ma = voxelize(pts, 0.25)
        perm = rng.permutation(500)
        b, mb = voxelize(pts[perm], 0.25)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(ma.point_to_voxel[perm], mb.point_to_voxel)

    def test_map_is_a_surjection(self, rng):
        pts = np.column_stack([rng.uniform(0, 1, (200, 3)), rng.uniform(0, 1, 200)])
        t, m = voxelize(pts, 0.2)
        assert m.voxel_point_count.sum() == 200
        assert set(m.point_to_voxel.tolist()) == set(range(len(t)))

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(InputError):
            voxelize([(bad, 0.0, 0.0, 0.0)], 0.1)

    def test_overflow(self):
        with pytest.raises(RangeError):
            voxelize([(1e9, 0.0, 0.0, 0.0)], 0.1)

    def test_empty_and_bad_size(self):
        with pytest.raises(InputError):
            voxelize(np.zeros((0, 4)), 0.1)
        with pytest.raises(InputError):
            voxelize([(0.0, 0.0, 0.0, 0.0)], 0.0)


class TestSparseTensor:
    def test_row_count_must_match(self):
        with pytest.raises(ContractError):
            SparseTensor(coords_of((0, 0, 0)), np.zeros((2, 1)))

    def test_int32_overflow_rejected(self):
        with pytest.raises(RangeError):
            SparseTensor(np.array([[0, 2**31, 0, 0]]), np.zeros((1, 1)))

    def test_from_unsorted_sorts_and_rejects_duplicates(self):
        t = SparseTensor.from_unsorted(coords_of((1, 0, 0), (0, 0, 1), (0, 0, 0)), np.arange(3)[:, None])
        assert t.coords[:, 1:].tolist() == [[0, 0, 0], [1, 0, 0], [0, 0, 1]]
        assert t.features.ravel().tolist() == [2, 0, 1]
        with pytest.raises(ContractError):
            SparseTensor.from_unsorted(coords_of((0, 0, 0), (0, 0, 0)), np.zeros((2, 1)))

    def test_concat_batches(self, rng):
        a, ma = voxelize(np.column_stack([rng.uniform(0, 1, (50, 3)), np.ones(50)]), 0.3)
        b, mb = voxelize(np.column_stack([rng.uniform(0, 1, (30, 3)), np.ones(30)]), 0.3)
        t, m = concat_batches([a, b], [ma, mb])
        assert t.is_sorted()
        assert m.point_to_voxel.max() == len(t) - 1
        assert np.array_equal(devoxelize(t, m)[50:], b.features[mb.point_to_voxel])


class TestRulebook:
    def test_two_neighbours(self):
        rb = build_rulebook(coords_of((0, 0, 0), (1, 0, 0)), 3)
        assert rb.num_pairs == 4
        plus_x = rb.offset_id((1, 0, 0))
        minus_x = rb.offset_id((-1, 0, 0))
        assert list(zip(*rb.pairs(plus_x))) == [(1, 0)]
        assert list(zip(*rb.pairs(minus_x))) == [(0, 1)]
        assert len(rb.pairs(rb.offset_id((0, 0, 0)))[0]) == 2

    def test_single_voxel_k5(self):
        assert build_rulebook(coords_of((3, 3, 3)), 5).num_pairs == 1

    def test_strided_merge(self):
        rb = build_rulebook(coords_of((0, 0, 0), (1, 1, 1)), 2, ("strided", 2))
        assert rb.out_coords.tolist() == [[0, 0, 0, 0]]
        assert rb.num_pairs == 2

    def test_even_submanifold_kernel_rejected(self):
        with pytest.raises(ConfigError):
            build_rulebook(coords_of((0, 0, 0)), 4)
        with pytest.raises(ConfigError):
            build_rulebook(coords_of((0, 0, 0)), 3, ("strided", 2))

    def test_closure_and_center(self, rng):
        t = SparseTensor.from_unsorted(random_coords(rng, 80, batches=2), np.zeros((80, 1)))
        rb = build_rulebook(t, 5)
        assert np.array_equal(rb.out_coords, t.coords)
        i, o = rb.pairs(rb.offset_id((0, 0, 0)))
        assert np.array_equal(i, np.arange(80)) and np.array_equal(o, np.arange(80))
        assert rb.in_idx.max() < rb.n_in and rb.out_idx.max() < rb.n_out

    def test_pairs_match_brute_force(self, rng):
        coords = SparseTensor.from_unsorted(random_coords(rng, 60, extent=3, batches=2),
                                            np.zeros((60, 1))).coords
        rb = build_rulebook(coords, 3)
        lookup = {tuple(c): r for r, c in enumerate(coords.tolist())}
        expected = set()
        for j, (b, x, y, z) in enumerate(coords.tolist()):
            for d, (dx, dy, dz) in enumerate(rb.offsets.tolist()):
                i = lookup.get((b, x + dx, y + dy, z + dz))
                if i is not None:
                    expected.add((d, i, j))
        got = {(d, i, j) for d in range(27) for i, j in zip(*rb.pairs(d))}
        assert got == expected

    def test_pair_symmetry(self, rng):
        coords = SparseTensor.from_unsorted(random_coords(rng, 70, extent=3), np.zeros((70, 1))).coords
        rb = build_rulebook(coords, 3)
        pairs = {(tuple(off), i, j) for d, off in enumerate(rb.offsets.tolist())
                 for i, j in zip(*rb.pairs(d))}
        for (dx, dy, dz), i, j in pairs:
            assert ((-dx, -dy, -dz), j, i) in pairs

    def test_sparse_extent_uses_hash_path(self):
        coords = coords_of((-2**30, 0, 0), (2**30, 0, 0), (2**30 + 1, 0, 0), (0, 2**30, -2**30))
        rb = build_rulebook(SparseTensor.from_unsorted(coords, np.zeros((4, 1))), 3)
        assert rb.num_pairs == 6

    def test_strided_parents_and_offsets(self, rng):
        coords = SparseTensor.from_unsorted(random_coords(rng, 50), np.zeros((50, 1))).coords
        rb = strided_rulebook(coords, 2)
        parents = np.floor_divide(coords[:, 1:], 2)
        for d in range(8):
            i, j = rb.pairs(d)
            child = coords[i, 1:] - 2 * rb.out_coords[j, 1:]
            assert np.all((child[:, 2] * 2 + child[:, 1]) * 2 + child[:, 0] == d)
            assert np.array_equal(rb.out_coords[j, 1:], parents[i])
        assert rb.num_pairs == 50
        twice = strided_rulebook(rb.out_coords, 2).out_coords
        expect = np.unique(np.column_stack([coords[:, :1], np.floor_divide(coords[:, 1:], 4)]), axis=0)
        assert sorted(map(tuple, twice.tolist())) == sorted(map(tuple, expect.tolist()))

    def test_transpose_roundtrip(self, rng):
        coords = SparseTensor.from_unsorted(random_coords(rng, 40), np.zeros((40, 1))).coords
        rb = strided_rulebook(coords, 2)
        tr = rb.transpose()
        assert tr.n_in == rb.n_out and tr.n_out == rb.n_in
        assert np.array_equal(tr.out_coords, coords)
        assert tr.transpose().num_pairs == rb.num_pairs


class TestDevoxelize:
    def test_broadcast_to_points(self):
        t = SparseTensor(coords_of((0, 0, 0)), np.array([[2.0]]))
        m = VoxelMap(np.zeros(3, dtype=np.int64), np.array([3]))
        assert devoxelize(t, m).tolist() == [[2.0]] * 3

    def test_identity_map(self, rng):
        t = SparseTensor.from_unsorted(random_coords(rng, 10), rng.standard_normal((10, 2)))
        m = VoxelMap(np.arange(10), np.ones(10, dtype=np.int64))
        assert np.array_equal(devoxelize(t, m), t.features)

    def test_inconsistent_maps(self):
        t = SparseTensor(coords_of((0, 0, 0)), np.array([[2.0]]))
        with pytest.raises(ConsistencyError):
            devoxelize(t, VoxelMap(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)))
        with pytest.raises(ConsistencyError):
            devoxelize(t, VoxelMap(np.array([1]), np.array([1])))
