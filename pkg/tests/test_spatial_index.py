import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shapegrasp.spatial_index import NnIndex, build_index, minibatch_schedule, nearest, sample_minibatch


def brute_force(cloud, queries):
    d = np.linalg.norm(queries[:, None, :] - cloud[None, :, :], axis=-1)
    idx = np.argmin(d, axis=1)  # first minimum = lowest index
    return idx, d[np.arange(len(queries)), idx]


class TestIndex:
    def test_single_point(self):
        idx = build_index([[1.0, 2.0, 3.0]])
        point, i, dist = nearest(idx, [1.0, 2.0, 4.0])
        assert i == 0 and dist == pytest.approx(1.0)
        np.testing.assert_array_equal(point, [1, 2, 3])

    def test_matches_brute_force(self, rng):
        cloud = rng.uniform(-1, 1, (1000, 3))
        queries = rng.uniform(-1.2, 1.2, (500, 3))
        i, d = build_index(cloud).query(queries)
        bi, bd = brute_force(cloud, queries)
        np.testing.assert_array_equal(i, bi)
        np.testing.assert_allclose(d, bd, rtol=0, atol=1e-15)

    def test_duplicates_kept(self):
        cloud = np.zeros((7, 3))
        idx = build_index(cloud)
        assert len(idx) == 7
        assert nearest(idx, [1, 1, 1])[1] == 0

    def test_exact_hit(self, rng):
        cloud = rng.standard_normal((50, 3))
        point, i, dist = nearest(build_index(cloud), cloud[17])
        assert i == 17 and dist == 0.0

    def test_tie_goes_to_lower_index(self):
        cloud = np.array([[5, 5, 5], [1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
        assert nearest(build_index(cloud), [0, 0, 0])[1] == 1
        assert nearest(build_index(cloud[::-1].copy()), [0, 0, 0])[1] == 0

    def test_ties_on_grid_match_brute_force(self):
        ticks = np.arange(5, dtype=float)
        cloud = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1).reshape(-1, 3)
        queries = np.stack(np.meshgrid(ticks + 0.5, ticks, ticks + 0.5, indexing="ij"), -1).reshape(-1, 3)
        i, _ = build_index(cloud).query(queries)
        np.testing.assert_array_equal(i, brute_force(cloud, queries)[0])

    def test_snapshot_is_immutable(self):
        cloud = np.zeros((3, 3))
        idx = NnIndex(cloud)
        cloud[0] = 9.0
        assert np.all(idx.points == 0.0)
        with pytest.raises(ValueError):
            idx.points[0, 0] = 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_index(np.empty((0, 3)))


class TestMinibatch:
    def test_full_is_permutation(self, rng):
        cloud = rng.standard_normal((30, 3))
        batch = sample_minibatch(cloud, 30, rng)
        np.testing.assert_array_equal(np.sort(batch, axis=0), np.sort(cloud, axis=0))

    def test_single(self, rng):
        cloud = rng.standard_normal((30, 3))
        batch = sample_minibatch(cloud, 1, rng)
        assert batch.shape == (1, 3) and any(np.array_equal(batch[0], c) for c in cloud)

    def test_seeded(self, rng):
        cloud = rng.standard_normal((30, 3))
        a = sample_minibatch(cloud, 10, np.random.default_rng(4))
        b = sample_minibatch(cloud, 10, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)

    def test_no_repeats(self, rng):
        cloud = rng.standard_normal((100, 3))
        batch = sample_minibatch(cloud, 60, rng)
        assert np.unique(batch, axis=0).shape[0] == 60

    @pytest.mark.parametrize("m", [0, 31])
    def test_out_of_range(self, rng, m):
        with pytest.raises(ValueError):
            sample_minibatch(np.zeros((30, 3)), m, rng)


class TestSchedule:
    def test_examples(self):
        assert minibatch_schedule(0, 40, 900) == 1
        assert minibatch_schedule(27, 40, 900) == 900
        assert minibatch_schedule(40, 40, 900) == 900
        # k = k_max / 3 is half the ramp
        assert minibatch_schedule(40 // 3, 40, 900) == math.floor(900 * (13 / (80 / 3)) + 0.5)
        assert abs(minibatch_schedule(40 // 3, 40, 900) - 450) <= 900 / (80 / 3)

    @given(st.integers(1, 200), st.integers(1, 5000))
    def test_formula_and_bounds(self, k_max, n):
        ramp = 2 * k_max / 3
        prev = 0
        for k in range(k_max + 1):
            m = minibatch_schedule(k, k_max, n)
            assert m == max(1, min(n, math.floor(n * min(k, ramp) / ramp + 0.5)))
            assert 1 <= m <= n and m >= prev
            prev = m
            if k >= ramp:
                assert m == n
