import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupattn.grouping import Grouping, kmeans_group
from groupattn.scheduler import (Cluster, ContractError, SchedulerState, distance_threshold, halve,
                                 halved_merge_scan, merge_cost, mergeable, merged_center,
                                 momentum_update, step)


def cluster(center, offsets):
    center = np.asarray(center, dtype=np.float64)
    return Cluster(center, center + np.asarray(offsets, dtype=np.float64))


def random_clusters(rng, k, d=3, spread=0.1, scale=1.0):
    out = []
    for _ in range(k):
        c = rng.normal(0, scale, d)
        size = int(rng.integers(1, 6))
        members = c + rng.normal(0, spread, (size, d))
        out.append(Cluster(members.mean(axis=0), members))
    return out


def mutual_threshold(clusters):
    """Smallest d for which every ordered pair passes the merge condition."""
    return max(merge_cost(a, b) for a in clusters for b in clusters)


class TestMergeable:
    def test_identical_singletons(self):
        a, b = cluster([1.0, 2.0], [[0, 0]]), cluster([1.0, 2.0], [[0, 0]])
        assert mergeable(a, b, 0.0)

    def test_far_apart(self):
        a, b = cluster([0.0], [[0.0]]), cluster([5.0], [[0.0]])
        assert not mergeable(a, b, 4.9)
        assert mergeable(a, b, 5.0)

    def test_cost_includes_spread(self):
        a = cluster([0.0, 0.0], [[0.5, 0.0], [-0.5, 0.0]])
        b = cluster([1.0, 0.0], [[0.0, 0.0]])
        assert merge_cost(a, b) == 1.5
        assert merge_cost(b, a) == 1.0

    def test_empty_cluster(self):
        with pytest.raises(ContractError):
            mergeable(Cluster(np.zeros(1), np.zeros((0, 1))), cluster([0.0], [[0.0]]), 1.0)

    def test_merged_center_is_size_weighted(self):
        a = cluster([0.0], [[0.0], [0.0], [0.0]])
        b = cluster([4.0], [[0.0]])
        np.testing.assert_allclose(merged_center([a, b]), [1.0])


class TestContainment:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_members_within_d_of_merged_center(self, k, seed):
        clusters = random_clusters(np.random.default_rng(seed), k)
        d = mutual_threshold(clusters)
        assert all(mergeable(a, b, d) for a in clusters for b in clusters)
        center = merged_center(clusters)
        for c in clusters:
            assert np.all(np.linalg.norm(c.members - center, axis=1) <= d)


class TestHalvedScan:
    def test_halve_by_norm(self):
        cs = [cluster([3.0], [[0]]), cluster([1.0], [[0]]), cluster([2.0], [[0]])]
        first, second = halve(cs)
        assert first == [1, 2] and second == [0]

    def test_identical_singletons_mark_half(self):
        for n in (2, 5, 8):
            cs = [cluster([1.0, 1.0], [[0, 0]]) for _ in range(n)]
            assert halved_merge_scan(cs, 0.1).merged == n // 2

    def test_distant_clusters(self):
        cs = [cluster([10.0 * i, 0.0], [[0, 0]]) for i in range(6)]
        assert halved_merge_scan(cs, 1.0).merged == 0

    def test_single_cluster(self):
        assert halved_merge_scan([cluster([0.0], [[0.0]])], 1.0).merged == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 12), st.floats(0.05, 3.0), st.integers(0, 2**32 - 1))
    def test_marked_pairs_satisfy_both_conditions(self, k, d, seed):
        clusters = random_clusters(np.random.default_rng(seed), k, spread=0.05, scale=0.5)
        scan = halved_merge_scan(clusters, d)
        assert not set(scan.marked) & set(scan.first)
        for j in scan.marked:
            i = scan.partner[j]
            pair = [clusters[i], clusters[j]]
            assert mergeable(clusters[i], clusters[j], d) and mergeable(clusters[j], clusters[i], d)
            center = merged_center(pair)
            for c in pair:
                assert np.all(np.linalg.norm(c.members - center, axis=1) <= d)


class TestMomentum:
    def test_spot_value(self):
        assert momentum_update(100, 20, 0.5) == 90

    def test_no_smoothing(self):
        assert momentum_update(50, 10, 1.0) == 40

    def test_nothing_merged(self):
        assert momentum_update(17.5, 0, 0.9) == 17.5

    def test_floor(self):
        assert momentum_update(2, 2, 1.0) == 1.0

    @pytest.mark.parametrize("n,merged,alpha", [(5, 6, 0.5), (5, -1, 0.5), (5, 1, 0.0), (5, 1, 1.5)])
    def test_contract(self, n, merged, alpha):
        with pytest.raises(ContractError):
            momentum_update(n, merged, alpha)


class TestStep:
    def test_threshold_default_eps(self):
        assert distance_threshold(2.0, 4.0) == math.log(2) / 8

    def test_zero_radius_is_unbounded(self):
        assert distance_threshold(2.0, 0.0) == math.inf
        keys = np.zeros((8, 2))
        g = Grouping.from_assignment(keys, np.arange(8) % 4)
        state = SchedulerState(alpha=1.0, n_current=4.0)
        assert step(state, g, keys) == 2
        assert state.d_threshold == math.inf

    def test_initial_groups(self):
        assert SchedulerState.initial_groups(100) == 25
        assert SchedulerState.initial_groups(10_000) == 1024
        assert SchedulerState.initial_groups(2) == 1

    def test_invalid_state(self):
        with pytest.raises(ContractError):
            SchedulerState(epsilon=1.0)

    def test_converging_keys_shrink_monotonically(self):
        rng = np.random.default_rng(0)
        anchors = rng.normal(size=(3, 4))
        state = SchedulerState()
        n = 64
        history = []
        for epoch in range(15):
            # keys contract toward three anchors as "training" proceeds
            noise = 0.5 * 0.6 ** epoch
            keys = anchors[np.arange(n) % 3] + rng.normal(0, noise, (n, 4))
            g = kmeans_group(keys, state.groups_for(n), seed=epoch)
            step(state, g, keys)
            history.append(state.n_current)
        assert all(b <= a for a, b in zip(history, history[1:]))
        assert history[-1] < SchedulerState.initial_groups(n)
        assert state.n_current >= 1

    def test_round_trip(self):
        s = SchedulerState(epsilon=3.0, alpha=0.5, n_current=7.25)
        back = SchedulerState.from_dict(s.to_dict())
        assert (back.epsilon, back.alpha, back.n_current, back.d_threshold) == (3.0, 0.5, 7.25, math.inf)
