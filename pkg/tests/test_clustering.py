import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posevote.clustering import (
    Bandwidths,
    density_estimates,
    density_threshold_filter,
    modal_pose,
    read_modes_csv,
    top_modes_nms,
    write_modes_csv,
)
from posevote.geom3d import ContractError, Pose, geodesic_distance, rotation_from_axis_angle
from posevote.voting import VoteSet

from conftest import random_rotation, random_unit

BW = Bandwidths()


def make_votes(R, c, source=None):
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    c = np.asarray(c, dtype=float).reshape(-1, 3)
    src = np.arange(len(c)) if source is None else np.asarray(source)
    return VoteSet(R, c.copy(), c, src, 1)


def brute_density(votes, bw):
    """Plain double loop over all ordered pairs, truncated at one bandwidth per factor."""
    n = len(votes)
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            dt = np.sqrt(np.sum((votes.centers[i] - votes.centers[j]) ** 2))
            tr = np.trace(votes.rotations[i].T @ votes.rotations[j])
            dr = np.arccos(min(1.0, max(-1.0, (tr - 1) / 2)))
            if dt <= bw.sigma_t and dr <= bw.sigma_r:
                out[i] += np.exp(-dt**2 / (2 * bw.sigma_t**2)) * np.exp(-dr**2 / (2 * bw.sigma_r**2))
    return out


def clustered_votes(rng, n, n_clusters=4, spread_t=0.01, spread_r=0.3):
    bases_R = [random_rotation(rng) for _ in range(n_clusters)]
    bases_t = rng.uniform(-0.02, 0.02, size=(n_clusters, 3))
    k = rng.integers(0, n_clusters, n)
    R = np.array([rotation_from_axis_angle(random_unit(rng), rng.uniform(0, spread_r)) @ bases_R[i] for i in k])
    c = bases_t[k] + rng.normal(scale=spread_t, size=(n, 3))
    return make_votes(R, c)


def tight_cluster(rng, T, n, sigma_t=0.001, sigma_r=0.02):
    R = [rotation_from_axis_angle(random_unit(rng), abs(rng.normal(scale=sigma_r))) @ T.rotation for _ in range(n)]
    c = T.translation + rng.normal(scale=sigma_t, size=(n, 3))
    return np.array(R), c


class TestBandwidths:
    def test_defaults(self):
        assert BW.sigma_t == 0.01
        assert np.degrees(BW.sigma_r) == pytest.approx(22.5)

    def test_relative(self):
        assert Bandwidths.relative(0.25, 0.04).sigma_t == pytest.approx(0.01)

    def test_invalid(self):
        with pytest.raises(ContractError):
            Bandwidths(0.0, 0.1)
        with pytest.raises(ContractError):
            Bandwidths(0.01, 4.0)


class TestDensity:
    def test_single(self):
        assert density_estimates(make_votes(np.eye(3), np.zeros(3)), BW).tolist() == [1.0]

    def test_two_identical(self):
        R = random_rotation(np.random.default_rng(1))
        d = density_estimates(make_votes([R, R], [[0.1, 0.2, 0.3]] * 2), BW)
        np.testing.assert_allclose(d, [2.0, 2.0], rtol=1e-12)

    def test_neighbour_at_one_bandwidth(self):
        d = density_estimates(make_votes([np.eye(3)] * 2, [[0, 0, 0], [0.01, 0, 0]]), BW)
        np.testing.assert_allclose(d, 1 + np.exp(-0.5), rtol=1e-12)

    def test_rotation_at_one_bandwidth(self):
        R = rotation_from_axis_angle(np.array([0.0, 0, 1]), BW.sigma_r * (1 - 1e-9))
        d = density_estimates(make_votes([np.eye(3), R], np.zeros((2, 3))), BW)
        np.testing.assert_allclose(d, 1 + np.exp(-0.5), rtol=1e-6)

    def test_just_outside_is_truncated(self):
        d = density_estimates(make_votes([np.eye(3)] * 2, [[0, 0, 0], [0.0100001, 0, 0]]), BW)
        assert d.tolist() == [1.0, 1.0]
        R = rotation_from_axis_angle(np.array([0.0, 0, 1]), BW.sigma_r * 1.0001)
        d = density_estimates(make_votes([np.eye(3), R], np.zeros((2, 3))), BW)
        assert d.tolist() == [1.0, 1.0]

    def test_brute_force_500(self, rng):
        votes = clustered_votes(rng, 500)
        np.testing.assert_allclose(density_estimates(votes, BW), brute_density(votes, BW), rtol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 2000), st.floats(0.002, 0.05), st.floats(0.05, 3.0))
    def test_brute_force_random(self, seed, n, sigma_t, sigma_r):
        rng = np.random.default_rng(seed)
        votes = clustered_votes(rng, n, n_clusters=int(rng.integers(1, 6)))
        bw = Bandwidths(sigma_t, sigma_r)
        np.testing.assert_allclose(density_estimates(votes, bw), brute_density_vec(votes, bw), rtol=1e-9)

    def test_kernel_bounds(self, rng):
        votes = clustered_votes(rng, 300)
        d = density_estimates(votes, BW)
        count = neighbour_counts(votes, BW)
        # each of the count - 1 other neighbours contributes a value in (e^-1, 1]
        assert np.all(d - 1 <= count - 1 + 1e-9)
        assert np.all(d - 1 >= np.exp(-1) * (count - 1) - 1e-9)
        assert np.all(d >= 1)

    def test_monotone_under_duplication(self, rng):
        votes = clustered_votes(rng, 200)
        d = density_estimates(votes, BW)
        k = 17
        dup = make_votes(np.concatenate([votes.rotations, votes.rotations[k:k + 1]]),
                         np.concatenate([votes.centers, votes.centers[k:k + 1]]))
        d2 = density_estimates(dup, BW)
        assert np.all(d2[:200] >= d - 1e-12)
        assert d2[k] == pytest.approx(d[k] + 1, rel=1e-9)

    def test_far_outliers(self, rng):
        # widely spread centres must not blow up the grid
        votes = clustered_votes(rng, 300)
        far = make_votes([np.eye(3)] * 2, [[50.0, -40, 30], [-60, 20, 10]])
        both = make_votes(np.concatenate([votes.rotations, far.rotations]),
                          np.concatenate([votes.centers, far.centers]))
        d = density_estimates(both, BW)
        np.testing.assert_allclose(d[:300], density_estimates(votes, BW), rtol=1e-12)
        assert d[300:].tolist() == [1.0, 1.0]

    def test_empty(self):
        with pytest.raises(ContractError):
            density_estimates(make_votes(np.zeros((0, 3, 3)), np.zeros((0, 3))), BW)


def brute_density_vec(votes, bw):
    c, R = votes.centers, votes.rotations.reshape(-1, 9)
    dt = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
    dr = np.arccos(np.clip((R @ R.T - 1) / 2, -1, 1))
    K = np.exp(-dt**2 / (2 * bw.sigma_t**2)) * np.exp(-dr**2 / (2 * bw.sigma_r**2))
    K[(dt > bw.sigma_t) | (dr > bw.sigma_r)] = 0
    np.fill_diagonal(K, 1.0)
    return K.sum(axis=1)


def neighbour_counts(votes, bw):
    c, R = votes.centers, votes.rotations.reshape(-1, 9)
    dt = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
    dr = np.arccos(np.clip((R @ R.T - 1) / 2, -1, 1))
    inside = (dt <= bw.sigma_t) & (dr <= bw.sigma_r)
    np.fill_diagonal(inside, True)
    return inside.sum(axis=1)


class TestModalPose:
    def test_all_identical(self):
        votes = make_votes([np.eye(3)] * 5, np.zeros((5, 3)))
        m = modal_pose(votes, density_estimates(votes, BW))
        assert m.vote_id == 0
        assert m.density == pytest.approx(5.0)

    def test_outlier_robust(self, rng):
        for _ in range(10):
            T = Pose(random_rotation(rng), rng.uniform(-0.3, 0.3, 3))
            Ri, ci = tight_cluster(rng, T, 10)
            Ro = np.array([random_rotation(rng) for _ in range(490)])
            co = rng.uniform(-0.5, 0.5, size=(490, 3))
            perm = rng.permutation(500)
            votes = make_votes(np.concatenate([Ri, Ro])[perm], np.concatenate([ci, co])[perm])
            m = modal_pose(votes, density_estimates(votes, BW))
            assert np.linalg.norm(m.pose.translation - T.translation) <= BW.sigma_t
            assert geodesic_distance(m.pose.rotation, T.rotation) <= BW.sigma_r

    def test_tie_lowest_index(self):
        R = rotation_from_axis_angle(np.array([1.0, 0, 0]), 2.0)
        votes = make_votes([R, np.eye(3), R, np.eye(3)], [[1, 0, 0], [0, 0, 0], [1, 0, 0], [0, 0, 0]])
        d = density_estimates(votes, BW)
        assert d.tolist() == [2.0, 2.0, 2.0, 2.0]
        assert modal_pose(votes, d).vote_id == 0

    def test_equivariance(self, rng):
        votes = clustered_votes(rng, 400)
        d = density_estimates(votes, BW)
        G = Pose(random_rotation(rng), rng.normal(size=3))
        moved = votes.transformed(G)
        d2 = density_estimates(moved, BW)
        np.testing.assert_allclose(d2, d, rtol=1e-9)
        m, m2 = modal_pose(votes, d), modal_pose(moved, d2)
        assert m2.vote_id == m.vote_id
        np.testing.assert_allclose(m2.pose.matrix(), (G @ m.pose).matrix(), atol=1e-9)

    def test_empty(self):
        with pytest.raises(ContractError):
            modal_pose(make_votes(np.zeros((0, 3, 3)), np.zeros((0, 3))), np.zeros(0))


class TestNms:
    def test_one_cluster(self, rng):
        R, c = tight_cluster(rng, Pose.identity(), 50)
        votes = make_votes(R, c)
        modes = top_modes_nms(votes, density_estimates(votes, BW), 10, 0.05)
        assert len(modes) == 1

    def test_two_clusters(self, rng):
        nms = 0.05
        R1, c1 = tight_cluster(rng, Pose.identity(), 30)
        R2, c2 = tight_cluster(rng, Pose(np.eye(3), [3 * nms, 0, 0]), 20)
        votes = make_votes(np.concatenate([R2, R1]), np.concatenate([c2, c1]))
        modes = top_modes_nms(votes, density_estimates(votes, BW), 10, nms)
        assert len(modes) == 2
        assert modes[0].density > modes[1].density
        assert np.linalg.norm(modes[0].pose.translation) < 0.01

    def test_per_correspondence_candidates(self, rng):
        R, c = tight_cluster(rng, Pose.identity(), 40)
        votes = make_votes(R, c, source=np.repeat(np.arange(8), 5))
        d = density_estimates(votes, BW)
        modes = top_modes_nms(votes, d, 10, 1e-9)
        assert len(modes) == 8
        for m in modes:
            block = votes.source == votes.source[m.vote_id]
            assert m.density == d[block].max()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.1), st.integers(1, 20))
    def test_separation(self, seed, radius, k):
        rng = np.random.default_rng(seed)
        votes = clustered_votes(rng, 300, spread_t=0.05)
        modes = top_modes_nms(votes, density_estimates(votes, BW), k, radius, per_correspondence=False)
        assert 1 <= len(modes) <= k
        dens = [m.density for m in modes]
        assert dens == sorted(dens, reverse=True)
        for i in range(len(modes)):
            for j in range(i):
                assert np.linalg.norm(modes[i].pose.translation - modes[j].pose.translation) > radius

    def test_k_positive(self, rng):
        votes = clustered_votes(rng, 5)
        with pytest.raises(ContractError):
            top_modes_nms(votes, np.ones(5), 0, 0.1)


class TestThreshold:
    def test_filter(self, rng):
        nms = 0.05
        R1, c1 = tight_cluster(rng, Pose.identity(), 30)
        R2, c2 = tight_cluster(rng, Pose(np.eye(3), [0.2, 0, 0]), 10)
        votes = make_votes(np.concatenate([R1, R2]), np.concatenate([c1, c2]))
        modes = top_modes_nms(votes, density_estimates(votes, BW), 5, nms)
        assert len(modes) == 2
        assert density_threshold_filter(modes, 0) == modes
        assert density_threshold_filter(modes, modes[0].density + 1) == []
        mid = 0.5 * (modes[0].density + modes[1].density)
        assert density_threshold_filter(modes, mid) == modes[:1]
        with pytest.raises(ContractError):
            density_threshold_filter(modes, -1)

    def test_csv_round_trip(self, rng, tmp_path):
        votes = clustered_votes(rng, 50)
        modes = top_modes_nms(votes, density_estimates(votes, BW), 3, 0.01)
        write_modes_csv(tmp_path / "m.csv", modes)
        back = read_modes_csv(tmp_path / "m.csv")
        assert [m.vote_id for m in back] == [m.vote_id for m in modes]
        for a, b in zip(back, modes):
            assert a.density == b.density
            assert np.array_equal(a.pose.matrix(), b.pose.matrix())
