import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from msi.errors import ConfigError, ShapeError
from msi.vsc import (
    VscConfig,
    calibrate_gamma,
    compress,
    fuse_semantic,
    merge_irrelevant,
    partition,
    replay_merges,
    routing_matrix,
    score_tokens,
)


def oracle_compress(v, g, tau, gamma, alpha, normalize):
    """Plain-Python re-derivation: pool, fuse, score, threshold, sequential merges."""
    n, d = len(v), len(v[0])
    v_cls = [sum(v[i][c] for i in range(n)) / n for c in range(d)]
    m = [v_cls[c] + g[c] for c in range(d)]

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    def norm(a):
        return math.sqrt(dot(a, a))
    scores = []
    for row in v:
        if normalize:
            nr, nm = norm(row), norm(m)
            s = dot(row, m) / (nr * nm) if nr > 0 and nm > 0 else 0.0
        else:
            s = dot(row, m)
        scores.append(s / tau)
    rel = [i for i in range(n) if scores[i] >= gamma]
    if not rel:
        best = max(range(n), key=lambda i: (scores[i], -i))
        rel = [best]
    irr = [i for i in range(n) if i not in rel]
    merged = [list(v[i]) for i in rel]
    mm = []
    for i in irr:
        sims = [dot(v[i], r) for r in merged]
        j = sims.index(max(sims))
        merged[j] = [alpha * a + (1 - alpha) * b for a, b in zip(merged[j], v[i])]
        mm.append((i, j))
    return scores, rel, irr, merged, mm


def random_case(draw_seed, n, d):
    rng = np.random.default_rng(draw_seed)
    return rng.normal(size=(n, d)), rng.normal(size=d)


class TestConfig:
    def test_rejects_bad_tau_alpha(self):
        with pytest.raises(ConfigError):
            VscConfig(tau=0.0)
        with pytest.raises(ConfigError):
            VscConfig(alpha=1.5)


class TestFuse:
    def test_zero_semantic(self):
        assert fuse_semantic([1.0, 2.0], [0.0, 0.0]).m_cls.tolist() == [1.0, 2.0]

    def test_sum(self):
        a = fuse_semantic([1.0, 2.0], [3.0, -1.0])
        assert a.m_cls.tolist() == [4.0, 1.0]
        assert a.v_cls.tolist() == [1.0, 2.0] and a.g_cls.tolist() == [3.0, -1.0]

    def test_commutative(self):
        x, y = [0.3, -1.2, 5.0], [2.2, 0.1, -0.4]
        assert np.array_equal(fuse_semantic(x, y).m_cls, fuse_semantic(y, x).m_cls)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            fuse_semantic([1.0], [1.0, 2.0])


class TestScore:
    def test_self_alignment(self):
        m = np.array([0.5, -2.0, 1.0])
        anchor = fuse_semantic(m, np.zeros(3))
        s = score_tokens(np.tile(m, (4, 1)), anchor, VscConfig(tau=1.0, normalize=True))
        np.testing.assert_allclose(s, 1.0, atol=1e-15)

    def test_tau_scaling(self):
        v, g = random_case(0, 5, 3)
        anchor = fuse_semantic(v.mean(axis=0), g)
        s1 = score_tokens(v, anchor, VscConfig(tau=1.0))
        s2 = score_tokens(v, anchor, VscConfig(tau=0.5))
        np.testing.assert_allclose(s2, 2 * s1, rtol=1e-15)

    def test_raw_dot_product(self):
        v, g = random_case(7, 4, 2)
        anchor = fuse_semantic(v.mean(axis=0), g)
        s = score_tokens(v, anchor, VscConfig(tau=2.0, normalize=False))
        m = anchor.m_cls
        oracle = [(v[i][0] * m[0] + v[i][1] * m[1]) / 2.0 for i in range(4)]
        np.testing.assert_allclose(s, oracle, rtol=1e-14)


class TestPartition:
    def test_all_relevant(self):
        assert partition([0.2, 0.5, -0.1], -1.0) == ([0, 1, 2], [])

    def test_promotes_argmax(self):
        assert partition([0.2, 0.5, 0.5, -0.1], 9.0) == ([1], [0, 2, 3])

    def test_threshold(self):
        assert partition([0.9, 0.1, 0.5, 0.7], 0.6) == ([0, 3], [1, 2])


class TestMerge:
    def test_empty_irrelevant(self):
        z = np.array([[1.0, 2.0], [3.0, 4.0]])
        merged, mm = merge_irrelevant(z, np.zeros((0, 2)), 0.5)
        assert np.array_equal(merged, z) and mm == []

    def test_alpha_one_keeps_rows(self):
        rng = np.random.default_rng(0)
        z, zl = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        merged, mm = merge_irrelevant(z, zl, 1.0)
        assert np.array_equal(merged, z) and len(mm) == 5

    def test_hand_computed(self):
        z_r = np.array([[1.0, 0.0], [0.0, 2.0]])
        z_lr = np.array([[1.0, 3.0]])
        # dots: row0 -> 1, row1 -> 6, so target is position 1
        merged, mm = merge_irrelevant(z_r, z_lr, 0.5)
        assert mm == [(0, 1)]
        assert merged.tolist() == [[1.0, 0.0], [0.5, 2.5]]

    def test_tie_goes_to_lowest(self):
        merged, mm = merge_irrelevant(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 1.0]]), 0.5)
        assert mm == [(0, 0)]

    def test_sequential_updates_visible(self):
        # first merge moves row 0 so the second irrelevant row prefers it
        z_r = np.array([[1.0, 0.0], [0.0, 1.0]])
        z_lr = np.array([[1.0, 1.0], [0.8, 0.9]])
        merged, mm = merge_irrelevant(z_r, z_lr, 0.5)
        # against the original rows the second would pick position 1 (0.9 > 0.8)
        assert mm == [(0, 0), (1, 0)]


class TestCompress:
    def test_singleton(self):
        v = np.array([[0.3, -0.7]])
        res = compress(v, np.array([1.0, 1.0]), VscConfig(gamma=5.0))
        assert res.relevant_indices == [0] and np.array_equal(res.merged, v)

    def test_homogeneous(self):
        v = np.tile([1.0, 2.0, -1.0], (6, 1))
        res = compress(v, np.zeros(3), VscConfig(gamma=0.5))
        assert np.allclose(res.similarities, res.similarities[0])
        assert res.relevant_indices == list(range(6)) and np.array_equal(res.merged, v)

    def test_crafted_against_oracle(self):
        g = np.array([10.0, 0.0])
        v = np.array([[1.0, 0.1], [0.0, 1.0], [0.9, -0.1], [0.1, -1.0]])
        cfg = VscConfig(tau=1.0, gamma=0.5, alpha=0.5, normalize=True)
        res = compress(v, g, cfg)
        scores, rel, irr, merged, mm = oracle_compress(v.tolist(), g.tolist(), 1.0, 0.5, 0.5, True)
        assert res.relevant_indices == rel == [0, 2]
        assert res.irrelevant_indices == irr == [1, 3]
        assert res.merge_map == mm
        np.testing.assert_allclose(res.similarities, scores, rtol=1e-13)
        np.testing.assert_allclose(res.merged, merged, rtol=1e-15, atol=0)

    @pytest.mark.parametrize("normalize", [True, False])
    @pytest.mark.parametrize("seed", range(20))
    def test_random_against_oracle(self, seed, normalize):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 12)), int(rng.integers(2, 6))
        v, g = rng.normal(size=(n, d)), rng.normal(size=d)
        gamma = float(rng.normal(0, 0.5))
        alpha = float(rng.uniform())
        res = compress(v, g, VscConfig(tau=0.7, gamma=gamma, alpha=alpha, normalize=normalize))
        scores, rel, irr, merged, mm = oracle_compress(v.tolist(), g.tolist(), 0.7, gamma, alpha, normalize)
        assert (res.relevant_indices, res.irrelevant_indices, res.merge_map) == (rel, irr, mm)
        np.testing.assert_allclose(res.merged, merged, rtol=1e-12, atol=1e-12)


seeds = st.integers(0, 2**32 - 1)


class TestProperties:
    @given(seeds, st.integers(1, 40), st.integers(2, 16), st.floats(-1.5, 1.5))
    @settings(max_examples=60, deadline=None)
    def test_partition_and_size(self, seed, n, d, gamma):
        v, g = random_case(seed, n, d)
        res = compress(v, g, VscConfig(gamma=gamma))
        rel, irr = set(res.relevant_indices), set(res.irrelevant_indices)
        assert rel | irr == set(range(n)) and not rel & irr
        assert 1 <= res.merged.shape[0] == len(rel) <= n
        assert sorted(i for i, _ in res.merge_map) == res.irrelevant_indices
        assert all(0 <= j < len(rel) for _, j in res.merge_map)

    @given(seeds, st.integers(1, 30), st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_alpha_one_conservation(self, seed, n, d):
        v, g = random_case(seed, n, d)
        res = compress(v, g, VscConfig(alpha=1.0, gamma=0.2))
        assert np.array_equal(res.merged, v[res.relevant_indices])

    @given(seeds, st.integers(1, 30), st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_replay_half_alpha(self, seed, n, d):
        v, g = random_case(seed, n, d)
        res = compress(v, g, VscConfig(alpha=0.5, gamma=0.1))
        assert np.array_equal(replay_merges(v, res.relevant_indices, res.merge_map, 0.5), res.merged)

    @given(seeds, st.integers(1, 30), st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_gamma_monotone(self, seed, n, d):
        v, g = random_case(seed, n, d)
        sizes = [len(compress(v, g, VscConfig(gamma=gm)).relevant_indices) for gm in np.linspace(-1.1, 1.1, 12)]
        assert all(a >= b for a, b in zip(sizes, sizes[1:])) and sizes[-1] >= 1

    @given(seeds, st.integers(2, 20), st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_permutation_invariance(self, seed, n, d):
        v, g = random_case(seed, n, d)
        perm = np.random.default_rng(seed + 1).permutation(n)
        cfg = VscConfig(gamma=0.1)
        a, b = compress(v, g, cfg), compress(v[perm], g, cfg)
        assume(len(np.unique(np.round(a.similarities, 12))) == n)
        kept_a = {tuple(r) for r in v[a.relevant_indices]}
        kept_b = {tuple(r) for r in v[perm][b.relevant_indices]}
        assert kept_a == kept_b

    @given(seeds, st.integers(1, 20), st.integers(2, 6), st.floats(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_routing_matrix_reproduces_merge(self, seed, n, d, alpha):
        v, g = random_case(seed, n, d)
        res = compress(v, g, VscConfig(alpha=alpha, gamma=0.0))
        r = routing_matrix(n, res.relevant_indices, res.merge_map, alpha)
        np.testing.assert_allclose(r @ v, res.merged, atol=1e-12)


class TestCalibrateGamma:
    def test_separable_picks_widest_gap(self):
        gamma = calibrate_gamma([np.array([0.9, 0.1, 0.8, 0.2])], [[1, 3]])
        assert gamma == pytest.approx(0.5)

    def test_overlap_minimises_errors(self):
        scores = [np.array([0.9, 0.6, 0.4, 0.1, 0.55])]
        # foreground 0, 1, 2; background 3, 4. best cuts misplace one token
        gamma = calibrate_gamma(scores, [[3, 4]])
        fg, bg = [0.9, 0.6, 0.4], [0.1, 0.55]
        errors = sum(s < gamma for s in fg) + sum(s >= gamma for s in bg)
        assert errors == 1

    def test_needs_both_kinds(self):
        with pytest.raises(ValueError):
            calibrate_gamma([np.array([0.3, 0.4])], [[]])
