"""Univariate circuit semantics against brute-force leaf enumeration."""

import json
import math

import numpy as np
import pytest

from bitvi.circuit import (BitCircuit, SmoothingSchedule, iter_prefixes,
                           new_circuit)
from bitvi.fixedpoint import FixedPointFormat, parse_bits

SM = SmoothingSchedule(c=0.1)


def random_circuit(rng, fmt, spread=1.5, smoothing=SM):
    c = new_circuit(fmt, smoothing, int(rng.integers(2 ** 31)))
    c.raw += rng.normal(0.0, spread, c.raw.shape)
    return c


def brute_force_entropy(c):
    m = c.leaf_masses()
    return float(-(m * (np.log(m) - math.log(c.fmt.resolution))).sum())


class TestSmoothing:
    def test_equal_pre_weights_give_half(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 1, 2), SM)
        for prefix in iter_prefixes(3):
            assert c.weights(prefix) == (0.5, 0.5)

    def test_worked_value(self):
        # v0=3, v1=1, c=0.1 at depth 2 (alpha=4): (3+0.4)/(4+0.8).
        raw = np.zeros((7, 2))
        raw[3] = [math.log(3.0), 0.0]
        c = BitCircuit(FixedPointFormat(False, 1, 2), SM, raw)
        wl, wr = c.weights(parse_bits("00"))
        assert wl == pytest.approx(3.4 / 4.8, abs=1e-15)
        assert wl + wr == 1.0

    def test_large_c_pulls_to_half(self):
        raw = np.zeros((7, 2))
        raw[1:] = [math.log(5.0), 0.0]
        c = BitCircuit(FixedPointFormat(False, 1, 2),
                       SmoothingSchedule(c=1e6), raw)
        for prefix in ((0,), (1,), (0, 0), (1, 1)):
            assert c.weights(prefix)[0] == pytest.approx(0.5, abs=1e-5)
        # The root is unsmoothed under the quadratic rule (alpha(0) = 0).
        assert c.weights(())[0] == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_scaling_moves_weight_toward_ratio(self):
        # Scaling both pre-weights up weakens the smoothing pull: wL moves
        # strictly from 0.5 toward v0/(v0+v1).
        fmt = FixedPointFormat(False, 0, 2)
        ratio = 3.0 / 4.0
        previous = 0.5
        for t in (1.0, 4.0, 16.0, 64.0):
            raw = np.zeros((3, 2))
            raw[1] = [math.log(3.0 * t), math.log(1.0 * t)]
            c = BitCircuit(fmt, SM, raw)
            wl = c.weights((0,))[0]
            assert 0.5 < wl < ratio
            assert wl > previous
            previous = wl

    def test_alpha_rules(self):
        quad = SmoothingSchedule(c=1.0, alpha_rule="quadratic")
        expo = SmoothingSchedule(c=1.0, alpha_rule="exponential")
        assert list(quad.alpha([0, 1, 2, 3])) == [0.0, 1.0, 4.0, 9.0]
        assert list(expo.alpha([0, 1, 2, 3])) == [1.0, 2.0, 4.0, 8.0]
        offset = SmoothingSchedule(c=1.0, depth_offset=1)
        assert list(offset.alpha([0, 1])) == [1.0, 4.0]

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            SmoothingSchedule(c=0.0)
        with pytest.raises(ValueError):
            SmoothingSchedule(c=1.0, alpha_rule="linear")


class TestInitialization:
    def test_same_seed_is_deterministic(self):
        fmt = FixedPointFormat(True, 1, 4)
        a = new_circuit(fmt, SM, 123)
        b = new_circuit(fmt, SM, 123)
        assert np.array_equal(a.raw, b.raw)

    def test_root_beta_mean(self):
        # B=1: the root has height 1, so wL ~ Beta(2, 2) with mean 0.5.
        fmt = FixedPointFormat(False, 0, 1)
        draws = [new_circuit(fmt, SM, s).left_weights()[0]
                 for s in range(10_000)]
        assert np.mean(draws) == pytest.approx(0.5, abs=0.02)

    def test_variance_shrinks_with_height(self):
        # Beta(2^h, 2^h) tightens as h grows: the root of a deep tree is
        # closer to 0.5 than nodes just above the leaves.
        fmt = FixedPointFormat(True, 2, 5)
        roots, deep = [], []
        for s in range(400):
            c = new_circuit(fmt, SM, s)
            wl = c.left_weights()
            roots.append(wl[0])
            deep.extend(wl[127:255:16])
        assert np.var(roots) < np.var(deep)


class TestDensity:
    def test_uniform_density(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 4), SM)
        xs = np.linspace(0.0, 0.999, 64)
        assert np.allclose(c.log_density(xs), 0.0, atol=1e-12)

    def test_worked_density_value(self):
        # All weights 1/2 over [0, 2): three halvings then leaf width 1/4.
        c = BitCircuit.uniform(FixedPointFormat(False, 1, 2), SM)
        assert math.exp(c.log_density(0.5)) == pytest.approx(0.5, rel=1e-12)

    def test_out_of_range_is_minus_inf(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 1, 2), SM)
        assert c.log_density(-0.1) == -np.inf
        assert c.log_density(2.0) == -np.inf

    def test_density_integrates_to_one(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            bits = int(rng.integers(1, 9))
            fmt = FixedPointFormat(False, 1, bits - 1)
            c = random_circuit(rng, fmt)
            mids = fmt.lo + fmt.resolution * (np.arange(fmt.n_cells) + 0.5)
            total = np.exp(c.log_density(mids)).sum() * fmt.resolution
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_density_equals_mass_over_width(self):
        rng = np.random.default_rng(8)
        c = random_circuit(rng, FixedPointFormat(True, 1, 3))
        masses = c.leaf_masses()
        mids = c.fmt.lo + c.fmt.resolution * (np.arange(c.fmt.n_cells) + 0.5)
        dens = np.exp(c.log_density(mids))
        assert np.allclose(dens, masses / c.fmt.resolution, rtol=1e-12)


class TestCdf:
    def test_endpoints(self):
        rng = np.random.default_rng(2)
        c = random_circuit(rng, FixedPointFormat(True, 2, 3))
        assert c.cdf(c.fmt.lo) == 0.0
        assert c.cdf(c.fmt.hi) == 1.0
        assert c.cdf(c.fmt.lo - 5.0) == 0.0
        assert c.cdf(c.fmt.hi + 5.0) == 1.0

    def test_uniform_cdf_is_identity(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 5), SM)
        xs = np.linspace(0.0, 1.0, 33)
        assert np.allclose(c.cdf(xs), xs, atol=1e-12)

    def test_hand_recursion_single_bit(self):
        raw = np.array([[math.log(0.25), math.log(0.75)]])
        c = BitCircuit(FixedPointFormat(False, 0, 1), SM, raw)
        assert c.cdf(0.5) == pytest.approx(0.25, abs=1e-15)
        assert c.cdf(0.75) == pytest.approx(0.625, abs=1e-15)

    def test_monotone_and_matches_masses(self):
        rng = np.random.default_rng(11)
        c = random_circuit(rng, FixedPointFormat(False, 1, 5))
        edges = c.fmt.lo + c.fmt.resolution * np.arange(c.fmt.n_cells + 1)
        cdf_at_edges = c.cdf(edges)
        assert np.all(np.diff(cdf_at_edges) >= 0)
        assert np.allclose(np.diff(cdf_at_edges), c.leaf_masses(), atol=1e-12)


class TestInverseCdf:
    def test_uniform_is_identity(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 4), SM)
        for u in (0.0, 0.3, 0.9990234375):
            x, _ = c.inverse_cdf(u)
            assert x == pytest.approx(u, abs=1e-12)

    def test_hand_recursion(self):
        raw = np.array([[math.log(0.25), math.log(0.75)]])
        c = BitCircuit(FixedPointFormat(False, 0, 1), SM, raw)
        x, leaf = c.inverse_cdf(0.5)
        assert x == pytest.approx(0.5 + 0.5 / 3.0, abs=1e-12)
        assert leaf == (1,)

    def test_boundary_routes_right(self):
        raw = np.array([[math.log(0.25), math.log(0.75)]])
        c = BitCircuit(FixedPointFormat(False, 0, 1), SM, raw)
        _, leaf = c.inverse_cdf(0.25)
        assert leaf == (1,)

    def test_roundtrip_oracle(self):
        rng = np.random.default_rng(13)
        worst = 0.0
        for trial in range(10):
            c = random_circuit(rng, FixedPointFormat(True, 1,
                                                     int(rng.integers(0, 7))))
            for u in rng.random(1000):
                x, _ = c.inverse_cdf(float(u))
                worst = max(worst, abs(c.cdf(x) - u))
        assert worst < 1e-9

    def test_domain_error(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 2), SM)
        for u in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                c.inverse_cdf(u)


class TestSampling:
    def test_empty(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 2), SM)
        assert c.sample(np.random.default_rng(0), 0) == []

    def test_determinism(self):
        rng = np.random.default_rng(21)
        c = random_circuit(rng, FixedPointFormat(True, 1, 3))
        a = c.sample(np.random.default_rng(5), 50)
        b = c.sample(np.random.default_rng(5), 50)
        assert a == b

    def test_uniform_moments(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 6), SM)
        xs = np.array([s.x for s in c.sample(np.random.default_rng(3),
                                             100_000)])
        assert xs.mean() == pytest.approx(0.5, abs=0.005)

    def test_leaf_frequencies_match_masses(self):
        rng = np.random.default_rng(17)
        c = random_circuit(rng, FixedPointFormat(False, 0, 4))
        samples = c.sample(np.random.default_rng(23), 100_000)
        masses = c.leaf_masses()
        counts = np.zeros(c.fmt.n_cells)
        for s in samples:
            counts[int("".join(map(str, s.leaf)), 2)] += 1
        assert np.abs(counts / len(samples) - masses).max() < 0.01

    def test_quantized_value_is_leaf_decode(self):
        rng = np.random.default_rng(29)
        c = random_circuit(rng, FixedPointFormat(True, 1, 4))
        for s in c.sample(np.random.default_rng(31), 200):
            assert s.quantized == c.fmt.decode(s.leaf)
            assert s.quantized <= s.x < s.quantized + c.fmt.resolution


class TestEntropy:
    def test_uniform_unit_interval_is_zero(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 5), SM)
        assert c.entropy() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_over_two_is_log_two(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 1, 2), SM)
        assert c.entropy() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(37)
        for trial in range(100):
            bits = int(rng.integers(1, 11))
            has_sign = bool(rng.integers(0, 2)) if bits > 1 else False
            rest = bits - int(has_sign)
            i = int(rng.integers(0, rest + 1))
            c = random_circuit(rng, FixedPointFormat(has_sign, i, rest - i))
            assert abs(c.entropy() - brute_force_entropy(c)) < 1e-9

    def test_maximal_iff_uniform(self):
        rng = np.random.default_rng(41)
        fmt = FixedPointFormat(False, 1, 4)
        uniform = BitCircuit.uniform(fmt, SM)
        assert uniform.entropy() == pytest.approx(math.log(2.0), abs=1e-12)
        for _ in range(10):
            c = random_circuit(rng, fmt)
            assert c.entropy() < math.log(2.0)


class TestTruncate:
    def test_identity(self):
        rng = np.random.default_rng(43)
        c = random_circuit(rng, FixedPointFormat(False, 0, 6))
        same = c.truncate(6)
        assert same is not c
        assert np.array_equal(same.raw, c.raw)

    def test_uniform_stays_uniform(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 1, 6), SM)
        t = c.truncate(2)
        assert t.entropy() == pytest.approx(c.entropy(), abs=1e-12)

    def test_prefix_masses_preserved(self):
        rng = np.random.default_rng(47)
        c = random_circuit(rng, FixedPointFormat(False, 0, 8))
        t = c.truncate(4)
        target = c.leaf_masses().reshape(16, -1).sum(axis=1)
        assert np.abs(t.leaf_masses() - target).max() < 1e-12

    def test_entropy_never_decreases(self):
        rng = np.random.default_rng(53)
        for _ in range(10):
            c = random_circuit(rng, FixedPointFormat(True, 1, 6))
            for frac in (4, 2, 0):
                assert c.truncate(frac).entropy() >= c.entropy() - 1e-12

    def test_entropy_identity_against_brute_force(self):
        # H(truncated) = -sum m log m + sum m log(width) over kept prefixes.
        rng = np.random.default_rng(59)
        c = random_circuit(rng, FixedPointFormat(False, 0, 9))
        t = c.truncate(3)
        m = c.leaf_masses().reshape(8, -1).sum(axis=1)
        expected = float(-(m * np.log(m)).sum()
                         + (m * math.log(t.fmt.resolution)).sum())
        assert t.entropy() == pytest.approx(expected, abs=1e-12)

    def test_too_deep_truncation_rejected(self):
        c = BitCircuit.uniform(FixedPointFormat(False, 0, 4), SM)
        with pytest.raises(ValueError):
            c.truncate(5)
        with pytest.raises(ValueError):
            c.truncate(-1)


class TestSerialization:
    def test_bit_exact_roundtrip(self):
        rng = np.random.default_rng(61)
        c = random_circuit(rng, FixedPointFormat(True, 2, 5),
                           smoothing=SmoothingSchedule(c=0.015625,
                                                       alpha_rule="exponential",
                                                       depth_offset=1))
        doc = json.loads(json.dumps(c.to_json_dict()))
        back = BitCircuit.from_json_dict(doc)
        assert back.fmt == c.fmt
        assert back.smoothing == c.smoothing
        assert np.array_equal(back.raw, c.raw)

    def test_rejects_wrong_kind(self):
        with pytest.raises(ValueError):
            BitCircuit.from_json_dict({"kind": "other", "version": 1})
