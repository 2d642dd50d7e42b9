import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import criss_cross_dense, factor_att_loops, minimise_energy
from priordepth.attention import (
    CpaParams,
    EnergyConfig,
    cpa,
    cpa_affinity,
    cpa_aggregate,
    cpa_channel,
    cpa_fuse,
    criss_cross_positions,
    factor_att,
    neuron_energy,
    neuron_energy_argmin,
    simam_energy,
    simam_energy_loo,
    simam_refine,
    spa,
)
from priordepth.tensor import ShapeError, batch_norm, conv2d, sigmoid

RHO = 1e-4


class TestFactorAtt:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_matches_loops(self, n, c, cv, seed):
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=(n, c)), rng.normal(size=(n, c)) * 2
        v = rng.normal(size=(n, cv))
        np.testing.assert_allclose(factor_att(q, k, v), factor_att_loops(q, k, v), atol=1e-5)

    def test_zero_value(self):
        rng = np.random.default_rng(0)
        out = factor_att(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), np.zeros((5, 3)))
        assert not out.any()

    def test_constant_key_is_uniform_average(self):
        rng = np.random.default_rng(1)
        q, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        expected = q / 2.0 @ np.tile(v.mean(axis=0), (4, 1))
        np.testing.assert_allclose(factor_att(q, np.full((6, 4), 0.3), v), expected, atol=1e-6)

    def test_hand_two_tokens(self):
        q = [[1.0, 2.0], [3.0, 4.0]]
        k = [[math.log(3.0), 0.0], [0.0, 0.0]]
        v = [[2.0, 4.0], [6.0, 8.0]]
        # softmax columns: [3/4, 1/4] and [1/2, 1/2]; context rows [3, 5] and [4, 6]
        expected = np.array([[11.0, 17.0], [25.0, 39.0]]) / math.sqrt(2.0)
        np.testing.assert_allclose(factor_att(q, k, v), expected, rtol=1e-6)

    def test_heads_split_embedding(self):
        rng = np.random.default_rng(2)
        q, k, v = rng.normal(size=(7, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 6))
        out = factor_att(q, k, v, heads=2)
        np.testing.assert_allclose(out[:, :3], factor_att_loops(q[:, :2], k[:, :2], v[:, :3]), atol=1e-5)
        np.testing.assert_allclose(out[:, 3:], factor_att_loops(q[:, 2:], k[:, 2:], v[:, 3:]), atol=1e-5)

    def test_errors(self):
        with pytest.raises(ShapeError):
            factor_att(np.zeros((3, 2)), np.zeros((3, 4)), np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            factor_att(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            factor_att(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), heads=2)


class TestAffinity:
    def test_constant_is_uniform(self):
        t = cpa_affinity(np.ones((1, 2, 4, 5)), np.ones((1, 2, 4, 5)))
        assert t.shape == (1, 8, 4, 5)
        np.testing.assert_allclose(t, 1 / 8, atol=1e-7)

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(0)
        t = cpa_affinity(rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(2, 3, 5, 6)))
        np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(t > 0)

    @pytest.mark.parametrize("scale", [1.0, 3.0, 8.0])
    def test_one_hot_key_concentrates(self, scale):
        q = np.ones((1, 1, 3, 3))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 2] = scale
        t = cpa_affinity(q, k)
        slot = criss_cross_positions(3, 3, 1, 1).index((1, 2))
        expected = math.exp(scale) / (math.exp(scale) + 4)
        assert t[0, slot, 1, 1] == pytest.approx(expected, rel=1e-6)

    def test_criss_cross_set(self):
        pos = criss_cross_positions(3, 4, 1, 2)
        assert len(pos) == len(set(pos)) == 6
        assert pos.count((1, 2)) == 1
        assert all(y == 1 or x == 2 for y, x in pos)


class TestAggregate:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_matches_dense_restriction(self, h, w, c, seed):
        rng = np.random.default_rng(seed)
        t = rng.uniform(size=(2, h + w - 1, h, w))
        t /= t.sum(axis=1, keepdims=True)
        v = rng.normal(size=(2, c, h, w))
        np.testing.assert_allclose(cpa_aggregate(t, v), criss_cross_dense(t, v), atol=1e-6)

    def test_uniform_constant(self):
        out = cpa_aggregate(np.full((1, 7, 3, 5), 1 / 7), np.full((1, 2, 3, 5), 2.5))
        np.testing.assert_allclose(out, 2.5, rtol=1e-6)

    def test_one_hot_selects(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(1, 2, 3, 4))
        for j in range(6):
            t = np.zeros((1, 6, 3, 4))
            t[:, j] = 1.0
            out = cpa_aggregate(t, v)
            for y in range(3):
                for x in range(4):
                    py, px = criss_cross_positions(3, 4, y, x)[j]
                    np.testing.assert_array_equal(out[0, :, y, x], v[0, :, py, px].astype(np.float32))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cpa_aggregate(np.zeros((1, 4, 3, 3)), np.zeros((1, 2, 3, 3)))


class TestChannel:
    def test_zero_weights_halve(self):
        h = np.random.default_rng(0).normal(size=(2, 4, 3, 3)).astype(np.float32)
        out = cpa_channel(h, np.zeros((4, 2)), np.zeros((2, 4)))
        np.testing.assert_array_equal(out, h / 2)

    def test_saturation(self):
        h = np.ones((1, 2, 2, 2))
        out = cpa_channel(h, np.array([[20.0], [20.0]]), np.array([[0.5, 0.5]]))
        assert np.all(out > 1 - 1e-7)  # float32 output

    def test_hand_two_channel(self):
        h = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 2.0)])[None]
        out = cpa_channel(h, np.array([[1.0], [-1.0]]), np.array([[1.0, 0.0]]))
        gate = [1 / (1 + math.exp(-1.0)), 1 / (1 + math.exp(1.0))]
        np.testing.assert_allclose(out[0, :, 0, 0], [gate[0] * 1.0, gate[1] * 2.0], atol=1e-6)

    def test_odd_channels(self):
        with pytest.raises(ShapeError):
            cpa_channel(np.zeros((1, 3, 2, 2)), np.zeros((3, 1)), np.zeros((1, 3)))


class TestFuseAndCpa:
    def test_fuse_cases(self):
        rng = np.random.default_rng(0)
        a, b, h = (rng.normal(size=(1, 2, 3, 3)).astype(np.float32) for _ in range(3))
        np.testing.assert_array_equal(cpa_fuse(a, b, h, 0.0), h)
        np.testing.assert_allclose(cpa_fuse(a, b, np.zeros_like(h), 1.0), a + b, atol=1e-7)
        expected = 0.5 * (a.astype(np.float64) + b) + h
        np.testing.assert_allclose(cpa_fuse(a, b, h, 0.5), expected, atol=1e-7)

    def test_fuse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cpa_fuse(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)), 1.0)

    def test_zero_gain_identity(self):
        h = np.random.default_rng(1).normal(size=(2, 8, 4, 5)).astype(np.float32)
        params = CpaParams.init(8, np.random.default_rng(2))
        out = cpa(h, params)
        assert np.array_equal(out, h)
        assert np.array_equal(out.argmax(axis=1), h.argmax(axis=1))

    def test_zero_input(self):
        params = CpaParams.init(8, np.random.default_rng(2), g=0.7)
        assert not cpa(np.zeros((1, 8, 3, 3)), params).any()

    def test_composition_bit_identical(self):
        h = np.random.default_rng(4).normal(size=(1, 8, 3, 3)).astype(np.float32)
        p = CpaParams.init(8, np.random.default_rng(5), g=0.3)
        spatial = cpa_aggregate(cpa_affinity(conv2d(h, p.wq), conv2d(h, p.wk)), conv2d(h, p.wv))
        expected = cpa_fuse(spatial, cpa_channel(h, p.w1, p.w2), h, p.g)
        assert np.array_equal(cpa(h, p), expected)

    def test_batch_permutation_equivariance(self):
        h = np.random.default_rng(6).normal(size=(3, 8, 4, 4)).astype(np.float32)
        p = CpaParams.init(8, np.random.default_rng(7), g=0.5)
        perm = [2, 0, 1]
        np.testing.assert_array_equal(cpa(h[perm], p), cpa(h, p)[perm])
        np.testing.assert_allclose(spa(h[perm]), spa(h)[perm], atol=1e-5)

    def test_params_validated(self):
        with pytest.raises(ShapeError):
            CpaParams.init(12, np.random.default_rng(0))
        with pytest.raises(ValueError):
            CpaParams.init(8, np.random.default_rng(0), g=float("nan"))


class TestEnergy:
    def test_constant_channel_is_two(self):
        f = simam_energy(np.full((1, 2, 3, 3), 4.2))
        assert np.all(f == 2.0)

    def test_two_neuron_hand_value(self):
        f = simam_energy(np.array([-1.0, 1.0]).reshape(1, 1, 1, 2))
        expected = 4 * (1 + RHO) / (1 + 2 + 2 * RHO)
        np.testing.assert_allclose(f, expected, rtol=1e-6)
        assert expected == pytest.approx(1.333378, abs=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_numerical_minimum(self, seed):
        channel = np.random.default_rng(seed).normal(size=(3, 3))
        f = simam_energy(channel[None, None])[0, 0]
        for (y, x) in [(0, 0), (1, 2), (2, 1)]:
            ref = minimise_energy(channel[y, x], channel.ravel())
            assert f[y, x] == pytest.approx(ref, rel=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_closed_form_beats_random(self, seed):
        rng = np.random.default_rng(seed)
        channel = rng.normal(size=16) * rng.uniform(0.1, 3)
        t = channel[rng.integers(16)]
        w, b = neuron_energy_argmin(t, channel)
        best = neuron_energy(w, b, t, channel)
        for ww, bb in rng.uniform(-5, 5, size=(1000, 2)):
            assert best <= neuron_energy(ww, bb, t, channel) + 1e-12
        f = 4 * (channel.var() + RHO) / ((t - channel.mean()) ** 2 + 2 * channel.var() + 2 * RHO)
        assert best == pytest.approx(f, rel=1e-9)

    def test_strictly_decreasing_in_deviation(self):
        x = np.array([0.0, 0.1, -0.3, 0.6, -1.0, 1.7, 2.5, -3.0])
        f = simam_energy(x.reshape(1, 1, 1, -1))[0, 0, 0]
        dev = (x - x.mean()) ** 2
        order = np.argsort(dev)
        assert np.all(np.diff(f[order]) < 0)

    def test_leave_one_out(self):
        x = np.random.default_rng(9).normal(size=(1, 1, 2, 3))
        f = simam_energy_loo(x)[0, 0].ravel()
        flat = x.ravel()
        for i in range(6):
            others = np.delete(flat, i)
            w, b = neuron_energy_argmin(flat[i], others)
            assert f[i] == pytest.approx(neuron_energy(w, b, flat[i], others), rel=1e-6)
        with pytest.raises(ShapeError):
            simam_energy_loo(np.zeros((1, 1, 1, 1)))

    def test_rho_validated(self):
        with pytest.raises(ValueError):
            EnergyConfig(rho=0.0)


class TestRefine:
    def test_constant_channel(self):
        h = np.full((1, 2, 3, 3), 1.7)
        f = simam_energy(h)
        gate = 1 / (1 + math.exp(-0.5))
        assert gate == pytest.approx(0.62246, abs=1e-5)
        out = simam_refine(h, f)
        assert not out.any()

    def test_is_gated_batch_norm(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=(2, 3, 4, 4))
        f = rng.uniform(0.05, 50, size=h.shape)
        gamma, beta = np.array([1.0, 0.5, 2.0]), np.array([0.0, 1.0, -1.0])
        expected = batch_norm(sigmoid(1 / f) * h, gamma, beta)
        np.testing.assert_allclose(simam_refine(h, f, gamma, beta), expected, atol=1e-6)

    def test_gate_monotone_and_bounded(self):
        gate = sigmoid(1 / np.geomspace(0.05, 1e4, 50))
        assert np.all((gate > 0.5) & (gate < 1))
        assert np.all(np.diff(gate) < 0)
        assert gate[-1] == pytest.approx(0.5, abs=1e-4)

    def test_larger_deviation_larger_gate(self):
        x = np.array([0.0, 0.2, -0.5, 1.5]).reshape(1, 1, 1, 4)
        gate = 1 / (1 + np.exp(-1 / simam_energy(x).astype(np.float64)))
        dev = (x - x.mean()) ** 2
        order = np.argsort(dev.ravel())
        assert np.all(np.diff(gate.ravel()[order]) > 0)

    def test_nonpositive_energy(self):
        with pytest.raises(ValueError, match="positive"):
            simam_refine(np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))
