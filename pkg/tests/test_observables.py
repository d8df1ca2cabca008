import json

import numpy as np
import pytest

from koopctl import observables as obs


class TestSinglePendulumMap:
    def setup_method(self):
        self.m = obs.single_pendulum_map()

    def test_dimension(self):
        assert self.m.dim == 9
        assert self.m.state_dim == 2

    def test_origin(self):
        np.testing.assert_allclose(
            self.m([0.0, 0.0]), [0, 0, 1, 0, 0, 0, 0, 1, 1], atol=1e-15)

    def test_quarter_turn(self):
        got = self.m([np.pi / 2, 1.0])
        want = [np.pi / 2, 1.0, 1.0, np.pi ** 2 / 4, 1.0,
                1.0, np.sin(1.0), 0.0, np.cos(1.0)]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_decoding_identity(self):
        a_dec = obs.decoding_operator(self.m)
        rng = np.random.default_rng(0)
        xs = rng.uniform(-10, 10, size=(1000, 2))
        np.testing.assert_array_equal(self.m(xs) @ a_dec.T, xs)

    def test_labels_frozen_order(self):
        assert self.m.labels == [
            "theta", "theta_dot", "1", "theta^2", "theta_dot^2",
            "sin(theta)", "sin(theta_dot)", "cos(theta)", "cos(theta_dot)",
        ]


class TestDoublePendulumMap:
    def setup_method(self):
        self.m = obs.double_pendulum_map()

    def test_dimension(self):
        assert self.m.dim == 14
        assert self.m.state_dim == 4

    def test_origin(self):
        want = np.zeros(14)
        want[4] = 1.0
        np.testing.assert_allclose(self.m(np.zeros(4)), want, atol=1e-15)

    def test_denominator_bounds(self):
        # D = 1/(3 - 2 cos th_r): 1 at th_r = 0, 1/5 at th_r = pi
        aligned = self.m([0.3, 0.3, 0.0, 0.0])
        assert aligned[5] == pytest.approx(np.sin(0.3))
        opposite = self.m([np.pi, 0.0, 0.0, 0.0])
        # feature 5 is D sin(th1); th1 = pi makes sin vanish, use feature 6
        assert opposite[6] == pytest.approx(np.sin(np.pi - 0.0) / 5.0)

    def test_denominator_never_singular(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-20, 20, size=(1000, 4))
        vals = self.m(x)
        assert np.all(np.isfinite(vals))

    def test_decoding_identity(self):
        a_dec = obs.decoding_operator(self.m)
        rng = np.random.default_rng(2)
        xs = rng.uniform(-6, 6, size=(1000, 4))
        np.testing.assert_array_equal(self.m(xs) @ a_dec.T, xs)

    def test_velocity_quadratics(self):
        x = np.array([0.7, -0.2, 1.3, -2.1])
        th_r = x[0] - x[1]
        d = 1.0 / (3.0 - 2.0 * np.cos(th_r))
        vals = self.m(x)
        assert vals[10] == pytest.approx(d * x[2] ** 2 * np.sin(th_r))
        assert vals[13] == pytest.approx(d * x[3] ** 2 * np.sin(2 * th_r))


class TestEvaluateBatch:
    def test_empty(self):
        m = obs.single_pendulum_map()
        out = obs.evaluate_batch(m, np.zeros((0, 2)))
        assert out.shape == (9, 0)

    def test_single_column(self):
        m = obs.single_pendulum_map()
        x = np.array([0.4, -1.1])
        out = obs.evaluate_batch(m, [x])
        np.testing.assert_array_equal(out[:, 0], m(x))

    def test_columns_match_per_state(self):
        m = obs.double_pendulum_map()
        rng = np.random.default_rng(3)
        xs = rng.uniform(-3, 3, size=(100, 4))
        out = obs.evaluate_batch(m, xs)
        for j in range(100):
            np.testing.assert_array_equal(out[:, j], m(xs[j]))

    def test_flags_non_finite(self):
        feats = (obs.state_feature(0, 1, "x"),
                 obs.Feature(label="1/x", poly=(-1,)))
        m = obs.ObservableMap(name="singular", state_dim=1, features=feats)
        with pytest.raises(ValueError, match="state index 1"):
            obs.evaluate_batch(m, [[1.0], [0.0], [2.0]])


class TestDescriptors:
    def test_round_trip(self):
        for m in (obs.single_pendulum_map(), obs.double_pendulum_map()):
            blob = json.dumps(m.to_descriptor(), sort_keys=True)
            back = obs.map_from_descriptor(json.loads(blob))
            rng = np.random.default_rng(4)
            x = rng.uniform(-2, 2, size=(50, m.state_dim))
            np.testing.assert_array_equal(back(x), m(x))
            assert obs.map_hash(back) == obs.map_hash(m)

    def test_state_must_lead(self):
        with pytest.raises(ValueError, match="raw state"):
            obs.ObservableMap(name="bad", state_dim=1,
                              features=(obs.Feature(label="1"),))

    def test_polynomial_map(self):
        m = obs.polynomial_map("cubic", (1, 2, 3))
        np.testing.assert_allclose(m([2.0]), [2.0, 4.0, 8.0])
