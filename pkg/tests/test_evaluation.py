import csv

import numpy as np

from koopctl import evaluation as ev
from koopctl import plants, synthesis as syn
from koopctl.edmd import BilinearKoopmanModel
from koopctl.factorization import FactorizationPair, assemble_ktilde
from koopctl.observables import single_pendulum_map


def stabilized_toy():
    """Identity-lift 2-state system with a synthesized certified gain."""
    k_xx = np.array([[0.5, 0.3], [0.8, 1.2]])
    k_xu = np.array([[0.0], [1.0]])
    model = BilinearKoopmanModel(
        K_xx=k_xx, K_xu=k_xu, S=np.eye(2)[:1],
        map_descriptor={"name": "identity", "state_dim": 2, "features": []})
    pair = FactorizationPair(S=np.eye(2)[:1], H=np.eye(2),
                             mask=np.array([1, 0]), residuals=np.zeros(2),
                             eps_h=1e-9)
    result = syn.synthesize(model, pair, max_resamples=10, seed=1)
    assert result.status == "optimal"
    return model, pair, result


class TestLyapunovTrace:
    def test_lifted_rollout_decreases_exactly(self):
        model, pair, result = stabilized_toy()
        kt = assemble_ktilde(model, result.K_u, pair.H).Ktilde
        psis = ev.lifted_rollout(kt, np.array([1.0, -0.5]), 200)
        trace = ev.lyapunov_trace(result, psis, slack=1e-8)
        assert trace["decrease_fraction"] == 1.0
        assert np.all(trace["V"] >= -1e-12)

    def test_v_is_nonnegative_on_random_vectors(self):
        _, _, result = stabilized_toy()
        rng = np.random.default_rng(0)
        psis = rng.standard_normal((100, 2))
        trace = ev.lyapunov_trace(result, psis)
        assert np.all(trace["V"] >= -1e-12)

    def test_short_trace(self):
        _, _, result = stabilized_toy()
        trace = ev.lyapunov_trace(result, np.ones((1, 2)))
        assert trace["decrease_fraction"] == 1.0


class TestEvaluateClosedLoop:
    def setup_method(self):
        self.plant = plants.single_pendulum(gravity=1.0)
        self.map = single_pendulum_map()
        # gravity compensation plus mild PD: stabilizes everywhere at g = 1
        self.K = np.zeros((1, 9))
        self.K[0, 0] = -2.0
        self.K[0, 1] = -2.0
        self.K[0, 5] = -1.0

    def test_origin_start_stays_converged(self):
        rep = ev.evaluate_closed_loop(self.plant, self.map, self.K,
                                      [[0.0, 0.0]], 2.0, 0.01)
        assert rep.records[0].converged
        assert rep.records[0].settling_time == 0.0
        assert rep.success_rate == 1.0

    def test_perturbed_start_converges_and_twin_diverges(self):
        rep = ev.evaluate_closed_loop(self.plant, self.map, self.K,
                                      [[0.4, 0.0], [-0.6, 0.5]], 10.0, 0.01)
        assert rep.success_rate == 1.0
        assert all(r.settling_time > 0 for r in rep.records)
        # uncontrolled twins fall away from upright
        assert all(v > 0.05 for v in rep.uncontrolled_final)

    def test_inputs_recorded_within_bounds(self):
        rep = ev.evaluate_closed_loop(self.plant, self.map, self.K,
                                      [[1.5, -2.0]], 5.0, 0.01)
        assert rep.records[0].max_input <= 5.0

    def test_ranges_recorded(self):
        rep = ev.evaluate_closed_loop(
            self.plant, self.map, self.K, [[0.3, -7.0], [-0.2, 8.0]],
            1.0, 0.01, train_ranges=[[-np.pi, np.pi], [-6.0, 6.0]])
        assert rep.eval_ranges[1][0] < -6.0 or rep.eval_ranges[1][1] > 6.0
        assert rep.train_ranges == [[-np.pi, np.pi], [-6.0, 6.0]]

    def test_report_json_shape(self):
        rep = ev.evaluate_closed_loop(self.plant, self.map, self.K,
                                      [[0.1, 0.0]], 1.0, 0.01)
        payload = rep.to_json()
        assert payload["kind"] == "koopctl/report"
        assert len(payload["records"]) == 1
        assert 0 <= payload["success_rate"] <= 1


class TestLiftedVsTrue:
    def test_exactly_lifted_system_has_zero_error(self):
        # plant x+ ~ integrator whose lifted model is exact: use the
        # identity-lift toy and simulate the model itself as the plant
        model, pair, result = stabilized_toy()
        kt = assemble_ktilde(model, result.K_u, pair.H).Ktilde
        # discrete plant x+ = Ktilde x is linear, so rk4 on a matching
        # continuous system is unnecessary; check the helper directly
        psis = ev.lifted_rollout(kt, np.array([0.3, -0.2]), 50)
        np.testing.assert_allclose(psis[1], kt @ psis[0], atol=1e-14)

    def test_error_grows_with_horizon_on_pendulum(self):
        plant = plants.single_pendulum(gravity=1.0)
        m = single_pendulum_map()
        rng = np.random.default_rng(1)
        from koopctl import babbling, edmd, factorization as fz

        cfg = babbling.BabblingConfig(num_gains=10, num_initial_conditions=9,
                                      gain_scale=1.0,
                                      state_grid=((-np.pi, np.pi), (-3.0, 3.0)),
                                      steps=60, dt=0.01, seed=3)
        ds = babbling.generate_dataset(plant, m, m, cfg)
        pair = fz.fit_pair(ds, m, m)
        model = edmd.identify_model(ds, m, pair.S)
        K = np.zeros((1, 9))
        K[0, 0], K[0, 1], K[0, 5] = -2.0, -2.0, -1.0
        fid = ev.lifted_vs_true(model, pair, K, plant, m,
                                rng.uniform(-0.5, 0.5, size=(5, 2)), 80, 0.01)
        per_step = np.asarray(fid["per_step_mean"])
        assert fid["one_step_rmse"] < 1e-3
        assert per_step[-1] > per_step[0]


class TestExportPlotData:
    def test_files_and_round_trip(self, tmp_path):
        plant = plants.single_pendulum(gravity=1.0)
        m = single_pendulum_map()
        K = np.zeros((1, 9))
        K[0, 0], K[0, 1], K[0, 5] = -2.0, -2.0, -1.0
        rep = ev.evaluate_closed_loop(plant, m, K,
                                      [[0.2, 0.0], [-0.3, 0.1]], 1.0, 0.01)
        files = ev.export_plot_data(rep, tmp_path)
        assert len(files) == 4
        with open(tmp_path / "phase_controlled.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["traj", "k", "x1", "x2"]
        assert {r[0] for r in rows[1:]} == {"0", "1"}
        # shortest round-trip floats reproduce the stored states exactly
        first = rep.controlled_trajs[0].states[0]
        assert float(rows[1][2]) == first[0]

    def test_empty_report_writes_headers_only(self, tmp_path):
        rep = ev.EvaluationReport(
            records=[], uncontrolled_final=[], success_rate=0.0,
            median_settling_time=float("nan"), lam=float("nan"),
            settle_tol=0.05, horizon_seconds=1.0, dt=0.01)
        files = ev.export_plot_data(rep, tmp_path)
        for f in files:
            with open(f) as fh:
                assert len(list(csv.reader(fh))) == 1
