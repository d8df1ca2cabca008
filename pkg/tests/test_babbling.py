import numpy as np
import pytest

from koopctl import babbling, plants
from koopctl.observables import single_pendulum_map


def small_config(**overrides):
    base = dict(num_gains=4, num_initial_conditions=9, gain_scale=1.0,
                state_grid=((-np.pi, np.pi), (-6.0, 6.0)),
                steps=20, dt=0.01, seed=7)
    base.update(overrides)
    return babbling.BabblingConfig(**base)


class TestGains:
    def test_seed_determinism(self):
        cfg = small_config()
        a = babbling.sample_random_gains(cfg, 1, 9)
        b = babbling.sample_random_gains(cfg, 1, 9)
        for ka, kb in zip(a, b):
            np.testing.assert_array_equal(ka, kb)

    def test_zero_scale_gives_zero_controllers(self):
        cfg = small_config(gain_scale=0.0)
        for k in babbling.sample_random_gains(cfg, 1, 9):
            np.testing.assert_array_equal(k, np.zeros((1, 9)))

    def test_shapes(self):
        cfg = small_config(num_gains=50)
        gains = babbling.sample_random_gains(cfg, 1, 9)
        assert len(gains) == 50
        assert all(k.shape == (1, 9) for k in gains)
        assert all(np.max(np.abs(k)) <= 1.0 for k in gains)


class TestGrid:
    def test_single_point_sits_at_lower_bound(self):
        cfg = small_config(num_initial_conditions=1)
        grid = babbling.grid_initial_conditions(cfg)
        np.testing.assert_allclose(grid, [[-np.pi, -6.0]])

    def test_three_by_three_includes_corners(self):
        cfg = small_config(num_initial_conditions=9,
                           state_grid=((-1.0, 1.0), (-1.0, 1.0)))
        grid = babbling.grid_initial_conditions(cfg)
        assert grid.shape == (9, 2)
        corners = {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}
        assert corners <= {tuple(row) for row in grid}

    def test_near_equal_factorization(self):
        assert babbling.near_equal_factorization(9000, 4) in {(10, 10, 10, 9),
                                                              (9, 10, 10, 10),
                                                              (10, 9, 10, 10),
                                                              (10, 10, 9, 10)}
        assert np.prod(babbling.near_equal_factorization(4000, 2)) == 4000

    def test_explicit_shape_must_factor(self):
        cfg = small_config(num_initial_conditions=9, grid_shape=(2, 2))
        with pytest.raises(ValueError, match="does not factor"):
            babbling.grid_initial_conditions(cfg)


class TestGenerateDataset:
    def setup_method(self):
        self.plant = plants.single_pendulum()
        self.map = single_pendulum_map()

    def test_zero_gain_origin_inits(self):
        cfg = small_config(num_gains=1, num_initial_conditions=1,
                           gain_scale=0.0, state_grid=((0.0, 0.0), (0.0, 0.0)))
        ds = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        np.testing.assert_allclose(ds.x, 0.0, atol=1e-16)
        np.testing.assert_allclose(ds.u, 0.0)

    def test_counts(self):
        cfg = small_config()
        ds = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        assert len(ds) == 4 * 9 * 20
        assert ds.n_trajectories == 36
        assert ds.n_dropped == 0

    def test_determinism_bitwise(self):
        cfg = small_config()
        a = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        b = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.x_next, b.x_next)

    def test_inputs_within_bounds(self):
        cfg = small_config(gain_scale=3.0)
        ds = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        assert np.max(np.abs(ds.u)) <= 5.0
        # saturation actually happens with gains this large
        assert np.any(np.abs(ds.u) == 5.0)

    def test_replay_reproduces_next_state_exactly(self):
        cfg = small_config()
        ds = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        rng = np.random.default_rng(0)
        for idx in rng.choice(len(ds), size=50, replace=False):
            np.testing.assert_array_equal(
                plants.rk4_step(self.plant, ds.x[idx], ds.u[idx], cfg.dt),
                ds.x_next[idx])

    def test_jobs_do_not_change_content(self):
        cfg = small_config()
        a = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        b = babbling.generate_dataset(self.plant, self.map, self.map, cfg,
                                      jobs=4)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.traj_id, b.traj_id)

    def test_split_by_trajectory_is_leak_free(self):
        cfg = small_config()
        ds = babbling.generate_dataset(self.plant, self.map, self.map, cfg)
        train, hold = ds.split_by_trajectory(0.1)
        assert train.sum() + hold.sum() == len(ds)
        assert not set(ds.traj_id[train]) & set(ds.traj_id[hold])
        assert hold.sum() > 0


class TestPaperScale:
    @pytest.mark.slow
    def test_snapshot_count_at_full_scale(self):
        # 4000 trajectories x 100 steps: 400,000 snapshots
        plant = plants.single_pendulum()
        m = single_pendulum_map()
        cfg = small_config(num_gains=40, num_initial_conditions=100,
                           seed=0, steps=100)
        ds = babbling.generate_dataset(plant, m, m, cfg)
        assert len(ds) + ds.n_dropped * 100 == 400_000


class TestPersistence:
    def test_round_trip(self, tmp_path):
        plant = plants.single_pendulum()
        m = single_pendulum_map()
        cfg = small_config(num_gains=2, num_initial_conditions=4)
        ds = babbling.generate_dataset(plant, m, m, cfg)
        babbling.save_dataset(ds, tmp_path / "data")
        back = babbling.load_dataset(tmp_path / "data")
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.u, ds.u)
        np.testing.assert_array_equal(back.x_next, ds.x_next)
        np.testing.assert_array_equal(back.traj_id, ds.traj_id)

    def test_rerun_same_seed_identical_manifest(self, tmp_path):
        plant = plants.single_pendulum()
        m = single_pendulum_map()
        cfg = small_config(num_gains=2, num_initial_conditions=4)
        for d in ("a", "b"):
            ds = babbling.generate_dataset(plant, m, m, cfg)
            babbling.save_dataset(ds, tmp_path / d)
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
