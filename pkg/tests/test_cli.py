import json

import numpy as np
import pytest

from koopctl import cli
from koopctl.config import ConfigError, config_hash, load_config, merge_defaults


def smoke_config(tmp_path, **overrides):
    cfg = {
        "plant": {"kind": "single_pendulum", "params": {"gravity": 1.0}},
        "observables": {"kind": "single_pendulum"},
        "babbling": {"num_gains": 10, "num_initial_conditions": 9,
                     "steps": 40},
        "synthesis": {"max_resamples": 15},
        "evaluation": {
            "horizon_seconds": 10.0,
            "initial_conditions": {"kind": "uniform",
                                   "ranges": [[-1.5, 1.5], [-3.0, 3.0]],
                                   "count": 6},
            "success_gate": 0.5,
            "fidelity_steps": 40,
        },
        "seed": 0,
        "output_dir": str(tmp_path / "out"),
    }
    for key, val in overrides.items():
        cfg.setdefault(key, {})
        if isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            merge_defaults({"plnat": {}})

    def test_comment_keys_skipped(self):
        cfg = merge_defaults({"_doc": "hi", "seed": 3})
        assert cfg["seed"] == 3

    def test_hash_stable_under_key_order(self):
        a = merge_defaults({"seed": 1, "output_dir": "x"})
        b = merge_defaults({"output_dir": "x", "seed": 1})
        assert config_hash(a) == config_hash(b)

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/config.json")


class TestInit:
    def test_template_is_valid_config(self, tmp_path):
        path = tmp_path / "template.json"
        assert cli.main(["init", str(path)]) == 0
        cfg = load_config(path)
        assert cfg["plant"]["kind"] == "single_pendulum"


class TestPipeline:
    def test_end_to_end_and_caching(self, tmp_path, capsys):
        cfgfile = smoke_config(tmp_path)
        assert cli.main(["pipeline", "--config", str(cfgfile)]) == 0
        out = capsys.readouterr().out
        assert "babble:" in out and "synthesize:" in out
        outdir = tmp_path / "out"
        for name in ("pair.json", "model.json", "result.json", "report.json"):
            assert (outdir / name).exists()
        with open(outdir / "result.json") as fh:
            result = json.load(fh)
        assert result["status"] == "optimal"
        assert result["lambda"] < 1.0
        assert result["meta"]["config_hash"] == config_hash(
            load_config(cfgfile))
        # second run hits every cache
        assert cli.main(["pipeline", "--config", str(cfgfile)]) == 0
        out2 = capsys.readouterr().out
        assert out2.count("cache hit") == 4

    def test_equal_configs_give_bitwise_identical_artifacts(self, tmp_path,
                                                            capsys):
        import shutil

        cfgfile = smoke_config(tmp_path)
        assert cli.main(["pipeline", "--config", str(cfgfile)]) == 0
        outdir = tmp_path / "out"
        first = {n: (outdir / n).read_bytes()
                 for n in ("pair.json", "model.json", "result.json",
                           "report.json")}
        first["manifest"] = (outdir / "dataset" / "manifest.json").read_bytes()
        shutil.rmtree(outdir)
        assert cli.main(["pipeline", "--config", str(cfgfile)]) == 0
        capsys.readouterr()
        for name, blob in first.items():
            path = outdir / "dataset" / "manifest.json" \
                if name == "manifest" else outdir / name
            assert path.read_bytes() == blob, f"{name} differs between runs"

    def test_seed_override_changes_hash(self, tmp_path, capsys):
        cfgfile = smoke_config(tmp_path)
        assert cli.main(["pipeline", "--config", str(cfgfile)]) == 0
        capsys.readouterr()
        # overriding the seed invalidates the cache
        assert cli.main(["pipeline", "--config", str(cfgfile),
                         "--seed", "5"]) == 0
        assert "cache hit" not in capsys.readouterr().out

    def test_snapshot_count_matches_arithmetic(self, tmp_path):
        cfgfile = smoke_config(tmp_path)
        cli.main(["babble", "--config", str(cfgfile)])
        with open(tmp_path / "out" / "dataset" / "manifest.json") as fh:
            manifest = json.load(fh)
        assert manifest["snapshots"] == 10 * 9 * 40
        assert manifest["trajectories"] == 90


class TestStageOrdering:
    def test_identify_requires_pair(self, tmp_path, capsys):
        cfgfile = smoke_config(tmp_path)
        assert cli.main(["babble", "--config", str(cfgfile)]) == 0
        code = cli.main(["identify", "--config", str(cfgfile)])
        assert code == cli.EXIT_PRECONDITION
        assert "missing stage artifact" in capsys.readouterr().err

    def test_factorize_requires_dataset(self, tmp_path, capsys):
        cfgfile = smoke_config(tmp_path)
        assert cli.main(["factorize", "--config", str(cfgfile)]) \
            == cli.EXIT_PRECONDITION

    def test_bad_config_is_exit_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"plant": {"kind": "tripod"}}')
        assert cli.main(["babble", "--config", str(path)]) == cli.EXIT_CONFIG


class TestSynthesisFailureCode:
    def test_zero_authority_model_exits_4(self, tmp_path, capsys):
        cfgfile = smoke_config(tmp_path, synthesis={"max_resamples": 2})
        cfg = load_config(cfgfile)
        ds = cli.cmd_babble(cfg)
        pair = cli.cmd_factorize(cfg, ds)
        model = cli.cmd_identify(cfg, ds, pair)
        # strip all control authority and make the lifted map unstable
        with open(tmp_path / "out" / "model.json") as fh:
            payload = json.load(fh)
        payload["K_xu"]["data"] = [0.0] * len(payload["K_xu"]["data"])
        kxx = np.asarray(payload["K_xx"]["data"]).reshape(9, 9)
        kxx[0, 0] = 1.5
        payload["K_xx"]["data"] = kxx.ravel().tolist()
        with open(tmp_path / "out" / "model.json", "w") as fh:
            json.dump(payload, fh)
        capsys.readouterr()
        code = cli.main(["synthesize", "--config", str(cfgfile)])
        assert code == cli.EXIT_INFEASIBLE
        with open(tmp_path / "out" / "result.json") as fh:
            assert json.load(fh)["status"] == "max-resamples-exceeded"


class TestFactorizeOutputs:
    def test_residual_table_printed(self, tmp_path, capsys):
        cfgfile = smoke_config(tmp_path)
        cfg = load_config(cfgfile)
        ds = cli.cmd_babble(cfg)
        capsys.readouterr()
        pair = cli.cmd_factorize(cfg, ds)
        out = capsys.readouterr().out
        assert "retained 1 of 9 blocks" in out
        assert "sin(theta)" in out

    def test_huge_eps_keeps_all_blocks(self, tmp_path):
        cfgfile = smoke_config(tmp_path,
                               factorization={"eps_h": 1e9})
        cfg = load_config(cfgfile)
        ds = cli.cmd_babble(cfg)
        pair = cli.cmd_factorize(cfg, ds)
        np.testing.assert_array_equal(pair.S, np.eye(9))

    def test_custom_observables_through_config(self, tmp_path):
        from koopctl.config import build_maps

        cfg = merge_defaults({
            "observables": {
                "kind": "custom",
                "state_dim": 1,
                "features": [
                    {"label": "x", "poly": [1]},
                    {"label": "x^2", "poly": [2]},
                    {"label": "sin(x)", "trigs": [["sin", [1.0]]]},
                ],
            },
        })
        map_x, map_u = build_maps(cfg)
        assert map_x is map_u
        np.testing.assert_allclose(map_x([2.0]), [2.0, 4.0, np.sin(2.0)])

    def test_polynomial_toy_with_zero_like_eps(self):
        # eps_h at the numerical floor keeps exactly the expressible blocks
        from koopctl.factorization import fit_pair
        from koopctl.observables import polynomial_map

        rng = np.random.default_rng(0)
        states = rng.uniform(-2, 2, size=(500, 1))
        map_x = polynomial_map("cubic", (1, 2, 3))
        map_u = polynomial_map("lin", (1,))
        pair = fit_pair(states, map_x, map_u, eps_h=1e-9)
        np.testing.assert_array_equal(pair.mask, [1, 1, 0])
