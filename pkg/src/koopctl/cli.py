"""Pipeline driver: babble -> factorize -> identify -> synthesize -> evaluate.

Exit codes: 0 success, 2 config error, 3 stage-precondition error,
4 synthesis infeasible, 5 evaluation gate failed.  Stage outputs embed
the config hash; ``pipeline`` skips stages whose artifact already
matches it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation
from .babbling import SnapshotDataset, generate_dataset, load_dataset, save_dataset
from .config import (
    ConfigError,
    artifact_meta,
    babbling_config,
    build_maps,
    build_plant,
    config_hash,
    evaluation_initial_states,
    load_config,
    template_json,
)
from .edmd import identify_model, model_from_json, model_to_json
from .factorization import (
    FactorizationError,
    fit_pair,
    pair_from_json,
    pair_to_json,
    verify_assumption1,
)
from .synthesis import certified_rate, result_from_json, result_to_json, synthesize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_INFEASIBLE = 4
EXIT_EVAL_GATE = 5


class StageError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict, cfg: dict) -> None:
    payload = dict(payload)
    payload["meta"] = artifact_meta(cfg)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def _read_json(path: Path, expected_kind: str, code: int = EXIT_PRECONDITION):
    if not path.exists():
        raise StageError(f"missing stage artifact: {path}", code)
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != expected_kind:
        raise StageError(f"{path} is not a {expected_kind} artifact", code)
    return payload


def _cached(path: Path, kind: str, cfg: dict) -> bool:
    if not path.exists():
        return False
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError:
        return False
    return payload.get("kind") == kind \
        and payload.get("meta", {}).get("config_hash") == config_hash(cfg)


def cmd_babble(cfg: dict, jobs: int = 1) -> SnapshotDataset:
    plant = build_plant(cfg)
    map_x, map_u = build_maps(cfg)
    bcfg = babbling_config(cfg)
    ds = generate_dataset(plant, map_x, map_u, bcfg, jobs=jobs)
    outdir = _outdir(cfg) / "dataset"
    save_dataset(ds, outdir, extra_meta={"meta": artifact_meta(cfg)})
    print(f"babble: {ds.n_trajectories} trajectories "
          f"({ds.n_dropped} dropped), {len(ds)} snapshots "
          f"-> {outdir / 'manifest.json'}")
    return ds


def cmd_factorize(cfg: dict, ds: SnapshotDataset):
    map_x, map_u = build_maps(cfg)
    pair = fit_pair(ds, map_x, map_u, eps_h=cfg["factorization"]["eps_h"])
    path = _outdir(cfg) / "pair.json"
    _write_json(path, pair_to_json(pair), cfg)
    print(f"factorize: eps_h={pair.eps_h:.3e}, retained {pair.d_S} "
          f"of {pair.mask.size} blocks -> {path}")
    print("  block  label                          residual  kept")
    for i, (label, r) in enumerate(zip(map_x.labels, pair.residuals)):
        print(f"  {i:>5}  {label:<28}  {r:9.3e}  {'yes' if pair.mask[i] else 'no'}")
    return pair


def cmd_identify(cfg: dict, ds: SnapshotDataset, pair):
    map_x, _ = build_maps(cfg)
    ident = cfg["identification"]
    model = identify_model(ds, map_x, pair.S, ridge=ident["ridge"],
                           holdout_fraction=ident["holdout_fraction"])
    path = _outdir(cfg) / "model.json"
    _write_json(path, model_to_json(model), cfg)
    diag = model.diagnostics
    holdout = diag.get("holdout_mse")
    print(f"identify: train MSE {diag['train_mse']:.3e}"
          + (f", held-out MSE {holdout:.3e}" if holdout is not None else "")
          + f" -> {path}")
    return model


def cmd_synthesize(cfg: dict, model, pair):
    map_x, map_u = build_maps(cfg)
    syn = cfg["synthesis"]
    gate = syn["assumption_gate"]
    gate = 10.0 * pair.eps_h if gate is None else float(gate)
    rng = np.random.default_rng([int(cfg["seed"]), 4242])
    probe = rng.uniform(-1.0, 1.0, size=(256, map_x.state_dim))
    residual = verify_assumption1(pair, map_x, map_u, probe)
    if residual > gate:
        raise StageError(
            f"compatibility residual {residual:.3e} exceeds gate {gate:.3e}; "
            "refusing to synthesize on an invalid factorization",
            EXIT_PRECONDITION,
        )
    result = synthesize(
        model, pair, eps_p=syn["eps_p"], max_resamples=syn["max_resamples"],
        seed=int(cfg["seed"]), lam_tol=syn["lambda_tol"],
        feas_tol=syn["feas_tol"], ridge_delta=syn["ridge_delta"],
        backend=syn["backend"], rate_budget=syn["rate_budget"],
    )
    result.diagnostics["assumption_residual"] = residual
    path = _outdir(cfg) / "result.json"
    _write_json(path, result_to_json(result), cfg)
    if result.status != "optimal":
        raise StageError(
            f"synthesis failed ({result.status}) after "
            f"{result.diagnostics.get('resample_count', 0)} resamples -> {path}",
            EXIT_INFEASIBLE,
        )
    print(f"synthesize: lambda*={result.lam:.6f}, "
          f"rate sqrt(lambda*)={certified_rate(result):.6f}, "
          f"resamples={result.diagnostics['resample_count']}, "
          f"min eig {result.diagnostics['min_eig']:.2e} -> {path}")
    return result


def cmd_evaluate(cfg: dict, result, model=None, pair=None):
    if result.status != "optimal":
        raise StageError("cannot evaluate a non-optimal synthesis result",
                         EXIT_PRECONDITION)
    plant = build_plant(cfg)
    map_x, map_u = build_maps(cfg)
    ev = cfg["evaluation"]
    states = evaluation_initial_states(cfg, plant.state_dim)
    report = evaluation.evaluate_closed_loop(
        plant, map_u, result.K_u, states, ev["horizon_seconds"],
        cfg["babbling"]["dt"], settle_tol=ev["settle_tol"], result=result,
        map_x=map_x, train_ranges=cfg["babbling"]["state_grid"],
    )
    if model is not None and pair is not None:
        report.fidelity = evaluation.lifted_vs_true(
            model, pair, result.K_u, plant, map_x,
            states[: min(len(states), 10)], int(ev["fidelity_steps"]),
            cfg["babbling"]["dt"],
        )
    outdir = _outdir(cfg)
    _write_json(outdir / "report.json", report.to_json(), cfg)
    files = evaluation.export_plot_data(report, outdir / "plots")
    print(f"evaluate: success rate {report.success_rate:.2%} over "
          f"{len(report.records)} trajectories, median settle "
          f"{report.median_settling_time:.2f} s -> {outdir / 'report.json'} "
          f"(+{len(files)} plot files)")
    if report.success_rate < ev["success_gate"]:
        raise StageError(
            f"success rate {report.success_rate:.2%} below gate "
            f"{ev['success_gate']:.2%}",
            EXIT_EVAL_GATE,
        )
    return report


def cmd_pipeline(cfg: dict, jobs: int = 1):
    outdir = _outdir(cfg)
    manifest = outdir / "dataset" / "manifest.json"
    if manifest.exists():
        with open(manifest) as fh:
            cached = json.load(fh)
        hit = cached.get("meta", {}).get("config_hash") == config_hash(cfg)
    else:
        hit = False
    if hit:
        print("babble: cache hit")
        ds = load_dataset(outdir / "dataset")
    else:
        ds = cmd_babble(cfg, jobs=jobs)
    if _cached(outdir / "pair.json", "koopctl/pair", cfg):
        print("factorize: cache hit")
        pair = pair_from_json(_read_json(outdir / "pair.json", "koopctl/pair"))
    else:
        pair = cmd_factorize(cfg, ds)
    if _cached(outdir / "model.json", "koopctl/model", cfg):
        print("identify: cache hit")
        model = model_from_json(_read_json(outdir / "model.json", "koopctl/model"))
    else:
        model = cmd_identify(cfg, ds, pair)
    if _cached(outdir / "result.json", "koopctl/synthesis", cfg):
        print("synthesize: cache hit")
        result = result_from_json(
            _read_json(outdir / "result.json", "koopctl/synthesis"))
        if result.status != "optimal":
            raise StageError(f"cached synthesis is {result.status}",
                             EXIT_INFEASIBLE)
    else:
        result = cmd_synthesize(cfg, model, pair)
    return cmd_evaluate(cfg, result, model=model, pair=pair)


def _load_stage_inputs(cfg: dict, *names):
    """Load prior-stage artifacts, enforcing the pipeline order."""
    outdir = _outdir(cfg)
    loaded = []
    for name in names:
        if name == "dataset":
            manifest = outdir / "dataset" / "manifest.json"
            if not manifest.exists():
                raise StageError(
                    f"missing dataset (run 'babble' first): {manifest}",
                    EXIT_PRECONDITION)
            loaded.append(load_dataset(outdir / "dataset"))
        elif name == "pair":
            loaded.append(pair_from_json(
                _read_json(outdir / "pair.json", "koopctl/pair")))
        elif name == "model":
            loaded.append(model_from_json(
                _read_json(outdir / "model.json", "koopctl/model")))
        elif name == "result":
            loaded.append(result_from_json(
                _read_json(outdir / "result.json", "koopctl/synthesis")))
    return loaded


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="koopctl",
        description="bilinear Koopman identification and LMI gain synthesis",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("babble", "generate the motor-babbling dataset"),
        ("factorize", "identify the selection/measurement pair (S, H)"),
        ("identify", "fit the bilinear Koopman system matrix"),
        ("synthesize", "solve the Lyapunov LMI for the feedback gain"),
        ("evaluate", "closed-loop evaluation on the true plant"),
        ("pipeline", "run all stages with caching"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for rollout batches")
    p_init = sub.add_parser("init", help="write a documented config template")
    p_init.add_argument("path", nargs="?", default="experiment.json")

    args = parser.parse_args(argv)
    if args.command == "init":
        Path(args.path).write_text(template_json() + "\n")
        print(f"wrote template config to {args.path}")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
        if args.out:
            cfg["output_dir"] = args.out
        if args.seed is not None:
            cfg["seed"] = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "babble":
            cmd_babble(cfg, jobs=args.jobs)
        elif args.command == "factorize":
            (ds,) = _load_stage_inputs(cfg, "dataset")
            cmd_factorize(cfg, ds)
        elif args.command == "identify":
            ds, pair = _load_stage_inputs(cfg, "dataset", "pair")
            cmd_identify(cfg, ds, pair)
        elif args.command == "synthesize":
            model, pair = _load_stage_inputs(cfg, "model", "pair")
            cmd_synthesize(cfg, model, pair)
        elif args.command == "evaluate":
            result, model, pair = _load_stage_inputs(cfg, "result", "model",
                                                     "pair")
            cmd_evaluate(cfg, result, model=model, pair=pair)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FactorizationError as exc:
        print(f"factorization failed: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
