"""Experiment configuration: defaults, validation, hashing, template.

A single JSON file drives the whole pipeline.  Unknown keys are rejected
so typos fail loudly; omitted keys fall back to the documented defaults.
The sha256 hash of the canonical (sorted, fully merged) config is
embedded in every artifact so stage caching and reproducibility checks
are purely content-based.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math

import numpy as np

from . import __version__
from .babbling import BabblingConfig
from .observables import (
    ObservableMap,
    double_pendulum_map,
    map_from_descriptor,
    single_pendulum_map,
)
from .plants import ControlAffinePlant, double_pendulum, single_pendulum


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


DEFAULTS = {
    "plant": {
        "kind": "single_pendulum",
        "params": {},           # plant constructor overrides, e.g. {"b": 0.3}
        "input_bound": 5.0,
    },
    "observables": {
        "kind": "single_pendulum",   # single_pendulum | double_pendulum | custom
        "features": None,            # custom feature descriptors
        "state_dim": None,           # required for custom features
        "controller": None,          # separate psi_u config; None reuses psi_x
    },
    "babbling": {
        "num_gains": 25,
        "num_initial_conditions": 25,
        "gain_scale": 1.0,
        "state_grid": [[-math.pi, math.pi], [-6.0, 6.0]],
        "grid_shape": None,
        "steps": 100,
        "dt": 0.01,
    },
    "identification": {
        "ridge": None,               # None: auto 1e-8 per snapshot
        "holdout_fraction": 0.1,
    },
    "factorization": {
        "eps_h": None,               # None: auto 1e-6 * RMS ||psi_x kron psi_u||
    },
    "synthesis": {
        "eps_p": 0.01,
        "lambda_tol": 1e-3,
        "feas_tol": 1e-8,
        "max_resamples": 50,
        "rate_budget": 0,
        "backend": "bisection",      # bisection | cvxpy
        "ridge_delta": 0.0,
        "assumption_gate": None,     # None: 10 x the eps_h actually used
    },
    "evaluation": {
        "horizon_seconds": 20.0,
        "settle_tol": 0.05,
        "success_gate": 0.9,
        "initial_conditions": {
            "kind": "uniform",       # uniform | grid | list
            "ranges": [[-math.pi, math.pi], [-9.0, 9.0]],
            "count": 30,
            "states": None,          # for kind = list
            "shape": None,           # for kind = grid
        },
        "extra_states": [],          # appended, reported alongside
        "fidelity_steps": 100,
    },
    "seed": 0,
    "output_dir": "out",
}

_DOC = {
    "plant.kind": "single_pendulum or double_pendulum",
    "plant.params": "constructor overrides (m, L, b, gravity; m1, m2, l1, l2, damping)",
    "plant.input_bound": "per-channel torque saturation, u in [-bound, bound]",
    "observables.kind": "lifting map; 'custom' reads observables.features descriptors",
    "observables.controller": "separate controller-feature map config, null reuses the state map",
    "babbling.num_gains": "random feedback gains; trajectories = num_gains * num_initial_conditions",
    "babbling.state_grid": "per-state [lo, hi] bounds for the initial-condition grid",
    "babbling.grid_shape": "explicit per-dimension grid counts; null picks near-equal factors",
    "identification.ridge": "Frobenius ridge; null = 1e-8 * training snapshot count",
    "factorization.eps_h": "block residual threshold; null = 1e-6 * RMS lifted Kronecker norm",
    "synthesis.eps_p": "ridge inside sampled Lyapunov candidates R^T R + eps_p I",
    "synthesis.max_resamples": "sampled candidates tried after the identity start",
    "synthesis.rate_budget": "extra candidates explored after the first success, best rate wins",
    "synthesis.backend": "'bisection' (built-in) or 'cvxpy' (external SDP)",
    "synthesis.assumption_gate": "max compatibility residual allowed before synthesis",
    "evaluation.initial_conditions": "uniform sampling, explicit grid, or a literal state list",
    "evaluation.extra_states": "stress-case states appended to the evaluation set",
    "seed": "global seed; stage streams are derived deterministically from it",
}


def merge_defaults(user: dict, defaults: dict = None, path: str = "") -> dict:
    defaults = DEFAULTS if defaults is None else defaults
    if not isinstance(user, dict):
        raise ConfigError(f"expected an object at '{path or 'top level'}'")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key.startswith("_"):
            continue  # comment keys
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(defaults[key], dict) and defaults[key] \
                and isinstance(value, dict):
            out[key] = merge_defaults(value, defaults[key], f"{path}{key}.")
        else:
            # free-form sections (empty-dict defaults) and scalars are
            # taken wholesale
            out[key] = copy.deepcopy(value)
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return merge_defaults(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def artifact_meta(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": int(cfg["seed"]),
            "version": __version__}


def template_json() -> str:
    """Defaults plus inline documentation, ready to edit."""
    doc = copy.deepcopy(DEFAULTS)
    doc["_doc"] = _DOC
    return json.dumps(doc, indent=2, sort_keys=True)


def build_plant(cfg: dict) -> ControlAffinePlant:
    section = cfg["plant"]
    kind = section["kind"]
    params = dict(section["params"])
    params.setdefault("input_bound", section["input_bound"])
    try:
        if kind == "single_pendulum":
            return single_pendulum(**params)
        if kind == "double_pendulum":
            if "damping" in params:
                params["damping"] = tuple(params["damping"])
            return double_pendulum(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad plant params: {exc}")
    raise ConfigError(f"unknown plant kind {kind!r}")


def _build_map(section: dict) -> ObservableMap:
    kind = section["kind"]
    if kind == "single_pendulum":
        return single_pendulum_map()
    if kind == "double_pendulum":
        return double_pendulum_map()
    if kind == "custom":
        if not section.get("features"):
            raise ConfigError("custom observables need a 'features' list")
        try:
            return map_from_descriptor(
                {"name": "custom", "state_dim": section["state_dim"],
                 "features": section["features"]})
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad custom observables: {exc}")
    raise ConfigError(f"unknown observables kind {kind!r}")


def build_maps(cfg: dict):
    """Returns (map_x, map_u); psi_u defaults to the psi_x map object."""
    section = cfg["observables"]
    map_x = _build_map(section)
    if section.get("controller") is None:
        return map_x, map_x
    ctrl = merge_defaults(section["controller"], DEFAULTS["observables"],
                          "observables.controller.")
    return map_x, _build_map(ctrl)


def babbling_config(cfg: dict) -> BabblingConfig:
    b = cfg["babbling"]
    try:
        return BabblingConfig(
            num_gains=int(b["num_gains"]),
            num_initial_conditions=int(b["num_initial_conditions"]),
            gain_scale=float(b["gain_scale"]),
            state_grid=tuple(tuple(map(float, r)) for r in b["state_grid"]),
            grid_shape=None if b["grid_shape"] is None
            else tuple(int(n) for n in b["grid_shape"]),
            steps=int(b["steps"]),
            dt=float(b["dt"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(f"bad babbling config: {exc}")


def evaluation_initial_states(cfg: dict, d_x: int) -> np.ndarray:
    """Initial-condition set for closed-loop evaluation (seeded, deterministic)."""
    section = cfg["evaluation"]["initial_conditions"]
    kind = section["kind"]
    if kind == "list":
        states = np.asarray(section["states"], dtype=float)
    elif kind == "uniform":
        ranges = np.asarray(section["ranges"], dtype=float)
        if ranges.shape != (d_x, 2):
            raise ConfigError(
                f"initial-condition ranges must be {d_x} x 2, got {ranges.shape}"
            )
        rng = np.random.default_rng([int(cfg["seed"]), 7001])
        states = rng.uniform(ranges[:, 0], ranges[:, 1],
                             size=(int(section["count"]), d_x))
    elif kind == "grid":
        ranges = section["ranges"]
        shape = section["shape"]
        if shape is None or len(shape) != d_x:
            raise ConfigError("grid initial conditions need a per-dimension shape")
        axes = [np.linspace(lo, hi, int(n)) if int(n) > 1 else np.array([lo])
                for (lo, hi), n in zip(ranges, shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        states = np.stack([m.ravel() for m in mesh], axis=-1)
    else:
        raise ConfigError(f"unknown initial-condition kind {kind!r}")
    extra = cfg["evaluation"].get("extra_states") or []
    if extra:
        states = np.vstack([states, np.asarray(extra, dtype=float)])
    if states.ndim != 2 or states.shape[1] != d_x:
        raise ConfigError(f"initial states must be (n, {d_x})")
    return states
