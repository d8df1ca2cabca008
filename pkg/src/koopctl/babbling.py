"""Motor-babbling dataset generation.

Random feedback gains are paired with gridded initial conditions and
rolled out through the plant; every (x_k, u_k, x_{k+1}) triple is kept
with its provenance.  Trajectories that go non-finite are dropped whole
(a bad suffix would leave near-singular leverage points) and counted.

Assembly order is gain-major, initial-condition-minor, step-increasing,
regardless of how the rollouts are executed, so identical configs and
seeds give bitwise-identical datasets.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .observables import ObservableMap
from .plants import ControlAffinePlant, rollout_batch


@dataclass(frozen=True)
class BabblingConfig:
    num_gains: int = 20
    num_initial_conditions: int = 25
    gain_scale: float = 1.0
    state_grid: tuple = ((-np.pi, np.pi), (-6.0, 6.0))  # per-dimension [lo, hi]
    grid_shape: tuple = None  # explicit per-dimension counts, optional
    steps: int = 100
    dt: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.num_gains < 1 or self.num_initial_conditions < 1:
            raise ValueError("counts must be at least 1")
        if self.gain_scale < 0:
            raise ValueError("gain_scale must be nonnegative")
        for lo, hi in self.state_grid:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError("state_grid bounds must be finite with lo <= hi")


@dataclass
class SnapshotDataset:
    """Snapshot triples with provenance (gain i, initial condition j, step k)."""

    x: np.ndarray        # (N, d_x)
    u: np.ndarray        # (N, d_u)
    x_next: np.ndarray   # (N, d_x)
    gain_index: np.ndarray
    ic_index: np.ndarray
    step_index: np.ndarray
    traj_id: np.ndarray
    n_trajectories: int = 0
    n_dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    def split_by_trajectory(self, holdout_fraction: float = 0.1):
        """Deterministic whole-trajectory split; returns (train, holdout) masks."""
        if not 0 <= holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in [0, 1)")
        if holdout_fraction == 0:
            return np.ones(len(self), dtype=bool), np.zeros(len(self), dtype=bool)
        every = max(2, int(round(1.0 / holdout_fraction)))
        holdout = (self.traj_id % every) == 0
        return ~holdout, holdout


def sample_random_gains(cfg: BabblingConfig, d_u: int, d_psi_u: int,
                        rng=None) -> list:
    """Gains with entries i.i.d. uniform on [-gain_scale, gain_scale]."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return [rng.uniform(-cfg.gain_scale, cfg.gain_scale, size=(d_u, d_psi_u))
            for _ in range(cfg.num_gains)]


def near_equal_factorization(total: int, dims: int) -> tuple:
    """Factor ``total`` into ``dims`` integer factors as close as possible.

    Greedy: repeatedly take the divisor closest to the geometric mean of
    what remains.  Always succeeds (worst case (total, 1, ..., 1)).
    """
    factors = []
    remaining = int(total)
    for d in range(dims, 1, -1):
        target = remaining ** (1.0 / d)
        divisors = [k for k in range(1, remaining + 1) if remaining % k == 0]
        best = min(divisors, key=lambda k: abs(k - target))
        factors.append(best)
        remaining //= best
    factors.append(remaining)
    return tuple(factors)


def grid_initial_conditions(cfg: BabblingConfig, d_x: int = None) -> np.ndarray:
    """Cartesian-product grid over state_grid bounds, endpoints included.

    A single point per dimension sits at the lower bound by convention.
    Raises when an explicit grid_shape does not multiply to the requested
    count.
    """
    d_x = len(cfg.state_grid) if d_x is None else d_x
    if len(cfg.state_grid) != d_x:
        raise ValueError("state_grid dimension mismatch")
    if cfg.grid_shape is not None:
        shape = tuple(int(n) for n in cfg.grid_shape)
        if int(np.prod(shape)) != cfg.num_initial_conditions:
            raise ValueError(
                f"grid_shape {shape} does not factor "
                f"{cfg.num_initial_conditions} initial conditions"
            )
    else:
        shape = near_equal_factorization(cfg.num_initial_conditions, d_x)
    axes = []
    for (lo, hi), n in zip(cfg.state_grid, shape):
        axes.append(np.linspace(lo, hi, n) if n > 1 else np.array([lo]))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def generate_dataset(plant: ControlAffinePlant, map_x: ObservableMap,
                     map_u: ObservableMap, cfg: BabblingConfig,
                     jobs: int = 1) -> SnapshotDataset:
    """Roll out every (gain, initial condition) pair and collect snapshots.

    u_k = clip(K_u^(i) psi_u(x_k)) is applied with zero-order hold; the
    stored u is the clipped value actually integrated.
    """
    rng = np.random.default_rng(cfg.seed)
    gains = sample_random_gains(cfg, plant.input_dim, map_u.dim, rng=rng)
    ics = grid_initial_conditions(cfg, plant.state_dim)
    n_ic = ics.shape[0]
    T = cfg.steps

    lift = lambda x: map_u(x)  # noqa: E731

    def run_gain(K):
        gain_batch = np.broadcast_to(K, (n_ic,) + K.shape)
        return rollout_batch(plant, ics, gain_batch, lift, T, cfg.dt)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_gain, gains))
    else:
        results = [run_gain(K) for K in gains]

    xs, us, xns = [], [], []
    gidx, icidx, steps, tids = [], [], [], []
    n_dropped = 0
    kept = 0
    for i, (states, inputs, alive) in enumerate(results):
        for j in range(n_ic):
            if not alive[j]:
                n_dropped += 1
                continue
            xs.append(states[j, :-1])
            us.append(inputs[j])
            xns.append(states[j, 1:])
            gidx.append(np.full(T, i))
            icidx.append(np.full(T, j))
            steps.append(np.arange(T))
            tids.append(np.full(T, i * n_ic + j))
            kept += 1
    if kept == 0:
        raise ValueError("all trajectories diverged; nothing to identify from")
    ds = SnapshotDataset(
        x=np.concatenate(xs), u=np.concatenate(us), x_next=np.concatenate(xns),
        gain_index=np.concatenate(gidx), ic_index=np.concatenate(icidx),
        step_index=np.concatenate(steps), traj_id=np.concatenate(tids),
        n_trajectories=kept, n_dropped=n_dropped,
        meta={"seed": cfg.seed, "steps": T, "dt": cfg.dt,
              "num_gains": cfg.num_gains, "num_initial_conditions": n_ic,
              "grid_shape": [int(len(np.unique(ics[:, d])))
                             for d in range(ics.shape[1])]},
    )
    return ds


def save_dataset(ds: SnapshotDataset, outdir, extra_meta: dict = None) -> Path:
    """Persist as manifest JSON plus one CSV shard per trajectory."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    d_x = ds.x.shape[1]
    d_u = ds.u.shape[1]
    header = ["k"] + [f"x{i + 1}" for i in range(d_x)] \
        + [f"u{j + 1}" for j in range(d_u)]
    shards = []
    for tid in np.unique(ds.traj_id):
        rows = np.nonzero(ds.traj_id == tid)[0]
        name = f"traj_{int(tid):06d}.csv"
        with open(outdir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([int(ds.step_index[r])]
                           + [repr(float(v)) for v in ds.x[r]]
                           + [repr(float(v)) for v in ds.u[r]])
            last = rows[-1]
            w.writerow([int(ds.step_index[last]) + 1]
                       + [repr(float(v)) for v in ds.x_next[last]]
                       + ["0.0"] * d_u)
        shards.append(name)
    manifest = {
        "kind": "koopctl/dataset",
        "snapshots": len(ds),
        "trajectories": int(ds.n_trajectories),
        "dropped": int(ds.n_dropped),
        "state_dim": d_x,
        "input_dim": d_u,
        "shards": shards,
        "babbling": ds.meta,
    }
    if extra_meta:
        manifest.update(extra_meta)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return outdir / "manifest.json"


def load_dataset(outdir) -> SnapshotDataset:
    outdir = Path(outdir)
    with open(outdir / "manifest.json") as fh:
        manifest = json.load(fh)
    d_x = manifest["state_dim"]
    xs, us, xns = [], [], []
    steps, tids = [], []
    for name in manifest["shards"]:
        arr = np.loadtxt(outdir / name, delimiter=",", skiprows=1, ndmin=2)
        xs.append(arr[:-1, 1 : 1 + d_x])
        us.append(arr[:-1, 1 + d_x :])
        xns.append(arr[1:, 1 : 1 + d_x])
        steps.append(arr[:-1, 0].astype(int))
        tid = int(name.split("_")[1].split(".")[0])
        tids.append(np.full(arr.shape[0] - 1, tid))
    n_ic = manifest["babbling"]["num_initial_conditions"]
    tid_all = np.concatenate(tids)
    return SnapshotDataset(
        x=np.concatenate(xs), u=np.concatenate(us), x_next=np.concatenate(xns),
        gain_index=tid_all // n_ic, ic_index=tid_all % n_ic,
        step_index=np.concatenate(steps), traj_id=tid_all,
        n_trajectories=len(manifest["shards"]),
        n_dropped=manifest["dropped"], meta=manifest["babbling"],
    )
