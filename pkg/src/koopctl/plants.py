"""Continuous-time control-affine plants and the fixed-step RK4 discretizer.

Angle convention: theta = 0 is the upright (inverted) position for both
pendulums, so gravity destabilizes the origin and "stabilize around the
origin" means balancing upright.  States are never wrapped; observables
use sines/cosines and polynomials of the raw state.

Double-pendulum convention (used consistently by the simulation and the
relative-angle observable th_r = th1 - th2): absolute link angles from
the upright vertical, point masses at the link tips, torques at both
joints.  With q = [th1, th2]:

    M(q) q'' + c(q, q') + g(q) = u - B q'
    M   = [[(m1+m2) l1^2,        m2 l1 l2 cos(th_r)],
           [m2 l1 l2 cos(th_r),  m2 l2^2           ]]
    c   = [ m2 l1 l2 sin(th_r) th2_dot^2,
           -m2 l1 l2 sin(th_r) th1_dot^2]
    g   = [-(m1+m2) G l1 sin(th1),  -m2 G l2 sin(th2)]

    det M = m2 l1^2 l2^2 (m1 + m2 sin(th_r)^2) > 0 for positive masses,
so the mass matrix is never singular.  B is optional viscous joint
damping, zero by default.

All dynamics are written with elementwise numpy operations only (the
2x2 mass-matrix solve is closed form), so stepping a batch of states
produces bitwise the same numbers as stepping each state alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ControlAffinePlant:
    """Immutable descriptor of dynamics x' = f(x) + g(x) u."""

    name: str
    state_dim: int
    input_dim: int
    drift: callable          # f(x): (..., d_x) -> (..., d_x)
    input_matrix: callable   # g(x): (..., d_x) -> (..., d_x, d_u)
    input_bounds: np.ndarray  # (d_u, 2) rows [u_min, u_max]
    params: dict = field(default_factory=dict)

    def rhs(self, x, u):
        """f(x) + g(x) u, accumulated column by column in fixed order."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        g = self.input_matrix(x)
        out = self.drift(x)
        for j in range(self.input_dim):
            out = out + g[..., j] * u[..., j : j + 1]
        return out

    def clip_input(self, u):
        u = np.asarray(u, dtype=float)
        lo = self.input_bounds[:, 0]
        hi = self.input_bounds[:, 1]
        return np.clip(u, lo, hi)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.01
    steps: int = 100

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


@dataclass
class Trajectory:
    """Rollout record: states (T+1, d_x), inputs (T, d_u) applied at step k."""

    states: np.ndarray
    inputs: np.ndarray
    dt: float
    diverged: bool = False

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def snapshots(self):
        """Triples (x_k, u_k, x_{k+1}) for k = 0 .. T-1 as three arrays."""
        return self.states[:-1], self.inputs, self.states[1:]


def single_pendulum(m: float = 1.0, L: float = 1.0, b: float = 0.3,
                    gravity: float = 9.81,
                    input_bound: float = 5.0) -> ControlAffinePlant:
    """Damped point-mass pendulum, state [theta, theta_dot], torque input.

    theta'' = (gravity / L) sin(theta) - b / (m L^2) theta_dot + u / (m L^2)
    """
    if m <= 0 or L <= 0:
        raise ValueError("mass and length must be positive")
    if b < 0 or gravity < 0:
        raise ValueError("damping and gravity must be nonnegative")
    inertia = m * L * L

    def drift(x):
        th = x[..., 0]
        om = x[..., 1]
        acc = (gravity / L) * np.sin(th) - (b / inertia) * om
        return np.stack([om, acc], axis=-1)

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0 / inertia
        return g

    return ControlAffinePlant(
        name="single_pendulum", state_dim=2, input_dim=1,
        drift=drift, input_matrix=input_matrix,
        input_bounds=np.array([[-input_bound, input_bound]]),
        params={"m": m, "L": L, "b": b, "gravity": gravity},
    )


def double_pendulum(m1: float = 1.0, m2: float = 1.0, l1: float = 1.0,
                    l2: float = 1.0, gravity: float = 9.81,
                    damping: tuple = (0.0, 0.0),
                    input_bound: float = 5.0) -> ControlAffinePlant:
    """Point-mass double pendulum, both joints actuated, upright origin.

    State [th1, th2, th1_dot, th2_dot]; see the module docstring for the
    equations of motion.  Joint damping defaults to zero.
    """
    if min(m1, m2, l1, l2) <= 0:
        raise ValueError("masses and lengths must be positive")
    b1, b2 = float(damping[0]), float(damping[1])

    def mass_entries(th_r):
        a = (m1 + m2) * l1 * l1
        bb = m2 * l1 * l2 * np.cos(th_r)
        c = m2 * l2 * l2
        return a, bb, c

    def accel(x, tau1, tau2):
        th1 = x[..., 0]
        th2 = x[..., 1]
        w1 = x[..., 2]
        w2 = x[..., 3]
        th_r = th1 - th2
        a, bb, c = mass_entries(th_r)
        det = a * c - bb * bb
        if np.any(det <= 0):
            raise FloatingPointError("singular mass matrix")
        s_r = np.sin(th_r)
        r1 = tau1 - m2 * l1 * l2 * s_r * w2 * w2 \
            + (m1 + m2) * gravity * l1 * np.sin(th1) - b1 * w1
        r2 = tau2 + m2 * l1 * l2 * s_r * w1 * w1 \
            + m2 * gravity * l2 * np.sin(th2) - b2 * w2
        # closed-form 2x2 solve keeps batch and single paths identical
        acc1 = (c * r1 - bb * r2) / det
        acc2 = (a * r2 - bb * r1) / det
        return acc1, acc2

    def drift(x):
        x = np.asarray(x, dtype=float)
        zero = np.zeros(x.shape[:-1])
        acc1, acc2 = accel(x, zero, zero)
        return np.stack([x[..., 2], x[..., 3], acc1, acc2], axis=-1)

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        th_r = x[..., 0] - x[..., 1]
        a, bb, c = mass_entries(th_r)
        det = a * c - bb * bb
        g = np.zeros(x.shape[:-1] + (4, 2))
        g[..., 2, 0] = c / det
        g[..., 2, 1] = -bb / det
        g[..., 3, 0] = -bb / det
        g[..., 3, 1] = a / det
        return g

    return ControlAffinePlant(
        name="double_pendulum", state_dim=4, input_dim=2,
        drift=drift, input_matrix=input_matrix,
        input_bounds=np.array([[-input_bound, input_bound]] * 2),
        params={"m1": m1, "m2": m2, "l1": l1, "l2": l2,
                "gravity": gravity, "damping": [b1, b2]},
    )


def mechanical_energy(plant: ControlAffinePlant, x) -> np.ndarray:
    """Kinetic plus potential energy (upright datum), for both pendulums."""
    x = np.asarray(x, dtype=float)
    p = plant.params
    if plant.name == "single_pendulum":
        th, om = x[..., 0], x[..., 1]
        return 0.5 * p["m"] * p["L"] ** 2 * om ** 2 \
            + p["m"] * p["gravity"] * p["L"] * np.cos(th)
    if plant.name == "double_pendulum":
        th1, th2, w1, w2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["gravity"]
        ke = 0.5 * (m1 + m2) * l1 ** 2 * w1 ** 2 + 0.5 * m2 * l2 ** 2 * w2 ** 2 \
            + m2 * l1 * l2 * w1 * w2 * np.cos(th1 - th2)
        pe = (m1 + m2) * g * l1 * np.cos(th1) + m2 * g * l2 * np.cos(th2)
        return ke + pe
    raise ValueError(f"no energy expression for plant {plant.name!r}")


def rk4_step(plant: ControlAffinePlant, x, u, dt: float) -> np.ndarray:
    """Classical RK4 update with zero-order-hold input over the step.

    Accepts a single state (d_x,) or a batch (N, d_x); u broadcasts the
    same way.  Raises FloatingPointError when the update is non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = plant.rhs(x, u)
    k2 = plant.rhs(x + 0.5 * dt * k1, u)
    k3 = plant.rhs(x + 0.5 * dt * k2, u)
    k4 = plant.rhs(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if x.ndim == 1 and not np.all(np.isfinite(out)):
        raise FloatingPointError("integration produced non-finite state")
    return out


def rollout(plant: ControlAffinePlant, x0, controller, T: int,
            dt: float) -> Trajectory:
    """Roll the plant forward T steps under a feedback law or input sequence.

    ``controller`` is either a callable x -> u or an array of shape
    (T, d_u).  Controls are clipped to the plant input bounds before
    integration.  Integration failure truncates the trajectory and sets
    the ``diverged`` flag.
    """
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    inputs = []
    fixed = None if callable(controller) else np.asarray(controller, dtype=float)
    if fixed is not None and fixed.shape != (T, plant.input_dim):
        fixed = fixed.reshape(T, plant.input_dim)
    for k in range(T):
        u = controller(x) if fixed is None else fixed[k]
        u = plant.clip_input(np.atleast_1d(np.asarray(u, dtype=float)))
        try:
            x = rk4_step(plant, x, u, dt)
        except FloatingPointError:
            return Trajectory(states=np.array(states),
                              inputs=np.array(inputs).reshape(-1, plant.input_dim),
                              dt=dt, diverged=True)
        states.append(x.copy())
        inputs.append(u.copy())
    return Trajectory(states=np.array(states),
                      inputs=np.array(inputs).reshape(T, plant.input_dim),
                      dt=dt)


def rollout_batch(plant: ControlAffinePlant, x0s: np.ndarray, gains,
                  lift, T: int, dt: float):
    """Vectorized rollouts under feedback u = clip(K psi_u(x)), one gain per row.

    x0s: (B, d_x) initial states; gains: (B, d_u, d_psi_u); lift: batch
    observable evaluator x (B, d_x) -> (B, d_psi_u).  Returns (states
    (B, T+1, d_x), inputs (B, T, d_u), alive (B,)) where ``alive`` marks
    trajectories that stayed finite throughout.
    """
    x0s = np.asarray(x0s, dtype=float)
    B = x0s.shape[0]
    gains = np.asarray(gains, dtype=float)
    states = np.zeros((B, T + 1, plant.state_dim))
    inputs = np.zeros((B, T, plant.input_dim))
    states[:, 0] = x0s
    x = x0s.copy()
    alive = np.ones(B, dtype=bool)
    for k in range(T):
        psi = lift(x)
        u = np.einsum("baj,bj->ba", gains, psi)
        u = plant.clip_input(u)
        x = rk4_step(plant, x, u, dt)
        bad = ~np.all(np.isfinite(x), axis=-1)
        if np.any(bad):
            alive &= ~bad
            x[bad] = 0.0  # parked; finished trajectories are dropped by the caller
        inputs[:, k] = u
        states[:, k + 1] = x
    return states, inputs, alive


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write one row per step: k, x1..x_dx, u1..u_du (u = 0 on the final row)."""
    d_x = traj.states.shape[1]
    d_u = traj.inputs.shape[1]
    header = ["k"] + [f"x{i + 1}" for i in range(d_x)] \
        + [f"u{j + 1}" for j in range(d_u)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(traj.states.shape[0]):
            u = traj.inputs[k] if k < traj.inputs.shape[0] else np.zeros(d_u)
            row = [k] + [repr(float(v)) for v in traj.states[k]] \
                + [repr(float(v)) for v in u]
            w.writerow(row)


def trajectory_from_csv(path, dt: float) -> Trajectory:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d_x = sum(1 for h in header if h.startswith("x"))
        d_u = sum(1 for h in header if h.startswith("u"))
        rows = [[float(v) for v in row[1:]] for row in r]
    arr = np.asarray(rows)
    states = arr[:, :d_x]
    inputs = arr[:-1, d_x : d_x + d_u]
    return Trajectory(states=states, inputs=inputs, dt=dt)
