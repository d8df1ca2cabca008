"""Least-squares identification of the bilinear Koopman system matrix.

The model advances lifted states as

    psi+ = K_xx psi + K_xu ((S psi) kron u)

and K_x = [K_xx  K_xu] is the minimizer of the regularized Frobenius
objective ||Psi_out - K Psi_in||^2 + ridge ||K||^2.  The solve goes
through an orthogonal factorization of the (row-augmented) regressor,
never the normal equations, so near-collinear observables (constants and
cosines around the origin) stay harmless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .babbling import SnapshotDataset
from .observables import ObservableMap, descriptor_hash, evaluate_batch
from .tensor import matrix_from_json, matrix_to_json


@dataclass
class RegressionProblem:
    psi_in: np.ndarray   # (d_in, N)
    psi_out: np.ndarray  # (d_out, N)
    ridge: float = 0.0
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if self.psi_in.shape[1] != self.psi_out.shape[1]:
            raise ValueError("Psi_in and Psi_out must have equal column counts")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.psi_in.shape[1] < self.psi_in.shape[0]:
            self.flags.append("underdetermined: fewer snapshots than regressors")


@dataclass
class BilinearKoopmanModel:
    K_xx: np.ndarray
    K_xu: np.ndarray
    S: np.ndarray               # binary selection matrix (d_S, d_psi)
    map_descriptor: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def lifted_dim(self) -> int:
        return self.K_xx.shape[0]

    @property
    def state_dim(self) -> int:
        return int(self.map_descriptor["state_dim"])

    @property
    def input_dim(self) -> int:
        return self.K_xu.shape[1] // self.S.shape[0]

    def predict(self, psi: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One-step lifted prediction for a single column psi and input u."""
        return self.K_xx @ psi + self.K_xu @ np.kron(self.S @ psi, u)


def solve_least_squares(prob: RegressionProblem):
    """Minimize ||Psi_out - K Psi_in||_F^2 + ridge ||K||_F^2.

    Returns (K, info) where info records the regressor condition number,
    effective rank, and any flags (a rank-deficient unridged problem
    returns the minimum-norm solution and is flagged).
    """
    d_in, n = prob.psi_in.shape
    if n < 1:
        raise ValueError("empty regression problem")
    a = prob.psi_in.T
    b = prob.psi_out.T
    if prob.ridge > 0:
        a = np.vstack([a, np.sqrt(prob.ridge) * np.eye(d_in)])
        b = np.vstack([b, np.zeros((d_in, prob.psi_out.shape[0]))])
    kt, _, rank, sv = scipy.linalg.lstsq(a, b, lapack_driver="gelsd")
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    flags = list(prob.flags)
    if rank < d_in and prob.ridge == 0:
        flags.append("rank-deficient regressors: minimum-norm solution")
    info = {"rank": int(rank), "cond": cond, "flags": flags,
            "n_snapshots": int(n), "ridge": float(prob.ridge)}
    return kt.T, info


def assemble_bilinear_regressors(ds: SnapshotDataset, map_x: ObservableMap,
                                 S: np.ndarray, ridge: float = 0.0
                                 ) -> RegressionProblem:
    """Stack input columns [psi(x_k); (S psi(x_k)) kron u_k] against psi(x_{k+1})."""
    S = np.asarray(S, dtype=float)
    if S.shape[1] != map_x.dim:
        raise ValueError(
            f"selection matrix has {S.shape[1]} columns, map has {map_x.dim}"
        )
    psi = evaluate_batch(map_x, ds.x)              # (d_psi, N)
    psi_next = evaluate_batch(map_x, ds.x_next)
    sel = S @ psi                                   # (d_S, N)
    u = ds.u.T                                      # (d_u, N)
    # columnwise (sel kron u): row (i*d_u + a) = sel_i * u_a
    bil = (sel[:, None, :] * u[None, :, :]).reshape(-1, psi.shape[1])
    prob = RegressionProblem(psi_in=np.vstack([psi, bil]), psi_out=psi_next,
                             ridge=ridge)
    if bil.size and np.linalg.matrix_rank(bil @ bil.T) < bil.shape[0]:
        prob.flags.append("bilinear block rank-deficient: K_xu unidentifiable")
    return prob


def identify_model(ds: SnapshotDataset, map_x: ObservableMap, S: np.ndarray,
                   ridge: float = None,
                   holdout_fraction: float = 0.1) -> BilinearKoopmanModel:
    """Fit K_x on a whole-trajectory train split and report held-out error.

    ridge defaults to 1e-8 per snapshot (1e-8 * N), which stabilizes the
    near-collinear constant/cosine regressors without visibly biasing
    the fit.  MSE values are per entry of the lifted prediction.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    train, holdout = ds.split_by_trajectory(holdout_fraction)
    sub = _subset(ds, train)
    n_train = int(train.sum())
    rho = 1e-8 * n_train if ridge is None else float(ridge)
    prob = assemble_bilinear_regressors(sub, map_x, S, ridge=rho)
    k, info = solve_least_squares(prob)
    d_psi = map_x.dim
    model = BilinearKoopmanModel(
        K_xx=k[:, :d_psi], K_xu=k[:, d_psi:], S=np.asarray(S, dtype=float),
        map_descriptor=map_x.to_descriptor(),
    )
    diag = {"train_mse": _one_step_mse(model, map_x, _subset(ds, train)),
            "n_train": n_train, "n_holdout": int(holdout.sum()),
            "ridge": rho, **info}
    if holdout.any():
        diag["holdout_mse"] = _one_step_mse(model, map_x, _subset(ds, holdout))
    model.diagnostics = diag
    return model


def _subset(ds: SnapshotDataset, mask: np.ndarray) -> SnapshotDataset:
    return SnapshotDataset(
        x=ds.x[mask], u=ds.u[mask], x_next=ds.x_next[mask],
        gain_index=ds.gain_index[mask], ic_index=ds.ic_index[mask],
        step_index=ds.step_index[mask], traj_id=ds.traj_id[mask],
        n_trajectories=int(np.unique(ds.traj_id[mask]).size),
        n_dropped=ds.n_dropped, meta=ds.meta,
    )


def _one_step_mse(model: BilinearKoopmanModel, map_x: ObservableMap,
                  ds: SnapshotDataset) -> float:
    psi = evaluate_batch(map_x, ds.x)
    psi_next = evaluate_batch(map_x, ds.x_next)
    sel = model.S @ psi
    u = ds.u.T
    bil = (sel[:, None, :] * u[None, :, :]).reshape(-1, psi.shape[1])
    pred = model.K_xx @ psi + model.K_xu @ bil
    return float(np.mean((pred - psi_next) ** 2))


def model_to_json(model: BilinearKoopmanModel) -> dict:
    return {
        "kind": "koopctl/model",
        "map": model.map_descriptor,
        "map_hash": descriptor_hash(model.map_descriptor),
        "S": matrix_to_json(model.S),
        "K_xx": matrix_to_json(model.K_xx),
        "K_xu": matrix_to_json(model.K_xu),
        "diagnostics": model.diagnostics,
    }


def model_from_json(d: dict) -> BilinearKoopmanModel:
    return BilinearKoopmanModel(
        K_xx=matrix_from_json(d["K_xx"]), K_xu=matrix_from_json(d["K_xu"]),
        S=matrix_from_json(d["S"]), map_descriptor=d["map"],
        diagnostics=d.get("diagnostics", {}),
    )
