"""Selection/measurement pair identification and closed-loop assembly.

The compatibility condition between the state observables psi_x and the
controller features psi_u is

    (S psi_x(x)) kron psi_u(x) = H psi_x(x)

for a binary row-selector S.  With S restricted to one nonzero per row,
the candidate augmented matrix Hbar is fit blockwise: block i regresses
[psi_x]_i * psi_u onto psi_x, independently of the other blocks.  Blocks
whose RMS residual passes a threshold eps_h are retained (in increasing
index order) as the rows of S and the stacked blocks of H.

When the condition holds, the closed-loop lifted operator becomes

    Ktilde = K_xx + K_xu (I kron K_u) H,

linear in the gain K_u for a fixed identified model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .babbling import SnapshotDataset
from .edmd import BilinearKoopmanModel
from .observables import ObservableMap, evaluate_batch
from .tensor import matrix_from_json, matrix_to_json


class FactorizationError(RuntimeError):
    """No block satisfied the threshold: the bilinear input term vanishes."""


@dataclass
class FactorizationPair:
    S: np.ndarray           # (d_S, d_psi_x) binary, one nonzero per row
    H: np.ndarray           # (d_S * d_psi_u, d_psi_x)
    mask: np.ndarray        # binary length d_psi_x
    residuals: np.ndarray   # per-block RMS residuals, length d_psi_x
    eps_h: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def d_S(self) -> int:
        return self.S.shape[0]

    @property
    def d_psi_u(self) -> int:
        return self.H.shape[0] // max(self.d_S, 1)


def fit_candidate_hbar(data, map_x: ObservableMap, map_u: ObservableMap):
    """Blockwise least-squares fit of (psi_x kron psi_u) onto psi_x.

    ``data`` is a SnapshotDataset or an (N, d_x) array of states.  Returns
    (Hbar, residuals, info); residual i is the RMS over snapshots of the
    block-i error vector.  Rank deficiency of the regressor is flagged.
    """
    states = data.x if isinstance(data, SnapshotDataset) else np.asarray(data)
    if states.size == 0:
        raise ValueError("empty dataset")
    psi_x = evaluate_batch(map_x, states).T      # (N, d_psi_x)
    psi_u = evaluate_batch(map_u, states).T      # (N, d_psi_u)
    n, d_x_feat = psi_x.shape
    d_u_feat = psi_u.shape[1]
    # row-major kron per snapshot: block i of a row is psi_x[i] * psi_u
    target = (psi_x[:, :, None] * psi_u[:, None, :]).reshape(n, -1)
    hbar_t, _, rank, sv = scipy.linalg.lstsq(psi_x, target,
                                             lapack_driver="gelsd")
    hbar = hbar_t.T                               # (d_psi_x * d_psi_u, d_psi_x)
    err = target - psi_x @ hbar_t                 # (N, d_psi_x * d_psi_u)
    block_err = err.reshape(n, d_x_feat, d_u_feat)
    residuals = np.sqrt(np.mean(np.sum(block_err ** 2, axis=2), axis=0))
    info = {"rank": int(rank), "n_snapshots": int(n),
            "cond": float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf,
            "flags": []}
    if rank < d_x_feat:
        info["flags"].append("rank-deficient psi_x regressor")
    return hbar, residuals, info


def default_eps_h(data, map_x: ObservableMap, map_u: ObservableMap) -> float:
    """1e-6 times the RMS magnitude of psi_x kron psi_u over the data."""
    states = data.x if isinstance(data, SnapshotDataset) else np.asarray(data)
    psi_x = evaluate_batch(map_x, states).T
    psi_u = evaluate_batch(map_u, states).T
    kron_sq = np.sum(psi_x ** 2, axis=1) * np.sum(psi_u ** 2, axis=1)
    return 1e-6 * float(np.sqrt(np.mean(kron_sq)))


def threshold_mask(hbar: np.ndarray, residuals: np.ndarray, eps_h: float,
                   d_psi_u: int) -> FactorizationPair:
    """Retain blocks with residual <= eps_h; build (s, S, H) from them.

    Raises FactorizationError when nothing is retained, since the
    closed-loop factorization would lose its input term entirely.
    """
    if eps_h <= 0:
        raise ValueError("eps_h must be positive")
    residuals = np.asarray(residuals, dtype=float)
    d_psi_x = residuals.shape[0]
    mask = (residuals <= eps_h).astype(int)
    kept = np.nonzero(mask)[0]
    if kept.size == 0:
        raise FactorizationError(
            f"no block residual below eps_h={eps_h:g} "
            f"(smallest residual {residuals.min():g})"
        )
    S = np.zeros((kept.size, d_psi_x))
    for r, i in enumerate(kept):
        S[r, i] = 1.0
    blocks = [hbar[i * d_psi_u : (i + 1) * d_psi_u] for i in kept]
    H = np.vstack(blocks)
    return FactorizationPair(S=S, H=H, mask=mask, residuals=residuals,
                             eps_h=float(eps_h))


def fit_pair(data, map_x: ObservableMap, map_u: ObservableMap,
             eps_h: float = None) -> FactorizationPair:
    """Full blockwise identification: fit Hbar, threshold, assemble (S, H)."""
    hbar, residuals, info = fit_candidate_hbar(data, map_x, map_u)
    eps = default_eps_h(data, map_x, map_u) if eps_h is None else float(eps_h)
    pair = threshold_mask(hbar, residuals, eps, map_u.dim)
    pair.diagnostics = {**info, "eps_h_auto": eps_h is None}
    return pair


def augmented_hbar(pair: FactorizationPair) -> np.ndarray:
    """Rebuild Hbar with zero blocks where the mask rejected an index."""
    d_psi_u = pair.d_psi_u
    d_psi_x = pair.mask.shape[0]
    out = np.zeros((d_psi_x * d_psi_u, d_psi_x))
    row = 0
    for i in np.nonzero(pair.mask)[0]:
        out[i * d_psi_u : (i + 1) * d_psi_u] = pair.H[row : row + d_psi_u]
        row += d_psi_u
    return out


def verify_assumption1(pair: FactorizationPair, map_x: ObservableMap,
                       map_u: ObservableMap, test_states) -> float:
    """Max over test states of ||(S psi_x) kron psi_u - H psi_x||_inf."""
    psi_x = evaluate_batch(map_x, test_states)    # (d_psi_x, N)
    psi_u = evaluate_batch(map_u, test_states)
    sel = pair.S @ psi_x                           # (d_S, N)
    lhs = (sel[:, None, :] * psi_u[None, :, :]).reshape(-1, psi_x.shape[1])
    rhs = pair.H @ psi_x
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


@dataclass
class ClosedLoopOperator:
    """Ktilde together with the constituents it was assembled from."""

    Ktilde: np.ndarray
    K_xx: np.ndarray
    K_xu: np.ndarray
    K_u: np.ndarray
    H: np.ndarray


def assemble_ktilde(model: BilinearKoopmanModel, K_u: np.ndarray,
                    H: np.ndarray) -> ClosedLoopOperator:
    """Ktilde = K_xx + K_xu (I_{d_S} kron K_u) H."""
    K_u = np.atleast_2d(np.asarray(K_u, dtype=float))
    H = np.asarray(H, dtype=float)
    d_S = model.S.shape[0]
    d_u, d_psi_u = K_u.shape
    if model.K_xu.shape[1] != d_S * d_u:
        raise ValueError(
            f"K_xu has {model.K_xu.shape[1]} columns, expected {d_S * d_u}"
        )
    if H.shape != (d_S * d_psi_u, model.lifted_dim):
        raise ValueError(
            f"H has shape {H.shape}, expected {(d_S * d_psi_u, model.lifted_dim)}"
        )
    ktilde = model.K_xx + model.K_xu @ np.kron(np.eye(d_S), K_u) @ H
    return ClosedLoopOperator(Ktilde=ktilde, K_xx=model.K_xx,
                              K_xu=model.K_xu, K_u=K_u, H=H)


def pair_to_json(pair: FactorizationPair) -> dict:
    return {
        "kind": "koopctl/pair",
        "S": matrix_to_json(pair.S),
        "H": matrix_to_json(pair.H),
        "mask": [int(v) for v in pair.mask],
        "residuals": [float(v) for v in pair.residuals],
        "eps_h": pair.eps_h,
        "diagnostics": pair.diagnostics,
    }


def pair_from_json(d: dict) -> FactorizationPair:
    return FactorizationPair(
        S=matrix_from_json(d["S"]), H=matrix_from_json(d["H"]),
        mask=np.asarray(d["mask"], dtype=int),
        residuals=np.asarray(d["residuals"], dtype=float),
        eps_h=float(d["eps_h"]), diagnostics=d.get("diagnostics", {}),
    )
