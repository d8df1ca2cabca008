"""Small dense-matrix utilities used by every other module.

Everything in this project is desk scale (lifted dimensions of at most a
few tens), so all storage is plain dense ``numpy`` arrays.  Symmetric
eigenvalue queries use LAPACK's symmetric drivers only, never the general
nonsymmetric path, so spectra are real and deterministic.
"""

from __future__ import annotations

import numpy as np

# Absolute floor on the smallest eigenvalue accepted as "positive
# semidefinite"; matched to double-precision conditioning of the largest
# (28 x 28) block matrices handled here.
PSD_TOL = 1e-9


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-d float array (1-d input stays 1-d)."""
    m = np.asarray(a, dtype=float)
    if m.ndim > 2:
        raise ValueError(f"{name} must be at most 2-d, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def kron(a, b) -> np.ndarray:
    """Kronecker product; block (i, j) of the result equals a[i, j] * b."""
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    av = np.asarray(a, dtype=float)
    bv = np.asarray(b, dtype=float)
    if av.shape != bv.shape:
        raise ValueError(f"length mismatch: {av.shape} vs {bv.shape}")
    return av * bv


def symmetrize(m) -> np.ndarray:
    """Return (M + M^T) / 2 after checking M is square and nearly symmetric."""
    a = as_matrix(m, "symmetric matrix")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def min_eigenvalue(m) -> float:
    """Smallest eigenvalue of a symmetric matrix (symmetric solver only)."""
    a = symmetrize(m)
    if a.size == 0:
        raise ValueError("empty matrix has no eigenvalues")
    return float(np.linalg.eigvalsh(a)[0])


def schur_psd_check(p, b, c, tol: float = PSD_TOL) -> bool:
    """True iff the block matrix [[P, B], [B^T, C]] is PSD within ``tol``.

    Checked directly through the smallest eigenvalue of the assembled
    block matrix, which stays valid when P is singular (where the
    classical Schur-complement reduction needs an invertible block).
    """
    pm = symmetrize(p)
    cm = symmetrize(c)
    bm = as_matrix(b, "b")
    bm = bm.reshape(pm.shape[0], cm.shape[0]) if bm.ndim == 1 else bm
    if bm.shape != (pm.shape[0], cm.shape[0]):
        raise ValueError(
            f"off-diagonal block {bm.shape} does not conform with "
            f"{pm.shape} and {cm.shape}"
        )
    block = np.block([[pm, bm], [bm.T, cm]])
    return min_eigenvalue(block) >= -tol


def matrix_to_json(m) -> dict:
    """Serialize to the {rows, cols, data} wire format (row-major data)."""
    a = as_matrix(m)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]),
            "data": [float(v) for v in a.ravel()]}


def matrix_from_json(d: dict) -> np.ndarray:
    rows, cols = int(d["rows"]), int(d["cols"])
    data = np.asarray(d["data"], dtype=float)
    if data.size != rows * cols:
        raise ValueError(f"data length {data.size} != {rows}x{cols}")
    return data.reshape(rows, cols)
