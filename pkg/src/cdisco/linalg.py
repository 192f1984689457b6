"""Deterministic dense linear algebra without an external solver.

The thin SVD is computed from a cyclic-Jacobi eigendecomposition of the
d x d Gram matrix (d = channel count, typically far below the sample
count), which is unconditionally stable and gives bit-reproducible
results for identical inputs. Right singular vectors are recovered by
projection; directions with vanishing singular value are completed by
Gram-Schmidt and treated as null directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError
from .tensor import DenseTensor, percentile

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
NULL_SIGMA_FACTOR = 1e-10


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``phi = u @ diag(sigma) @ vt`` with ``r = min(d, N)``."""

    u: DenseTensor        # [d, r], column-orthonormal
    sigma: tuple[float, ...]  # length r, non-negative, non-increasing
    vt: DenseTensor       # [r, N], row-orthonormal

    @property
    def rank(self) -> int:
        return len(self.sigma)


def _jacobi_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi sweeps on a symmetric float64 matrix.

    Returns eigenvalues (descending) and the orthonormal eigenvector
    matrix with eigenvectors in columns. Raises NumericalError if the
    off-diagonal norm has not dropped below ``JACOBI_TOL * ||A||_F``
    after ``JACOBI_MAX_SWEEPS`` sweeps.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    d = a.shape[0]
    v = np.eye(d)
    if d == 1:
        return np.diag(a).copy(), v
    fro = float(np.linalg.norm(a))
    if fro == 0.0:
        return np.zeros(d), v
    # Rotations with |a_pq| below this bound cannot keep the off-diagonal
    # norm above the convergence threshold, so they are skipped; a sweep
    # that skips every pair certifies convergence even when the absolute
    # threshold sits below the float64 rounding floor.
    negligible = JACOBI_TOL * fro / d
    converged = False
    for _ in range(JACOBI_MAX_SWEEPS):
        off = float(np.sqrt(max(0.0, np.sum(a * a) - np.sum(np.diag(a) ** 2))))
        if off < JACOBI_TOL * fro:
            converged = True
            break
        rotated = False
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= negligible:
                    continue
                rotated = True
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 1.0 / (2.0 * tau)
                else:
                    t = (1.0 if tau >= 0 else -1.0) / (
                        abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot = np.array(((c, -s), (s, c)))
                rows = rot @ a[(p, q), :]
                rows[0, p] = app - t * apq
                rows[1, q] = aqq + t * apq
                rows[0, q] = 0.0
                rows[1, p] = 0.0
                a[(p, q), :] = rows
                a[:, (p, q)] = rows.T
                v[:, (p, q)] = v[:, (p, q)] @ rot.T
        if not rotated:
            converged = True
            break
    if not converged:
        off = float(np.sqrt(max(0.0, np.sum(a * a) - np.sum(np.diag(a) ** 2))))
        raise NumericalError(
            f"Jacobi sweeps did not converge after {JACOBI_MAX_SWEEPS} sweeps; "
            f"off-diagonal residual {off:.3e} (threshold {JACOBI_TOL * fro:.3e})")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _fix_column_signs(u: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive (ties: lowest index)."""
    for j in range(u.shape[1]):
        col = u[:, j]
        k = int(np.argmax(np.abs(col)))
        if col[k] < 0:
            u[:, j] = -col
    return u


def symmetric_eigen(a: DenseTensor) -> tuple[list[float], DenseTensor]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    if a.rank != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    mat = a.array.astype(np.float64)
    scale = max(1.0, float(np.max(np.abs(mat))))
    if float(np.max(np.abs(mat - mat.T))) > 1e-6 * scale:
        raise ValidationError("matrix is not symmetric within 1e-6")
    w, v = _jacobi_eigh(0.5 * (mat + mat.T))
    v = _fix_column_signs(v)
    return [float(x) for x in w], DenseTensor.from_array(v)


def svd(phi: DenseTensor, center: bool = False) -> SvdResult:
    """Thin SVD of a [d, N] matrix via the Gram matrix ``phi @ phi.T``.

    Sign convention: in each column of U the largest-magnitude entry is
    positive. With ``center=True`` the row means are subtracted first
    (off by default; the decomposition is applied to raw activations).
    """
    if phi.rank != 2:
        raise ShapeError(f"expected a [d, N] matrix, got shape {phi.shape}")
    mat = phi.array.astype(np.float64)
    if center:
        mat = mat - mat.mean(axis=1, keepdims=True)
    d, n = mat.shape
    r = min(d, n)
    gram = mat @ mat.T
    w, vecs = _jacobi_eigh(gram)
    w = np.clip(w, 0.0, None)
    sigma = np.sqrt(w[:r])
    u = _fix_column_signs(vecs[:, :r].copy())
    cutoff = NULL_SIGMA_FACTOR * (float(sigma[0]) if r else 0.0)
    vt = np.zeros((r, n))
    null_rows = []
    for j in range(r):
        if sigma[j] > cutoff:
            vt[j, :] = (u[:, j] @ mat) / sigma[j]
        else:
            sigma[j] = 0.0
            null_rows.append(j)
    # Null directions: complete the row basis deterministically from
    # canonical candidates.
    for j in null_rows:
        for axis in range(n):
            cand = np.zeros(n)
            cand[axis] = 1.0
            for i in range(r):
                if i == j:
                    continue
                if i in null_rows and i > j:
                    continue
                cand -= (vt[i] @ cand) * vt[i]
            norm = float(np.linalg.norm(cand))
            if norm > 1e-6:
                vt[j, :] = cand / norm
                break
        else:
            raise NumericalError("failed to complete an orthonormal V basis")
    return SvdResult(
        u=DenseTensor.from_array(u),
        sigma=tuple(float(s) for s in sigma),
        vt=DenseTensor.from_array(vt),
    )


def cosine_similarity(a, b) -> float:
    va = np.asarray(a.array if isinstance(a, DenseTensor) else a,
                    dtype=np.float64).reshape(-1)
    vb = np.asarray(b.array if isinstance(b, DenseTensor) else b,
                    dtype=np.float64).reshape(-1)
    if va.shape != vb.shape:
        raise ShapeError(f"length mismatch: {va.size} vs {vb.size}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity of a zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def iqr_bounds(values, multiplier: float = 1.5) -> tuple[float, float]:
    """Tukey fences from nearest-rank quartiles: Q1 - m*IQR, Q3 + m*IQR."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size < 4:
        raise ValidationError(f"need at least 4 values, got {arr.size}")
    q1 = percentile(arr, 0.25)
    q3 = percentile(arr, 0.75)
    iqr = q3 - q1
    return q1 - multiplier * iqr, q3 + multiplier * iqr
