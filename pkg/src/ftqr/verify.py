"""Sequential oracle and quality metrics for judging distributed results.

The oracle shares only the scalar reflector kernel with the distributed
paths; no tree, pair-update or ledger code runs here.
"""

from dataclasses import dataclass

import numpy as np

from .kernels import DimensionError, apply_q, as_matrix, householder_qr


@dataclass(frozen=True)
class Metrics:
    backward_error: float
    orthogonality: float
    triangularity: float
    max_diff: float = 0.0


def oracle_qr(A):
    """Dense single-pass factorization; returns the explicit thin Q and R."""
    A = as_matrix(A, "A")
    m, n = A.shape
    if m < n:
        raise DimensionError(f"oracle_qr: need m >= n, got {m}x{n}")
    f = householder_qr(A)
    Q = apply_q(f, np.eye(m, n))
    return Q, f.R


def sign_normalize(R):
    """Scale rows of an upper triangular R so the diagonal is nonnegative.

    Returns (Rpos, signs); rows with a zero diagonal pass through with +1.
    Idempotent.
    """
    R = as_matrix(R, "R")
    n = min(R.shape)
    signs = np.ones(R.shape[0])
    diag = np.diagonal(R)[:n]
    signs[:n] = np.where(diag < 0.0, -1.0, 1.0)
    return signs[:, None] * R, signs


def metrics(A, Q, R):
    """Standard factorization-quality metrics for A ~ Q R."""
    A = as_matrix(A, "A")
    Q = as_matrix(Q, "Q")
    R = as_matrix(R, "R")
    if Q.shape[0] != A.shape[0] or Q.shape[1] != R.shape[0] or R.shape[1] != A.shape[1]:
        raise DimensionError(
            f"metrics: shapes do not conform A={A.shape} Q={Q.shape} R={R.shape}")
    norm_a = np.linalg.norm(A)
    backward = np.linalg.norm(A - Q @ R) / norm_a if norm_a > 0 else 0.0
    orth = np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1]))
    tri = float(np.abs(np.tril(R, -1)).max()) if min(R.shape) > 1 else 0.0
    return Metrics(backward_error=float(backward), orthogonality=float(orth),
                   triangularity=tri)


def compare_runs(R1, R2):
    """Max absolute entry difference after sign-normalizing both triangles."""
    R1 = as_matrix(R1, "R1")
    R2 = as_matrix(R2, "R2")
    if R1.shape != R2.shape:
        raise DimensionError(f"compare_runs: shapes differ {R1.shape} vs {R2.shape}")
    N1, _ = sign_normalize(R1)
    N2, _ = sign_normalize(R2)
    return float(np.abs(N1 - N2).max())
