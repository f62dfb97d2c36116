"""Sequential dense Householder QR kernels and the compact-WY machinery.

Everything here is a pure function on float64 arrays: same input bits give
the same output bits, which the distributed layers rely on for bitwise
reproducibility checks.

Conventions:
  * reflector k maps its pivot column to beta*e1 with sign(beta) opposite
    to the pivot entry (the numerically stable choice), so R diagonals may
    be negative; cross-run comparisons go through sign normalization,
  * tau[k] = 0 when the pivot column is already axis-aligned below the
    diagonal, which makes identity inputs exact,
  * Q = I - Y T Y^T with Y unit lower trapezoidal and T upper triangular,
    so Q^T = I - Y T^T Y^T.
"""

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class InputError(ValueError):
    """Operand values are unusable (non-finite, wrong structure)."""


def as_matrix(a, name="matrix"):
    """Coerce to a C-contiguous float64 2-D array and reject non-finite input."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise InputError(f"{name}: non-finite entries")
    return arr


@dataclass(frozen=True)
class QRFactor:
    """Implicit Householder factorization A = (I - Y T Y^T) [R; 0].

    Y is m x n unit lower trapezoidal, tau holds the n reflector scalars,
    R is n x n upper triangular and T is the n x n compact-WY factor.
    """

    Y: np.ndarray
    tau: np.ndarray
    R: np.ndarray
    T: np.ndarray

    @property
    def rows(self):
        return self.Y.shape[0]

    @property
    def cols(self):
        return self.Y.shape[1]


@dataclass(frozen=True)
class CombineFactor:
    """Implicit factor of the QR of two stacked upper triangles [Ra; Rb].

    The top reflector block of such a stack is exactly the identity, so only
    the lower block Y1 (n x n upper triangular) is kept together with T and
    the combined triangle Rout.
    """

    Y1: np.ndarray
    T: np.ndarray
    Rout: np.ndarray

    @property
    def n(self):
        return self.Y1.shape[0]


def householder_qr(A):
    """Factor an m x n matrix (m >= n) into reflectors, R and the WY factor T."""
    A = as_matrix(A, "A")
    m, n = A.shape
    if n < 1 or m < n:
        raise DimensionError(f"householder_qr: need m >= n >= 1, got {m}x{n}")

    R = A.copy()
    Y = np.zeros((m, n))
    tau = np.zeros(n)
    for k in range(n):
        Y[k, k] = 1.0
        x = R[k:, k]
        if not x[1:].any():
            # Pivot column already axis-aligned below the diagonal: skip.
            continue
        normx = np.sqrt(x @ x)
        beta = -normx if x[0] >= 0.0 else normx
        v = x / (x[0] - beta)
        v[0] = 1.0
        tau[k] = (beta - x[0]) / beta
        w = tau[k] * (v @ R[k:, k:])
        R[k:, k:] -= np.outer(v, w)
        R[k, k] = beta
        R[k + 1:, k] = 0.0
        Y[k + 1:, k] = v[1:]

    Rtri = np.triu(R[:n, :])
    return QRFactor(Y=Y, tau=tau, R=Rtri, T=build_t(Y, tau))


def build_t(Y, tau):
    """Accumulate the upper triangular T with I - Y T Y^T = H_0 H_1 ... H_{n-1}."""
    Y = as_matrix(Y, "Y")
    tau = np.asarray(tau, dtype=np.float64).ravel()
    n = Y.shape[1]
    if tau.shape[0] != n:
        raise DimensionError(
            f"build_t: tau length {tau.shape[0]} != reflector count {n}")

    T = np.zeros((n, n))
    for k in range(n):
        T[k, k] = tau[k]
        if k and tau[k] != 0.0:
            z = Y[:, :k].T @ Y[:, k]
            T[:k, k] = -tau[k] * (T[:k, :k] @ z)
    return T


def apply_qt(f, C):
    """Return Q^T C = C - Y (T^T (Y^T C))."""
    C = as_matrix(C, "C")
    if C.shape[0] != f.Y.shape[0]:
        raise DimensionError(
            f"apply_qt: C has {C.shape[0]} rows, factor expects {f.Y.shape[0]}")
    return C - f.Y @ (f.T.T @ (f.Y.T @ C))


def apply_q(f, C):
    """Return Q C = C - Y (T (Y^T C)); inverse of apply_qt up to roundoff."""
    C = as_matrix(C, "C")
    if C.shape[0] != f.Y.shape[0]:
        raise DimensionError(
            f"apply_q: C has {C.shape[0]} rows, factor expects {f.Y.shape[0]}")
    return C - f.Y @ (f.T @ (f.Y.T @ C))


#: relative magnitude below the diagonal tolerated by combine_qr input checks
TRIANGLE_TOL = 1e-14


def _require_upper_triangular(R, name):
    n = R.shape[0]
    if R.shape[1] != n:
        raise DimensionError(f"{name}: expected square triangle, got {R.shape}")
    if n > 1:
        below = np.abs(np.tril(R, -1)).max()
        scale = np.linalg.norm(R)
        if below > TRIANGLE_TOL * scale:
            raise InputError(f"{name}: not upper triangular "
                             f"(below-diagonal magnitude {below:.3e})")


def combine_qr(Ra, Rb):
    """QR of the stacked 2n x n matrix [Ra; Rb] for upper triangular inputs.

    The dense kernel is reused without exploiting the triangular structure;
    the structural consequence (top reflector block == identity, Y1 upper
    triangular) is asserted and the top block discarded.
    """
    Ra = as_matrix(Ra, "Ra")
    Rb = as_matrix(Rb, "Rb")
    _require_upper_triangular(Ra, "Ra")
    _require_upper_triangular(Rb, "Rb")
    if Ra.shape != Rb.shape:
        raise DimensionError(f"combine_qr: shapes differ {Ra.shape} vs {Rb.shape}")

    n = Ra.shape[0]
    f = householder_qr(np.vstack([Ra, Rb]))
    top = f.Y[:n]
    if np.abs(top - np.eye(n)).max() > TRIANGLE_TOL:
        raise InputError("combine_qr: top reflector block deviates from identity")
    return CombineFactor(Y1=f.Y[n:].copy(), T=f.T, Rout=f.R)


def pair_update(C0p, C1p, cf):
    """Apply the combine factor's Q^T to a stacked pair of trailing blocks.

    W = T^T (C0' + Y1^T C1'), Chat0 = C0' - W, Chat1 = C1' - Y1 W.
    Equivalent to apply_qt of the stacked factor on [C0'; C1'].
    """
    C0p = as_matrix(C0p, "C0p")
    C1p = as_matrix(C1p, "C1p")
    n = cf.n
    if C0p.shape[0] != n or C1p.shape[0] != n or C0p.shape[1] != C1p.shape[1]:
        raise DimensionError(
            f"pair_update: blocks {C0p.shape}/{C1p.shape} do not conform to n={n}")
    W = cf.T.T @ (C0p + cf.Y1.T @ C1p)
    return C0p - W, C1p - cf.Y1 @ W, W
