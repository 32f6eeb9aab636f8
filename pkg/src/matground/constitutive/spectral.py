"""Batched 3x3 SVD and the reverse-mode rule for U diag(f(s)) V^T maps."""

import numpy as np

from ..errors import InversionError

PAIRS = ((0, 1), (0, 2), (1, 2))


def check_det(F, what="deformation gradient"):
    J = np.linalg.det(F)
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        i = int(bad[0])
        raise InversionError(
            f"{what} of particle {i} has det {J[i]:.3e} <= 0 "
            f"({bad.size} inverted in total)", index=i)
    return J


def svd3(F):
    """F = U diag(s) Vt with s sorted descending; s > 0 when det F > 0."""
    return np.linalg.svd(F)


def assemble(U, f, Vt):
    return (U * f[:, None, :]) @ Vt


def spectral_vjp(U, s, Vt, f, J, Xbar, tie_tol=1e-6):
    """Cotangent on F for X = U diag(f(s)) Vt given the cotangent ``Xbar`` on X.

    ``J[n, k, i] = d f_k / d s_i``. The only singular factor is the divided
    difference (f_i - f_j) / (s_i - s_j); at (near) ties it is replaced by its
    limit for permutation-symmetric f, which keeps the rule finite at F = I.
    """
    M = np.swapaxes(U, -1, -2) @ Xbar @ np.swapaxes(Vt, -1, -2)
    G = np.zeros_like(M)
    d = np.einsum("nkk->nk", M)
    G[:, [0, 1, 2], [0, 1, 2]] = np.einsum("nki,nk->ni", J, d)
    for i, j in PAIRS:
        gap = s[:, i] - s[:, j]
        tie = np.abs(gap) <= tie_tol * np.maximum(1.0, np.abs(s[:, i]))
        limit = 0.5 * (J[:, i, i] - J[:, i, j] + J[:, j, j] - J[:, j, i])
        dd = np.where(tie, limit, (f[:, i] - f[:, j]) / np.where(tie, 1.0, gap))
        ss = (f[:, i] + f[:, j]) / (s[:, i] + s[:, j])
        c1 = 0.5 * (dd + ss)
        c2 = 0.5 * (dd - ss)
        G[:, i, j] = c1 * M[:, i, j] + c2 * M[:, j, i]
        G[:, j, i] = c1 * M[:, j, i] + c2 * M[:, i, j]
    return U @ G @ Vt


def polar_rotation(F):
    U, s, Vt = svd3(F)
    return U @ Vt, (U, s, Vt)


def polar_vjp(svd, Rbar):
    U, s, Vt = svd
    ones = np.ones_like(s)
    return spectral_vjp(U, s, Vt, ones, np.zeros(s.shape + (3,)), Rbar)
