"""First-degree polynomial magnetic field model over the array footprint.

The scalar potential is the degree-2 harmonic polynomial::

    phi(r) = t1 x + t2 y + t3 z + t4 yz + t5 (y^2 - z^2) + t6 xz + t7 xy + t8 (x^2 - z^2)

so the field ``M(r) = regressor(r) @ theta`` is affine in ``r``, curl-free and
divergence-free. Coefficients and positions are expressed in the body frame.
Units: theta[0:3] in uT, theta[3:8] in uT/m.
"""

import numpy as np

from .geometry import rotation_matrix

DEGREE = 1
N_COEFFS = 8


def coeff_count(degree):
    """Number of field coefficients of an n-th degree model, ``n^2 + 4n + 3``."""
    return degree * degree + 4 * degree + 3


def regressor(r):
    """3x8 regressor matrix Phi(r); a stack of points ``(..., 3)`` gives ``(..., 3, 8)``."""
    r = np.asarray(r, dtype=float)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    o, n = np.ones_like(x), np.zeros_like(x)
    return np.stack([
        np.stack([o, n, n, n, n, z, y, 2.0 * x], axis=-1),
        np.stack([n, o, n, z, 2.0 * y, n, x, n], axis=-1),
        np.stack([n, n, o, y, -2.0 * z, x, n, -2.0 * z], axis=-1),
    ], axis=-2)


def stacked_regressor(positions):
    """Regressors of all sensors stacked into a (3N, 8) matrix."""
    return regressor(np.asarray(positions, dtype=float).reshape(-1, 3)).reshape(-1, N_COEFFS)


def evaluate_field(theta, r):
    return regressor(r) @ theta


def field_gradient(theta):
    """Symmetric, traceless 3x3 Jacobian of the local field; stacks ``(..., 8)`` map to ``(..., 3, 3)``."""
    if isinstance(theta, np.ndarray) and theta.ndim > 1:
        t = np.moveaxis(theta, -1, 0)
        return np.stack([
            np.stack([2.0 * t[7], t[6], t[5]], axis=-1),
            np.stack([t[6], 2.0 * t[4], t[3]], axis=-1),
            np.stack([t[5], t[3], -2.0 * (t[7] + t[4])], axis=-1),
        ], axis=-2)
    t = theta.tolist() if isinstance(theta, np.ndarray) else theta
    return np.array([
        [2.0 * t[7], t[6], t[5]],
        [t[6], 2.0 * t[4], t[3]],
        [t[5], t[3], -2.0 * (t[7] + t[4])],
    ])


def pack_gradient(G):
    """Inverse of the gradient part of :func:`field_gradient`.

    Reads the five independent entries; ``G`` is assumed symmetric and
    traceless (conjugating such a matrix by a rotation keeps it so).
    """
    return np.array([G[1, 2], 0.5 * G[1, 1], G[0, 2], G[0, 1], 0.5 * G[0, 0]])


# d vec(grad(theta)) / d theta[3:8], column i is grad(e_{3+i})
_GRAD_BASIS = np.stack([field_gradient(np.eye(N_COEFFS)[3 + i]) for i in range(5)])


def gradient_basis():
    """The five basis matrices ``grad(e_i)``, shape (5, 3, 3)."""
    return _GRAD_BASIS.copy()


def transport_coeffs(theta, dq, dp_body):
    """Re-express the affine local field in a moved body frame.

    ``dq`` rotates new-body to old-body coordinates and ``dp_body`` is the
    origin displacement expressed in the old body frame. The result satisfies
    ``M'(r') = R^T M(dp_body + R r')`` with ``R = R(dq)``.
    """
    R = rotation_matrix(dq)
    return transport_with_matrix(theta, R, dp_body)


def transport_with_matrix(theta, R, dp_body):
    G = field_gradient(theta)
    out = np.empty(N_COEFFS)
    out[0:3] = R.T @ (theta[0:3] + G @ dp_body)
    out[3:8] = pack_gradient(R.T @ G @ R)
    return out


def fit_coeffs(positions, fields, weights=None):
    """Least-squares theta from field samples at body-frame positions.

    Returns ``(theta, normal_inverse)`` where ``normal_inverse`` is
    ``(Phi^T W Phi)^-1``; multiply by the noise variance to get the covariance.
    """
    Phi = stacked_regressor(positions)
    y = np.asarray(fields, dtype=float).reshape(-1)
    if weights is not None:
        w = np.repeat(np.asarray(weights, dtype=float), 3)
        A = Phi.T @ (Phi * w[:, None])
        b = Phi.T @ (w * y)
    else:
        A = Phi.T @ Phi
        b = Phi.T @ y
    info_inv = np.linalg.inv(A)
    return info_inv @ b, info_inv
