"""Shared test utilities: random rotations and finite-difference Jacobians."""

import numpy as np

from imslam.geometry import quat_normalize


def random_quat(rng):
    return quat_normalize(rng.standard_normal(4))


def random_rotvec(rng, max_angle=1.0):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def numeric_jacobian(fun, x, eps=1e-6):
    """Central differences of ``fun`` over a flat vector ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        h = eps * max(1.0, abs(x[k]))
        d = np.zeros_like(x)
        d[k] = h
        J[:, k] = (np.asarray(fun(x + d)).ravel() - np.asarray(fun(x - d)).ravel()) / (2 * h)
    return J


def model_fd_jacobian(state, model, eps=1e-6):
    """Finite-difference Jacobian of ``model.predict`` over the tangent
    dimensions of ``model.blocks``, perturbing through :meth:`boxplus`.

    Rotation-valued predictions are not supported; models whose residual is
    on a manifold should be checked through :func:`residual_fd_jacobian`.
    """
    idx = state.index(model.blocks)

    def h(d):
        dx = np.zeros(state.dim)
        dx[idx] = d
        return model.predict(state.boxplus(dx))

    return numeric_jacobian(h, np.zeros(len(idx)), eps)


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-12)
