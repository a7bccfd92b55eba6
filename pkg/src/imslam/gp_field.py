"""Reduced-rank Gaussian-process model of the global magnetic field.

The magnetic scalar potential is a GP with a linear plus squared-exponential
kernel. The SE part is expanded in Laplace eigenfunctions of a cuboid with
Dirichlet boundary conditions, which turns the field into a linear model::

    phi(r) ≈ Psi(r) @ eta,      M(r) = grad(Psi)(r) @ eta,      eta ~ N(0, Lambda)

Positions and fields are in the navigation frame. The cuboid may be offset
from the origin by ``center``; all eigenfunctions are evaluated on
``r - center``.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class OutOfDomainWarning(UserWarning):
    """A point lies outside the cuboid, where the basis is not meaningful."""


class NonPositiveHyperparameter(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GpDomain:
    half_lengths: np.ndarray
    modes: np.ndarray
    sigma_lin: float = 50.0
    sigma_se: float = 3.5
    l_se: float = 0.7
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        L = np.asarray(self.half_lengths, dtype=float).reshape(3)
        modes = np.asarray(self.modes, dtype=np.int64).reshape(-1, 3)
        if np.any(L <= 0):
            raise ValueError("half-lengths must be positive")
        if modes.size and modes.min() < 1:
            raise ValueError("mode indices must be >= 1")
        if len({tuple(n) for n in modes}) != len(modes):
            raise ValueError("mode triplets must be unique")
        object.__setattr__(self, "half_lengths", L)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        freqs = np.pi * modes / (2.0 * L)
        object.__setattr__(self, "_freqs", freqs)
        object.__setattr__(self, "_lam_sq", np.sum(freqs ** 2, axis=1))
        object.__setattr__(self, "_norm", float(np.prod(1.0 / np.sqrt(L))))
        if np.any(np.diff(self._lam_sq) < -1e-12):
            raise ValueError("modes must be sorted by ascending eigenvalue")

    @classmethod
    def build(cls, half_lengths, m, sigma_lin=50.0, sigma_se=3.5, l_se=0.7,
              center=(0.0, 0.0, 0.0), max_index=None):
        """Domain keeping the ``m`` smoothest modes of the cuboid.

        If ``max_index`` (per-axis cap) is not given, caps are grown until no
        excluded triplet could beat the m-th kept eigenvalue.
        """
        L = np.asarray(half_lengths, dtype=float).reshape(3)
        modes = select_modes(L, m, max_index)
        return cls(L, modes, sigma_lin, sigma_se, l_se, np.asarray(center, dtype=float))

    @classmethod
    def around(cls, points, m, sigma_lin=50.0, sigma_se=3.5, l_se=0.7,
               margin_frac=0.2, margin_lengths=2.0):
        """Cuboid enclosing ``points`` with a margin of ``margin_frac`` of the
        half-extent plus ``margin_lengths * l_se`` on each side."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * (1.0 + margin_frac) + margin_lengths * l_se
        return cls.build(half, m, sigma_lin, sigma_se, l_se, center)

    @property
    def m(self):
        return len(self.modes)

    @property
    def dim(self):
        return 3 + self.m

    @property
    def eigenvalues_sq(self):
        return self._lam_sq

    def contains(self, r):
        d = np.abs(np.asarray(r, dtype=float).reshape(-1, 3) - self.center)
        return np.all(d <= self.half_lengths, axis=1)

    def to_dict(self):
        return {
            "half_lengths": self.half_lengths.tolist(),
            "center": self.center.tolist(),
            "sigma_lin": self.sigma_lin,
            "sigma_se": self.sigma_se,
            "l_se": self.l_se,
            "m": self.m,
        }


def select_modes(half_lengths, m, max_index=None):
    L = np.asarray(half_lengths, dtype=float)
    if m == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if max_index is not None:
        caps = np.broadcast_to(np.asarray(max_index, dtype=int), (3,)).copy()
        modes, lam = _candidates(L, caps)
        if len(modes) < m:
            raise ValueError("per-axis caps admit fewer than m modes")
        return modes[:m]
    caps = np.maximum(1, np.ceil(np.cbrt(m) * L / np.cbrt(np.prod(L)))).astype(int)
    while True:
        modes, lam = _candidates(L, caps)
        if len(modes) >= m:
            mth = lam[m - 1]
            nxt = (np.pi * (caps + 1) / (2.0 * L)) ** 2
            short = nxt <= mth
            if not short.any():
                return modes[:m]
            caps[short] += 1
        else:
            caps += 1


def _candidates(L, caps):
    grids = np.meshgrid(*(np.arange(1, c + 1) for c in caps), indexing="ij")
    modes = np.stack([g.ravel() for g in grids], axis=1)
    lam = np.sum((np.pi * modes / (2.0 * L)) ** 2, axis=1)
    # ties broken lexicographically on (nx, ny, nz)
    key = np.round(lam, 9)
    order = np.lexsort((modes[:, 2], modes[:, 1], modes[:, 0], key))
    return modes[order], lam[order]


def _local(domain, r, warn=True):
    X = np.asarray(r, dtype=float).reshape(-1, 3) - domain.center
    if warn and np.any(np.abs(X) > domain.half_lengths):
        warnings.warn("field evaluated outside the GP domain", OutOfDomainWarning, stacklevel=3)
    return X


def _trig(domain, X):
    """sin and cos of every mode's per-axis argument, each of shape (n, m, 3).

    Per-axis values only depend on the axis index, so they are computed for
    each distinct index and gathered.
    """
    n, m = X.shape[0], domain.m
    s = np.empty((n, m, 3))
    c = np.empty((n, m, 3))
    for d in range(3):
        idx = domain.modes[:, d]
        top = int(idx.max()) if m else 0
        base = (np.pi / (2.0 * domain.half_lengths[d])) * (X[:, d] + domain.half_lengths[d])
        arg = base[:, None] * np.arange(1, top + 1)[None, :]
        s[:, :, d] = np.sin(arg)[:, idx - 1]
        c[:, :, d] = np.cos(arg)[:, idx - 1]
    return s, c


def eigenfunction(domain, j, r):
    """psi_j(r) for a single mode index ``j`` (0-based into the sorted list)."""
    X = _local(domain, r)[0]
    n = domain.modes[j]
    L = domain.half_lengths
    val = 1.0
    for d in range(3):
        val *= math.sin(math.pi * n[d] * (X[d] + L[d]) / (2.0 * L[d])) / math.sqrt(L[d])
    return val


def eigenfunctions(domain, points, warn=True):
    """psi_j at many points, shape (n, m)."""
    X = _local(domain, points, warn)
    s, _ = _trig(domain, X)
    return domain._norm * s[:, :, 0] * s[:, :, 1] * s[:, :, 2]


def eigenvalue_sq(domain, j):
    n = domain.modes[j]
    return float(np.sum((np.pi * n / (2.0 * domain.half_lengths)) ** 2))


def se_spectral_density(domain, lam_sq):
    """3-D squared-exponential spectral density at squared frequency ``lam_sq``."""
    l2 = domain.l_se ** 2
    return domain.sigma_se ** 2 * (2.0 * np.pi * l2) ** 1.5 * np.exp(-0.5 * np.asarray(lam_sq) * l2)


def prior_covariance(domain):
    """Diagonal of Lambda: three linear-kernel variances then S_SE(lambda_j)."""
    if domain.sigma_lin <= 0 or domain.sigma_se <= 0 or domain.l_se <= 0:
        raise NonPositiveHyperparameter("GP hyperparameters must be positive")
    lin = np.full(3, domain.sigma_lin ** 2)
    return np.concatenate([lin, se_spectral_density(domain, domain.eigenvalues_sq)])


def potential_regressor(domain, r):
    """Row Psi(r) = [r^T, psi_1(r), ..., psi_m(r)] (r relative to the domain center)."""
    X = _local(domain, r)
    s, _ = _trig(domain, X)
    psi = domain._norm * s[0, :, 0] * s[0, :, 1] * s[0, :, 2]
    return np.concatenate([X[0], psi])


def field_regressors(domain, points, warn=True):
    """grad Psi at many points, shape (n, 3, 3+m)."""
    X = _local(domain, points, warn)
    n = X.shape[0]
    s, c = _trig(domain, X)
    k = domain._freqs
    out = np.empty((n, 3, domain.dim))
    out[:, :, :3] = np.eye(3)
    a = domain._norm
    out[:, 0, 3:] = a * k[None, :, 0] * c[:, :, 0] * s[:, :, 1] * s[:, :, 2]
    out[:, 1, 3:] = a * k[None, :, 1] * s[:, :, 0] * c[:, :, 1] * s[:, :, 2]
    out[:, 2, 3:] = a * k[None, :, 2] * s[:, :, 0] * s[:, :, 1] * c[:, :, 2]
    return out


def field_regressor(domain, r):
    """3 x (3+m) matrix grad Psi(r)."""
    return field_regressors(domain, r)[0]


def evaluate_global_field(domain, eta, r):
    """Field at one point (shape (3,)) or many points (shape (n, 3))."""
    pts = np.asarray(r, dtype=float)
    X = _local(domain, pts)
    eta = np.asarray(eta, dtype=float)
    out = eta[:3] + _basis_field(domain, eta[3:], X)
    return out[0] if pts.ndim == 1 else out


def _basis_field(domain, w, X):
    """Gradient of sum_j w_j psi_j at many points via per-axis factors.

    Scatters the weights into a dense (n_x, n_y, n_z) tensor so the sum
    factorizes over axes; much cheaper than forming the regressors.
    """
    if domain.m == 0:
        return np.zeros((len(X), 3))
    tops = domain.modes.max(axis=0)
    W = np.zeros(tuple(tops))
    np.add.at(W, tuple((domain.modes - 1).T), w * domain._norm)
    S, C = [], []
    for d in range(3):
        k = np.pi / (2.0 * domain.half_lengths[d]) * np.arange(1, tops[d] + 1)
        arg = (X[:, d] + domain.half_lengths[d])[:, None] * k[None, :]
        S.append(np.sin(arg))
        C.append(np.cos(arg) * k[None, :])
    a, b, c = W.shape
    Wc = W.reshape(a * b, c).T
    out = np.empty((len(X), 3))
    for d, (fa, fb, fc) in enumerate(((C[0], S[1], S[2]), (S[0], C[1], S[2]), (S[0], S[1], C[2]))):
        t = (fc @ Wc).reshape(-1, a, b)
        t = np.einsum("nab,nb->na", t, fb)
        out[:, d] = np.einsum("na,na->n", t, fa)
    return out


def field_hessians(domain, eta, points, warn=True):
    """Jacobian of the field (Hessian of the potential) at many points, (n, 3, 3)."""
    X = _local(domain, points, warn)
    s, c = _trig(domain, X)
    k = domain._freqs
    w = domain._norm * np.asarray(eta, dtype=float)[3:]
    n = X.shape[0]
    H = np.empty((n, 3, 3))
    psi_w = s[:, :, 0] * s[:, :, 1] * s[:, :, 2] * w
    H[:, 0, 0] = -(psi_w * k[None, :, 0] ** 2).sum(axis=1)
    H[:, 1, 1] = -(psi_w * k[None, :, 1] ** 2).sum(axis=1)
    H[:, 2, 2] = -(psi_w * k[None, :, 2] ** 2).sum(axis=1)
    kk = k[None, :, :]
    H[:, 0, 1] = H[:, 1, 0] = (w * kk[..., 0] * kk[..., 1] * c[:, :, 0] * c[:, :, 1] * s[:, :, 2]).sum(axis=1)
    H[:, 0, 2] = H[:, 2, 0] = (w * kk[..., 0] * kk[..., 2] * c[:, :, 0] * s[:, :, 1] * c[:, :, 2]).sum(axis=1)
    H[:, 1, 2] = H[:, 2, 1] = (w * kk[..., 1] * kk[..., 2] * s[:, :, 0] * c[:, :, 1] * c[:, :, 2]).sum(axis=1)
    return H


def field_divergence(domain, eta, points):
    """Analytic divergence of the reduced-rank field: -sum_j lambda_j^2 psi_j eta_j.

    Nonzero in general; each basis function is a Laplace eigenfunction, not a
    harmonic one.
    """
    psi = eigenfunctions(domain, points)
    return -(psi * domain.eigenvalues_sq[None, :]) @ np.asarray(eta, dtype=float)[3:]


def batch_posterior(domain, points, fields, noise_var):
    """Posterior mean and covariance of eta from field samples (one shot)."""
    H = field_regressors(domain, points).reshape(-1, domain.dim)
    y = np.asarray(fields, dtype=float).reshape(-1)
    lam = prior_covariance(domain)
    info = H.T @ H / noise_var + np.diag(1.0 / lam)
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return cov @ (H.T @ y) / noise_var, cov


class InformationMap:
    """Sequential information-form conditioning of eta on field samples."""

    def __init__(self, domain):
        self.domain = domain
        self.info = np.diag(1.0 / prior_covariance(domain))
        self.info_vec = np.zeros(domain.dim)
        self.count = 0

    def add(self, points, fields, noise_var):
        H = field_regressors(self.domain, points).reshape(-1, self.domain.dim)
        y = np.asarray(fields, dtype=float).reshape(-1)
        self.info += H.T @ H / noise_var
        self.info_vec += H.T @ y / noise_var
        self.count += len(y) // 3

    def mean(self):
        return np.linalg.solve(self.info, self.info_vec)

    def covariance(self):
        cov = np.linalg.inv(self.info)
        return 0.5 * (cov + cov.T)


def export_map(path, domain, eta, cov_diag, grid_spacing=None, grid_z=None):
    """Write the map as ``<path>.npz`` plus an optional ``<path>_grid.csv`` raster.

    The npz holds ``half_lengths``, ``center``, ``modes``, ``eta``,
    ``cov_diag`` and a JSON ``meta`` string with the hyperparameters. The grid
    CSV has columns ``x,y,z,mx,my,mz,norm`` on a horizontal slice at height
    ``grid_z`` (defaults to the domain center).
    """
    path = str(path)
    meta = json.dumps(domain.to_dict(), sort_keys=True)
    np.savez(path + ".npz", half_lengths=domain.half_lengths, center=domain.center,
             modes=domain.modes, eta=np.asarray(eta, dtype=float),
             cov_diag=np.asarray(cov_diag, dtype=float), meta=np.array(meta))
    if grid_spacing is None:
        return
    z = domain.center[2] if grid_z is None else grid_z
    lo = domain.center - domain.half_lengths
    hi = domain.center + domain.half_lengths
    xs = np.arange(lo[0], hi[0] + 1e-9, grid_spacing)
    ys = np.arange(lo[1], hi[1] + 1e-9, grid_spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfDomainWarning)
        B = evaluate_global_field(domain, eta, pts)
    table = np.column_stack([pts, B, np.linalg.norm(B, axis=1)])
    np.savetxt(path + "_grid.csv", table, delimiter=",", header="x,y,z,mx,my,mz,norm",
               comments="", fmt="%.9g")


def load_map(path):
    """Read a map written by :func:`export_map`; returns (domain, eta, cov_diag)."""
    with np.load(str(path)) as z:
        meta = json.loads(str(z["meta"]))
        domain = GpDomain(z["half_lengths"], z["modes"], meta["sigma_lin"], meta["sigma_se"],
                          meta["l_se"], z["center"])
        return domain, z["eta"].copy(), z["cov_diag"].copy()
