"""Error-state EKF engine shared by MAINS, the loosely coupled SLAM back end
and the tightly coupled filter.

A filter declares an ordered list of :class:`Block` s. Vector blocks are
additive; rotation blocks hold a unit quaternion nominal value and a 3-dim
body-frame error (see :mod:`imslam.geometry`). The covariance ``P`` is over
the concatenated tangent dimensions in block order.

Engine functions mutate the state in place and return it, so per-step
filtering does not copy large covariance matrices. Use
:meth:`FilterState.copy` to keep snapshots.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .geometry import error_extract, error_inject


class FilterError(RuntimeError):
    pass


class NonFiniteState(FilterError):
    pass


class UnknownBlock(KeyError):
    pass


@dataclass(frozen=True)
class Block:
    name: str
    dim: int
    rotation: bool = False

    @property
    def nominal_size(self):
        return 4 if self.rotation else self.dim


class FilterState:
    def __init__(self, blocks, nominal, P, t=0.0):
        self.blocks = tuple(blocks)
        self.nominal = {b.name: np.array(nominal[b.name], dtype=float) for b in self.blocks}
        self.P = np.array(P, dtype=float)
        self.t = float(t)
        self._reindex()
        if self.P.shape != (self.dim, self.dim):
            raise ValueError(f"covariance shape {self.P.shape} does not match layout dim {self.dim}")

    def _reindex(self):
        self._slices = {}
        off = 0
        for b in self.blocks:
            self._slices[b.name] = slice(off, off + b.dim)
            off += b.dim
        self.dim = off
        self._by_name = {b.name: b for b in self.blocks}
        self._index_cache = {}
        self._cols_cache = {}
        self._layout = [(b.name, self._slices[b.name], b.rotation) for b in self.blocks]

    def block(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownBlock(name) from None

    def sl(self, name):
        try:
            return self._slices[name]
        except KeyError:
            raise UnknownBlock(name) from None

    def index(self, names):
        if isinstance(names, str):
            names = (names,)
        names = tuple(names)
        idx = self._index_cache.get(names)
        if idx is None:
            idx = np.concatenate([np.arange(self.sl(n).start, self.sl(n).stop) for n in names])
            self._index_cache[names] = idx
        return idx

    def columns(self, names):
        """Like :meth:`index`, but a slice when the blocks are adjacent."""
        key = (names,) if isinstance(names, str) else tuple(names)
        cols = self._cols_cache.get(key)
        if cols is None:
            idx = self.index(key)
            contiguous = np.array_equal(idx, np.arange(idx[0], idx[0] + len(idx)))
            cols = slice(int(idx[0]), int(idx[0]) + len(idx)) if contiguous else idx
            self._cols_cache[key] = cols
        return cols

    def __getitem__(self, name):
        return self.nominal[name]

    def copy(self):
        out = FilterState.__new__(FilterState)
        out.blocks = self.blocks
        out.nominal = {k: v.copy() for k, v in self.nominal.items()}
        out.P = self.P.copy()
        out.t = self.t
        out._reindex()
        return out

    def inject(self, dx):
        """Apply an error-state correction to the nominal state."""
        nominal = self.nominal
        for name, sl, rotation in self._layout:
            if rotation:
                nominal[name] = error_inject(nominal[name], dx[sl])
            else:
                nominal[name] = nominal[name] + dx[sl]

    def boxplus(self, dx):
        out = self.copy()
        out.inject(dx)
        return out

    def boxminus(self, other):
        """Tangent vector ``d`` with ``other.boxplus(d) == self``."""
        dx = np.empty(self.dim)
        for b in self.blocks:
            s = self._slices[b.name]
            if b.rotation:
                dx[s] = error_extract(other.nominal[b.name], self.nominal[b.name])
            else:
                dx[s] = self.nominal[b.name] - other.nominal[b.name]
        return dx

    def marginal(self, names):
        idx = self.index(names)
        return self.P[np.ix_(idx, idx)]

    def snapshot_hash(self):
        h = hashlib.sha1()
        for b in self.blocks:
            h.update(np.ascontiguousarray(self.nominal[b.name]).tobytes())
        return h.hexdigest()[:16]

    def check_finite(self):
        for name, v in self.nominal.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteState(f"non-finite nominal block {name!r} at t={self.t:.3f}")
        if not np.all(np.isfinite(self.P)):
            raise NonFiniteState(f"non-finite covariance at t={self.t:.3f}")


class MeasurementModel:
    """Linearized measurement ``y = h(x) + e``, ``e ~ N(0, R)``.

    Subclasses (or instances built with :class:`FunctionModel`) provide
    ``predict(state)``, ``jacobian(state)`` over the tangent dimensions of
    ``blocks`` (in that order) and the noise covariance ``R``.
    """

    name = "measurement"
    blocks = ()
    R = None

    def predict(self, state):
        raise NotImplementedError

    def jacobian(self, state):
        raise NotImplementedError

    def residual(self, y, y_hat):
        return np.asarray(y, dtype=float) - y_hat

    def noise(self, state):
        return self.R


class FunctionModel(MeasurementModel):
    def __init__(self, name, blocks, predict, jacobian, R, residual=None):
        self.name = name
        self.blocks = tuple(blocks)
        self._predict = predict
        self._jacobian = jacobian
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self._residual = residual

    def predict(self, state):
        return self._predict(state)

    def jacobian(self, state):
        return self._jacobian(state)

    def residual(self, y, y_hat):
        if self._residual is None:
            return super().residual(y, y_hat)
        return self._residual(y, y_hat)


@dataclass
class InnovationRecord:
    t: float
    name: str
    innovation: np.ndarray
    S_diag: np.ndarray
    nis: float
    skipped: bool = False
    reason: str = ""
    state_hash: str = ""

    def to_json(self):
        return json.dumps({
            "t": round(self.t, 9),
            "name": self.name,
            "innovation": [float(v) for v in self.innovation],
            "S_diag": [float(v) for v in self.S_diag],
            "nis": float(self.nis),
            "skipped": self.skipped,
            "reason": self.reason,
            "state_hash": self.state_hash,
        })


class DiagnosticWriter:
    """Line-delimited JSON sink for innovation records."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record):
        self._fh.write(record.to_json() + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def symmetrize(P):
    P += P.T
    P *= 0.5
    return P


def propagate(state, process, u, dt):
    """Advance nominal state and covariance by one step of ``process``.

    ``process.transition(state, u, dt)`` returns ``(nominal_updates, F, G, Q)``
    where ``F`` (n x n) and ``G`` (n x q) act on the tangent dimensions of
    ``process.blocks`` and ``Q`` is a (q,) diagonal or (q, q) matrix. Blocks
    outside ``process.blocks`` are constant and noise free, so only the
    active rows and columns of ``P`` are touched.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state
    updates, F, G, Q = process.transition(state, u, dt)
    idx = state.index(process.blocks)
    n = len(idx)
    P = state.P
    GQG = (G * Q) @ G.T if np.ndim(Q) == 1 else G @ Q @ G.T
    if not np.isfinite(F.sum() + GQG.sum()):
        raise NonFiniteState(f"non-finite process Jacobian at t={state.t:.3f}")
    if idx[0] == 0 and idx[-1] == n - 1:
        P[:n, :n] = symmetrize(F @ P[:n, :n] @ F.T + GQG)
        if n < state.dim:
            cross = F @ P[:n, n:]
            P[:n, n:] = cross
            P[n:, :n] = cross.T
    else:
        rest = np.setdiff1d(np.arange(state.dim), idx)
        P[np.ix_(idx, idx)] = symmetrize(F @ P[np.ix_(idx, idx)] @ F.T + GQG)
        cross = F @ P[np.ix_(idx, rest)]
        P[np.ix_(idx, rest)] = cross
        P[np.ix_(rest, idx)] = cross.T
    for name, value in updates.items():
        if not np.isfinite(value.sum()):
            raise NonFiniteState(f"non-finite nominal block {name!r} at t={state.t + dt:.3f}")
    state.nominal.update(updates)
    state.t += dt
    return state


def update(state, model, y, form="joseph", gate=None, sink=None, cond_max=1e12):
    """Measurement update with error injection and reset.

    Returns an :class:`InnovationRecord`. The update is skipped (and flagged)
    when the innovation covariance is not positive definite or its condition
    number exceeds ``cond_max``, or when ``gate`` is set and the normalized
    innovation squared exceeds it.

    Only rows of ``P`` correlated with the measured blocks can change, so the
    gain is formed over those rows alone.
    """
    y_hat = model.predict(state)
    nu = np.atleast_1d(model.residual(y, y_hat))
    H = np.atleast_2d(model.jacobian(state))
    R = np.atleast_2d(model.noise(state))
    cols = state.columns(model.blocks)
    P = state.P
    Pc = P[:, cols]
    rows = _active_rows(Pc)
    U = Pc[rows] @ H.T
    S = H @ (Pc[cols] @ H.T) + R
    S = 0.5 * (S + S.T)

    record = InnovationRecord(state.t, model.name, nu, np.diag(S).copy(), float("nan"))
    if not np.isfinite(nu.sum() + S.sum()):
        record.skipped = True
        record.reason = "non-finite measurement"
        return _emit(record, state, sink)
    w, V = np.linalg.eigh(S)
    if w[0] <= 0 or w[-1] > cond_max * w[0]:
        record.skipped = True
        record.reason = "singular innovation covariance"
        return _emit(record, state, sink)
    Sinv = (V / w) @ V.T
    Sinv_nu = Sinv @ nu
    record.nis = float(nu @ Sinv_nu)
    if gate is not None and record.nis > gate:
        record.skipped = True
        record.reason = "gated"
        return _emit(record, state, sink)

    K = U @ Sinv
    dx = np.zeros(state.dim)
    dx[rows] = U @ Sinv_nu
    if not np.isfinite(dx.sum() + K.sum()):
        raise NonFiniteState(f"non-finite gain in {model.name} update at t={state.t:.3f}")
    if form == "joseph":
        # (I - KH) P (I - KH)^T + K R K^T = P - K U^T - U K^T + K S K^T
        # = P + X + X^T with X = (K S / 2 - U) K^T, exactly symmetric
        X = (0.5 * (K @ S) - U) @ K.T
    elif form == "standard":
        X = -0.5 * (K @ U.T)
    else:
        raise ValueError(f"unknown update form {form!r}")
    X += X.T
    if isinstance(rows, slice):
        P[rows, rows] += X
    else:
        P[np.ix_(rows, rows)] += X
    state.inject(dx)
    return _emit(record, state, sink)


def _active_rows(Pc):
    """Rows with any nonzero entry, as a slice when they form a prefix."""
    nz = Pc.any(axis=1)
    if nz.all():
        return slice(None)
    idx = np.flatnonzero(nz)
    if len(idx) and idx[-1] == len(idx) - 1:
        return slice(0, len(idx))
    return idx


def _emit(record, state, sink):
    if sink is not None:
        record.state_hash = state.snapshot_hash()
        sink(record)
    return record


def augment_block(state, sources, names):
    """Clone ``sources`` into new blocks ``names`` appended to the layout.

    The clones get the sources' nominal values and the corresponding rows and
    columns of ``P``, so they are fully correlated with their sources.
    """
    if isinstance(sources, str):
        sources, names = (sources,), (names,)
    src_idx = state.index(sources)
    new_blocks = []
    for s, n in zip(sources, names):
        b = state.block(s)
        new_blocks.append(Block(n, b.dim, b.rotation))
        state.nominal[n] = state.nominal[s].copy()
    d = state.dim
    k = len(src_idx)
    P = np.empty((d + k, d + k))
    P[:d, :d] = state.P
    P[d:, :d] = state.P[src_idx, :]
    P[:d, d:] = state.P[:, src_idx]
    P[d:, d:] = state.P[np.ix_(src_idx, src_idx)]
    state.P = P
    state.blocks = state.blocks + tuple(new_blocks)
    state._reindex()
    return state


def marginalize_block(state, names):
    if isinstance(names, str):
        names = (names,)
    drop = state.index(names)
    keep = np.setdiff1d(np.arange(state.dim), drop)
    state.P = state.P[np.ix_(keep, keep)].copy()
    state.blocks = tuple(b for b in state.blocks if b.name not in names)
    for n in names:
        del state.nominal[n]
    state._reindex()
    return state


def reclone(state, sources, targets):
    """Overwrite existing clone blocks with the current values of ``sources``."""
    if isinstance(sources, str):
        sources, targets = (sources,), (targets,)
    s_idx = state.index(sources)
    t_idx = state.index(targets)
    for s, t in zip(sources, targets):
        state.nominal[t] = state.nominal[s].copy()
    P = state.P
    P[t_idx, :] = P[s_idx, :]
    P[:, t_idx] = P[:, s_idx]
    return state
