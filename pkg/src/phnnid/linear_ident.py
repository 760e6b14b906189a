"""Linear state-space estimation from input/output records.

The estimator is past-output MOESP: block-Hankel data matrices, an LQ
factorisation that removes the future-input contribution, instrumenting with
past inputs and outputs, an SVD for the extended observability range, and
shift invariance for ``A`` and ``C``. ``B`` and the per-record initial states
are then fitted by linear least squares with ``D = 0``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

__all__ = [
    "DtStateSpace", "CtStateSpace", "Standardizer", "IdentificationWarning",
    "RankDeficiencyError", "subspace_id", "d2c", "c2d", "freq_response",
    "simulate_dt", "pad_ports", "save_state_space", "load_state_space",
]


class IdentificationWarning(UserWarning):
    pass


class RankDeficiencyError(ValueError):
    pass


@dataclass
class DtStateSpace:
    Ad: np.ndarray
    Bd: np.ndarray
    Cd: np.ndarray
    Dd: np.ndarray
    Ts: float

    def __post_init__(self):
        self.Ad, self.Bd, self.Cd, self.Dd = (np.atleast_2d(np.asarray(m, dtype=float))
                                              for m in (self.Ad, self.Bd, self.Cd, self.Dd))
        _check_dims(self.Ad, self.Bd, self.Cd, self.Dd)
        if self.Ts <= 0:
            raise ValueError("Ts must be positive")

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Ad))))


@dataclass
class CtStateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.A, self.B, self.C, self.D = (np.atleast_2d(np.asarray(m, dtype=float))
                                          for m in (self.A, self.B, self.C, self.D))
        _check_dims(self.A, self.B, self.C, self.D)


def _check_dims(A, B, C, D):
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n or \
            D.shape != (C.shape[0], B.shape[1]):
        raise ValueError(f"inconsistent state-space shapes A{A.shape} B{B.shape} "
                         f"C{C.shape} D{D.shape}")


@dataclass
class Standardizer:
    """Per-channel affine scaling fitted on the training records."""

    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, datasets) -> "Standardizer":
        u = np.vstack([d.u for d in datasets])
        y = np.vstack([d.y for d in datasets])
        return cls(u.mean(0), u.std(0), y.mean(0), y.std(0))

    def u(self, u):
        return (u - self.u_mean) / self.u_std

    def y(self, y):
        return (y - self.y_mean) / self.y_std

    def y_inverse(self, y):
        return y * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("u_mean", "u_std", "y_mean", "y_std")}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("u_mean", "u_std", "y_mean", "y_std")))


def _hankel(x: np.ndarray, first: int, rows: int, cols: int) -> np.ndarray:
    # block rows x[first + i + j] for i < rows, j < cols; each block is one sample
    idx = first + np.arange(rows)[:, None] + np.arange(cols)[None, :]
    return x[idx].transpose(0, 2, 1).reshape(rows * x.shape[1], cols)


def simulate_dt(ss: DtStateSpace, u: np.ndarray, x0=None) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    x = np.zeros(ss.Ad.shape[0]) if x0 is None else np.asarray(x0, dtype=float)
    y = np.empty((len(u), ss.Cd.shape[0]))
    for k in range(len(u)):
        y[k] = ss.Cd @ x + ss.Dd @ u[k]
        x = ss.Ad @ x + ss.Bd @ u[k]
    return y


def _impulse_regressors(A, C, u):
    """Output response of ``x+ = A x + e_i u_c`` for every state i and input channel c.

    Returns shape ``(N * n_y, n * n_u)`` with column ``i * n_u + c``, matching a
    row-major flattening of B.
    """
    n = A.shape[0]
    N, nu = u.shape
    X = np.zeros((n, n, nu))  # state for each (i, c) column
    cols = np.empty((N, C.shape[0], n, nu))
    for k in range(N):
        cols[k] = np.einsum("yj,jic->yic", C, X)
        X = np.einsum("jk,kic->jic", A, X)
        X[np.arange(n), np.arange(n), :] += u[k]
    return cols.reshape(N * C.shape[0], n * nu)


def _free_regressors(A, C, N):
    n = A.shape[0]
    out = np.empty((N, C.shape[0], n))
    Ak = np.eye(n)
    for k in range(N):
        out[k] = C @ Ak
        Ak = A @ Ak
    return out.reshape(N * C.shape[0], n)


def subspace_id(datasets, n_x: int = 6, horizon: int = 20, Ts: float | None = None,
                return_x0: bool = False):
    """Estimate a discrete-time model ``(Ad, Bd, Cd, 0)`` of fixed order ``n_x``.

    ``datasets`` is a sequence of ``(u, y)`` array pairs or objects with ``u``,
    ``y`` and ``Ts`` attributes; all records are used jointly.
    """
    pairs = []
    for d in datasets:
        if hasattr(d, "u"):
            pairs.append((np.asarray(d.u, float), np.asarray(d.y, float)))
            Ts = d.Ts if Ts is None else Ts
        else:
            u, y = d
            pairs.append((np.asarray(u, float).reshape(len(u), -1),
                          np.asarray(y, float).reshape(len(y), -1)))
    if Ts is None:
        raise ValueError("sampling time unknown; pass Ts")
    nu, ny = pairs[0][0].shape[1], pairs[0][1].shape[1]
    s = horizon
    if n_x > s * min(nu, ny) and n_x > s * ny:
        raise RankDeficiencyError(
            f"order {n_x} exceeds the observability rank available from {s} block rows")

    blocks = []
    for u, y in pairs:
        cols = len(u) - 2 * s + 1
        if cols < 1:
            raise RankDeficiencyError(f"record of {len(u)} samples is shorter than 2*horizon")
        blocks.append(np.vstack([
            _hankel(u, s, s, cols), _hankel(u, 0, s, cols),
            _hankel(y, 0, s, cols), _hankel(y, s, s, cols)]))
    H = np.hstack(blocks)
    n_uf, n_z = s * nu, s * (nu + ny)
    rows = H.shape[0]
    if H.shape[1] < rows:
        raise RankDeficiencyError(
            f"block-Hankel matrix has {H.shape[1]} columns but {rows} rows; "
            f"need at least {rows} columns")
    sv_u = np.linalg.svd(H[:n_uf], compute_uv=False)
    if sv_u[0] == 0 or sv_u[-1] <= 1e-10 * sv_u[0]:
        warnings.warn(f"future-input Hankel block is rank deficient (dimension {n_uf}); "
                      "input is not persistently exciting", IdentificationWarning, stacklevel=2)

    R = np.linalg.qr(H.T / np.sqrt(H.shape[1]), mode="r")
    L = R.T
    L32 = L[n_uf + n_z:, n_uf:n_uf + n_z]
    U, sv, _ = np.linalg.svd(L32)
    if sv[n_x - 1] <= 1e-12 * max(sv[0], 1e-300):
        raise RankDeficiencyError(
            f"projected output block has numerical rank below the model order {n_x}")
    gamma = U[:, :n_x] * np.sqrt(sv[:n_x])
    Cd = gamma[:ny]
    Ad = np.linalg.lstsq(gamma[:-ny], gamma[ny:], rcond=None)[0]

    # B and one initial state per record, D = 0
    n_rec = len(pairs)
    regs, rhs = [], []
    for r, (u, y) in enumerate(pairs):
        Phi_b = _impulse_regressors(Ad, Cd, u)
        Phi_x = np.zeros((Phi_b.shape[0], n_x * n_rec))
        Phi_x[:, r * n_x:(r + 1) * n_x] = _free_regressors(Ad, Cd, len(u))
        regs.append(np.hstack([Phi_b, Phi_x]))
        rhs.append(y.reshape(-1))
    theta = np.linalg.lstsq(np.vstack(regs), np.concatenate(rhs), rcond=None)[0]
    Bd = theta[:n_x * nu].reshape(n_x, nu)
    x0s = theta[n_x * nu:].reshape(n_rec, n_x)
    ss = DtStateSpace(Ad, Bd, Cd, np.zeros((ny, nu)), Ts)

    if ss.spectral_radius >= 1.0:
        warnings.warn(f"estimated model is not stable (spectral radius "
                      f"{ss.spectral_radius:.4f})", IdentificationWarning, stacklevel=2)
    err = sum(np.sum((simulate_dt(ss, u, x0) - y) ** 2) for (u, y), x0 in zip(pairs, x0s))
    var = sum(np.sum((y - y.mean(0)) ** 2) for _, y in pairs)
    fit = np.sqrt(err / var) if var > 0 else np.inf
    if not fit < 0.95:
        warnings.warn(f"linear model explains almost none of the output (NRMSE {fit:.3f}); "
                      "no coherent linear dynamics", IdentificationWarning, stacklevel=2)
    return (ss, x0s) if return_x0 else ss


def _neg_real_axis(eigs) -> bool:
    return bool(np.any((np.abs(eigs.imag) < 1e-12) & (eigs.real <= 0)))


def d2c(ss: DtStateSpace) -> CtStateSpace:
    """Invert a zero-order-hold discretisation via the principal matrix logarithm."""
    n, m = ss.Bd.shape
    if _neg_real_axis(np.linalg.eigvals(ss.Ad)):
        raise ValueError("Ad has eigenvalues on the closed negative real axis; the "
                         "principal logarithm is undefined (sample faster)")
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = ss.Ad
    aug[:n, n:] = ss.Bd
    aug[n:, n:] = np.eye(m)
    log = sla.logm(aug)
    if np.iscomplexobj(log):
        if np.max(np.abs(log.imag)) > 1e-8 * max(1.0, np.max(np.abs(log.real))):
            raise ValueError("matrix logarithm left the real branch; sample faster")
        log = log.real
    log /= ss.Ts
    return CtStateSpace(log[:n, :n], log[:n, n:], ss.Cd.copy(), ss.Dd.copy())


def c2d(ss: CtStateSpace, Ts: float) -> DtStateSpace:
    """Zero-order-hold discretisation."""
    n, m = ss.B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = ss.A
    aug[:n, n:] = ss.B
    E = sla.expm(aug * Ts)
    return DtStateSpace(E[:n, :n], E[:n, n:], ss.C.copy(), ss.D.copy(), Ts)


def freq_response(sys, omega) -> np.ndarray:
    """``C (j w I - A)^-1 B + D`` on the grid ``omega``; shape ``(len(omega), n_y, n_u)``.

    ``sys`` is anything with ``A, B, C, D`` attributes or an ``as_state_space()``
    method.
    """
    if hasattr(sys, "as_state_space"):
        sys = sys.as_state_space()
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n = A.shape[0]
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    out = np.empty((len(omega), C.shape[0], B.shape[1]), dtype=complex)
    for i, w in enumerate(omega):
        M = 1j * w * np.eye(n) - A
        try:
            X = np.linalg.solve(M, B)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"j*{w}*I - A is singular") from None
        if np.linalg.cond(M) > 1e14:
            raise np.linalg.LinAlgError(f"j*{w}*I - A is numerically singular")
        out[i] = C @ X + D
    return out


def pad_ports(ss: CtStateSpace, n_ports: int | None = None) -> CtStateSpace:
    """Zero-pad ``B`` (and ``D``) with unexcited input columns up to ``n_ports``."""
    n_ports = ss.C.shape[0] if n_ports is None else n_ports
    n, m = ss.B.shape
    if m > n_ports:
        raise ValueError(f"cannot pad {m} inputs down to {n_ports} ports")
    B = np.zeros((n, n_ports))
    B[:, :m] = ss.B
    D = np.zeros((ss.C.shape[0], n_ports))
    D[:, :m] = ss.D
    return CtStateSpace(ss.A, B, ss.C, D)


def save_state_space(ss, path) -> Path:
    path = Path(path)
    if isinstance(ss, DtStateSpace):
        d = {"kind": "discrete", "A": ss.Ad.tolist(), "B": ss.Bd.tolist(),
             "C": ss.Cd.tolist(), "D": ss.Dd.tolist(), "Ts": ss.Ts}
    else:
        d = {"kind": "continuous", "A": ss.A.tolist(), "B": ss.B.tolist(),
             "C": ss.C.tolist(), "D": ss.D.tolist()}
    path.write_text(json.dumps(d, indent=2))
    return path


def load_state_space(path):
    d = json.loads(Path(path).read_text())
    mats = [np.array(d[k], dtype=float) for k in "ABCD"]
    if d["kind"] == "discrete":
        return DtStateSpace(*mats, Ts=d["Ts"])
    return CtStateSpace(*mats)
