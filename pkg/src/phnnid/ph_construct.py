"""Conversion of a linear state-space estimate into a normalised linear PH system.

Pipeline: find a storage matrix from the KYP inequality, repair it to the
nearest positive semidefinite matrix, build ``J, R, G, P`` (and ``S, N`` when a
feedthrough exists) so that ``(J - R) Q = A``, ``G - P = B`` and
``(G + P)^T Q = C``, then change coordinates with the Cholesky factor of ``Q``
so the Hamiltonian becomes ``x^T x / 2``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linear_ident import CtStateSpace, freq_response

__all__ = [
    "LinearPH", "RawPH", "KypResult", "solve_kyp", "nearest_psd", "build_ph_from_ss",
    "cholesky_normalize", "passivity_report", "estimate_linear_ph", "omega_grid",
    "save_linear_ph", "load_linear_ph", "KypWarning",
]


class KypWarning(UserWarning):
    pass


@dataclass
class KypResult:
    Q: np.ndarray
    feasible: bool
    lmi_negative_mass: float
    q_negative_mass: float
    sweeps: int
    converged: bool
    diverged: bool = False


@dataclass
class RawPH:
    """PH matrices in the original coordinates, before normalisation."""

    J: np.ndarray
    R: np.ndarray
    G: np.ndarray
    P: np.ndarray
    S: np.ndarray
    N: np.ndarray
    Q: np.ndarray
    residuals: dict = field(default_factory=dict)

    def as_state_space(self) -> CtStateSpace:
        return CtStateSpace((self.J - self.R) @ self.Q, self.G - self.P,
                            (self.G + self.P).T @ self.Q, self.S + self.N)


@dataclass
class LinearPH:
    """Normalised linear PH system (``Q_lin = I``).

    ``V`` is the Cholesky factor of the storage matrix before normalisation;
    ``diagnostics`` collects KYP residuals and projection distances.
    """

    J: np.ndarray
    R: np.ndarray
    G: np.ndarray
    P: np.ndarray
    V: np.ndarray
    Q: np.ndarray | None = None
    S: np.ndarray | None = None
    N: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.Q is None:
            self.Q = np.eye(self.J.shape[0])

    @property
    def n_x(self) -> int:
        return self.J.shape[0]

    @property
    def n_p(self) -> int:
        return self.G.shape[1]

    def as_state_space(self) -> CtStateSpace:
        D = np.zeros((self.n_p, self.n_p))
        if self.S is not None:
            D = D + self.S
        if self.N is not None:
            D = D + self.N
        return CtStateSpace((self.J - self.R) @ self.Q, self.G - self.P,
                            (self.G + self.P).T @ self.Q, D)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in ("J", "R", "G", "P", "V", "Q")}
        for k in ("S", "N"):
            v = getattr(self, k)
            d[k] = None if v is None else v.tolist()
        d["diagnostics"] = _jsonable(self.diagnostics)
        return d

    @classmethod
    def from_dict(cls, d) -> "LinearPH":
        arr = lambda v: None if v is None else np.array(v, dtype=float)
        return cls(J=arr(d["J"]), R=arr(d["R"]), G=arr(d["G"]), P=arr(d["P"]),
                   V=arr(d["V"]), Q=arr(d.get("Q")), S=arr(d.get("S")), N=arr(d.get("N")),
                   diagnostics=d.get("diagnostics", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def save_linear_ph(lph: LinearPH, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(lph.to_dict(), indent=2))
    return path


def load_linear_ph(path) -> LinearPH:
    return LinearPH.from_dict(json.loads(Path(path).read_text()))


def omega_grid(Ts: float = 0.1, n: int = 50) -> np.ndarray:
    """Log-spaced angular frequencies up to Nyquist."""
    return np.logspace(-2, np.log10(np.pi / Ts), n)


# ------------------------------------------------------------------ projection

def _sym(M):
    return 0.5 * (M + M.T)


def _neg_mass(M) -> float:
    w = np.linalg.eigvalsh(_sym(M))
    return float(-w[w < 0].sum())


def _clamp(M, floor):
    w, U = np.linalg.eigh(_sym(M))
    return (U * np.maximum(w, floor)) @ U.T


def nearest_psd(M) -> np.ndarray:
    """Nearest symmetric PSD matrix with eigenvalues floored at ``1e-8 * max(1, lambda_max)``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"nearest_psd needs a square matrix, got {M.shape}")
    w, U = np.linalg.eigh(_sym(M))
    floor = 1e-8 * max(1.0, w[-1])
    return _sym((U * np.maximum(w, floor)) @ U.T)


# ------------------------------------------------------------------------ KYP

def _kyp_map(A, B, C, D):
    """Affine map ``c -> (LMI block, Q block)`` with ``Q = offset + sum c_i E_i``.

    Returns the constant part, the linear part as a matrix acting on the
    coefficients ``c``, the offset and the basis.
    """
    n, p = B.shape
    sym_basis = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            sym_basis.append(E)
    offset = np.zeros((n, n))
    basis = sym_basis
    if not np.any(D + D.T):
        # zero lower-right block: PSD forces Q B = C^T, so search only the
        # least-squares solutions of that equation
        MB = np.array([(E @ B).ravel() for E in sym_basis]).T
        coef_p = np.linalg.lstsq(MB, C.T.ravel(), rcond=None)[0]
        offset = sum(c * E for c, E in zip(coef_p, sym_basis))
        _, sv, Vt = np.linalg.svd(MB)
        rank = int(np.sum(sv > 1e-12 * max(sv[0], 1e-300))) if sv.size else 0
        basis = [sum(c * E for c, E in zip(v, sym_basis)) for v in Vt[rank:]]

    def lmi(Q, const):
        top = -A.T @ Q - Q @ A
        off = -Q @ B
        if const:
            off = off + C.T
        M = np.zeros((n + p, n + p))
        M[:n, :n] = top
        M[:n, n:] = off
        M[n:, :n] = off.T
        if const:
            M[n:, n:] = D + D.T
        return M

    w0 = np.concatenate([(lmi(offset, False) + lmi(np.zeros((n, n)), True)).ravel(),
                         offset.ravel()])
    cols = [np.concatenate([lmi(E, False).ravel(), E.ravel()]) for E in basis]
    L = np.array(cols).T if cols else np.zeros((w0.size, 0))
    return w0, L, offset, basis


def solve_kyp(A, B, C, D=None, eps: float = 1e-6, tol: float = 1e-9,
              max_sweeps: int = 5000, feas_tol: float = 1e-6,
              margin: float = 1e-6) -> KypResult:
    """Search a symmetric ``Q`` satisfying the KYP inequality and ``Q >= eps I``.

    Dykstra-corrected alternating projections between the affine image of the
    LMI map and the product of PSD cones. Without feedthrough the zero
    lower-right block forces ``Q B = C^T``; the search is then restricted to
    least-squares solutions of that equation. If the two sets do not meet, the
    iteration settles at the closest approach and the result is flagged
    infeasible.

    A first pass asks for ``margin * max(1, |A|)`` of slack in the dissipation
    block, which lands strictly inside the feasible set when it has an
    interior; lossless or marginal systems fall back to zero slack.
    """
    A, B, C = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, C))
    n, p = B.shape
    D = np.zeros((C.shape[0], p)) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
    if margin > 0:
        slack = margin * max(1.0, float(np.linalg.norm(A)))
        res = _dykstra(A, B, C, D, eps, slack, tol, max_sweeps, feas_tol)
        if res.feasible:
            return res
    return _dykstra(A, B, C, D, eps, 0.0, tol, max_sweeps, feas_tol)


def _dykstra(A, B, C, D, eps, slack, tol, max_sweeps, feas_tol) -> KypResult:
    n, p = B.shape
    w0, L, offset, basis = _kyp_map(A, B, C, D)
    Lpinv = np.linalg.pinv(L)
    m = n + p
    S = np.zeros((m, m))
    S[:n, :n] = slack * np.eye(n)

    def split(z):
        return z[:m * m].reshape(m, m), z[m * m:].reshape(n, n)

    def project_affine(z):
        coef = Lpinv @ (z - w0)
        return w0 + L @ coef, coef

    def project_cone(z):
        # shifted cone K >= S; slack only on the state block, since the port
        # block is zero without feedthrough
        K, Qb = split(z)
        return np.concatenate([(S + _clamp(K - S, 0.0)).ravel(), _clamp(Qb, eps).ravel()])

    def to_Q(coef):
        return offset + sum(c * E for c, E in zip(coef, basis))

    x = np.zeros_like(w0)
    corr = np.zeros_like(w0)
    best = None
    prev_disp, growing = np.inf, 0
    converged = diverged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        y, coef = project_affine(x)
        x_new = project_cone(y + corr)
        corr = y + corr - x_new
        disp = float(np.linalg.norm(x_new - x))
        x = x_new
        Q = to_Q(coef)
        viol = _neg_mass(split(y)[0]) + _neg_mass(Q - eps * np.eye(n))
        if best is None or viol < best[0]:
            best = (viol, Q)
        if disp < tol:
            converged = True
            break
        growing = growing + 1 if disp > prev_disp else 0
        prev_disp = disp
        if growing >= 100:
            diverged = True
            break
    Q = _sym(best[1])
    K = np.zeros((m, m))
    K[:n, :n] = -A.T @ Q - Q @ A
    K[:n, n:] = C.T - Q @ B
    K[n:, :n] = K[:n, n:].T
    K[n:, n:] = D + D.T
    lmi_neg, q_neg = _neg_mass(K), _neg_mass(Q)
    scale = max(1.0, float(np.linalg.norm(K)))
    feasible = (not diverged) and lmi_neg <= feas_tol * scale and q_neg <= feas_tol
    return KypResult(Q=Q, feasible=bool(feasible), lmi_negative_mass=lmi_neg,
                     q_negative_mass=q_neg, sweeps=sweeps, converged=converged,
                     diverged=diverged)


# ----------------------------------------------------------------- construction

def build_ph_from_ss(A, B, C, D, Q) -> RawPH:
    """PH matrices reproducing ``(A, B, C, D)`` exactly for a given PD ``Q``.

    ``R`` carries a leading minus sign so that ``(J - R) Q = A`` holds and ``R``
    is PSD whenever ``Q`` certifies ``A^T Q + Q A <= 0``.
    """
    A, B, C, D, Q = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, C, D, Q))
    try:
        cond = np.linalg.cond(Q)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        Qi = np.linalg.inv(Q)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "Q is not invertible; pass it through nearest_psd to apply the eigenvalue floor"
        ) from None
    AQi = A @ Qi
    J = 0.5 * (AQi - AQi.T)
    R = -0.5 * (AQi + AQi.T)
    QiCt = Qi.T @ C.T
    G = 0.5 * (QiCt + B)
    P = 0.5 * (QiCt - B)
    S = 0.5 * (D + D.T)
    N = 0.5 * (D - D.T)
    rel = lambda X, Y: float(np.linalg.norm(X - Y) / max(1.0, np.linalg.norm(Y)))
    residuals = {
        "A": rel((J - R) @ Q, A), "B": rel(G - P, B),
        "C": rel((G + P).T @ Q, C), "D": rel(S + N, D),
    }
    return RawPH(J, R, G, P, S, N, Q, residuals)


def cholesky_normalize(ph: RawPH, Q=None, keep_feedthrough: bool = False) -> LinearPH:
    """Coordinate change ``z = V^T x`` with ``Q = V V^T``; the result has ``Q = I``."""
    Q = ph.Q if Q is None else np.asarray(Q, dtype=float)
    try:
        V = np.linalg.cholesky(_sym(Q))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("Cholesky factorisation of Q failed; Q is not PD") from None
    has_d = keep_feedthrough or np.any(ph.S != 0) or np.any(ph.N != 0)
    return LinearPH(J=V.T @ ph.J @ V, R=V.T @ ph.R @ V, G=V.T @ ph.G, P=V.T @ ph.P, V=V,
                    S=ph.S.copy() if has_d else None, N=ph.N.copy() if has_d else None,
                    diagnostics={"construction_residuals": dict(ph.residuals)})


def passivity_report(lph: LinearPH) -> dict:
    R_eigs = np.linalg.eigvalsh(_sym(lph.R))
    rep = {
        "min_eig_R": float(R_eigs[0]),
        "skew_defect_J": float(np.linalg.norm(lph.J + lph.J.T)),
        "norm_P": float(np.linalg.norm(lph.P)),
        "P_port_norms": np.linalg.norm(lph.P, axis=0).tolist(),
        "q_projection_distance": lph.diagnostics.get("q_projection_distance", 0.0),
        "r_projection_distance": lph.diagnostics.get("r_projection_distance", 0.0),
    }
    if lph.N is not None:
        rep["skew_defect_N"] = float(np.linalg.norm(lph.N + lph.N.T))
    return rep


def estimate_linear_ph(ss: CtStateSpace, omega=None, **kyp_kw) -> LinearPH:
    """Full conversion: KYP, PSD repair of ``Q``, construction, normalisation,
    PSD repair of ``R`` if still needed, and an input-output discrepancy check.

    ``ss`` must already have as many inputs as outputs (see ``pad_ports``).
    The KYP inequality is posed on the excited ports only (nonzero columns of
    ``B``); the construction itself uses all ports.
    """
    if ss.B.shape[1] != ss.C.shape[0]:
        raise ValueError(f"PH form needs equal port counts, got {ss.B.shape[1]} inputs "
                         f"and {ss.C.shape[0]} outputs; pad the inputs first")
    # zero-padded ports carry no supply rate; they are left out of the LMI and
    # their outputs end up in P
    excited = np.flatnonzero(np.linalg.norm(ss.B, axis=0) > 0)
    if excited.size == 0:
        raise ValueError("B is identically zero; no excited port")
    kyp = solve_kyp(ss.A, ss.B[:, excited], ss.C[excited],
                    ss.D[np.ix_(excited, excited)], **kyp_kw)
    if not kyp.feasible:
        warnings.warn("KYP inequality not solvable for this estimate; continuing with the "
                      "nearest PSD storage matrix", KypWarning, stacklevel=2)
    Q = nearest_psd(kyp.Q)
    q_dist = float(np.linalg.norm(Q - kyp.Q))
    raw = build_ph_from_ss(ss.A, ss.B, ss.C, ss.D, Q)
    lph = cholesky_normalize(raw, Q)
    r_dist = 0.0
    if np.linalg.eigvalsh(_sym(lph.R))[0] < -1e-10:
        R_new = nearest_psd(lph.R)
        r_dist = float(np.linalg.norm(R_new - lph.R))
        lph.R = R_new
    omega = omega_grid() if omega is None else omega
    H0 = freq_response(ss, omega)
    H1 = freq_response(lph, omega)
    lph.diagnostics.update({
        "kyp_ports": excited.tolist(),
        "kyp_feasible": kyp.feasible,
        "kyp_lmi_negative_mass": kyp.lmi_negative_mass,
        "kyp_q_negative_mass": kyp.q_negative_mass,
        "kyp_sweeps": kyp.sweeps,
        "kyp_converged": kyp.converged,
        "Q_tilde": kyp.Q,
        "q_projection_distance": q_dist,
        "r_projection_distance": r_dist,
        "freq_max_abs_deviation": float(np.max(np.abs(H1 - H0))),
        "freq_max_rel_deviation": float(np.max(np.abs(H1 - H0)) / np.max(np.abs(H0))),
    })
    return lph
