"""Chained mass-spring-damper benchmark with cubic damping and multisine forcing.

Three masses in a chain (wall - m1 - m2 - m3, last mass free) obey

    M q'' + D (q'^3 + q') + K q = e1 u(t)

where the cubic acts elementwise on the absolute mass velocities. The force
is a sum of equal-amplitude sines with random phases, held constant between
samples by default, and the sampled outputs are the three mass velocities.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MsdConfig", "Dataset", "assemble_matrices", "multisine", "draw_phases",
    "simulate", "mechanical_energy", "make_experiment_set", "add_noise",
    "save_dataset", "load_dataset", "SimulationError",
]

ROLES = ("train",) * 5 + ("val",) * 2 + ("test",)


class SimulationError(RuntimeError):
    pass


@dataclass
class MsdConfig:
    n_masses: int = 3
    masses: tuple = (2.0, 2.0, 2.0)
    stiffness: tuple = (1.0, 1.0, 1.0)
    damping: tuple = (0.5, 0.5, 0.5)
    f0: float = 0.1
    n_lines: int = 40
    duration: float = 100.0
    sample_rate: float = 10.0
    substeps: int = 20
    snr_db: float = 30.0
    seed: int = 0
    x0_range: float = 0.5
    phases: tuple | None = None
    input_hold: str = "zoh"

    def __post_init__(self):
        for name in ("masses", "stiffness", "damping"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != self.n_masses:
                raise ValueError(f"{name} needs {self.n_masses} entries, got {len(vals)}")
            setattr(self, name, vals)
        if min(self.masses) <= 0 or min(self.stiffness) <= 0:
            raise ValueError("masses and stiffnesses must be positive")
        if min(self.damping) < 0:
            raise ValueError("damping coefficients must be nonnegative")
        if self.input_hold not in ("zoh", "continuous"):
            raise ValueError("input_hold must be 'zoh' or 'continuous'")
        if self.n_lines < 1:
            raise ValueError("n_lines must be >= 1")
        if self.phases is not None:
            ph = tuple(float(p) for p in self.phases)
            if len(ph) != self.n_lines or min(ph) < 0 or max(ph) >= np.pi:
                raise ValueError("phases need n_lines entries in [0, pi)")
            self.phases = ph

    @property
    def Ts(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class Dataset:
    """Sampled input/output record. ``y_clean`` is for oracle use only."""

    u: np.ndarray
    y: np.ndarray
    Ts: float
    role: str = "train"
    y_clean: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(len(self.u), -1)
        self.y = np.asarray(self.y, dtype=float).reshape(len(self.y), -1)
        if len(self.u) != len(self.y):
            raise ValueError(f"u has {len(self.u)} samples but y has {len(self.y)}")
        if self.Ts <= 0:
            raise ValueError("Ts must be positive")
        if self.y_clean is not None:
            self.y_clean = np.asarray(self.y_clean, dtype=float).reshape(self.y.shape)

    def __len__(self) -> int:
        return len(self.u)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.Ts


def _chain(coeffs) -> np.ndarray:
    n = len(coeffs)
    out = np.zeros((n, n))
    out[0, 0] += coeffs[0]
    for i in range(1, n):
        c = coeffs[i]
        out[i - 1, i - 1] += c
        out[i, i] += c
        out[i - 1, i] -= c
        out[i, i - 1] -= c
    return out


def assemble_matrices(config: MsdConfig):
    """Mass, damping and stiffness matrices ``(M, D, K)`` of the chain."""
    M = np.diag(config.masses)
    return M, _chain(config.damping), _chain(config.stiffness)


def draw_phases(config: MsdConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, np.pi, size=config.n_lines)


def multisine(config: MsdConfig, t, phases=None) -> np.ndarray:
    """``sum_i sin(2 pi i f0 t + phi_i)`` for i = 1..n_lines."""
    if phases is None:
        phases = config.phases if config.phases is not None else np.zeros(config.n_lines)
    t = np.asarray(t, dtype=float)
    k = np.arange(1, config.n_lines + 1)
    arg = 2.0 * np.pi * config.f0 * np.multiply.outer(t, k) + np.asarray(phases)
    return np.sin(arg).sum(axis=-1)


def mechanical_energy(config: MsdConfig, x: np.ndarray) -> np.ndarray:
    """``p^T M^-1 p / 2 + q^T K q / 2`` for states stacked as ``(q, p)``."""
    M, _, K = assemble_matrices(config)
    n = config.n_masses
    x = np.atleast_2d(x)
    q, p = x[:, :n], x[:, n:]
    return 0.5 * np.einsum("ti,ij,tj->t", p, np.linalg.inv(M), p) + \
        0.5 * np.einsum("ti,ij,tj->t", q, K, q)


def simulate(config: MsdConfig, x0, force=None, phases=None, substeps=None,
             n_samples=None):
    """Integrate the chain with fixed-step RK4.

    ``force`` is a callable of time; by default the multisine with ``phases``,
    applied through a zero-order hold of its samples (``input_hold="zoh"``,
    so the recorded input sequence is exactly what drives the plant) or as
    the continuous signal. ``x0`` may be a single state ``(q, p)`` or a stack
    of them, shape ``(B, 2 * n_masses)``, in which case ``phases`` is
    ``(B, n_lines)`` and all records are integrated together. Returns the
    state at every sample instant, shape ``(n_samples, 2 * n_masses)`` or
    ``(B, n_samples, 2 * n_masses)``.
    """
    M, D, K = assemble_matrices(config)
    minv = 1.0 / np.diag(M)
    n = config.n_masses
    substeps = config.substeps if substeps is None else substeps
    n_samples = config.n_samples if n_samples is None else n_samples
    x = np.array(x0, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    hold = False
    if force is None:
        ph = np.zeros(config.n_lines) if phases is None else np.asarray(phases, dtype=float)
        ph = np.broadcast_to(ph, (len(x), config.n_lines))
        omega = 2.0 * np.pi * config.f0 * np.arange(1, config.n_lines + 1)
        force = lambda t: np.sin(omega * t + ph).sum(axis=-1)
        hold = config.input_hold == "zoh"

    def rhs(x, f):
        q, p = x[:, :n], x[:, n:]
        v = p * minv
        dp = -q @ K.T - (v ** 3 + v) @ D.T
        dp[:, 0] += f
        return np.concatenate([v, dp], axis=1)

    h = config.Ts / substeps
    out = np.empty((len(x), n_samples, 2 * n))
    for k in range(n_samples):
        out[:, k] = x
        fk = force(k * config.Ts) if hold else None
        for j in range(substeps):
            t = (k * substeps + j) * h
            if hold:
                f0 = f1 = f2 = fk
            else:
                f0, f1, f2 = force(t), force(t + h / 2), force(t + h)
            k1 = rhs(x, f0)
            k2 = rhs(x + h / 2 * k1, f1)
            k3 = rhs(x + h / 2 * k2, f1)
            k4 = rhs(x + h * k3, f2)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at sample {k + 1}")
    return out[0] if single else out


def add_noise(y_clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian output noise; per-channel std is ``std(y) * 10**(-snr/20)``."""
    sigma = y_clean.std(axis=0) * 10.0 ** (-snr_db / 20.0)
    return y_clean + rng.standard_normal(y_clean.shape) * sigma


def make_experiment_set(config: MsdConfig) -> list[Dataset]:
    """Eight records (5 train, 2 val, 1 test), each with its own phases and initial state.

    Phases and initial states depend only on ``config.seed`` and the record
    index, so changing the SNR changes the noise level but not the clean data.
    """
    M, _, _ = assemble_matrices(config)
    minv = 1.0 / np.diag(M)
    rngs = [np.random.default_rng([config.seed, i]) for i in range(len(ROLES))]
    phases = np.array([draw_phases(config, r) for r in rngs])
    x0 = np.array([r.uniform(-config.x0_range, config.x0_range, size=2 * config.n_masses)
                   for r in rngs])
    states = simulate(config, x0, phases=phases)
    t = np.arange(config.n_samples) * config.Ts
    out = []
    for i, role in enumerate(ROLES):
        y_clean = states[i, :, config.n_masses:] * minv
        noise_rng = np.random.default_rng([config.seed, i, 1])
        y = add_noise(y_clean, config.snr_db, noise_rng)
        u = multisine(config, t, phases[i])[:, None]
        meta = {"Ts": config.Ts, "snr_db": config.snr_db, "seed": config.seed,
                "index": i, "role": role, "phases": phases[i].tolist(), "x0": x0[i].tolist()}
        out.append(Dataset(u=u, y=y, Ts=config.Ts, role=role, y_clean=y_clean, meta=meta))
    return out


def save_dataset(ds: Dataset, path, extra_meta: dict | None = None) -> Path:
    """Write ``<path>.csv`` plus a ``<path>.json`` metadata sidecar."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    nu, ny = ds.u.shape[1], ds.y.shape[1]
    header = ["t"] + [f"u{i + 1}" for i in range(nu)] + [f"y{i + 1}" for i in range(ny)]
    cols = [ds.t[:, None], ds.u, ds.y]
    if ds.y_clean is not None:
        header += [f"y{i + 1}_clean" for i in range(ny)]
        cols.append(ds.y_clean)
    data = np.hstack(cols)
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    meta = {**ds.meta, **(extra_meta or {}), "Ts": ds.Ts, "role": ds.role,
            "n_u": nu, "n_y": ny, "n_samples": len(ds)}
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path.with_suffix(".csv")


def load_dataset(path) -> Dataset:
    path = Path(path).with_suffix("")
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    with open(path.with_suffix(".csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    ucols = [i for i, h in enumerate(header) if h.startswith("u")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y") and not h.endswith("_clean")]
    ccols = [i for i, h in enumerate(header) if h.endswith("_clean")]
    return Dataset(u=body[:, ucols], y=body[:, ycols], Ts=float(meta["Ts"]),
                   role=meta.get("role", "train"),
                   y_clean=body[:, ccols] if ccols else None, meta=meta)
