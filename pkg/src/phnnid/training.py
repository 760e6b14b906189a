"""Truncated-simulation-loss training of the structured model.

Each iteration draws a mini-batch of windows from the training records. For
every window the encoder estimates the state at the window start from the
preceding ``n_a`` outputs and ``n_b`` inputs, the model is rolled forward with
RK4 (input held constant over each sample interval) and the squared output
error over the window is averaged. The parameters that reach the lowest
free-run validation NRMSE are kept.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .linear_ident import Standardizer
from .model import PhnnParams, encoder_forward, f_and_h, f_theta
from .ph_construct import LinearPH

__all__ = [
    "TrainConfig", "TrainState", "Adam", "TrainingAborted", "WindowSampler",
    "rk4_step", "truncated_loss", "nrmse", "simulate_model", "simulate_linear_ph",
    "evaluate", "predict", "pretrain_encoder", "train", "port_input", "loss_and_grads",
    "linear_reference_states",
]

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass
class TrainConfig:
    T: int = 50
    n_a: int = 10
    n_b: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    iterations: int = 1000
    pretrain_iterations: int = 10000
    pretrain_batch_size: int = 64
    pretrain_method: str = "regression"
    pretrain_washout: float = 10.0
    val_period: int = 25
    rk4_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ValueError("iteration budgets must be nonnegative")
        if self.val_period < 1 or self.rk4_steps < 1:
            raise ValueError("val_period and rk4_steps must be >= 1")
        if self.pretrain_method not in ("regression", "truncated"):
            raise ValueError(f"unknown pretrain_method {self.pretrain_method!r}")

    @property
    def lag(self) -> int:
        return max(self.n_a, self.n_b)


@dataclass
class TrainState:
    params: PhnnParams
    best_params: PhnnParams
    best_val: float = np.inf
    best_iter: int = 0
    optimizer: "Adam | None" = None
    loss_log: list = field(default_factory=list)
    val_log: list = field(default_factory=list)
    skipped: int = 0
    train_time: float = 0.0
    pretrain_time: float = 0.0


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0
        self.skipped = 0

    def step(self, values: dict, grads: dict) -> bool:
        """Apply one update; returns False (and leaves everything untouched)
        when any gradient is non-finite."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient; update skipped")
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            values[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True


# ------------------------------------------------------------------ windows

def port_input(u: np.ndarray, n_p: int) -> np.ndarray:
    """Pad measured inputs ``(..., n_u)`` with zeros up to ``n_p`` ports."""
    out = np.zeros(u.shape[:-1] + (n_p,))
    out[..., :u.shape[-1]] = u
    return out


class WindowSampler:
    """Random truncated windows from standardised training records."""

    def __init__(self, datasets, std: Standardizer, config: TrainConfig, rng=None):
        self.u = [std.u(d.u) for d in datasets]
        self.y = [std.y(d.y) for d in datasets]
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        lag, T = config.lag, config.T
        self.starts = [(i, t) for i, u in enumerate(self.u) for t in range(lag, len(u) - T + 1)]
        if not self.starts:
            raise ValueError("records are too short for the lag and window length")

    def windows(self, picks):
        """Arrays for explicit ``(record, start)`` pairs."""
        c = self.config
        idx = np.asarray(picks)
        yp = np.stack([self.y[i][t - c.n_a:t] for i, t in idx])
        up = np.stack([self.u[i][t - c.n_b:t] for i, t in idx])
        uw = np.stack([self.u[i][t:t + c.T] for i, t in idx])
        yw = np.stack([self.y[i][t:t + c.T] for i, t in idx])
        return yp, up, uw, yw

    def sample(self, batch_size):
        picks = self.rng.integers(len(self.starts), size=batch_size)
        return self.windows([self.starts[j] for j in picks])


def check_window(record_len: int, t: int, config: TrainConfig) -> None:
    if t < config.lag or t + config.T > record_len:
        raise IndexError(f"window start {t} outside [{config.lag}, {record_len - config.T}]")


# ---------------------------------------------------------------- simulation

def rk4_step(f, x, u, h, k1=None):
    """Classical RK4 with the input held over the step. ``k1`` may be supplied."""
    if k1 is None:
        k1 = f(x, u)
    k2 = f(ad.add(x, ad.scale(k1, h / 2)), u)
    k3 = f(ad.add(x, ad.scale(k2, h / 2)), u)
    k4 = f(ad.add(x, ad.scale(k3, h)), u)
    incr = ad.add(ad.add(k1, ad.scale(ad.add(k2, k3), 2.0)), k4)
    return ad.add(x, ad.scale(incr, h / 6))


def _rollout(params, x, u_ports, Ts, steps, theta=None):
    """Outputs at every sample of ``u_ports`` (batch, T, n_p) starting from ``x``."""
    h = Ts / steps
    f = lambda xx, uu: f_and_h(params, xx, uu, theta)[0]
    ys = []
    T = u_ports.shape[1]
    for k in range(T):
        uk = u_ports[:, k]
        k1, yk = f_and_h(params, x, uk, theta)
        ys.append(yk)
        if k == T - 1:
            break
        x = rk4_step(f, x, uk, h, k1=k1)
        for _ in range(steps - 1):
            x = rk4_step(f, x, uk, h)
    return ad.stack(ys, axis=1), x


def truncated_loss(params: PhnnParams, batch, Ts: float, steps: int = 1, theta=None):
    """Mean squared output error over a batch of windows.

    ``batch`` is ``(y_past, u_past, u_window, y_window)`` as produced by
    :class:`WindowSampler`. Averaging is over windows, time and channels, so
    predicting zero on standardised data gives about 1.
    """
    yp, up, uw, yw = batch
    x0 = encoder_forward(params, yp, up, theta)
    yhat, _ = _rollout(params, x0, port_input(uw, params.n_p), Ts, steps, theta)
    if params.n_p > yw.shape[-1]:
        yhat = ad.take(yhat, (Ellipsis, slice(0, yw.shape[-1])))
    return ad.scale(ad.sum_squares(ad.sub(yhat, yw)), 1.0 / yw.size)


def simulate_model(params: PhnnParams, x0, u_ports, Ts, steps=1):
    """Free-run simulation without recording; returns outputs ``(batch, N, n_p)``.

    Stops early (remaining outputs NaN) once the state becomes non-finite.
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    u_ports = np.asarray(u_ports, dtype=float)
    if u_ports.ndim == 2:
        u_ports = u_ports[None]
    N = u_ports.shape[1]
    out = np.full((len(x), N, params.n_p), np.nan)
    h = Ts / steps
    f = lambda xx, uu: f_and_h(params, xx, uu)[0]
    with np.errstate(all="ignore"):
        for k in range(N):
            uk = u_ports[:, k]
            k1, yk = f_and_h(params, x, uk)
            out[:, k] = yk
            if not np.all(np.isfinite(yk)):
                break
            x = rk4_step(f, x, uk, h, k1=k1)
            for _ in range(steps - 1):
                x = rk4_step(f, x, uk, h)
    return out


def simulate_linear_ph(lph: LinearPH, x0, u_ports, Ts, steps=1):
    """RK4 simulation of ``dx = (J - R) x + (G - P) u``, ``y = (G + P)^T x``."""
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    u_ports = np.asarray(u_ports, dtype=float)
    if u_ports.ndim == 2:
        u_ports = u_ports[None]
    N = u_ports.shape[1]
    JR, GP, Cy = lph.J - lph.R, lph.G - lph.P, (lph.G + lph.P).T
    f = lambda xx, uu: ad.add(ad.bmv(JR, xx), ad.bmv(GP, uu))
    out = np.empty((len(x), N, lph.n_p))
    states = np.empty((len(x), N, lph.n_x))
    h = Ts / steps
    for k in range(N):
        uk = u_ports[:, k]
        states[:, k] = x
        out[:, k] = ad.bmv(Cy, x)
        for _ in range(steps):
            x = rk4_step(f, x, uk, h)
    return out, states


def nrmse(y, yhat) -> float:
    """RMS of the error vector norm over the pooled output standard deviation."""
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    y2, e2 = y.reshape(len(y), -1), (y - yhat).reshape(len(y), -1)
    sigma = np.sqrt(np.mean(np.sum((y2 - y2.mean(0)) ** 2, axis=1)))
    if sigma == 0:
        raise ValueError("output has zero standard deviation")
    if not np.all(np.isfinite(yhat)):
        return float("inf")
    return float(np.sqrt(np.mean(np.sum(e2 ** 2, axis=1))) / sigma)


def predict(params: PhnnParams, datasets, std: Standardizer, config: TrainConfig):
    """Free-run predictions in physical units from sample ``lag`` onward.

    The encoder sees the first ``lag`` samples of each record.
    """
    lag = config.lag
    groups: dict[int, list] = {}
    for i, d in enumerate(datasets):
        groups.setdefault(len(d), []).append(i)
    preds = [None] * len(datasets)
    for idx in groups.values():
        us = np.stack([std.u(datasets[i].u) for i in idx])
        ys = np.stack([std.y(datasets[i].y) for i in idx])
        x0 = encoder_forward(params, ys[:, lag - config.n_a:lag], us[:, lag - config.n_b:lag])
        out = simulate_model(params, x0, port_input(us[:, lag:], params.n_p),
                             datasets[idx[0]].Ts, config.rk4_steps)
        for j, i in enumerate(idx):
            preds[i] = std.y_inverse(out[j, :, :datasets[i].y.shape[1]])
    return preds


def evaluate(params: PhnnParams, datasets, std: Standardizer, config: TrainConfig) -> float:
    """Simulation NRMSE pooled over ``datasets`` (samples from ``lag`` onward)."""
    preds = predict(params, datasets, std, config)
    y = np.vstack([d.y[config.lag:] for d in datasets])
    return nrmse(y, np.vstack(preds))


# ------------------------------------------------------------------ training

def _leaves(values, keys):
    leaves = dict(values)
    for k in keys:
        leaves[k] = ad.Tensor(values[k], requires_grad=True, name=k)
    return leaves


def loss_and_grads(params: PhnnParams, batch, Ts, steps=1, keys=None):
    keys = list(params.values) if keys is None else keys
    theta = _leaves(params.values, keys)
    with ad.Tape() as tape:
        loss = truncated_loss(params, batch, Ts, steps, theta)
    grads = ad.backward(tape, loss, [theta[k] for k in keys])
    return float(ad.value(loss)), {k: grads[theta[k]] for k in keys}


def linear_reference_states(lph: LinearPH, datasets, std: Standardizer, Ts, steps=1):
    """States of the linear PH model simulated from zero over each record."""
    out = []
    for d in datasets:
        u = port_input(std.u(d.u), lph.n_p)
        _, states = simulate_linear_ph(lph, np.zeros(lph.n_x), u, Ts, steps)
        if not np.all(np.isfinite(states)):
            raise TrainingAborted("linear PH simulation is unstable; cannot pretrain the encoder")
        out.append(states[0])
    return out


def pretrain_encoder(params: PhnnParams, lph: LinearPH, datasets, std: Standardizer,
                     config: TrainConfig, budget: int | None = None) -> PhnnParams:
    """Fit the encoder alone, keeping the model parameters untouched.

    ``regression`` (default): reference states are simulated once with the
    linear estimate and the encoder regresses onto them, skipping the first
    ``pretrain_washout`` seconds of every record. ``truncated``: the truncated
    loss is minimised over the encoder parameters with the model frozen.
    """
    if params.mode != "nn-linear-init":
        raise ValueError("encoder pretraining needs the nn-linear-init mode")
    budget = config.pretrain_iterations if budget is None else budget
    params = params.copy()
    if budget == 0:
        return params
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(config.lr)
    keys = params.encoder_keys
    Ts = datasets[0].Ts
    if config.pretrain_method == "truncated":
        sampler = WindowSampler(datasets, std, config, rng)
        for _ in range(budget):
            _, grads = loss_and_grads(params, sampler.sample(config.pretrain_batch_size), Ts,
                                      config.rk4_steps, keys)
            opt.step(params.values, grads)
        return params

    refs = linear_reference_states(lph, datasets, std, Ts, config.rk4_steps)
    first = max(config.lag, int(round(config.pretrain_washout / Ts)))
    us = [std.u(d.u) for d in datasets]
    ys = [std.y(d.y) for d in datasets]
    picks = [(i, t) for i, d in enumerate(datasets) for t in range(first, len(d))]
    if not picks:
        raise ValueError("records too short for the pretraining washout")
    rec = np.array([p[0] for p in picks])
    tt = np.array([p[1] for p in picks])
    # all regression pairs, gathered once
    Yp = np.stack([ys[i][t - params.n_a:t] for i, t in picks])
    Up = np.stack([us[i][t - params.n_b:t] for i, t in picks])
    X = np.stack([refs[i][t] for i, t in picks])
    for _ in range(budget):
        j = rng.integers(len(picks), size=config.pretrain_batch_size)
        theta = _leaves(params.values, keys)
        with ad.Tape() as tape:
            xh = encoder_forward(params, Yp[j], Up[j], theta)
            loss = ad.scale(ad.sum_squares(ad.sub(xh, X[j])), 1.0 / X[j].size)
        grads = ad.backward(tape, loss, [theta[k] for k in keys])
        opt.step(params.values, {k: grads[theta[k]] for k in keys})
    return params


def train(params: PhnnParams, config: TrainConfig, train_sets, val_sets,
          std: Standardizer, callback=None) -> TrainState:
    """Adam on the truncated loss with validation-based snapshotting.

    Validation (free-run NRMSE on ``val_sets``) runs before the first update
    and every ``val_period`` iterations; the best parameters are kept.
    """
    params = params.copy()
    Ts = train_sets[0].Ts
    sampler = WindowSampler(train_sets, std, config)
    opt = Adam(config.lr)
    state = TrainState(params=params, best_params=params.copy(), optimizer=opt)

    def validate(it):
        v = evaluate(params, val_sets, std, config)
        state.val_log.append((it, v))
        if np.isfinite(v) and v < state.best_val:
            state.best_val, state.best_iter = v, it
            state.best_params = params.copy()
        if callback is not None:
            callback(it, state)

    t0 = time.perf_counter()
    validate(0)
    consecutive = 0
    for it in range(1, config.iterations + 1):
        batch = sampler.sample(config.batch_size)
        with np.errstate(all="ignore"):
            loss, grads = loss_and_grads(params, batch, Ts, config.rk4_steps)
        ok = np.isfinite(loss) and opt.step(params.values, grads)
        if not ok:
            state.skipped += 1
            consecutive += 1
            if consecutive > 10:
                state.train_time = time.perf_counter() - t0
                raise TrainingAborted(f"more than 10 consecutive non-finite steps at "
                                      f"iteration {it}", state)
        else:
            consecutive = 0
        state.loss_log.append((it, loss))
        if it % config.val_period == 0 or it == config.iterations:
            validate(it)
    state.train_time = time.perf_counter() - t0
    return state
