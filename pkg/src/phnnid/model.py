"""Structured port-Hamiltonian network model.

State evolution and output map

    dx/dt = (J(x) - R(x)) dH(x) + (G(x) - P(x)) u
    y     = (G(x) + P(x))^T dH(x)

with ``J = A(x) - A(x)^T`` and ``R = B(x) B(x)^T`` built from MLP outputs, and a
Hamiltonian ``elu(mlp(x))`` whose input gradient is assembled layer by layer
from activation-derivative primitives. Three parametrisations are supported:

``nn-random``
    every matrix and the Hamiltonian come from randomly initialised MLPs;
``nn-linear-init``
    a fixed linear PH estimate plus MLP corrections whose final layers start
    at zero, so the model initially *is* the linear estimate. The dissipation
    network perturbs a square-root factor of ``R_lin``:
    ``R = (L + B)(L + B)^T`` with ``L L^T = R_lin``;
``linear-direct``
    constant free matrices, ``Q = L L^T`` and ``H = x^T Q x / 2``.

All functions accept either the stored arrays or a dict of autodiff tensors
as ``theta``; batched states have shape ``(batch, n_x)``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ph_construct import LinearPH

__all__ = [
    "MODES", "PhnnParams", "init", "eval_matrices", "hamiltonian_and_grad",
    "grad_hamiltonian", "f_theta", "h_theta", "f_and_h", "encoder_forward",
    "mlp", "save_checkpoint", "load_checkpoint", "MATRIX_NETS",
]

MODES = ("linear-direct", "nn-random", "nn-linear-init")
MATRIX_NETS = ("A", "B", "G", "P")
CHECKPOINT_VERSION = 1


@dataclass
class PhnnParams:
    """Trainable arrays plus the static structure they belong to."""

    mode: str
    values: dict
    n_x: int = 6
    n_p: int = 3
    n_u: int = 1
    n_y: int = 3
    n_a: int = 10
    n_b: int = 10
    hidden: int = 16
    enc_hidden: int = 64
    linear: LinearPH | None = None
    meta: dict = field(default_factory=dict)

    @property
    def encoder_keys(self) -> list[str]:
        return [k for k in self.values if k.startswith("enc.")]

    @property
    def model_keys(self) -> list[str]:
        return [k for k in self.values if not k.startswith("enc.")]

    def copy(self) -> "PhnnParams":
        return PhnnParams(self.mode, {k: v.copy() for k, v in self.values.items()},
                          self.n_x, self.n_p, self.n_u, self.n_y, self.n_a, self.n_b,
                          self.hidden, self.enc_hidden, self.linear, dict(self.meta))

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _mlp_init(rng, prefix, widths, zero_last=False):
    out = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        last = i == len(widths) - 1
        out[f"{prefix}.W{i}"] = np.zeros((a, b)) if (last and zero_last) else _glorot(rng, a, b)
        out[f"{prefix}.b{i}"] = np.zeros(b)
    return out


def init(mode: str, seed: int = 0, linear: LinearPH | None = None, n_x: int = 6,
         n_p: int = 3, n_u: int = 1, n_y: int = 3, n_a: int = 10, n_b: int = 10,
         hidden: int = 16, enc_hidden: int = 64) -> PhnnParams:
    """Fresh parameters for ``mode``.

    Hidden layers are Glorot-uniform and biases zero. In ``nn-linear-init``
    the final layer of each of the five model networks is exactly zero and
    ``linear`` must be given.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "nn-linear-init" and linear is None:
        raise ValueError("nn-linear-init needs a linear PH estimate")
    if linear is not None and (linear.n_x != n_x or linear.n_p != n_p):
        raise ValueError(f"linear estimate has n_x={linear.n_x}, n_p={linear.n_p}; "
                         f"model expects {n_x}, {n_p}")
    rng = np.random.default_rng(seed)
    v = {}
    n_in = n_a * n_y + n_b * n_u
    v["enc.lin.W"] = _glorot(rng, n_in, n_x)
    v["enc.lin.b"] = np.zeros(n_x)
    v.update(_mlp_init(rng, "enc", [n_in, enc_hidden, enc_hidden, n_x]))
    if mode == "linear-direct":
        v["Ac"] = 0.1 * rng.standard_normal((n_x, n_x))
        v["Bc"] = 0.1 * rng.standard_normal((n_x, n_x))
        v["Gc"] = 0.1 * rng.standard_normal((n_x, n_p))
        v["Pc"] = 0.1 * rng.standard_normal((n_x, n_p))
        v["Lc"] = np.eye(n_x) + 0.1 * rng.standard_normal((n_x, n_x))
    else:
        zero = mode == "nn-linear-init"
        outs = {"A": n_x * n_x, "B": n_x * n_x, "G": n_x * n_p, "P": n_x * n_p, "H": 1}
        for name, n_out in outs.items():
            v.update(_mlp_init(rng, name, [n_x, hidden, hidden, n_out], zero_last=zero))
    return PhnnParams(mode, v, n_x, n_p, n_u, n_y, n_a, n_b, hidden, enc_hidden,
                      linear if mode == "nn-linear-init" else None)


# -------------------------------------------------------------------- pieces

def mlp(theta, prefix: str, x, n_layers: int = 3):
    """tanh hidden layers, linear output."""
    h = x
    for i in range(1, n_layers + 1):
        h = ad.add(ad.matmul(h, theta[f"{prefix}.W{i}"]), theta[f"{prefix}.b{i}"])
        if i < n_layers:
            h = ad.tanh(h)
    return h


def _theta(params: PhnnParams, theta):
    return params.values if theta is None else theta


def _batched(x):
    xv = ad.value(x)
    if xv.ndim == 1:
        return ad.reshape(x, (1, xv.shape[0])), True
    return x, False


def eval_matrices(params: PhnnParams, x, theta=None):
    """``(J, R, G, P)`` at the (batched) state ``x``.

    Shapes are ``(batch, n_x, n_x)`` / ``(batch, n_x, n_p)``; in
    ``linear-direct`` mode the matrices carry no batch axis.
    """
    th = _theta(params, theta)
    n, p = params.n_x, params.n_p
    if params.mode == "linear-direct":
        Ac, Bc = th["Ac"], th["Bc"]
        return (ad.sub(Ac, ad.transpose(Ac)), ad.matmul(Bc, ad.transpose(Bc)),
                th["Gc"], th["Pc"])
    b = ad.value(x).shape[0]
    A = ad.reshape(mlp(th, "A", x), (b, n, n))
    B = ad.reshape(mlp(th, "B", x), (b, n, n))
    J = ad.sub(A, ad.transpose(A))
    R = ad.matmul(B, ad.transpose(B))
    G = ad.reshape(mlp(th, "G", x), (b, n, p))
    P = ad.reshape(mlp(th, "P", x), (b, n, p))
    lin = params.linear
    if params.mode == "nn-linear-init":
        # R = (L + B)(L + B)^T with L L^T = R_lin, expanded so that B = 0 gives
        # R_lin exactly; B B^T alone has a vanishing gradient at B = 0
        L = _sqrt_psd(lin.R)
        LB = ad.matmul(L, ad.transpose(B))
        R = ad.add(ad.add(LB, ad.transpose(LB)), R)
        J, R = ad.add(lin.J, J), ad.add(lin.R, R)
        G, P = ad.add(lin.G, G), ad.add(lin.P, P)
    return J, R, G, P


def _sqrt_psd(R: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (R + R.T))
    return (U * np.sqrt(np.maximum(w, 0.0))) @ U.T


def _hnn_forward(th, x):
    z1 = ad.add(ad.matmul(x, th["H.W1"]), th["H.b1"])
    z2 = ad.add(ad.matmul(ad.tanh(z1), th["H.W2"]), th["H.b2"])
    z3 = ad.add(ad.matmul(ad.tanh(z2), th["H.W3"]), th["H.b3"])
    return z1, z2, z3


def _hnn_input_grad(th, z1, z2, z3):
    # chain rule through the layers, recorded with derivative primitives so the
    # parameter gradient can flow through it
    g = ad.matmul(ad.elu_d(z3), ad.transpose(th["H.W3"]))
    g = ad.matmul(ad.mul(g, ad.tanh_d(z2)), ad.transpose(th["H.W2"]))
    return ad.matmul(ad.mul(g, ad.tanh_d(z1)), ad.transpose(th["H.W1"]))


def hamiltonian_and_grad(params: PhnnParams, x, theta=None):
    """``(H(x), dH/dx(x))`` with shapes ``(batch, 1)`` and ``(batch, n_x)``."""
    th = _theta(params, theta)
    x, single = _batched(x)
    if params.mode == "linear-direct":
        Q = ad.matmul(th["Lc"], ad.transpose(th["Lc"]))
        dH = ad.matmul(x, Q)
        H = ad.scale(ad.sum_squares(ad.matmul(x, th["Lc"]), axis=-1), 0.5)
    else:
        z1, z2, z3 = _hnn_forward(th, x)
        H = ad.elu(z3)
        dH = _hnn_input_grad(th, z1, z2, z3)
        if params.mode == "nn-linear-init":
            # Q_lin = I after normalisation
            H = ad.add(ad.scale(ad.sum_squares(x, axis=-1), 0.5), H)
            dH = ad.add(x, dH)
    if single:
        return ad.reshape(H, (1,)), ad.reshape(dH, (params.n_x,))
    return H, dH


def grad_hamiltonian(params: PhnnParams, x, theta=None):
    th = _theta(params, theta)
    if params.mode == "linear-direct":
        return ad.matmul(x, ad.matmul(th["Lc"], ad.transpose(th["Lc"])))
    dH = _hnn_input_grad(th, *_hnn_forward(th, x))
    if params.mode == "nn-linear-init":
        dH = ad.add(x, dH)
    return dH


def f_and_h(params: PhnnParams, x, u, theta=None):
    """State derivative and output at ``x`` (batched), sharing one matrix evaluation.

    ``u`` holds port inputs, shape ``(batch, n_p)``.
    """
    J, R, G, P = eval_matrices(params, x, theta)
    dH = grad_hamiltonian(params, x, theta)
    dx = ad.add(ad.bmv(ad.sub(J, R), dH), ad.bmv(ad.sub(G, P), u))
    y = ad.bmv(ad.transpose(ad.add(G, P)), dH)
    return dx, y


def f_theta(params: PhnnParams, x, u, theta=None):
    x, single = _batched(x)
    u, _ = _batched(u)
    dx = f_and_h(params, x, u, theta)[0]
    return ad.reshape(dx, (params.n_x,)) if single else dx


def h_theta(params: PhnnParams, x, theta=None):
    x, single = _batched(x)
    J, R, G, P = eval_matrices(params, x, theta)
    y = ad.bmv(ad.transpose(ad.add(G, P)), grad_hamiltonian(params, x, theta))
    return ad.reshape(y, (params.n_p,)) if single else y


def encoder_forward(params: PhnnParams, y_past, u_past, theta=None):
    """Initial-state estimate from lag windows.

    ``y_past`` is ``(batch, n_a, n_y)`` and ``u_past`` ``(batch, n_b, n_u)``,
    oldest sample first. Residual form: linear map plus MLP correction.
    """
    th = _theta(params, theta)
    y_past, u_past = np.asarray(y_past, float), np.asarray(u_past, float)
    single = y_past.ndim == 2
    if single:
        y_past, u_past = y_past[None], u_past[None]
    if y_past.shape[1:] != (params.n_a, params.n_y) or u_past.shape[1:] != (params.n_b, params.n_u):
        raise ValueError(f"encoder windows must be ({params.n_a}, {params.n_y}) and "
                         f"({params.n_b}, {params.n_u}); got {y_past.shape[1:]} and "
                         f"{u_past.shape[1:]} (offset window starts by max(n_a, n_b))")
    z = np.concatenate([y_past.reshape(len(y_past), -1), u_past.reshape(len(u_past), -1)], axis=1)
    x = ad.add(ad.add(ad.matmul(z, th["enc.lin.W"]), th["enc.lin.b"]), mlp(th, "enc", z))
    return ad.reshape(x, (params.n_x,)) if single else x


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(params: PhnnParams, path, extra: dict | None = None) -> Path:
    """``.npz`` archive: arrays verbatim plus a JSON header with shapes and mode."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION, "mode": params.mode,
        "dims": {k: getattr(params, k) for k in
                 ("n_x", "n_p", "n_u", "n_y", "n_a", "n_b", "hidden", "enc_hidden")},
        "shapes": {k: list(v.shape) for k, v in params.values.items()},
        "has_linear": params.linear is not None,
        "meta": params.meta, "extra": extra or {},
    }
    arrays = {f"theta/{k}": v for k, v in params.values.items()}
    if params.linear is not None:
        lin = params.linear
        for k in ("J", "R", "G", "P", "V", "Q"):
            arrays[f"linear/{k}"] = getattr(lin, k)
        header["linear_diagnostics"] = lin.to_dict()["diagnostics"]
    arrays["header"] = np.array(json.dumps(header))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> PhnnParams:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        values = {k: z[f"theta/{k}"].copy() for k in header["shapes"]}
        linear = None
        if header["has_linear"]:
            linear = LinearPH(**{k: z[f"linear/{k}"].copy() for k in ("J", "R", "G", "P", "V", "Q")},
                              diagnostics=header.get("linear_diagnostics", {}))
    for k, shape in header["shapes"].items():
        if list(values[k].shape) != shape:
            raise ValueError(f"array {k} has shape {values[k].shape}, header says {shape}")
    return PhnnParams(header["mode"], values, linear=linear, meta=header.get("meta", {}),
                      **header["dims"])
