"""What the structured model guarantees, checked numerically.

For each parametrisation: J is skew, R is positive semidefinite, the energy
is bounded below, and the power balance
dH/dt = -dH^T R dH - 2 dH^T P u + y^T u holds pointwise. The linear-initialised
model starts out identical to its linear PH seed.
"""
import numpy as np

from phnnid import model as m
from phnnid.ph_construct import LinearPH
from phnnid.training import simulate_linear_ph, simulate_model

rng = np.random.default_rng(0)
M = rng.standard_normal((6, 6))
lin = LinearPH(J=0.5 * (M - M.T), R=0.2 * np.eye(6), G=rng.standard_normal((6, 3)),
               P=np.zeros((6, 3)), V=np.eye(6))

x = rng.standard_normal((500, 6)) * 2
u = rng.standard_normal((500, 3))
for mode in m.MODES:
    params = m.init(mode, seed=1, linear=lin)
    for k in params.model_keys:  # move away from the initial point
        params.values[k] += 0.3 * rng.standard_normal(params.values[k].shape)
    J, R, G, P = (np.broadcast_to(a, (500,) + a.shape[-2:]) for a in m.eval_matrices(params, x))
    H, dH = m.hamiltonian_and_grad(params, x)
    dx, y = m.f_and_h(params, x, u)
    balance = (np.sum(dH * dx, 1) + np.einsum("bi,bij,bj->b", dH, R, dH)
               + 2 * np.einsum("bi,bij,bj->b", dH, P, u) - np.sum(y * u, 1))
    print(f"{mode:15s} params {params.n_params():6d}  |J+J^T| {np.abs(J + J.transpose(0, 2, 1)).max():.1e}"
          f"  min eig R {np.linalg.eigvalsh(R).min():+.1e}  min H {H.min():+.3f}"
          f"  balance residual {np.abs(balance).max():.1e}")

params = m.init("nn-linear-init", seed=0, linear=lin)
useq = rng.standard_normal((200, 3))
x0 = rng.standard_normal(6)
dev = np.abs(simulate_model(params, x0, useq, 0.1) - simulate_linear_ph(lin, x0, useq, 0.1)[0]).max()
print(f"nn-linear-init vs linear PH over 200 steps: max deviation {dev:.1e}")
