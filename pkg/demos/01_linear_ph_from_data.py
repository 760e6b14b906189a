"""From measured data to a linear port-Hamiltonian model.

Simulates the three-mass chain, fits a best linear approximation by subspace
identification, converts it to continuous time and turns it into a
normalised PH realisation through the KYP inequality. Prints how far the
passivity repair moved the model.
"""
import warnings

import numpy as np

from phnnid.linear_ident import Standardizer, d2c, freq_response, pad_ports, subspace_id
from phnnid.msd import MsdConfig, make_experiment_set
from phnnid.ph_construct import estimate_linear_ph, omega_grid, passivity_report
from phnnid.training import nrmse, port_input, simulate_linear_ph

cfg = MsdConfig(snr_db=30)
sets = make_experiment_set(cfg)
train = [d for d in sets if d.role == "train"]
test = [d for d in sets if d.role == "test"][0]
print(f"{len(sets)} records of {len(test)} samples, Ts = {cfg.Ts} s")

# standardised data keep the identification well conditioned
std = Standardizer.fit(train)
bla = subspace_id([(std.u(d.u), std.y(d.y)) for d in train], n_x=6, horizon=20, Ts=cfg.Ts)
ct = pad_ports(d2c(bla), 3)
print("continuous-time poles:", np.round(np.linalg.eigvals(ct.A), 3))

with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    lph = estimate_linear_ph(ct, omega=omega_grid(cfg.Ts))
for w in caught:
    print("note:", w.message)

diag = lph.diagnostics
print(f"KYP feasible: {diag['kyp_feasible']} (ports used: {diag['kyp_ports']})")
print(f"storage matrix repair distance: {diag['q_projection_distance']:.3g}")
print(f"dissipation repair distance:    {diag['r_projection_distance']:.3g}")
print(f"max relative frequency-response change: {diag['freq_max_rel_deviation']:.3g}")

rep = passivity_report(lph)
print(f"min eig R = {rep['min_eig_R']:.3g}, skew defect of J = {rep['skew_defect_J']:.1e}")

# free-run test simulation from rest, skipping the initial-condition transient
out, _ = simulate_linear_ph(lph, np.zeros(6), port_input(std.u(test.u), 3), cfg.Ts)
yhat = std.y_inverse(out[0])
first = 100
print(f"test NRMSE after {first * cfg.Ts:g} s washout: {nrmse(test.y[first:], yhat[first:]):.4f}")
H_bla = freq_response(ct, omega_grid(cfg.Ts))
print(f"peak gain of the estimate: {np.abs(H_bla).max():.3f}")
