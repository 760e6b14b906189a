import numpy as np
import pytest

from phnnid import autodiff as ad
from phnnid import model as m
from phnnid import training as tr
from phnnid.linear_ident import Standardizer
from phnnid.msd import Dataset
from phnnid.ph_construct import LinearPH

TS = 0.1


def stable_linear(seed=0, n=6, p=3):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    return LinearPH(J=0.5 * (M - M.T), R=0.3 * np.eye(n), G=rng.standard_normal((n, p)) * 0.5,
                    P=np.zeros((n, p)), V=np.eye(n))


def linear_records(lph, n_rec=4, N=300, seed=1):
    rng = np.random.default_rng(seed)
    t = np.arange(N) * TS
    out = []
    for _ in range(n_rec):
        f = rng.uniform(0.05, 1.5, 8)
        ph = rng.uniform(0, 2 * np.pi, 8)
        u = np.sin(2 * np.pi * f * t[:, None] + ph).sum(1, keepdims=True) / 2
        y, _ = tr.simulate_linear_ph(lph, np.zeros(lph.n_x), tr.port_input(u, lph.n_p), TS)
        out.append(Dataset(u=u, y=y[0], Ts=TS))
    return out


IDENTITY = Standardizer(np.zeros(1), np.ones(1), np.zeros(3), np.ones(3))


@pytest.fixture(scope="module")
def lph():
    return stable_linear()


@pytest.fixture(scope="module")
def records(lph):
    return linear_records(lph)


def test_rk4_step_order():
    f = lambda x, u: -x + u
    errs = []
    for h in (0.2, 0.1):
        x = tr.rk4_step(f, np.array([1.0]), np.array([0.0]), h)
        errs.append(abs(x[0] - np.exp(-h)))
    assert 28 < errs[0] / errs[1] < 36  # local error O(h^5)
    # held input: exact solution of dx = -x + 1 from 0
    x = tr.rk4_step(f, np.array([0.0]), np.array([1.0]), 0.1)
    assert x[0] == pytest.approx(1 - np.exp(-0.1), abs=1e-7)


def test_rk4_step_against_matrix_exponential():
    from scipy.linalg import expm
    rng = np.random.default_rng(1)
    h = 0.1
    for _ in range(10):
        A = rng.standard_normal((4, 4)) - 2 * np.eye(4)
        x = rng.standard_normal(4)
        step = tr.rk4_step(lambda xx, u: A @ xx, x, None, h)
        bound = np.linalg.norm(A, 2) ** 5 * h ** 5 / 120 * np.linalg.norm(x)
        assert np.linalg.norm(step - expm(A * h) @ x) < bound


def test_nrmse_examples():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((500, 3))
    assert tr.nrmse(y, y) == 0.0
    assert tr.nrmse(y, np.broadcast_to(y.mean(0), y.shape)) == pytest.approx(1.0)
    assert tr.nrmse(y, y + np.nan) == np.inf
    with pytest.raises(ValueError, match="shape"):
        tr.nrmse(y, y[:, :2])
    with pytest.raises(ValueError, match="zero standard"):
        tr.nrmse(np.ones((5, 1)), np.ones((5, 1)))


def test_adam_first_step_and_skip():
    values = {"a": np.array([1.0, -1.0]), "b": np.zeros((2, 2))}
    opt = tr.Adam(lr=0.01)
    assert opt.step(values, {"a": np.array([3.0, -0.5]), "b": np.ones((2, 2))})
    # bias-corrected first step moves every entry by lr * sign(g)
    np.testing.assert_allclose(values["a"], [0.99, -0.99], atol=1e-9)
    np.testing.assert_allclose(values["b"], -0.01, atol=1e-9)
    before = {k: v.copy() for k, v in values.items()}
    assert not opt.step(values, {"a": np.array([np.nan, 1.0]), "b": np.ones((2, 2))})
    assert opt.skipped == 1 and opt.t == 1
    for k in values:
        np.testing.assert_array_equal(values[k], before[k])


def test_adam_minimises_quadratic():
    values = {"x": np.array([3.0, -2.0])}
    opt = tr.Adam(lr=0.05)
    for _ in range(2000):
        opt.step(values, {"x": 2 * values["x"]})
    np.testing.assert_allclose(values["x"], 0, atol=1e-3)


def test_adam_constant_gradient_steps_approach_lr():
    values = {"w": np.zeros(3)}
    opt = tr.Adam(lr=1e-3)
    g = {"w": np.array([5.0, -0.01, 200.0])}
    for _ in range(500):
        before = values["w"].copy()
        opt.step(values, g)
    np.testing.assert_allclose(np.abs(values["w"] - before), 1e-3, rtol=1e-4)


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(T=1)
    with pytest.raises(ValueError):
        tr.TrainConfig(pretrain_method="magic")
    assert tr.TrainConfig(n_a=4, n_b=12).lag == 12


def test_window_sampler(records):
    cfg = tr.TrainConfig(T=20)
    s = tr.WindowSampler(records, IDENTITY, cfg)
    assert len(s.starts) == 4 * (300 - 20 - 10 + 1)
    yp, up, uw, yw = s.windows([(1, 10)])
    np.testing.assert_array_equal(yp[0], records[1].y[:10])
    np.testing.assert_array_equal(yw[0], records[1].y[10:30])
    np.testing.assert_array_equal(uw[0], records[1].u[10:30])
    assert s.sample(5)[3].shape == (5, 20, 3)
    tr.check_window(300, 10, cfg)
    with pytest.raises(IndexError):
        tr.check_window(300, 9, cfg)
    with pytest.raises(IndexError):
        tr.check_window(300, 281, cfg)
    with pytest.raises(ValueError, match="too short"):
        tr.WindowSampler([Dataset(u=np.zeros(25), y=np.zeros((25, 3)), Ts=TS)], IDENTITY, cfg)


def test_truncated_loss_of_silent_model(records):
    # zero output matrices: loss is the mean square of the target windows
    params = m.init("nn-random", seed=0)
    for k in ("G.W3", "G.b3", "P.W3", "P.b3"):
        params.values[k][:] = 0
    batch = tr.WindowSampler(records, IDENTITY, tr.TrainConfig(T=10)).sample(4)
    loss = tr.truncated_loss(params, batch, TS)
    assert float(loss) == pytest.approx(np.mean(batch[3] ** 2), rel=1e-12)


@pytest.mark.parametrize("mode", m.MODES)
def test_truncated_loss_gradients(mode, lph, records):
    rng = np.random.default_rng(2)
    params = m.init(mode, seed=0, linear=lph)
    for k in params.values:  # nonzero heads so every path carries gradient
        params.values[k] = params.values[k] + 0.1 * rng.standard_normal(params.values[k].shape)
    batch = tr.WindowSampler(records, IDENTITY, tr.TrainConfig(T=5)).sample(2)
    err = ad.grad_check(lambda th: tr.truncated_loss(params, batch, TS, theta=th),
                        params.values, max_entries=6)
    assert err < 1e-5


def test_linear_init_matches_linear_simulation(lph, records):
    params = m.init("nn-linear-init", seed=0, linear=lph)
    u = tr.port_input(records[0].u, 3)
    x0 = np.random.default_rng(3).standard_normal(6)
    y_lin, _ = tr.simulate_linear_ph(lph, x0, u, TS)
    np.testing.assert_allclose(tr.simulate_model(params, x0, u, TS), y_lin, atol=1e-10)


def test_simulate_linear_ph_against_exact_discretisation(lph, records):
    from scipy.linalg import expm
    n, p = lph.n_x, lph.n_p
    Mbig = np.zeros((n + p, n + p))
    Mbig[:n, :n], Mbig[:n, n:] = lph.J - lph.R, lph.G - lph.P
    E = expm(Mbig * TS)
    Ad, Bd = E[:n, :n], E[:n, n:]
    u = tr.port_input(records[0].u, p)
    x = np.zeros(n)
    y = []
    for uk in u:
        y.append((lph.G + lph.P).T @ x)
        x = Ad @ x + Bd @ uk
    out, _ = tr.simulate_linear_ph(lph, np.zeros(n), u, TS, steps=4)
    np.testing.assert_allclose(out[0], np.array(y), atol=1e-7)


def test_simulate_model_stops_on_blowup():
    # R = 100 I with a unit step is far outside the RK4 stability region
    params = m.init("linear-direct", seed=0)
    params.values.update(Ac=np.zeros((6, 6)), Bc=10 * np.eye(6), Lc=np.eye(6),
                         Gc=np.ones((6, 3)), Pc=np.zeros((6, 3)))
    out = tr.simulate_model(params, np.ones(6), np.zeros((400, 3)), 1.0)
    assert out.shape == (1, 400, 3)
    assert np.isnan(out[0, -1]).all() and np.isfinite(out[0, 0]).all()
    assert tr.nrmse(np.random.default_rng(0).standard_normal((400, 3)), out[0]) == np.inf


def test_pretraining_budget_zero_is_identity(lph, records):
    params = m.init("nn-linear-init", seed=0, linear=lph)
    out = tr.pretrain_encoder(params, lph, records, IDENTITY, tr.TrainConfig(), budget=0)
    for k in params.values:
        np.testing.assert_array_equal(out.values[k], params.values[k])
    with pytest.raises(ValueError, match="nn-linear-init"):
        tr.pretrain_encoder(m.init("nn-random"), lph, records, IDENTITY, tr.TrainConfig())


def test_pretraining_regresses_onto_linear_states(lph, records):
    cfg = tr.TrainConfig(pretrain_washout=5.0, lr=3e-3)
    params = m.init("nn-linear-init", seed=0, linear=lph)
    refs = tr.linear_reference_states(lph, records, IDENTITY, TS)

    def enc_rmse(p):
        ys = np.stack([d.y for d in records])
        us = np.stack([d.u for d in records])
        errs = []
        for t in range(50, 300, 10):
            xh = m.encoder_forward(p, ys[:, t - 10:t], us[:, t - 10:t])
            errs.append(xh - np.stack([r[t] for r in refs]))
        return np.sqrt(np.mean(np.square(errs)))

    def one_step_rmse(p):
        # encoder state at t, one linear step, compare outputs at t and t + 1
        errs = []
        for d in records:
            for t in range(50, 298, 10):
                xh = m.encoder_forward(p, d.y[t - 10:t], d.u[t - 10:t])
                yh, _ = tr.simulate_linear_ph(lph, xh, tr.port_input(d.u[t:t + 2], 3), TS)
                errs.append(yh[0] - d.y[t:t + 2])
        return np.sqrt(np.mean(np.square(errs)))

    before, before_y = enc_rmse(params), one_step_rmse(params)
    out = tr.pretrain_encoder(params, lph, records, IDENTITY, cfg, budget=1500)
    assert enc_rmse(out) / before < 0.2
    assert one_step_rmse(out) / before_y < 0.2
    for k in params.model_keys:
        np.testing.assert_array_equal(out.values[k], params.values[k])


def test_train_keeps_best_snapshot(lph, records):
    cfg = tr.TrainConfig(T=10, batch_size=8, iterations=30, val_period=10, lr=3e-3)
    params = m.init("linear-direct", seed=0)
    seen = []
    state = tr.train(params, cfg, records[:3], records[3:], IDENTITY,
                     callback=lambda it, s: seen.append(it))
    assert seen == [0, 10, 20, 30]
    assert [it for it, _ in state.val_log] == seen
    assert len(state.loss_log) == 30
    assert state.best_val == min(v for _, v in state.val_log)
    assert tr.evaluate(state.best_params, records[3:], IDENTITY, cfg) == pytest.approx(
        state.best_val, rel=1e-12)
    assert state.loss_log[-1][1] < state.loss_log[0][1]


def test_train_aborts_after_repeated_nonfinite_steps(records):
    cfg = tr.TrainConfig(T=5, batch_size=2, iterations=20, val_period=100)
    params = m.init("linear-direct", seed=0)
    params.values["Gc"][:] = np.nan
    with pytest.raises(tr.TrainingAborted, match="consecutive") as info:
        tr.train(params, cfg, records[:2], records[2:3], IDENTITY)
    assert info.value.state.skipped == 11


def test_predict_returns_physical_units(records):
    std = Standardizer.fit(records)
    params = m.init("nn-random", seed=0)
    preds = tr.predict(params, records[:2], std, tr.TrainConfig())
    assert preds[0].shape == (290, 3)
    assert np.all(np.isfinite(preds[0]))


@pytest.mark.slow
def test_linear_direct_learns_noiseless_linear_system(lph):
    recs = linear_records(lph, n_rec=6, N=400)
    cfg = tr.TrainConfig(T=50, batch_size=32, iterations=1000, lr=3e-3, val_period=100)
    state = tr.train(m.init("linear-direct", 0), cfg, recs[:4], recs[4:], IDENTITY)
    assert state.val_log[0][1] > 0.9
    assert state.best_val < 1e-2


def test_pretrained_encoder_tracks_linear_states_on_held_out_records():
    import warnings
    from phnnid.linear_ident import d2c, pad_ports, subspace_id
    from phnnid.msd import MsdConfig, make_experiment_set
    from phnnid.ph_construct import estimate_linear_ph, omega_grid
    sets = make_experiment_set(MsdConfig(snr_db=30))
    train = [d for d in sets if d.role == "train"]
    val = [d for d in sets if d.role == "val"]
    std = Standardizer.fit(train)
    est = subspace_id([(std.u(d.u), std.y(d.y)) for d in train], 6, 20, Ts=TS)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lin = estimate_linear_ph(pad_ports(d2c(est)), omega=omega_grid(TS))
    cfg = tr.TrainConfig()
    params = tr.pretrain_encoder(m.init("nn-linear-init", 0, lin), lin, train, std, cfg,
                                 budget=3000)
    refs = tr.linear_reference_states(lin, val, std, TS)
    errs = []
    for d, ref in zip(val, refs):
        us, ys = std.u(d.u), std.y(d.y)
        ts = np.arange(100, len(d))
        xh = m.encoder_forward(params, np.stack([ys[t - 10:t] for t in ts]),
                               np.stack([us[t - 10:t] for t in ts]))
        errs.append(xh - ref[ts])
    assert np.sqrt(np.mean(np.square(errs))) <= 0.1
