import json
import subprocess
import sys

import numpy as np
import pytest

from phnnid import experiments as ex
from phnnid.cli import main

SMALL = {
    "msd": {"duration": 30.0},
    "train": {"T": 8, "batch_size": 4, "iterations": 2, "pretrain_iterations": 3,
              "val_period": 1},
    "seeds": [0, 1],
}


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(cfg_file, out, *args):
    return main([*args, "--config", str(cfg_file), "--out", str(out)])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = root / "out"
    assert run(cfg, out, "generate") == 0
    assert run(cfg, out, "linest") == 0
    return cfg, out


def test_generate_writes_eight_records(workspace):
    _, out = workspace
    files = sorted((out / "data" / "snr30").glob("record*.csv"))
    assert [f.stem.split("_")[1] for f in files] == ["train"] * 5 + ["val"] * 2 + ["test"]
    meta = json.loads(files[0].with_suffix(".json").read_text())
    assert len(meta["config_hash"]) == 12


def test_generate_is_reproducible_and_snr_override(workspace, tmp_path):
    cfg, out = workspace
    assert run(cfg, tmp_path / "again", "generate") == 0
    for f in sorted((out / "data" / "snr30").iterdir()):
        assert (tmp_path / "again" / "data" / "snr30" / f.name).read_bytes() == f.read_bytes()
    assert run(cfg, tmp_path / "again", "generate", "--snr", "10") == 0
    meta = json.loads((tmp_path / "again" / "data" / "snr10" / "record0_train.json").read_text())
    assert meta["snr_db"] == 10
    a = np.loadtxt(out / "data" / "snr30" / "record0_train.csv", delimiter=",", skiprows=1)
    b = np.loadtxt(tmp_path / "again" / "data" / "snr10" / "record0_train.csv", delimiter=",",
                   skiprows=1)
    assert not np.allclose(a[:, 2:5], b[:, 2:5])
    np.testing.assert_array_equal(a[:, 5:], b[:, 5:])


def test_linest_outputs(workspace):
    _, out = workspace
    lin = out / "linear" / "snr30"
    for name in ("linear_ph.json", "passivity.json", "bla.json", "standardizer.json"):
        assert (lin / name).exists()
    d = json.loads((lin / "linear_ph.json").read_text())
    assert "val_nrmse_washout" in d["diagnostics"]


@pytest.mark.parametrize("mode", ["linear-direct", "nn-random", "nn-linear-init"])
def test_train_smoke(workspace, mode, capsys):
    cfg, out = workspace
    assert run(cfg, out, "train", "--mode", mode, "--seed", "0") == 0
    d = out / "runs" / "snr30" / mode / "seed0"
    summary = json.loads((d / "summary.json").read_text())
    assert summary["mode"] == mode and np.isfinite(summary["test_nrmse"])
    lines = (d / "log.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and lines[1] == "iter,train_loss,val_nrmse"
    assert len(lines) == 2 + 3
    assert (d / "test_trace.csv").read_text().splitlines()[1].startswith("t,y1,y2,y3,yhat1")
    assert "test NRMSE" in capsys.readouterr().out


def test_linear_init_starts_at_linear_model(workspace):
    from phnnid.linear_ident import Standardizer
    from phnnid.model import load_checkpoint
    from phnnid.ph_construct import load_linear_ph
    from phnnid.training import TrainConfig, port_input, simulate_linear_ph
    cfg, out = workspace
    assert run(cfg, out, "train", "--mode", "nn-linear-init", "--seed", "1") == 0
    d = out / "runs" / "snr30" / "nn-linear-init" / "seed1"
    summary = json.loads((d / "summary.json").read_text())
    # the linear PH model started from the same encoder states gives the same
    # iteration-0 validation NRMSE
    c = ex.ExperimentConfig.load(cfg).replace(output_dir=str(out))
    train, val, _ = ex.load_sets(c)
    std = Standardizer.fit(train)
    lph = load_linear_ph(out / "linear" / "snr30" / "linear_ph.json")
    from phnnid import model as m
    from phnnid.training import pretrain_encoder, nrmse
    tcfg = TrainConfig(**{**summary["train_config"]})
    params = pretrain_encoder(m.init("nn-linear-init", 1, lph), lph, train, std, tcfg)
    ys, yh = [], []
    for v in val:
        us, yv = std.u(v.u), std.y(v.y)
        x0 = m.encoder_forward(params, yv[:10], us[:10])
        sim, _ = simulate_linear_ph(lph, x0, port_input(us[10:], 3), v.Ts)
        ys.append(v.y[10:])
        yh.append(std.y_inverse(sim[0]))
    assert nrmse(np.vstack(ys), np.vstack(yh)) == pytest.approx(summary["initial_val_nrmse"],
                                                                 rel=1e-9)
    assert load_checkpoint(d / "checkpoint.npz").linear is not None


def test_train_is_deterministic(workspace, tmp_path):
    cfg, out = workspace
    assert run(cfg, out, "train", "--mode", "nn-random", "--seed", "1") == 0
    first = (out / "runs" / "snr30" / "nn-random" / "seed1" / "checkpoint.npz").read_bytes()
    assert run(cfg, out, "train", "--mode", "nn-random", "--seed", "1") == 0
    again = (out / "runs" / "snr30" / "nn-random" / "seed1" / "checkpoint.npz").read_bytes()
    assert first == again


def test_linest_direct(workspace):
    cfg, out = workspace
    assert run(cfg, out, "linest", "--direct") == 0
    d = json.loads((out / "linear" / "snr30" / "linear_ph_direct.json").read_text())
    assert d["diagnostics"]["source"] == "linear-direct"
    assert np.allclose(d["Q"], np.eye(6))


def test_report_tables(workspace, capsys):
    cfg, out = workspace
    for mode in ("linear-direct", "nn-random", "nn-linear-init"):
        assert run(cfg, out, "train", "--mode", mode, "--seed", "0") == 0
    assert run(cfg, out, "report") == 0
    assert "missing runs" in capsys.readouterr().out  # seed 1 absent for two modes
    rep = out / "report" / "snr30"
    box = [ln for ln in (rep / "boxplot.csv").read_text().splitlines() if not ln.startswith("#")]
    assert len(box) == 1 + 3
    conv = [ln for ln in (rep / "convergence.csv").read_text().splitlines()
            if not ln.startswith("#")]
    assert len(conv) == 1 + 3 * 3  # three validation points per mode
    for mode in ("linear-direct", "nn-random", "nn-linear-init"):
        iters = [int(ln.split(",")[1]) for ln in conv[1:] if ln.startswith(mode + ",")]
        assert iters == sorted(iters) == [0, 1, 2]
    trace = [ln for ln in (rep / "test_trace.csv").read_text().splitlines()
             if not ln.startswith("#")]
    assert trace[0] == "mode,t,channel,y,mean_yhat,std_yhat"
    assert (rep / "missing.txt").exists()


def test_sweep(tmp_path, cfg_file):
    out = tmp_path / "sw"
    assert run(cfg_file, out, "sweep", "--snrs", "20", "--seeds", "1") == 0
    lines = [ln for ln in (out / "sweep.csv").read_text().splitlines() if not ln.startswith("#")]
    assert lines[0] == "snr_db,n_ok,n_failed,mean_nrmse,min_nrmse,noise_floor"
    assert lines[1].startswith("20,1,0,")


def test_usage_errors_exit_1(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "learning_rate" in capsys.readouterr().err
    bad.write_text(json.dumps({"colour": 1}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 1
    # missing inputs
    assert run(cfg_file, tmp_path / "empty", "train", "--mode", "nn-random") == 1
    assert run(cfg_file, tmp_path / "empty", "report") == 1
    with pytest.raises(SystemExit) as info:
        main(["train", "--mode", "bogus"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_nn_linear_init_requires_linest(tmp_path, cfg_file):
    out = tmp_path / "o"
    assert run(cfg_file, out, "generate") == 0
    assert run(cfg_file, out, "train", "--mode", "nn-linear-init") == 1


def test_numerical_failure_exits_2(tmp_path, capsys):
    # a huge learning rate drives the constant-matrix model to overflow
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"msd": {"duration": 30.0},
                               "train": {"T": 8, "batch_size": 4, "iterations": 40,
                                         "lr": 1e6, "val_period": 100}}))
    out = tmp_path / "o"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    code = main(["train", "--mode", "linear-direct", "--config", str(cfg), "--out", str(out)])
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.ENV_OUTPUT, str(tmp_path / "env"))
    assert ex.output_root(ex.ExperimentConfig()) == tmp_path / "env"
    assert ex.output_root(ex.ExperimentConfig(output_dir="x")).name == "x"


def test_config_round_trip_and_hash():
    cfg = ex.ExperimentConfig.from_dict(SMALL)
    back = ex.ExperimentConfig.from_dict(cfg.to_dict())
    assert ex.config_hash(back) == ex.config_hash(cfg)
    assert ex.config_hash(cfg.replace(output_dir="elsewhere", train={"seed": 5})) == \
        ex.config_hash(cfg)
    assert ex.config_hash(cfg.replace(train={"lr": 0.01})) != ex.config_hash(cfg)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "phnnid.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "linest" in res.stdout
