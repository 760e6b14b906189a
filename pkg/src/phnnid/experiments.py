"""Study orchestration: data generation, linear estimates, training runs, sweeps
and aggregated tables.

Output layout under the output root::

    data/snr<S>/record<i>_<role>.{csv,json}
    linear/snr<S>/linear_ph.json, passivity.json, bla.json, standardizer.json
    runs/snr<S>/<mode>/seed<K>/checkpoint.npz, log.csv, test_trace.csv, summary.json
    sweep.csv, sweep.json
    report/snr<S>/convergence.csv, test_trace.csv, boxplot.csv

Every artifact carries the configuration hash and the seed that produced it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .linear_ident import (Standardizer, d2c, pad_ports, save_state_space, subspace_id)
from .model import MODES, init, load_checkpoint, save_checkpoint
from .msd import ROLES, MsdConfig, load_dataset, make_experiment_set, save_dataset
from .ph_construct import (LinearPH, RawPH, cholesky_normalize, estimate_linear_ph,
                           load_linear_ph, omega_grid, passivity_report, save_linear_ph, _jsonable)
from .training import (TrainConfig, TrainingAborted, evaluate, nrmse, port_input,
                       predict, pretrain_encoder, simulate_linear_ph, train)

__all__ = [
    "ExperimentConfig", "UsageError", "ENV_OUTPUT", "config_hash", "output_root",
    "cmd_generate", "cmd_linest", "cmd_train", "cmd_sweep", "cmd_report",
]

log = logging.getLogger(__name__)

ENV_OUTPUT = "PHNNID_OUTPUT"


class UsageError(ValueError):
    """Bad configuration or missing inputs (CLI exit code 1)."""


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise UsageError(f"config section {name!r} must be an object")
    unknown = sorted(set(raw) - set(_fields(cls)))
    if unknown:
        raise UsageError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {name!r} section: {exc}") from None


@dataclasses.dataclass
class ExperimentConfig:
    """Everything a study needs; round-trips through JSON.

    ``msd`` and ``train`` hold the simulator and training settings (the
    training seed is overridden per run); ``seeds``, ``modes`` and ``snrs``
    span the study grid.
    """

    msd: MsdConfig = dataclasses.field(default_factory=MsdConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    modes: tuple = MODES
    seeds: tuple = (0, 1, 2)
    snrs: tuple = (10.0, 20.0, 30.0, 40.0)
    n_x: int = 6
    horizon: int = 20
    output_dir: str | None = None

    def __post_init__(self):
        self.modes = tuple(self.modes)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.snrs = tuple(float(s) for s in self.snrs)
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise UsageError(f"unknown mode(s) {bad}; expected a subset of {MODES}")
        if not self.seeds:
            raise UsageError("seed list is empty")
        if self.n_x < 1 or self.horizon <= self.n_x // 3:
            raise UsageError("need n_x >= 1 and a horizon long enough for the state order")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(raw) - set(_fields(cls)))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        rest = {k: v for k, v in raw.items() if k not in ("msd", "train")}
        return cls(msd=_section(MsdConfig, raw.get("msd"), "msd"),
                   train=_section(TrainConfig, raw.get("train"), "train"), **rest)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return _jsonable({
            "msd": dataclasses.asdict(self.msd), "train": dataclasses.asdict(self.train),
            "modes": list(self.modes), "seeds": list(self.seeds), "snrs": list(self.snrs),
            "n_x": self.n_x, "horizon": self.horizon, "output_dir": self.output_dir,
        })

    def replace(self, msd=None, train=None, **kw) -> "ExperimentConfig":
        msd_cfg = dataclasses.replace(self.msd, **(msd or {}))
        train_cfg = dataclasses.replace(self.train, **(train or {}))
        return dataclasses.replace(self, msd=msd_cfg, train=train_cfg, **kw)


def config_hash(cfg: ExperimentConfig) -> str:
    """Short digest of everything except the output location and the run seed."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d["train"].pop("seed")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def output_root(cfg: ExperimentConfig) -> Path:
    """Config value, else the environment variable, else ``./phnnid-out``."""
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(ENV_OUTPUT, "phnnid-out"))


def _tag(snr) -> str:
    return f"snr{float(snr):g}"


def _snr(cfg, snr):
    return cfg.msd.snr_db if snr is None else float(snr)


def data_dir(cfg, snr=None) -> Path:
    return output_root(cfg) / "data" / _tag(_snr(cfg, snr))


def linear_dir(cfg, snr=None) -> Path:
    return output_root(cfg) / "linear" / _tag(_snr(cfg, snr))


def run_dir(cfg, mode, seed, snr=None) -> Path:
    return output_root(cfg) / "runs" / _tag(_snr(cfg, snr)) / mode / f"seed{seed}"


def _provenance(cfg, seed=None, **extra) -> dict:
    out = {"config_hash": config_hash(cfg), "seed": seed}
    out.update(extra)
    return out


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
    return path


def _write_csv(path: Path, header, rows, provenance: dict | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if provenance:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    return rows[0], rows[1:]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# ------------------------------------------------------------------ generate

def cmd_generate(cfg: ExperimentConfig, snr=None) -> list[Path]:
    """Simulate the eight records and write them as CSV plus JSON metadata."""
    snr = _snr(cfg, snr)
    msd = dataclasses.replace(cfg.msd, snr_db=snr)
    sets = make_experiment_set(msd)
    out = data_dir(cfg, snr)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from None
    prov = _provenance(cfg, msd.seed)
    return [save_dataset(d, out / f"record{i}_{d.role}", extra_meta=prov)
            for i, d in enumerate(sets)]


def load_sets(cfg: ExperimentConfig, snr=None):
    """``(train, val, test)`` lists read from the data directory."""
    folder = data_dir(cfg, snr)
    files = sorted(folder.glob("record*_*.csv"))
    if len(files) != len(ROLES):
        raise UsageError(f"expected {len(ROLES)} records in {folder}, found {len(files)}; "
                         f"run 'generate' first")
    sets = [load_dataset(f) for f in files]
    pick = lambda role: [d for d in sets if d.role == role]
    return pick("train"), pick("val"), pick("test")


# -------------------------------------------------------------------- linest

def _linear_val_nrmse(lph: LinearPH, sets, std: Standardizer, washout: float) -> float:
    """Free-run NRMSE from a zero state, skipping the washout interval."""
    first = int(round(washout / sets[0].Ts))
    ys, yh = [], []
    for d in sets:
        out, _ = simulate_linear_ph(lph, np.zeros(lph.n_x), port_input(std.u(d.u), lph.n_p),
                                    d.Ts)
        ys.append(d.y[first:])
        yh.append(std.y_inverse(out[0, first:, :d.y.shape[1]]))
    return nrmse(np.vstack(ys), np.vstack(yh))


def cmd_linest(cfg: ExperimentConfig, snr=None, direct: bool = False) -> Path:
    """Linear PH estimate for one SNR; returns the path of the written LinearPH.

    Indirect path: subspace identification on standardized data, conversion
    to continuous time, port padding and the KYP-based PH construction.
    ``direct`` trains the constant-matrix model instead and exports it.
    """
    train_sets, val_sets, _ = load_sets(cfg, snr)
    std = Standardizer.fit(train_sets)
    out = linear_dir(cfg, snr)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "standardizer.json", std.to_dict())
    n_p = train_sets[0].y.shape[1]
    if direct:
        seed = cfg.seeds[0]
        res = cmd_train(cfg, "linear-direct", seed, snr)
        params = load_checkpoint(res / "checkpoint.npz")
        v = params.values
        Q = v["Lc"] @ v["Lc"].T
        zero = np.zeros((n_p, n_p))
        raw = RawPH(J=v["Ac"] - v["Ac"].T, R=v["Bc"] @ v["Bc"].T, G=v["Gc"].copy(),
                    P=v["Pc"].copy(), S=zero, N=zero, Q=Q)
        lph = cholesky_normalize(raw)
        lph.diagnostics["source"] = "linear-direct"
        lph.diagnostics["provenance"] = _provenance(cfg, seed, snr_db=_snr(cfg, snr))
        path = save_linear_ph(lph, out / "linear_ph_direct.json")
        _write_json(out / "passivity_direct.json", passivity_report(lph))
        return path

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = subspace_id([(std.u(d.u), std.y(d.y)) for d in train_sets], cfg.n_x,
                          cfg.horizon, Ts=train_sets[0].Ts)
        ct = pad_ports(d2c(est), n_p)
        lph = estimate_linear_ph(ct, omega=omega_grid(train_sets[0].Ts))
    for w in caught:
        log.warning("%s", w.message)
    save_state_space(est, out / "bla.json")
    lph.diagnostics["source"] = "indirect"
    lph.diagnostics["warnings"] = [str(w.message) for w in caught]
    lph.diagnostics["provenance"] = _provenance(cfg, cfg.msd.seed, snr_db=_snr(cfg, snr))
    lph.diagnostics["val_nrmse_washout"] = _linear_val_nrmse(
        lph, val_sets, std, cfg.train.pretrain_washout)
    path = save_linear_ph(lph, out / "linear_ph.json")
    report = passivity_report(lph)
    report["provenance"] = lph.diagnostics["provenance"]
    _write_json(out / "passivity.json", report)
    return path


# --------------------------------------------------------------------- train

def cmd_train(cfg: ExperimentConfig, mode: str, seed: int, snr=None) -> Path:
    """One training run; returns its run directory.

    Writes ``checkpoint.npz``, ``log.csv`` (``iter,train_loss,val_nrmse``),
    ``test_trace.csv`` and ``summary.json``. Aborted runs still leave a
    checkpoint and log before the error propagates.
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    snr = _snr(cfg, snr)
    train_sets, val_sets, test_sets = load_sets(cfg, snr)
    std = Standardizer.fit(train_sets)
    tcfg = dataclasses.replace(cfg.train, seed=int(seed))
    n_u, n_y = train_sets[0].u.shape[1], train_sets[0].y.shape[1]
    dims = dict(n_x=cfg.n_x, n_p=n_y, n_u=n_u, n_y=n_y, n_a=tcfg.n_a, n_b=tcfg.n_b)
    lph = None
    if mode == "nn-linear-init":
        lpath = linear_dir(cfg, snr) / "linear_ph.json"
        if not lpath.exists():
            raise UsageError(f"{lpath} not found; run 'linest' first")
        lph = load_linear_ph(lpath)
    params = init(mode, int(seed), lph, **dims)
    prov = _provenance(cfg, int(seed), mode=mode, snr_db=snr)
    params.meta.update(prov)
    out = run_dir(cfg, mode, seed, snr)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    if mode == "nn-linear-init":
        params = pretrain_encoder(params, lph, train_sets, std, tcfg)
    pretrain_time = time.perf_counter() - t0

    def progress(it, state):
        log.info("%s seed %s it %d val %.4g", mode, seed, it, state.val_log[-1][1])

    try:
        state = train(params, tcfg, train_sets, val_sets, std, callback=progress)
    except TrainingAborted as exc:
        if exc.state is not None:
            save_checkpoint(exc.state.params, out / "checkpoint.npz", extra=prov)
            _write_log(out / "log.csv", exc.state, prov)
        raise
    state.pretrain_time = pretrain_time

    best = state.best_params
    save_checkpoint(best, out / "checkpoint.npz",
                    extra={**prov, "best_iter": state.best_iter, "best_val": state.best_val})
    _write_log(out / "log.csv", state, prov)
    test_pred = predict(best, test_sets, std, tcfg)
    test_nrmse = evaluate(best, test_sets, std, tcfg)
    _write_trace(out / "test_trace.csv", test_sets[0], test_pred[0], tcfg.lag, prov)
    summary = {**prov, "best_val_nrmse": state.best_val, "best_iter": state.best_iter,
               "initial_val_nrmse": state.val_log[0][1], "test_nrmse": test_nrmse,
               "noise_floor": 10.0 ** (-snr / 20.0), "train_time": state.train_time,
               "pretrain_time": pretrain_time, "skipped_steps": state.skipped,
               "n_params": best.n_params(), "train_config": dataclasses.asdict(tcfg)}
    _write_json(out / "summary.json", summary)
    return out


def _write_log(path, state, prov):
    losses = dict(state.loss_log)
    vals = dict(state.val_log)
    iters = sorted(set(losses) | set(vals))
    rows = [[it, _fmt(losses.get(it)), _fmt(vals.get(it))] for it in iters]
    _write_csv(path, ["iter", "train_loss", "val_nrmse"], rows, prov)


def _write_trace(path, ds, pred, lag, prov):
    ny = ds.y.shape[1]
    header = ["t"] + [f"y{i + 1}" for i in range(ny)] + [f"yhat{i + 1}" for i in range(ny)]
    data = np.hstack([ds.t[lag:, None], ds.y[lag:], pred])
    _write_csv(path, header, [[repr(float(v)) for v in row] for row in data], prov)


# --------------------------------------------------------------------- sweep

def _sweep_cell(args):
    cfg, snr, seed = args
    try:
        run = cmd_train(cfg, "nn-linear-init", seed, snr)
        return snr, seed, json.loads((run / "summary.json").read_text())["test_nrmse"], None
    except Exception as exc:  # recorded per cell, the sweep carries on
        return snr, seed, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    """Noise-level study with the linear-initialized model.

    For every SNR the data and linear estimate are produced once, then one
    run per seed. Writes ``sweep.csv`` with mean, minimum and the analytic
    noise floor per SNR; failed cells are recorded and skipped.
    """
    cells, failures = [], {}
    for snr in cfg.snrs:
        try:
            cmd_generate(cfg, snr)
            cmd_linest(cfg, snr)
        except Exception as exc:
            failures[snr] = [f"setup: {type(exc).__name__}: {exc}"]
            continue
        cells += [(cfg, snr, seed) for seed in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]

    table, rows = [], []
    for snr in cfg.snrs:
        vals = [r[2] for r in results if r[0] == snr and r[3] is None]
        errs = failures.get(snr, []) + [f"seed {r[1]}: {r[3]}" for r in results
                                        if r[0] == snr and r[3] is not None]
        entry = {"snr_db": snr, "n_ok": len(vals), "n_failed": len(errs),
                 "mean": float(np.mean(vals)) if vals else None,
                 "min": float(np.min(vals)) if vals else None,
                 "noise_floor": 10.0 ** (-snr / 20.0),
                 "per_seed": {int(r[1]): r[2] for r in results if r[0] == snr},
                 "failures": errs}
        table.append(entry)
        rows.append([f"{snr:g}", len(vals), len(errs), _fmt(entry["mean"]),
                     _fmt(entry["min"]), _fmt(entry["noise_floor"])])
    root = output_root(cfg)
    prov = _provenance(cfg, None, seeds=",".join(map(str, cfg.seeds)))
    _write_json(root / "sweep.json", {"provenance": prov, "rows": table})
    return _write_csv(root / "sweep.csv",
                      ["snr_db", "n_ok", "n_failed", "mean_nrmse", "min_nrmse", "noise_floor"],
                      rows, prov)


# -------------------------------------------------------------------- report

def _five(vals) -> list:
    q = np.percentile(vals, [0, 25, 50, 75, 100])
    return [*q, np.mean(vals), np.std(vals)]


def cmd_report(cfg: ExperimentConfig, snr=None) -> dict:
    """Aggregate finished runs of one SNR into plain CSV tables.

    ``convergence.csv``: validation NRMSE per mode and iteration (mean, std,
    min, max over seeds). ``test_trace.csv``: measured test output and the
    per-time mean and std of the predictions across seeds.
    ``boxplot.csv``: five-number summary of test NRMSE per mode.
    Returns the written paths and the list of missing runs.
    """
    snr = _snr(cfg, snr)
    base = output_root(cfg) / "runs" / _tag(snr)
    out = output_root(cfg) / "report" / _tag(snr)
    missing, found = [], {}
    for mode in cfg.modes:
        for seed in cfg.seeds:
            d = base / mode / f"seed{seed}"
            if (d / "summary.json").exists():
                found.setdefault(mode, []).append(d)
            else:
                missing.append(f"{mode}/seed{seed}")
    if not found:
        raise UsageError(f"no finished runs under {base}")
    prov = _provenance(cfg, None, snr_db=snr)

    conv, box, trace = [], [], []
    for mode, dirs in found.items():
        logs = []
        for d in dirs:
            _, rows = _read_csv(d / "log.csv")
            logs.append({int(r[0]): float(r[2]) for r in rows if r[2] != ""})
        common = sorted(set.intersection(*(set(lg) for lg in logs)))
        for it in common:
            v = np.array([lg[it] for lg in logs])
            conv.append([mode, it, _fmt(v.mean()), _fmt(v.std()), _fmt(v.min()),
                         _fmt(v.max()), len(v)])
        tests = [json.loads((d / "summary.json").read_text())["test_nrmse"] for d in dirs]
        box.append([mode, len(tests)] + [_fmt(v) for v in _five(tests)])
        traces = []
        for d in dirs:
            header, rows = _read_csv(d / "test_trace.csv")
            traces.append(np.array(rows, dtype=float))
        arr = np.stack(traces)
        ny = (arr.shape[2] - 1) // 2
        for k in range(arr.shape[1]):
            for c in range(ny):
                pred = arr[:, k, 1 + ny + c]
                trace.append([mode, repr(arr[0, k, 0]), c + 1, repr(arr[0, k, 1 + c]),
                              _fmt(pred.mean()), _fmt(pred.std())])
    paths = {
        "convergence": _write_csv(out / "convergence.csv",
                                  ["mode", "iter", "mean_val_nrmse", "std_val_nrmse",
                                   "min_val_nrmse", "max_val_nrmse", "n_seeds"], conv, prov),
        "boxplot": _write_csv(out / "boxplot.csv",
                              ["mode", "n_seeds", "min", "q1", "median", "q3", "max",
                               "mean", "std"], box, prov),
        "test_trace": _write_csv(out / "test_trace.csv",
                                 ["mode", "t", "channel", "y", "mean_yhat", "std_yhat"],
                                 trace, prov),
    }
    if missing:
        (out / "missing.txt").write_text("\n".join(missing) + "\n")
        log.warning("missing runs: %s", ", ".join(missing))
    return {"paths": paths, "missing": missing}
