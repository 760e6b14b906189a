"""A short end-to-end training run through the experiment layer.

Writes data, the linear PH estimate and one nn-linear-init run under a
temporary output root, with a reduced budget so it finishes in about a
minute. The full-budget study is ``phnnid train --mode nn-linear-init``.
"""
import json
import tempfile

from phnnid import experiments as ex

with tempfile.TemporaryDirectory() as root:
    cfg = ex.ExperimentConfig(output_dir=root).replace(
        train={"iterations": 100, "pretrain_iterations": 2000, "val_period": 20})
    ex.cmd_generate(cfg)
    lpath = ex.cmd_linest(cfg)
    diag = json.loads(lpath.read_text())["diagnostics"]
    print(f"linear PH estimate: val NRMSE {diag['val_nrmse_washout']:.4f} after washout")

    run = ex.cmd_train(cfg, "nn-linear-init", seed=0)
    s = json.loads((run / "summary.json").read_text())
    print(f"validation NRMSE {s['initial_val_nrmse']:.4f} -> {s['best_val_nrmse']:.4f} "
          f"(best at iteration {s['best_iter']})")
    print(f"test NRMSE {s['test_nrmse']:.4f}, noise floor {s['noise_floor']:.4f}")
    print(f"pretraining {s['pretrain_time']:.1f} s, training {s['train_time']:.1f} s")
    print("validation checkpoints (iter, train loss, val NRMSE):")
    for line in (run / "log.csv").read_text().splitlines()[2:]:
        if not line.endswith(","):
            print("  " + line)
