"""
Training with superclass-style contexts
=======================================

A synthetic task where each context owns four classes and its own offset
and scale.  The same small MLP is trained with BN, ACN and ACN-base in the
normalization slot.
"""
import tempfile

from ctxnorm import runner
from ctxnorm.runner import ExperimentConfig

spec = {"contexts": 3, "classes_per_context": 4, "dim": 16, "samples_per_class": 300,
        "mean_scale": 0.5, "noise_scale": 1.0, "seed": 0}
out = tempfile.mkdtemp()

for choice in ("bn", "acn", "acn_base"):
    cfg = ExperimentConfig.from_dict({
        "run_id": choice, "preset": "mlp2", "widths": [64], "norm_choice": choice,
        "dataset": {"kind": "synthetic", "spec": spec}, "batch_size": 64, "epochs": 15,
        "lr": 0.001, "seeds": [0]})
    run = runner.run_experiment(cfg, out)[choice][0]
    val = [r.accuracy for r in run.records if r.split == "val"]
    print(f"{choice:>8s}  val accuracy by epoch: " + " ".join(f"{a:.2f}" for a in val[::3]))
