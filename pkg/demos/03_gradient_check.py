"""
Checking hand-written gradients against finite differences
==========================================================

Every layer has a manual backward pass.  The checker perturbs each
parameter by +-h and compares the slope with backprop.
"""
import numpy as np

from ctxnorm.net import build_preset, finite_diff_check

rng = np.random.default_rng(2)
net = build_preset("mlp2", (6,), 3, (8,), "acn", contexts=2, seed=0)
# move the context table away from its identity start so the check is not trivial
net.layers[1].table.mu[...] = rng.normal(size=(2, 8))
net.layers[1].table.s[...] = rng.normal(size=(2, 8))

x = rng.normal(size=(10, 6))
labels = rng.integers(0, 3, 10)
ctx = rng.integers(0, 2, 10)

worst, report = finite_diff_check(net, x, labels, ctx, check_input=True)
for name, err in report.items():
    print(f"{name:>6s} max relative error {err:.2e}")
print("worst", f"{worst:.2e}")

# A sign-flipped gradient scores a relative error of 2, so the checker catches it.
bad, _ = finite_diff_check(net, x, labels, ctx, select={"1.s"}, corrupt=lambda name, g: -g)
print("corrupted gradient error", round(bad, 3))
