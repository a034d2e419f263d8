"""
Batch, mixture and context normalization side by side
=====================================================

Each normalizer maps activations to roughly zero mean and unit variance,
but they differ in *which* statistics they subtract and divide by.
"""
import numpy as np

from ctxnorm import norm
from ctxnorm.gmm import GmmModel

rng = np.random.default_rng(0)

# Two groups of samples that live at very different scales.
x = np.concatenate([rng.normal(-4.0, 0.5, (6, 2)), rng.normal(5.0, 3.0, (6, 2))])
ctx = np.repeat([0, 1], 6)

# Batch normalization pools everything: each group keeps its offset.
bn_out, _ = norm.bn_forward(x, norm.BnState(2))
print("BN group means     ", bn_out[ctx == 0].mean(0).round(2), bn_out[ctx == 1].mean(0).round(2))

# The grouped transform normalizes each group on its own statistics.
grouped = norm.general_transform(x, ctx[:, None])
print("grouped group means", grouped[ctx == 0].mean(0).round(2), grouped[ctx == 1].mean(0).round(2))

# Mixture normalization soft-assigns samples to GMM components first.
model = GmmModel([0.5, 0.5], [[-4.0, -4.0], [5.0, 5.0]], [[0.25, 0.25], [9.0, 9.0]])
mn_out = norm.mn_forward(x, model)
print("MN group means     ", mn_out[ctx == 0].mean(0).round(2), mn_out[ctx == 1].mean(0).round(2))

# Context normalization uses *learned* per-context parameters, no batch statistics.
table = norm.ContextParamTable.from_variances([[-4.0, -4.0], [5.0, 5.0]], [[0.25, 0.25], [9.0, 9.0]])
acn_out, _ = norm.acn_forward(x, ctx, table)
print("ACN group means    ", acn_out[ctx == 0].mean(0).round(2), acn_out[ctx == 1].mean(0).round(2))

# Without labels at inference the contexts act as an equal-weight mixture.
agg = norm.acn_inference_aggregate(x, table)
print("aggregate vs MN at equal weights, max diff:",
      np.abs(agg - norm.mn_forward(x, norm.context_mixture(table))).max())

# ACN-base produces the same kind of table from two one-layer nets on one-hot codes.
base = norm.ContextNormBase(2, 2)
print("ACN-base initial variances:", base.table().var.round(3).tolist())
