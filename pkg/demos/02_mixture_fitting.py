"""
Fitting a diagonal Gaussian mixture with EM
===========================================

The mixture normalizer and the EM-derived contexts both start from a GMM
fitted on a sample of activations.
"""
import os
import tempfile

import numpy as np

from ctxnorm.gmm import GmmModel, assign_component, em_fit, responsibilities

rng = np.random.default_rng(1)
x = np.concatenate([rng.normal(-3.0, 0.5, 500), rng.normal(3.0, 0.5, 500)])

model = em_fit(x, 2, seed=0)
print(f"{model.iters} iterations, mean log-likelihood {model.loglik:.4f}")
print("means  ", model.means.ravel().round(3))
print("weights", model.weights.round(3))

# The log-likelihood never decreases from one iteration to the next.
print("monotone:", bool(np.all(np.diff(model.history) >= -1e-9)))

# Soft and hard assignments.
probe = np.array([[-3.0], [0.0], [2.5]])
print("responsibilities\n", responsibilities(probe, model).round(3))
print("hard assignment", assign_component(probe, model))

# The JSON form is what `ctxnorm fit-gmm` writes and `train` reads back.
path = os.path.join(tempfile.mkdtemp(), "gmm.json")
model.save(path)
print("reloaded means equal:", np.array_equal(GmmModel.load(path).means, model.means))
