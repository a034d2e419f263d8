"""
IDX files and the command line
==============================

Writes a small digits set in the MNIST IDX format, then drives the
`ctxnorm` command: fit the context mixture, train convnet4 with ACN in
slot 3, and summarize.  Point the config at real MNIST files to run the
full-size smoke test.
"""
import json
import os
import tempfile

import numpy as np
from sklearn.datasets import load_digits

from ctxnorm import data
from ctxnorm.cli import main

work = tempfile.mkdtemp()
digits = load_digits()
images = np.rint(digits.images * 255 / 16).astype(np.uint8)
order = np.random.default_rng(0).permutation(len(images))
files = {}
for split, idx in (("train", order[:1400]), ("test", order[1400:])):
    for kind, payload in (("images", data.encode_idx_images(images[idx])),
                          ("labels", data.encode_idx_labels(digits.target[idx]))):
        path = os.path.join(work, f"{split}-{kind}.idx")
        with open(path, "wb") as fh:
            fh.write(payload)
        files[f"{split}_{kind}"] = path

print("parsed back:", data.load_idx_dataset(files["train_images"], files["train_labels"]).features.shape)

cfg = {"run_id": "digits", "preset": "convnet4", "widths": [8, 16, 16, 16], "norm_choice": "acn",
       "norm_position": 3, "context_strategy": "gmm", "mixture_k": 3,
       "dataset": {"kind": "idx", **files}, "standardize": True, "lr": 0.005,
       "batch_size": 64, "epochs": 5, "seeds": [0]}
cfg_path = os.path.join(work, "digits.json")
out = os.path.join(work, "results")
with open(cfg_path, "w") as fh:
    json.dump(cfg, fh)

main(["fit-gmm", "--config", cfg_path, "--out", out])
cfg["gmm_path"] = os.path.join(out, "digits_gmm.json")
with open(cfg_path, "w") as fh:
    json.dump(cfg, fh)
main(["train", "--config", cfg_path, "--out", out])
main(["report", "--out", out])
