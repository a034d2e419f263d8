from fractions import Fraction

import numpy as np
import pytest

from ctxnorm.errors import DomainError
from ctxnorm.metrics import (GradVarianceTracker, compute_metrics, confusion_matrix,
                             track_gradient_variance)


def tally(labels, preds, k):
    """Per-sample brute force in exact rationals."""
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = sum(1 for y, p in zip(labels, preds) if y == c and p == c)
        npred = sum(1 for p in preds if p == c)
        nact = sum(1 for y in labels if y == c)
        pc = Fraction(tp, npred) if npred else Fraction(0)
        rc = Fraction(tp, nact) if nact else Fraction(0)
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else Fraction(0))
    acc = Fraction(sum(1 for y, p in zip(labels, preds) if y == p), len(labels))
    return acc, sum(prec) / k, sum(rec) / k, sum(f1) / k


def test_perfect_diagonal():
    m = compute_metrics(np.diag([3, 5, 2]))
    assert (m["accuracy"], m["precision"], m["recall"], m["f1"]) == (1.0, 1.0, 1.0, 1.0)


def test_two_class_hand_values():
    m = compute_metrics([[1, 1], [0, 2]])
    assert m["accuracy"] == 0.75
    assert m["precision"] == pytest.approx(5 / 6, abs=1e-15)
    assert m["recall"] == pytest.approx(0.75, abs=1e-15)


def test_absent_class_flagged():
    m = compute_metrics([[2, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert m["absent_classes"] == [2]
    assert m["precision"] == pytest.approx(2 / 3)


def test_errors():
    with pytest.raises(DomainError):
        compute_metrics(np.zeros((2, 2)))
    with pytest.raises(DomainError):
        compute_metrics([[1, -1], [0, 1]])
    with pytest.raises(DomainError):
        compute_metrics(np.ones((2, 3)))


def test_brute_force_agreement():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 5))
        m = int(rng.integers(1, 25))
        y, p = rng.integers(0, k, m), rng.integers(0, k, m)
        got = compute_metrics(confusion_matrix(y, p, k))
        exp = tally(y.tolist(), p.tolist(), k)
        for key, e in zip(("accuracy", "precision", "recall", "f1"), exp):
            assert abs(got[key] - float(e)) <= 1e-12


def test_grad_variance_examples():
    assert track_gradient_variance([{"a": np.ones(3)}] * 4) == (0.0, 0.0)
    mx, mean = track_gradient_variance([{"a": np.array([1.0]), "b": np.zeros(2)},
                                        {"a": np.array([-1.0]), "b": np.zeros(2)}])
    assert mx == 1.0 and mean == pytest.approx(1 / 3)


def test_grad_variance_scaling(rng):
    steps = [{"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3)} for _ in range(6)]
    base = track_gradient_variance(steps)
    scaled = track_gradient_variance([{k: 3.0 * v for k, v in s.items()} for s in steps])
    np.testing.assert_allclose(scaled, 9.0 * np.array(base), rtol=1e-12)


def test_grad_variance_matches_numpy(rng):
    steps = [rng.normal(size=5) for _ in range(7)]
    mx, mean = track_gradient_variance([{"p": s} for s in steps])
    var = np.var(np.stack(steps), axis=0)
    assert mx == pytest.approx(var.max(), rel=1e-12) and mean == pytest.approx(var.mean(), rel=1e-12)


def test_grad_variance_single_step_is_null():
    t = GradVarianceTracker()
    t.update([("p", np.ones(2))])
    assert t.result() == (None, None)
