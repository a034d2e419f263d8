"""Classification metrics and per-epoch gradient-variance tracking."""
import numpy as np

from .errors import DomainError


def confusion_matrix(labels, predictions, num_classes):
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def compute_metrics(confusion):
    """Accuracy plus macro-averaged precision, recall and F1.

    A zero denominator contributes 0 for that class.  Classes that are neither
    present nor predicted are listed under ``"absent_classes"`` and still count
    (as 0) in the macro averages.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DomainError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise DomainError("confusion counts must be non-negative")
    total = cm.sum()
    if total == 0:
        raise DomainError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / total),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        "absent_classes": np.flatnonzero((predicted == 0) & (actual == 0)).tolist(),
    }


class GradVarianceTracker:
    """Running per-entry variance (population) of each parameter's gradient across steps."""

    def __init__(self):
        self.steps = 0
        self._mean = {}
        self._m2 = {}

    def update(self, named_grads):
        self.steps += 1
        for name, g in named_grads:
            mean = self._mean.get(name)
            if mean is None:
                self._mean[name] = np.array(g, dtype=np.float64)
                self._m2[name] = np.zeros_like(self._mean[name])
                continue
            delta = g - mean
            mean += delta / self.steps
            self._m2[name] += delta * (g - mean)

    def result(self):
        """``(max, mean)`` over all parameter entries, or ``(None, None)`` under 2 steps."""
        if self.steps < 2 or not self._m2:
            return None, None
        var = np.concatenate([m2.reshape(-1) for m2 in self._m2.values()]) / self.steps
        return float(var.max()), float(var.mean())


def track_gradient_variance(steps):
    """Gradient-variance summary from a list of ``{name: grad}`` snapshots, one per step."""
    tracker = GradVarianceTracker()
    for snapshot in steps:
        tracker.update(snapshot.items())
    return tracker.result()
