"""Diagonal-covariance Gaussian mixtures fitted by expectation-maximization."""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateComponentError, DomainError, FormatError, ShapeError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-6
COLLAPSE_MASS = 1e-8


@dataclass
class GmmModel:
    """K weighted diagonal Gaussians over R^D.

    ``loglik`` is the mean per-row log-likelihood of the data the model was
    fitted on, ``history`` the value after every EM iteration (index 0 is the
    initialization).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik: float = float("nan")
    iters: int = 0
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ShapeError(
                f"inconsistent GMM shapes: weights {self.weights.shape}, "
                f"means {self.means.shape}, variances {self.variances.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"mixture weights must lie on the simplex, got {self.weights}")
        if np.any(~(self.variances > 0)):
            raise DomainError("component variances must be strictly positive")

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.means.shape[1]

    def to_dict(self):
        return {
            "k": self.k,
            "d": self.d,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "loglik": None if np.isnan(self.loglik) else float(self.loglik),
            "iters": int(self.iters),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            model = cls(weights=doc["weights"], means=doc["means"], variances=doc["variances"],
                        loglik=float("nan") if doc.get("loglik") is None else doc["loglik"],
                        iters=int(doc.get("iters", 0)))
        except KeyError as exc:
            raise FormatError(f"GMM document missing key {exc}") from None
        if model.k != doc.get("k", model.k) or model.d != doc.get("d", model.d):
            raise FormatError(f"GMM document declares k={doc.get('k')}, d={doc.get('d')} "
                              f"but arrays have k={model.k}, d={model.d}")
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)


def _rows(X, d=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if d == 1 else X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"expected an M x D matrix, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ShapeError(f"data dimension {X.shape[1]} does not match model dimension {d}")
    return X


def log_component_density(x, model, k):
    """log p(x | k) for a single D-vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.d:
        raise ShapeError(f"vector of length {x.shape[0]} does not match model dimension {model.d}")
    if not 0 <= k < model.k:
        raise DomainError(f"component index {k} outside [0, {model.k})")
    var = model.variances[k]
    diff = x - model.means[k]
    return -0.5 * (model.d * LOG_2PI + np.log(var).sum() + (diff * diff / var).sum())


def log_densities(X, model):
    """M x K matrix of log p(x_i | k)."""
    X = _rows(X, model.d)
    var = model.variances
    diff = X[:, None, :] - model.means[None, :, :]
    maha = (diff * diff / var[None, :, :]).sum(axis=2)
    return -0.5 * (model.d * LOG_2PI + np.log(var).sum(axis=1)[None, :] + maha)


def _log_joint(X, model):
    with np.errstate(divide="ignore"):
        return log_densities(X, model) + np.log(model.weights)[None, :]


def responsibilities(X, model):
    """Row-stochastic M x K posterior matrix tau_k(x_i), via log-sum-exp."""
    lj = _log_joint(X, model)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def mean_loglik(X, model):
    return float(logsumexp(_log_joint(X, model), axis=1).mean())


def normalized_contributions(tau, groups=None):
    """Renormalize every responsibility column to sum to one within each group.

    ``groups`` is an integer label per row; ``None`` means a single group.
    Raises :class:`DegenerateComponentError` when a component has zero mass
    in some group; the error lists the offending ``(group, component)`` pairs.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 2:
        raise ShapeError(f"responsibilities must be M x K, got {tau.shape}")
    if groups is None:
        groups = np.zeros(tau.shape[0], dtype=np.int64)
    groups = np.asarray(groups)
    if groups.shape != (tau.shape[0],):
        raise ShapeError("one group label per responsibility row is required")
    out = np.empty_like(tau)
    bad = []
    for g in np.unique(groups):
        rows = groups == g
        mass = tau[rows].sum(axis=0)
        for k in np.flatnonzero(mass <= 0):
            bad.append((g.item(), int(k)))
        with np.errstate(divide="ignore", invalid="ignore"):
            out[rows] = tau[rows] / mass[None, :]
    if bad:
        raise DegenerateComponentError(f"components with zero responsibility mass: {bad}", bad)
    return out


def _kmeanspp(X, k, rng):
    m = X.shape[0]
    centers = [X[rng.integers(m)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(m) if total <= 0 else rng.choice(m, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(X, tau, var_floor):
    mass = tau.sum(axis=0)
    weights = mass / mass.sum()
    safe = np.where(mass > 0, mass, 1.0)
    means = tau.T @ X / safe[:, None]
    var = np.empty_like(means)
    for k in range(tau.shape[1]):
        diff = X - means[k]
        var[k] = tau[:, k] @ (diff * diff) / safe[k]
    var = np.maximum(var, var_floor)
    return weights, means, var, mass


def em_fit(X, k, max_iters=200, tol=1e-6, seed=0, var_floor=VAR_FLOOR):
    """Fit a K-component diagonal GMM to the rows of ``X``.

    Seeding is k-means++ on the means with uniform weights and the global
    per-dimension variance.  Iteration stops once the mean log-likelihood
    improves by less than ``tol`` relative to its magnitude, or after
    ``max_iters`` M-steps.  A component whose responsibility mass drops below
    1e-8 is re-seeded on the worst-explained data point, provided that does not
    lower the likelihood.
    """
    X = np.asarray(X, dtype=np.float64)
    X = _rows(X[:, None] if X.ndim == 1 else X)
    m, d = X.shape
    if k < 1:
        raise DomainError(f"component count must be >= 1, got {k}")
    if m < k:
        raise DomainError(f"need at least as many rows as components, got M={m} < K={k}")
    rng = np.random.default_rng(seed)
    global_var = np.maximum(X.var(axis=0), var_floor)
    model = GmmModel(np.full(k, 1.0 / k), _kmeanspp(X, k, rng), np.tile(global_var, (k, 1)))

    lj = _log_joint(X, model)
    norm = logsumexp(lj, axis=1, keepdims=True)
    ll = float(norm.mean())
    history = [ll]
    iters = 0
    for iters in range(1, max_iters + 1):
        tau = np.exp(lj - norm)
        weights, means, var, mass = _m_step(X, tau, var_floor)
        # zero-mass components keep their previous location
        dead = mass <= 0
        means[dead] = model.means[dead]
        var[dead] = model.variances[dead]
        candidate = GmmModel(weights / weights.sum(), means, var)
        collapsed = np.flatnonzero(mass < COLLAPSE_MASS)
        if collapsed.size:
            candidate = _reseed(X, candidate, collapsed, global_var)
        model = candidate
        lj = _log_joint(X, model)
        norm = logsumexp(lj, axis=1, keepdims=True)
        new_ll = float(norm.mean())
        history.append(new_ll)
        improvement = new_ll - ll
        ll = new_ll
        if improvement < tol * (abs(history[-2]) if history[-2] != 0 else 1.0):
            break
    model.loglik = ll
    model.iters = iters
    model.history = history
    return model


def _reseed(X, model, collapsed, global_var):
    base_ll = mean_loglik(X, model)
    weights = model.weights.copy()
    means = model.means.copy()
    var = model.variances.copy()
    point_ll = logsumexp(_log_joint(X, model), axis=1)
    worst = np.argsort(point_ll, kind="stable")
    share = 1.0 / X.shape[0]
    for j, k in enumerate(collapsed):
        means[k] = X[worst[j % X.shape[0]]]
        var[k] = global_var
        weights[k] = max(weights[k], share)
    trial = GmmModel(weights / weights.sum(), means, var)
    if mean_loglik(X, trial) >= base_ll:
        log.warning("re-seeded collapsed mixture components %s", collapsed.tolist())
        return trial
    log.warning("collapsed mixture components %s kept: re-seeding would lower likelihood",
                collapsed.tolist())
    return model


def assign_component(x, model):
    """Hard assignment argmax_k tau_k(x); exact ties resolve to the lowest index.

    Accepts a single D-vector (returns an int) or an M x D matrix (returns an
    int array).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    lj = _log_joint(x[None, :] if single else x, model)
    idx = np.argmax(lj, axis=1)
    return int(idx[0]) if single else idx
