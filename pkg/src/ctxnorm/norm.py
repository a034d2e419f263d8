"""Normalization transforms: batch, mixture, context (ACN) and ACN-base.

Functional forms (``bn_forward`` ... ``per_context_inference``) operate on bare
arrays; the ``*Norm`` classes wrap them as trainable layers for ``net``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .errors import DomainError, InternalError, ShapeError
from .layer import Layer
from .tensor_core import channel_moments, channel_vectors, from_channel_vectors, to_ncl

log = logging.getLogger(__name__)

EPSILON = 1e-5
VAR_FLOOR = 1e-6


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("softplus is only invertible on positive values")
    return y + np.log(-np.expm1(-y))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _restore(out3, like):
    return out3.reshape(np.shape(like))


def _check_ctx(ctx, n, t):
    ctx = np.asarray(ctx)
    if ctx.shape != (n,):
        raise ShapeError(f"expected {n} context labels, got shape {ctx.shape}")
    if not np.issubdtype(ctx.dtype, np.integer):
        if np.any(ctx != np.round(ctx)):
            raise DomainError("context labels must be integers")
        ctx = ctx.astype(np.int64)
    if n and (ctx.min() < 0 or ctx.max() >= t):
        raise DomainError(f"context labels must lie in [0, {t}), got range "
                          f"[{ctx.min()}, {ctx.max()}]")
    return ctx


# --------------------------------------------------------------------------
# batch normalization

@dataclass
class BnState:
    channels: int
    epsilon: float = EPSILON
    momentum: float = 0.1
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def bn_forward(x, state, train=True):
    """Normalize each channel by batch (train) or running (eval) statistics."""
    x3 = to_ncl(x)
    n, c, l = x3.shape
    if c != state.channels:
        raise ShapeError(f"BN configured for {state.channels} channels, got {c}")
    if train:
        if n * l < 2:
            raise DomainError(f"batch normalization needs at least 2 values per channel, got {n * l}")
        mom = channel_moments(x3)
        mean, var = mom.mean, mom.var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mean, var = state.running_mean, state.running_var
    rinv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x3 - mean[None, :, None]) * rinv[None, :, None]
    cache = {"xhat": xhat, "rinv": rinv, "train": train, "shape": np.shape(x)}
    return _restore(xhat, x), cache


def bn_backward(grad_out, cache):
    """Gradient of the batch transform, including the statistics' dependence on x."""
    try:
        xhat, rinv = cache["xhat"], cache["rinv"]
    except (KeyError, TypeError):
        raise InternalError("bn_backward received a cache that bn_forward did not produce") from None
    g = to_ncl(grad_out)
    if g.shape != xhat.shape:
        raise InternalError(f"gradient shape {g.shape} does not match cached forward {xhat.shape}")
    if not cache["train"]:
        return _restore(g * rinv[None, :, None], grad_out)
    m = g.shape[0] * g.shape[2]
    gsum = g.sum(axis=(0, 2))
    gxs = (g * xhat).sum(axis=(0, 2))
    dx = (rinv / m)[None, :, None] * (m * g - gsum[None, :, None] - xhat * gxs[None, :, None])
    return _restore(dx, grad_out)


# --------------------------------------------------------------------------
# grouped transform shared by BN / LN / IN / GN

def batch_groups(shape):
    n, c, l = shape
    return np.broadcast_to(np.arange(c)[None, :, None], (n, c, l))


def instance_groups(shape):
    n, c, l = shape
    return np.arange(n * c).reshape(n, c, 1).repeat(l, axis=2)


def layer_groups(shape):
    n, c, l = shape
    return np.broadcast_to(np.arange(n)[:, None, None], (n, c, l))


def group_groups(shape, num_groups):
    n, c, l = shape
    if c % num_groups:
        raise ShapeError(f"{c} channels cannot be split into {num_groups} groups")
    per = c // num_groups
    lab = np.arange(n)[:, None] * num_groups + (np.arange(c) // per)[None, :]
    return np.repeat(lab[:, :, None], l, axis=2)


def general_transform(x, groups=None, eps=EPSILON):
    """Center and scale every group of positions by its own mean and variance.

    ``groups`` holds an integer label per element, either ``(N, L)`` (a
    partition of positions applied inside each channel) or ``(N, C, L)``
    (arbitrary labels).  ``None`` is the batch partition: one group per channel.
    """
    x3 = to_ncl(x)
    n, c, l = x3.shape
    if groups is None:
        labels = batch_groups(x3.shape)
    else:
        groups = np.asarray(groups)
        if groups.shape == (n, l):
            labels = groups[:, None, :] * c + np.arange(c)[None, :, None]
        elif groups.shape == (n, c, l):
            labels = groups
        else:
            raise ShapeError(f"group labels of shape {groups.shape} do not fit {x3.shape}")
    uniq, inv = np.unique(labels.reshape(-1), return_inverse=True)
    counts = np.bincount(inv, minlength=uniq.size)
    if np.any(counts == 0):
        raise DomainError("empty normalization group")
    flat = x3.reshape(-1)
    mean = np.bincount(inv, weights=flat) / counts
    v = flat - mean[inv]
    var = np.bincount(inv, weights=v * v) / counts
    out = v / np.sqrt(var[inv] + eps)
    return _restore(out.reshape(x3.shape), x)


# --------------------------------------------------------------------------
# mixture normalization

def _mixture_forward(x3, tau, scale, eps):
    """Responsibility-weighted per-component normalization, aggregated.

    ``tau`` is ``(N*L, K)`` in :func:`channel_vectors` row order; ``scale`` the
    per-component aggregation coefficient (``1/sqrt(lambda_k)`` for MN).
    Components with zero responsibility mass are dropped with a warning.
    """
    X = channel_vectors(x3)
    mass = tau.sum(axis=0)
    live = np.flatnonzero(mass > 0)
    if live.size < tau.shape[1]:
        log.warning("dropping degenerate mixture components %s (zero mass in batch)",
                    np.setdiff1d(np.arange(tau.shape[1]), live).tolist())
    tl = tau[:, live]
    w = tl / mass[live][None, :]
    mean = w.T @ X
    V = X[None, :, :] - mean[:, None, :]
    var = np.einsum("mk,kmc->kc", w, V * V)
    rinv = 1.0 / np.sqrt(var + eps)
    XH = V * rinv[:, None, :]
    a = tl * scale[live][None, :]
    out = np.einsum("mk,kmc->mc", a, XH)
    cache = {"X": X, "tau": tau, "live": live, "mass": mass[live], "w": w, "V": V,
             "rinv": rinv, "XH": XH, "a": a, "scale": scale[live]}
    return from_channel_vectors(out, x3.shape), cache


def _mixture_backward(g_rows, cache):
    """Returns (dX rows, dtau) for :func:`_mixture_forward`."""
    X, tau, live = cache["X"], cache["tau"], cache["live"]
    w, V, rinv, XH, a = cache["w"], cache["V"], cache["rinv"], cache["XH"], cache["a"]
    da = np.einsum("mc,kmc->mk", g_rows, XH)
    dXH = a.T[:, :, None] * g_rows[None, :, :]
    dV = dXH * rinv[:, None, :]
    drinv = (dXH * V).sum(axis=1)
    dvar = -0.5 * drinv * rinv ** 3
    dV += 2.0 * w.T[:, :, None] * V * dvar[:, None, :]
    dw = np.einsum("kc,kmc->km", dvar, V * V)
    dX = dV.sum(axis=0)
    dmean = -dV.sum(axis=1)
    dX += w @ dmean
    dw += dmean @ X.T
    mass = cache["mass"]
    tl = tau[:, live]
    dwt = dw.T
    dtl = dwt / mass[None, :] - (dwt * tl).sum(axis=0)[None, :] / (mass * mass)[None, :]
    dtl += da * cache["scale"][None, :]
    dtau = np.zeros_like(tau)
    dtau[:, live] = dtl
    return dX, dtau


def _responsibility_backward(X, model, tau, dtau):
    dz = tau * (dtau - (dtau * tau).sum(axis=1, keepdims=True))
    inv = 1.0 / model.variances
    # d log N(x; mu_k, var_k) / dx = -(x - mu_k) / var_k
    return -(dz @ inv) * X + dz @ (model.means * inv)


def mn_forward(x, model, eps=EPSILON, return_cache=False):
    """Mixture normalization of ``x`` against a fitted GMM over channel vectors."""
    x3 = to_ncl(x)
    if model.d != x3.shape[1]:
        raise ShapeError(f"GMM dimension {model.d} does not match {x3.shape[1]} channels")
    X = channel_vectors(x3)
    tau = gmm.responsibilities(X, model)
    with np.errstate(divide="ignore"):
        scale = 1.0 / np.sqrt(model.weights)
    out, cache = _mixture_forward(x3, tau, scale, eps)
    out = _restore(out, x)
    if not return_cache:
        return out
    cache.update(model=model, shape3=x3.shape)
    return out, cache


def mn_backward(grad_out, cache):
    try:
        model, shape3 = cache["model"], cache["shape3"]
    except (KeyError, TypeError):
        raise InternalError("mn_backward received a cache that mn_forward did not produce") from None
    g3 = to_ncl(grad_out)
    if g3.shape != shape3:
        raise InternalError(f"gradient shape {g3.shape} does not match cached forward {shape3}")
    dX, dtau = _mixture_backward(channel_vectors(g3), cache)
    dX += _responsibility_backward(cache["X"], model, cache["tau"], dtau)
    return _restore(from_channel_vectors(dX, shape3), grad_out)


# --------------------------------------------------------------------------
# adaptive context normalization

@dataclass
class ContextParamTable:
    """Learned per-context means and variances, ``T x C``.

    Variances are stored through an unconstrained ``s`` with
    ``var = softplus(s) + var_floor`` so any optimizer step keeps them positive.
    """

    t: int
    channels: int
    epsilon: float = EPSILON
    mu: np.ndarray = None
    s: np.ndarray = None
    var_floor: float = VAR_FLOOR
    grad_mu: np.ndarray = field(default=None, repr=False)
    grad_s: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        shape = (self.t, self.channels)
        self.mu = np.zeros(shape) if self.mu is None else np.asarray(self.mu, dtype=np.float64)
        if self.s is None:
            self.s = np.full(shape, softplus_inv(1.0 - self.var_floor))
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.mu.shape != shape or self.s.shape != shape:
            raise ShapeError(f"context table expects {shape} arrays, got mu {self.mu.shape}, "
                             f"s {self.s.shape}")
        self.grad_mu = np.zeros(shape)
        self.grad_s = np.zeros(shape)

    @classmethod
    def from_variances(cls, mu, var, epsilon=EPSILON, var_floor=VAR_FLOOR):
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        var = np.broadcast_to(np.asarray(var, dtype=np.float64), mu.shape)
        return cls(mu.shape[0], mu.shape[1], epsilon, mu.copy(),
                   softplus_inv(var - var_floor), var_floor)

    @property
    def var(self):
        return softplus(self.s) + self.var_floor

    def accumulate(self, grad_mu, grad_var):
        self.grad_mu += grad_mu
        self.grad_s += grad_var * sigmoid(self.s)

    def zero_grad(self):
        self.grad_mu[...] = 0.0
        self.grad_s[...] = 0.0

    def to_dict(self):
        return {"t": self.t, "channels": self.channels, "epsilon": self.epsilon,
                "mu": self.mu.tolist(), "s": self.s.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(int(doc["t"]), int(doc["channels"]), float(doc["epsilon"]),
                   np.array(doc["mu"], dtype=np.float64), np.array(doc["s"], dtype=np.float64))


def _context_normalize(x3, ctx, mu, var, eps):
    rinv = 1.0 / np.sqrt(var + eps)
    return (x3 - mu[ctx][:, :, None]) * rinv[ctx][:, :, None]


def acn_forward(x, ctx, table):
    """``(x - mu_r) / sqrt(var_r + eps)`` with ``r`` the context of each sample."""
    x3 = to_ncl(x)
    if x3.shape[1] != table.channels:
        raise ShapeError(f"context table has {table.channels} channels, input has {x3.shape[1]}")
    ctx = _check_ctx(ctx, x3.shape[0], table.t)
    mu, var = table.mu.copy(), table.var
    out = _context_normalize(x3, ctx, mu, var, table.epsilon)
    cache = {"x3": x3, "ctx": ctx, "mu": mu, "var": var, "eps": table.epsilon,
             "shape": np.shape(x)}
    return _restore(out, x), cache


def _per_sample_context_grads(g3, x3, mu_s, var_s, eps):
    """Per-sample gradients w.r.t. the sample's (mu, var) rows, each ``N x C``."""
    rinv = 1.0 / np.sqrt(var_s + eps)
    gin = g3 * rinv[:, :, None]
    gmu = -gin.sum(axis=2)
    gvar = (g3 * (mu_s[:, :, None] - x3)).sum(axis=2) * 0.5 * rinv ** 3
    return gin, gmu, gvar


def acn_backward(grad_out, cache):
    """Returns ``(grad_in, grad_mu, grad_var)``; context gradients are ``T x C``."""
    try:
        x3, ctx, mu, var, eps = (cache["x3"], cache["ctx"], cache["mu"], cache["var"],
                                 cache["eps"])
    except (KeyError, TypeError):
        raise InternalError("acn_backward received a cache that acn_forward did not produce") from None
    g3 = to_ncl(grad_out)
    if g3.shape != x3.shape:
        raise InternalError(f"gradient shape {g3.shape} does not match cached forward {x3.shape}")
    gin, gmu, gvar = _per_sample_context_grads(g3, x3, mu[ctx], var[ctx], eps)
    onehot = np.eye(mu.shape[0])[ctx]
    return _restore(gin, grad_out), onehot.T @ gmu, onehot.T @ gvar


def per_context_inference(x, ctx, table):
    """Frozen-parameter context normalization, no cache."""
    x3 = to_ncl(x)
    if x3.shape[1] != table.channels:
        raise ShapeError(f"context table has {table.channels} channels, input has {x3.shape[1]}")
    ctx = _check_ctx(ctx, x3.shape[0], table.t)
    return _restore(_context_normalize(x3, ctx, table.mu, table.var, table.epsilon), x)


def context_mixture(table):
    """The T-component GMM with uniform weights implied by a context table."""
    return gmm.GmmModel(np.full(table.t, 1.0 / table.t), table.mu.copy(), table.var)


def acn_inference_aggregate(x, table):
    """Context-free inference: treat the learned contexts as equally likely mixture components."""
    x3 = to_ncl(x)
    model = context_mixture(table)
    if model.d != x3.shape[1]:
        raise ShapeError(f"context table has {table.channels} channels, input has {x3.shape[1]}")
    tau = gmm.responsibilities(channel_vectors(x3), model)
    out, _ = _mixture_forward(x3, tau, np.full(table.t, np.sqrt(table.t)), table.epsilon)
    return _restore(out, x)


def acn_base_forward(ctx_one_hot, w_mu, b_mu, w_var, b_var):
    """Map one-hot context codes to ``(mu, var)`` through two dense layers.

    Accepts a single T-vector or an ``N x T`` matrix of one-hot rows.
    """
    oh = np.asarray(ctx_one_hot, dtype=np.float64)
    single = oh.ndim == 1
    oh2 = oh[None, :] if single else oh
    if oh2.ndim != 2 or oh2.shape[1] != np.shape(w_mu)[0]:
        raise ShapeError(f"one-hot input of shape {oh.shape} does not fit weights {np.shape(w_mu)}")
    if not (np.all((oh2 == 0) | (oh2 == 1)) and np.all(oh2.sum(axis=1) == 1)):
        raise DomainError("ACN-base expects one-hot context codes")
    mu = oh2 @ w_mu + b_mu
    var = softplus(oh2 @ w_var + b_var)
    return (mu[0], var[0]) if single else (mu, var)


# --------------------------------------------------------------------------
# layers

class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, channels, eps=EPSILON, momentum=0.1):
        super().__init__()
        self.state = BnState(channels, eps, momentum)

    def forward(self, x, ctx=None, train=True):
        out, inner = bn_forward(x, self.state, train)
        return out, self._cache(inner=inner)

    def backward(self, grad, cache):
        self._check(cache)
        return bn_backward(grad, cache["inner"])

    def extra_state(self):
        return {"running_mean": self.state.running_mean.tolist(),
                "running_var": self.state.running_var.tolist()}

    def load_extra_state(self, state):
        self.state.running_mean = np.array(state["running_mean"], dtype=np.float64)
        self.state.running_var = np.array(state["running_var"], dtype=np.float64)


class MixtureNorm(Layer):
    """MN layer.  ``model`` must be fitted (see :meth:`fit`) before use."""

    kind = "mn"

    def __init__(self, channels, k=3, eps=EPSILON):
        super().__init__()
        self.channels = channels
        self.k = k
        self.eps = eps
        self.model = None

    def fit(self, activations, seed=0, max_iters=200, tol=1e-6):
        self.model = gmm.em_fit(channel_vectors(activations), self.k, max_iters=max_iters,
                                tol=tol, seed=seed)
        return self.model

    def forward(self, x, ctx=None, train=True):
        if self.model is None:
            raise DomainError("MixtureNorm used before its mixture model was fitted")
        out, inner = mn_forward(x, self.model, self.eps, return_cache=True)
        return out, self._cache(inner=inner)

    def backward(self, grad, cache):
        self._check(cache)
        return mn_backward(grad, cache["inner"])

    def extra_state(self):
        return {"model": None if self.model is None else self.model.to_dict()}

    def load_extra_state(self, state):
        self.model = None if state.get("model") is None else gmm.GmmModel.from_dict(state["model"])


class ContextNorm(Layer):
    """ACN layer with a directly learned context table.

    ``inference`` selects eval-mode behaviour: ``"per_context"`` uses each
    sample's own context, ``"aggregate"`` ignores labels and mixes all contexts.
    """

    kind = "acn"
    uses_context = True

    def __init__(self, channels, t, eps=EPSILON, inference="per_context"):
        super().__init__()
        self.table = ContextParamTable(t, channels, eps)
        self.params = {"mu": self.table.mu, "s": self.table.s}
        self.grads = {"mu": self.table.grad_mu, "s": self.table.grad_s}
        self.inference = inference

    def forward(self, x, ctx=None, train=True):
        if not train and self.inference == "aggregate":
            return acn_inference_aggregate(x, self.table), self._cache(frozen=True)
        if ctx is None:
            raise DomainError("ContextNorm needs context labels")
        out, inner = acn_forward(x, ctx, self.table)
        return out, self._cache(inner=inner)

    def backward(self, grad, cache):
        self._check(cache)
        if "inner" not in cache:
            raise InternalError("cannot backpropagate through context-free inference")
        gin, gmu, gvar = acn_backward(grad, cache["inner"])
        self.table.accumulate(gmu, gvar)
        return gin


class ContextNormBase(Layer):
    """ACN-base: two one-layer networks map a one-hot context to ``mu`` and ``var``."""

    kind = "acn_base"
    uses_context = True

    def __init__(self, channels, t, eps=EPSILON, inference="per_context"):
        super().__init__()
        self.t = t
        self.channels = channels
        self.eps = eps
        self.inference = inference
        self.add_param("w_mu", np.zeros((t, channels)))
        self.add_param("b_mu", np.zeros(channels))
        self.add_param("w_var", np.zeros((t, channels)))
        self.add_param("b_var", np.full(channels, softplus_inv(1.0)))

    def context_params(self, ctx):
        onehot = np.eye(self.t)[ctx]
        p = self.params
        return acn_base_forward(onehot, p["w_mu"], p["b_mu"], p["w_var"], p["b_var"])

    def table(self):
        mu, var = self.context_params(np.arange(self.t))
        return ContextParamTable.from_variances(mu, var, self.eps, var_floor=0.0)

    def forward(self, x, ctx=None, train=True):
        if not train and self.inference == "aggregate":
            return acn_inference_aggregate(x, self.table()), self._cache(frozen=True)
        if ctx is None:
            raise DomainError("ContextNormBase needs context labels")
        x3 = to_ncl(x)
        if x3.shape[1] != self.channels:
            raise ShapeError(f"ACN-base has {self.channels} channels, input has {x3.shape[1]}")
        ctx = _check_ctx(ctx, x3.shape[0], self.t)
        mu, var = self.context_params(ctx)
        rinv = 1.0 / np.sqrt(var + self.eps)
        out = (x3 - mu[:, :, None]) * rinv[:, :, None]
        return _restore(out, x), self._cache(x3=x3, ctx=ctx, mu=mu, var=var)

    def backward(self, grad, cache):
        self._check(cache)
        if "x3" not in cache:
            raise InternalError("cannot backpropagate through context-free inference")
        x3, ctx, mu, var = cache["x3"], cache["ctx"], cache["mu"], cache["var"]
        gin, gmu, gvar = _per_sample_context_grads(to_ncl(grad), x3, mu, var, self.eps)
        onehot = np.eye(self.t)[ctx]
        p = self.params
        pre_var = onehot @ p["w_var"] + p["b_var"]
        gz = gvar * sigmoid(pre_var)
        self.grads["w_mu"] += onehot.T @ gmu
        self.grads["b_mu"] += gmu.sum(axis=0)
        self.grads["w_var"] += onehot.T @ gz
        self.grads["b_var"] += gz.sum(axis=0)
        return _restore(gin, grad)


class IdentityNorm(Layer):
    """Pass-through placeholder for a normalization slot."""

    kind = "identity"

    def forward(self, x, ctx=None, train=True):
        return x, self._cache()

    def backward(self, grad, cache):
        self._check(cache)
        return grad


class ChannelAffine(Layer):
    """Optional learned per-channel scale and shift placed after a normalizer."""

    kind = "affine"

    def __init__(self, channels):
        super().__init__()
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))

    def forward(self, x, ctx=None, train=True):
        x3 = to_ncl(x)
        out = x3 * self.params["gamma"][None, :, None] + self.params["beta"][None, :, None]
        return _restore(out, x), self._cache(x3=x3)

    def backward(self, grad, cache):
        self._check(cache)
        g3 = to_ncl(grad)
        self.grads["gamma"] += (g3 * cache["x3"]).sum(axis=(0, 2))
        self.grads["beta"] += g3.sum(axis=(0, 2))
        return _restore(g3 * self.params["gamma"][None, :, None], grad)
