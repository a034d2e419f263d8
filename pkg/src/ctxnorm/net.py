"""A small sequential network stack with hand-written backward passes.

Layers: dense, 3x3 convolution (im2col), 2x2 mean pooling, ReLU, flatten and
the normalizers from :mod:`ctxnorm.norm`.  Training uses softmax
cross-entropy and AdamW.
"""
import json
import math

import numpy as np

from . import norm
from .errors import ConfigError, DomainError, FormatError, InternalError, ShapeError
from .layer import Layer

NORM_CHOICES = ("bn", "mn", "acn", "acn_base", "identity")


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        limit = math.sqrt(6.0 / n_in)
        self.add_param("w", rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.add_param("b", np.zeros(n_out))

    def forward(self, x, ctx=None, train=True):
        if x.ndim != 2 or x.shape[1] != self.params["w"].shape[0]:
            raise ShapeError(f"dense layer expects (N, {self.params['w'].shape[0]}), got {x.shape}")
        return x @ self.params["w"] + self.params["b"], self._cache(x=x)

    def backward(self, grad, cache):
        self._check(cache)
        self.grads["w"] += cache["x"].T @ grad
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["w"].T


def _im2col(xp, h, w):
    # xp: zero-padded (N, C, h+2, w+2) -> (N*h*w, C*9)
    n, c = xp.shape[:2]
    cols = np.empty((n, h, w, c, 3, 3))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * 9)


def _col2im(dcols, shape):
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1."""

    kind = "conv3x3"

    def __init__(self, c_in, c_out, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = c_in * 9
        limit = math.sqrt(6.0 / fan_in)
        self.add_param("w", rng.uniform(-limit, limit, size=(fan_in, c_out)))
        self.add_param("b", np.zeros(c_out))

    def forward(self, x, ctx=None, train=True):
        if x.ndim != 4 or x.shape[1] * 9 != self.params["w"].shape[0]:
            raise ShapeError(f"conv layer expects (N, {self.params['w'].shape[0] // 9}, H, W), "
                             f"got {x.shape}")
        n, _, h, w = x.shape
        cols = _im2col(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))), h, w)
        out = cols @ self.params["w"] + self.params["b"]
        out = out.reshape(n, h, w, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), self._cache(cols=cols, shape=x.shape)

    def backward(self, grad, cache):
        self._check(cache)
        n, c_out, h, w = grad.shape
        g = grad.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        self.grads["w"] += cache["cols"].T @ g
        self.grads["b"] += g.sum(axis=0)
        return _col2im(g @ self.params["w"].T, cache["shape"])


class MeanPool2x2(Layer):
    """Non-overlapping 2x2 average; an odd trailing row/column is dropped."""

    kind = "meanpool2x2"

    def forward(self, x, ctx=None, train=True):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ShapeError(f"cannot 2x2-pool a {h}x{w} map")
        xc = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
        return xc.mean(axis=(3, 5)), self._cache(shape=x.shape)

    def backward(self, grad, cache):
        self._check(cache)
        n, c, h, w = cache["shape"]
        dx = np.zeros((n, c, h, w))
        up = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25
        dx[:, :, :up.shape[2], :up.shape[3]] = up
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx=None, train=True):
        mask = x > 0
        return x * mask, self._cache(mask=mask)

    def backward(self, grad, cache):
        self._check(cache)
        return grad * cache["mask"]


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx=None, train=True):
        return x.reshape(x.shape[0], -1), self._cache(shape=x.shape)

    def backward(self, grad, cache):
        self._check(cache)
        return grad.reshape(cache["shape"])


class Network:
    """Ordered list of layers; parameters are addressed as ``"<index>.<name>"``."""

    def __init__(self, layers=(), meta=None):
        self.layers = list(layers)
        self.meta = dict(meta or {})

    @property
    def needs_context(self):
        return any(layer.uses_context for layer in self.layers)

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", p, layer.grads[name]

    def param_count(self):
        return sum(p.size for _, p, _ in self.parameters())

    def norm_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(
            l, (norm.BatchNorm, norm.MixtureNorm, norm.ContextNorm, norm.ContextNormBase,
                norm.IdentityNorm))]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, ctx=None, train=True, stop=None):
        return net_forward(self, x, ctx, train, stop)

    def backward(self, grad, caches):
        return net_backward(self, grad, caches)


def _context_required(layers, train):
    for layer in layers:
        if layer.uses_context and (train or getattr(layer, "inference", "per_context") != "aggregate"):
            return True
    return False


def net_forward(net, x, ctx=None, train=True, stop=None):
    """Apply layers in order; ``stop`` ends before that layer index.

    Returns ``(out, caches)``.
    """
    if ctx is None and _context_required(net.layers[:stop], train):
        raise ConfigError("network contains a context normalization layer but no contexts were given")
    caches = []
    out = np.asarray(x, dtype=np.float64)
    for layer in net.layers[:stop]:
        out, cache = layer.forward(out, ctx, train)
        caches.append(cache)
    return out, caches


def net_backward(net, grad, caches):
    """Reverse traversal; parameter gradients are accumulated in each layer."""
    if len(caches) != len(net.layers):
        raise InternalError(f"{len(caches)} caches for {len(net.layers)} layers")
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        grad = layer.backward(grad, cache)
    return grad


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / M``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m, k = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"expected {m} labels, got shape {labels.shape}")
    if m and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(m)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / m


class AdamW:
    """Adam with decoupled weight decay; moments are kept per parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named_params):
        """Update ``(name, param, grad)`` triples in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p, g in named_params:
            if p.shape != g.shape:
                raise ShapeError(f"{name}: parameter {p.shape} and gradient {g.shape} differ")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t,
                "m": {k: _encode(v) for k, v in self.m.items()},
                "v": {k: _encode(v) for k, v in self.v.items()}}

    @classmethod
    def from_dict(cls, doc):
        opt = cls(doc["lr"], doc["beta1"], doc["beta2"], doc["eps"], doc["weight_decay"])
        opt.t = int(doc["t"])
        opt.m = {k: _decode(v) for k, v in doc["m"].items()}
        opt.v = {k: _decode(v) for k, v in doc["v"].items()}
        return opt


def adamw_step(net, opt):
    """One optimizer update of every network parameter, then clear gradients."""
    opt.step(net.parameters())
    net.zero_grad()


def cosine_lr(base_lr, step, total_steps):
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


# --------------------------------------------------------------------------
# gradient checking

def loss_and_grads(net, x, labels, ctx=None):
    net.zero_grad()
    logits, caches = net_forward(net, x, ctx, train=True)
    loss, g = softmax_cross_entropy(logits, labels)
    gx = net_backward(net, g, caches)
    grads = {name: gr.copy() for name, _, gr in net.parameters()}
    return loss, grads, gx


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; a sign flip scores 2."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(net, x, labels, ctx=None, select=None, h=1e-5, max_entries=None,
                      check_input=False, corrupt=None, rng=None, floor=1e-6):
    """Worst relative error between backprop and central differences.

    ``select`` filters parameter names (callable or collection, default all);
    ``max_entries`` samples at most that many entries per parameter;
    ``corrupt(name, grad)`` may tamper with the analytic gradients, which is
    how the checker itself is tested.  Returns ``(max_error, per_param)``.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads, gx = loss_and_grads(net, x, labels, ctx)

    def loss_at():
        logits, _ = net_forward(net, x, ctx, train=True)
        return softmax_cross_entropy(logits, labels)[0]

    def entries(arr):
        idx = list(np.ndindex(arr.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        return idx

    saved = [layer.extra_state() for layer in net.layers]
    report = {}
    for name, p, _ in list(net.parameters()):
        if select is not None and not (select(name) if callable(select) else name in select):
            continue
        analytic = grads[name] if corrupt is None else corrupt(name, grads[name].copy())
        worst = 0.0
        for i in entries(p):
            old = p[i]
            p[i] = old + h
            fp = loss_at()
            p[i] = old - h
            fm = loss_at()
            p[i] = old
            worst = max(worst, float(relative_error(analytic[i], (fp - fm) / (2 * h), floor)))
        report[name] = worst
    if check_input:
        analytic = gx if corrupt is None else corrupt("input", gx.copy())
        worst = 0.0
        xs = x
        for i in entries(xs):
            old = xs[i]
            xs[i] = old + h
            fp = loss_at()
            xs[i] = old - h
            fm = loss_at()
            xs[i] = old
            worst = max(worst, float(relative_error(analytic[i], (fp - fm) / (2 * h), floor)))
        report["input"] = worst
    for layer, state in zip(net.layers, saved):
        layer.load_extra_state(state)
    net.zero_grad()
    return (max(report.values()) if report else 0.0), report


# --------------------------------------------------------------------------
# presets

def make_norm(choice, channels, contexts=1, mixture_k=3, eps=norm.EPSILON,
              inference="per_context"):
    if choice == "bn":
        return norm.BatchNorm(channels, eps)
    if choice == "mn":
        return norm.MixtureNorm(channels, mixture_k, eps)
    if choice == "acn":
        return norm.ContextNorm(channels, contexts, eps, inference)
    if choice == "acn_base":
        return norm.ContextNormBase(channels, contexts, eps, inference)
    if choice == "identity":
        return norm.IdentityNorm()
    raise ConfigError(f"unknown normalization {choice!r}; choose from {NORM_CHOICES}")


PRESET_DEFAULTS = {
    "mlp2": {"widths": (64,), "slots": 1, "position": 1},
    "domain_clf": {"widths": (64,), "slots": 1, "position": 1},
    "convnet4": {"widths": (16, 32, 32, 32), "slots": 4, "position": 3},
}


def _slot_choices(preset, norm_choice, norm_position, base="bn"):
    slots = PRESET_DEFAULTS[preset]["slots"]
    if isinstance(norm_choice, (list, tuple)):
        if len(norm_choice) != slots:
            raise ConfigError(f"{preset} has {slots} normalization slots, got {len(norm_choice)} choices")
        return list(norm_choice)
    pos = PRESET_DEFAULTS[preset]["position"] if norm_position is None else int(norm_position)
    if not 1 <= pos <= slots:
        raise ConfigError(f"{preset} normalization position must be in [1, {slots}], got {pos}")
    choices = [base] * slots
    choices[pos - 1] = norm_choice
    return choices


def build_preset(name, input_shape, num_classes, widths=None, norm_choice="bn", norm_position=None,
                 contexts=1, mixture_k=3, eps=norm.EPSILON, affine=False, seed=0,
                 inference="per_context"):
    """Construct a named network.

    ``input_shape`` excludes the batch axis: ``(D,)`` for the dense presets,
    ``(C, H, W)`` for ``convnet4``.  ``norm_choice`` goes into slot
    ``norm_position`` (1-based) and every other slot keeps BN; a list gives one
    choice per slot.
    """
    if name not in PRESET_DEFAULTS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESET_DEFAULTS)}")
    widths = tuple(PRESET_DEFAULTS[name]["widths"] if widths is None else widths)
    choices = _slot_choices(name, norm_choice, norm_position)
    rng = np.random.default_rng(seed)

    def slot(choice, channels):
        out = [make_norm(choice, channels, contexts, mixture_k, eps, inference)]
        if affine and choice != "identity":
            out.append(norm.ChannelAffine(channels))
        return out

    layers = []
    if name in ("mlp2", "domain_clf"):
        if len(input_shape) != 1 or len(widths) != 1:
            raise ConfigError(f"{name} needs a flat input and one hidden width")
        d, hidden = int(input_shape[0]), int(widths[0])
        if name == "mlp2":
            layers += [Dense(d, hidden, rng)] + slot(choices[0], hidden) + [ReLU()]
        else:
            layers += slot(choices[0], d) + [Dense(d, hidden, rng), ReLU()]
        layers.append(Dense(hidden, num_classes, rng))
    else:
        if len(input_shape) != 3 or len(widths) != 4:
            raise ConfigError("convnet4 needs a (C, H, W) input and four widths")
        c, h, w = (int(v) for v in input_shape)
        for i, width in enumerate(widths):
            if i:
                layers.append(MeanPool2x2())
                h, w = h // 2, w // 2
            layers += [Conv3x3(c, width, rng)] + slot(choices[i], width) + [ReLU()]
            c = width
        if h < 1 or w < 1:
            raise ConfigError(f"input {input_shape} too small for three 2x2 poolings")
        layers += [Flatten(), Dense(c * h * w, num_classes, rng)]
    meta = {"preset": name, "input_shape": list(input_shape), "num_classes": num_classes,
            "widths": list(widths), "norm_choices": choices, "contexts": contexts,
            "mixture_k": mixture_k, "eps": eps, "affine": affine, "seed": seed,
            "inference": inference}
    return Network(layers, meta)


# --------------------------------------------------------------------------
# checkpoints

def _encode(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _decode(doc):
    return np.array(doc["data"], dtype=np.float64).reshape(doc["shape"])


def checkpoint_dict(net, opt=None, extra=None):
    layers = []
    for layer in net.layers:
        layers.append({"kind": layer.kind,
                       "params": {k: _encode(v) for k, v in layer.params.items()},
                       "state": layer.extra_state()})
    return {"format": "ctxnorm-checkpoint", "version": 1, "meta": net.meta, "layers": layers,
            "optimizer": None if opt is None else opt.to_dict(), "extra": extra or {}}


def save_checkpoint(path, net, opt=None, extra=None):
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(net, opt, extra), fh)


def restore_checkpoint(doc, net=None):
    """Rebuild (or fill) a network from a checkpoint document.

    Returns ``(net, optimizer_or_None, extra)``.
    """
    if doc.get("format") != "ctxnorm-checkpoint":
        raise FormatError("not a ctxnorm checkpoint")
    if net is None:
        meta = doc["meta"]
        net = build_preset(meta["preset"], meta["input_shape"], meta["num_classes"],
                           meta["widths"], meta["norm_choices"], None, meta["contexts"],
                           meta["mixture_k"], meta["eps"], meta["affine"], meta["seed"],
                           meta["inference"])
    if len(doc["layers"]) != len(net.layers):
        raise FormatError(f"checkpoint has {len(doc['layers'])} layers, network {len(net.layers)}")
    for layer, entry in zip(net.layers, doc["layers"]):
        if entry["kind"] != layer.kind:
            raise FormatError(f"checkpoint layer {entry['kind']!r} does not match {layer.kind!r}")
        for k, v in entry["params"].items():
            layer.params[k][...] = _decode(v)
        layer.load_extra_state(entry["state"])
    opt = None if doc.get("optimizer") is None else AdamW.from_dict(doc["optimizer"])
    return net, opt, doc.get("extra", {})


def load_checkpoint(path, net=None):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return restore_checkpoint(doc, net)
