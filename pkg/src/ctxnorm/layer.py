"""Base class for layers with hand-written backward passes."""
import numpy as np

from .errors import InternalError


class Layer:
    """A differentiable layer.

    ``forward`` returns ``(out, cache)``; ``backward`` consumes the cache of the
    matching forward call, returns the input gradient and *adds* parameter
    gradients into ``self.grads``.
    """

    kind = "layer"
    uses_context = False

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, ctx=None, train=True):
        raise NotImplementedError

    def backward(self, grad, cache):
        raise NotImplementedError

    def _cache(self, **items):
        items["_owner"] = id(self)
        return items

    def _check(self, cache):
        if not isinstance(cache, dict) or cache.get("_owner") != id(self):
            raise InternalError(f"{self.kind}: backward received a cache from another layer")

    def add_param(self, name, value):
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def extra_state(self):
        """Non-trainable state that a checkpoint must carry (JSON-friendly)."""
        return {}

    def load_extra_state(self, state):
        pass

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"
