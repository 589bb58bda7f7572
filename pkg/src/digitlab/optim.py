"""RMSprop and Adam with per-parameter state buffers."""

from collections import OrderedDict

import numpy as np

from .errors import NonFiniteError


class Optimizer:
    """Holds an ordered ``name -> Tensor`` parameter set and its state buffers."""

    def __init__(self, params, lr):
        self.params = OrderedDict(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def _grads(self):
        grads = OrderedDict()
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step aborted")
            grads[name] = g
        return grads

    def step(self):
        raise NotImplementedError

    def state_dict(self):
        raise NotImplementedError

    def load_state_dict(self, state):
        raise NotImplementedError


class RMSprop(Optimizer):
    """``v <- rho v + (1-rho) g^2``;  ``theta <- theta - lr g / (sqrt(v) + eps)``."""

    def __init__(self, params, lr=0.001, rho=0.9, eps=1e-8):
        super().__init__(params, lr)
        self.rho, self.eps = rho, eps
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())

    def step(self):
        grads = self._grads()
        rho = self.rho
        for name, p in self.params.items():
            g = grads[name]
            v = rho * self.v[name] + (1 - rho) * g * g
            self.v[name] = v.astype(p.dtype, copy=False)
            p.data = (p.data - self.lr * g / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self):
        return OrderedDict((f"v/{n}", v) for n, v in self.v.items())

    def load_state_dict(self, state):
        for n in self.v:
            self.v[n] = np.array(state[f"v/{n}"], dtype=self.v[n].dtype).reshape(self.v[n].shape)


class Adam(Optimizer):
    """Adam with bias correction. ``beta1`` defaults to 0.5 (GAN convention)."""

    def __init__(self, params, lr=0.002, beta1=0.5, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())

    def step(self):
        grads = self._grads()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = (b1 * self.m[name] + (1 - b1) * g).astype(p.dtype, copy=False)
            v = (b2 * self.v[name] + (1 - b2) * g * g).astype(p.dtype, copy=False)
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state_dict(self):
        state = OrderedDict()
        for n in self.m:
            state[f"m/{n}"] = self.m[n]
            state[f"v/{n}"] = self.v[n]
        state["t"] = np.array([self.t], dtype=np.float32)
        return state

    def load_state_dict(self, state):
        for n in self.m:
            self.m[n] = np.array(state[f"m/{n}"], dtype=self.m[n].dtype).reshape(self.m[n].shape)
            self.v[n] = np.array(state[f"v/{n}"], dtype=self.v[n].dtype).reshape(self.v[n].shape)
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
