"""Adam optimizer over a ParamStore."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore


class Adam:
    """Standard Adam with bias correction.

    Moment buffers share each parameter's dtype; `step` is deterministic
    given the store contents and optimizer state.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def state_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Moment payloads in parameter declaration order."""
        names = self.params.names()
        m = np.concatenate([self.m[n].ravel() for n in names]) if names else np.zeros(0)
        v = np.concatenate([self.v[n].ravel() for n in names]) if names else np.zeros(0)
        return m, v

    def load_state_arrays(self, m_vec: np.ndarray, v_vec: np.ndarray, t: int) -> None:
        m_vec = np.asarray(m_vec)
        v_vec = np.asarray(v_vec)
        total = self.params.n_values()
        if m_vec.size != total or v_vec.size != total:
            raise ValueError("optimizer state payload size mismatch")
        offset = 0
        for name, p in self.params:
            n = p.data.size
            self.m[name][...] = m_vec[offset:offset + n].reshape(p.data.shape)
            self.v[name][...] = v_vec[offset:offset + n].reshape(p.data.shape)
            offset += n
        self.t = int(t)
