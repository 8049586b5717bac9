"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np


class GradientError(ValueError):
    """Non-finite or mismatched gradient, naming the parameter tensor."""


class Adam:
    """Bias-corrected Adam. Moments m, v and timestep t are tracked per
    parameter tensor; update is p -= lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params: dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    _CHUNK = 1 << 18

    def step(self, grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            if name not in self.params:
                raise GradientError(f"gradient for unknown parameter {name!r}")
            p = self.params[name]
            if g.shape != p.shape:
                raise GradientError(
                    f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}"
                )
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient for parameter {name!r}")
            g = g.astype(p.dtype, copy=False)
            self.t[name] += 1
            t = self.t[name]
            c1 = 1.0 / (1.0 - self.beta1 ** t)
            c2 = 1.0 / (1.0 - self.beta2 ** t)
            pf, mf, vf, gf = (a.reshape(-1) for a in (p, self.m[name], self.v[name], g))
            # chunked so each element makes one trip through cache per step
            for lo in range(0, pf.size, self._CHUNK):
                sl = slice(lo, lo + self._CHUNK)
                gc, mc, vc = gf[sl], mf[sl], vf[sl]
                mc *= self.beta1
                mc += (1 - self.beta1) * gc
                vc *= self.beta2
                vc += (1 - self.beta2) * (gc * gc)
                pf[sl] -= self.lr * (mc * c1) / (np.sqrt(vc * c2) + self.eps)
