"""Adam with bias correction over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import NumericsError, Tensor


class Adam:
    """Standard Adam.  Parameters with no gradient this step are untouched.

    State is per parameter: first/second moment arrays plus a step counter
    that only advances when the parameter actually receives a gradient, so
    alternating-task training keeps correct bias correction per parameter.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise NumericsError(f"Adam lr must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, dict] = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            with np.errstate(all="ignore"):  # the sum probes for inf/NaN
                finite = bool(np.isfinite(g.sum()))
            if not finite:
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            if g.shape != p.data.shape:
                raise NumericsError(
                    f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}"
                )
            st = self.state[name]
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
