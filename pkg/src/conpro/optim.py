"""Stochastic gradient descent with classical (heavy-ball) momentum.

Update rule per parameter: v <- mu * v + g, then p <- p - lr * v.
Velocities are part of the training state and round-trip through
checkpoints, so resumed runs continue bit-for-bit.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


class SgdMomentum:
    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float | Mapping[str, float],
        momentum: float = 0.9,
    ):
        """`lr` is either one rate for every parameter or a per-name map.

        A per-name map must cover every parameter exactly; missing or
        unknown names are configuration errors.
        """
        if momentum < 0.0 or momentum >= 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = dict(params)
        if isinstance(lr, Mapping):
            missing = sorted(set(self.params) - set(lr))
            extra = sorted(set(lr) - set(self.params))
            if missing or extra:
                raise ValueError(f"lr map mismatch: missing={missing} unknown={extra}")
            self.lr = {name: float(rate) for name, rate in lr.items()}
        else:
            self.lr = {name: float(lr) for name in self.params}
        for name, rate in self.lr.items():
            if rate < 0.0:
                raise ValueError(f"learning rate for {name!r} must be >= 0, got {rate}")
        self.momentum = float(momentum)
        self.velocities: dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params.items()
        }

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params."""
        mu = np.float32(self.momentum)
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; run backward() first")
            v = self.velocities[name]
            v *= mu
            v += p.grad
            lr = np.float32(self.lr[name])
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_velocities(self) -> None:
        """Drop accumulated momentum, e.g. at a phase boundary."""
        for v in self.velocities.values():
            v[...] = 0.0

    def load_velocities(self, velocities: Mapping[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(velocities))
        extra = sorted(set(velocities) - set(self.params))
        if missing or extra:
            raise ValueError(f"velocity map mismatch: missing={missing} unknown={extra}")
        for name, v in velocities.items():
            arr = np.asarray(v, dtype=np.float32)
            if arr.shape != self.params[name].data.shape:
                raise ValueError(
                    f"velocity shape for {name!r}: {arr.shape} != {self.params[name].data.shape}"
                )
            self.velocities[name] = arr.copy()
