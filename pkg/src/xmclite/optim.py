"""Adam with bias correction and per-parameter-group learning rates.

Three groups: the token-embedding table, the two projection heads, and the
classifier table.  Updates are dense; a row whose gradient is zero on some
step still drifts while its first moment decays, which is the standard dense
Adam behavior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingAbort
from .model import Grads, ModelParams

_GROUP_OF = {"embed": "encoder", "de_w": "heads", "de_b": "heads",
             "clf_w": "heads", "clf_b": "heads", "classifiers": "classifiers"}


@dataclass
class Adam:
    lr_encoder: float = 1e-4
    lr_heads: float = 2e-4
    lr_classifiers: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _lr(self, name: str) -> float:
        return {"encoder": self.lr_encoder, "heads": self.lr_heads,
                "classifiers": self.lr_classifiers}[_GROUP_OF[name]]

    def step(self, params: ModelParams, grads: Grads,
             grad_clip: float = 0.0) -> None:
        """Apply one update in place; aborts on non-finite gradients."""
        arrays = grads.arrays()
        for name, g in arrays.items():
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(
                    f"non-finite gradient in {name} at step {self.step_count + 1}")
        if grad_clip > 0.0:
            norm = grads.global_norm()
            if norm > grad_clip:
                grads.scale_(grad_clip / norm)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, g in arrays.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params.arrays()[name] -= self._lr(name) * update
        try:
            params.assert_finite()
        except FloatingPointError as exc:
            raise TrainingAbort(f"{exc} after step {t}") from exc
