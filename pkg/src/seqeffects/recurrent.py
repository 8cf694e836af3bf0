"""A gated recurrent cell with explicit reverse-mode gradients.

One cell serves every sequence map in the package: the basis feature map and
the black-box autoregressive baseline.  All operations are batched: inputs
are (B, in_dim), hidden states (B, hidden).  The backward pass consumes the
per-step caches recorded by the forward pass and accumulates parameter
gradients in plain dicts keyed by field name, which is what the optimizer and
the finite-difference checks operate on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .effects import sigmoid

CELL_FIELDS = ("Wz", "Wr", "Wc", "Uz", "Ur", "Uc", "bz", "br", "bc")


@dataclass
class GatedCell:
    """Update/reset-gated recurrence with tanh candidate state."""

    Wz: np.ndarray
    Wr: np.ndarray
    Wc: np.ndarray
    Uz: np.ndarray
    Ur: np.ndarray
    Uc: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bc: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.Wz.shape[0]

    @property
    def hidden(self) -> int:
        return self.Wz.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, in_dim: int, hidden: int,
               scale: float = 0.5) -> "GatedCell":
        def u(*shape):
            return rng.uniform(-scale, scale, size=shape)

        return cls(
            Wz=u(in_dim, hidden), Wr=u(in_dim, hidden), Wc=u(in_dim, hidden),
            Uz=u(hidden, hidden), Ur=u(hidden, hidden), Uc=u(hidden, hidden),
            bz=u(hidden), br=u(hidden), bc=u(hidden),
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {f: np.zeros_like(getattr(self, f)) for f in CELL_FIELDS}

    def step(self, x: np.ndarray, h_prev: np.ndarray):
        """One transition.  Returns (h_new, cache-for-backward)."""
        zt = sigmoid(x @ self.Wz + h_prev @ self.Uz + self.bz)
        rt = sigmoid(x @ self.Wr + h_prev @ self.Ur + self.br)
        ct = np.tanh(x @ self.Wc + (rt * h_prev) @ self.Uc + self.bc)
        h = (1.0 - zt) * h_prev + zt * ct
        return h, (x, h_prev, zt, rt, ct)

    def step_back(self, cache, dh: np.ndarray, grads: dict[str, np.ndarray]):
        """Backward through one transition; accumulates into grads.

        Returns (dx, dh_prev): gradients w.r.t. the step input and the
        incoming hidden state.
        """
        x, h_prev, zt, rt, ct = cache
        dz = dh * (ct - h_prev)
        dct = dh * zt
        dh_prev = dh * (1.0 - zt)

        dac = dct * (1.0 - ct * ct)
        grads["Wc"] += x.T @ dac
        grads["Uc"] += (rt * h_prev).T @ dac
        grads["bc"] += dac.sum(axis=0)
        drh = dac @ self.Uc.T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * rt

        dar = dr * rt * (1.0 - rt)
        grads["Wr"] += x.T @ dar
        grads["Ur"] += h_prev.T @ dar
        grads["br"] += dar.sum(axis=0)
        dh_prev = dh_prev + dar @ self.Ur.T

        daz = dz * zt * (1.0 - zt)
        grads["Wz"] += x.T @ daz
        grads["Uz"] += h_prev.T @ daz
        grads["bz"] += daz.sum(axis=0)
        dh_prev = dh_prev + daz @ self.Uz.T

        dx = dac @ self.Wc.T + dar @ self.Wr.T + daz @ self.Wz.T
        return dx, dh_prev

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in CELL_FIELDS}

    @classmethod
    def from_dict(cls, obj: dict) -> "GatedCell":
        return cls(**{f: np.asarray(obj[f], dtype=float) for f in CELL_FIELDS})


def run_sequence(cell: GatedCell, inputs: list[np.ndarray], h0: np.ndarray):
    """Run the cell over a list of (B, in_dim) steps.

    Returns (hs, caches) where hs[j] is the hidden state after consuming
    inputs[j].
    """
    h = h0
    hs, caches = [], []
    for x in inputs:
        h, cache = cell.step(x, h)
        hs.append(h)
        caches.append(cache)
    return hs, caches
