"""Per-level intervention effect embeddings and their temporal composition.

An intervention level ``d > 0`` applied at time ``t'`` contributes a
multiplicative r-vector factor to every later time ``t >= t'``.  Two families
are supported:

* unbounded: ``sigmoid(w1)**(t - t') * w2 + w3`` per latent coordinate, a
  geometric decay toward the stationary contribution ``w3``;
* bounded: a free per-lag table ``w[lag]`` that clamps at its last column.

Level 0 is the idle action and always contributes the all-ones factor.  The
aggregate effect at time ``t`` is the elementwise product of the factors of
every action applied at times 1..t, so an action has an instantaneous lag-0
term and the composition is order- and spacing-aware.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    # clip keeps exp in range; sigmoid saturates to 0/1 long before +-700
    return 1.0 / (1.0 + np.exp(-np.clip(np.asarray(x, dtype=float), -700.0, 700.0)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class UnboundedEffect:
    """Geometric-decay effect: lag -> sigmoid(w1)**lag * w2 + w3, elementwise."""

    w1: np.ndarray  # (r,) decay logits
    w2: np.ndarray  # (r,) transient amplitudes
    w3: np.ndarray  # (r,) stationary contributions

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.w3 = np.asarray(self.w3, dtype=float)

    @property
    def r(self) -> int:
        return len(self.w1)

    def at_lag(self, lag: int) -> np.ndarray:
        return sigmoid(self.w1) ** lag * self.w2 + self.w3

    def at_lags(self, lags: np.ndarray) -> np.ndarray:
        """(n_lags, r) table of factors."""
        s = sigmoid(self.w1)
        return s[None, :] ** np.asarray(lags)[:, None] * self.w2[None, :] + self.w3[None, :]


@dataclass
class BoundedEffect:
    """Tabulated effect: lag -> w[min(lag, k-1)], a free shape that settles."""

    w: np.ndarray  # (k, r) per-lag factors

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 2 or self.w.shape[0] < 1:
            raise ValueError("bounded effect table must be (k, r) with k >= 1")

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def r(self) -> int:
        return self.w.shape[1]

    def at_lag(self, lag: int) -> np.ndarray:
        return self.w[min(lag, self.k - 1)]

    def at_lags(self, lags: np.ndarray) -> np.ndarray:
        idx = np.minimum(np.asarray(lags), self.k - 1)
        return self.w[idx]


EffectFamily = UnboundedEffect | BoundedEffect


@dataclass
class EffectParams:
    """Effect embeddings for every non-default level, sharing latent width r."""

    r: int
    levels: dict[int, EffectFamily]

    def __post_init__(self):
        for d, eff in self.levels.items():
            if d == 0:
                raise ValueError("level 0 is implicit and carries no parameters")
            if eff.r != self.r:
                raise ValueError(f"level {d}: width {eff.r} != r={self.r}")

    @property
    def K(self) -> int:
        return (max(self.levels) + 1) if self.levels else 1

    def to_json(self) -> str:
        out = {"r": self.r, "levels": {}}
        for d, eff in sorted(self.levels.items()):
            if isinstance(eff, UnboundedEffect):
                out["levels"][str(d)] = {
                    "family": "unbounded",
                    "w1": eff.w1.tolist(),
                    "w2": eff.w2.tolist(),
                    "w3": eff.w3.tolist(),
                }
            else:
                out["levels"][str(d)] = {
                    "family": "bounded",
                    "k": eff.k,
                    "w": eff.w.tolist(),
                }
        return json.dumps(out, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EffectParams":
        obj = json.loads(text)
        levels: dict[int, EffectFamily] = {}
        for key, spec in obj["levels"].items():
            if spec["family"] == "unbounded":
                levels[int(key)] = UnboundedEffect(spec["w1"], spec["w2"], spec["w3"])
            elif spec["family"] == "bounded":
                levels[int(key)] = BoundedEffect(np.asarray(spec["w"]))
            else:
                raise ValueError(f"unknown effect family {spec['family']!r}")
        return cls(r=int(obj["r"]), levels=levels)


def psi_single(ep: EffectParams, d: int, t_apply: int, t_now: int) -> np.ndarray:
    """Factor of a single action of level d applied at t_apply, seen at t_now."""
    if t_now < t_apply:
        raise ValueError(
            f"t_now={t_now} < t_apply={t_apply}: actions cannot affect the past"
        )
    if d == 0:
        return np.ones(ep.r)
    if d not in ep.levels:
        raise KeyError(f"no effect parameters for level {d}")
    return ep.levels[d].at_lag(t_now - t_apply)


def psi_aggregate(ep: EffectParams, d_seq, t_now: int) -> np.ndarray:
    """Elementwise product of psi_single over all actions at times 1..t_now."""
    d_seq = np.asarray(d_seq, dtype=np.int64)
    if len(d_seq) < t_now:
        raise ValueError(f"need actions through time {t_now}, got {len(d_seq)}")
    out = np.ones(ep.r)
    for t_apply in range(1, t_now + 1):
        d = int(d_seq[t_apply - 1])
        if d != 0:
            out = out * psi_single(ep, d, t_apply, t_now)
    return out


def psi_series(ep: EffectParams, d_seq, T: int | None = None) -> np.ndarray:
    """(T, r) matrix of aggregate factors for t = 1..T.

    Equivalent to stacking psi_aggregate at every t, but builds each action's
    full lag trajectory in one shot.  Row ``t - 1`` is the factor at time t.
    """
    d_seq = np.asarray(d_seq, dtype=np.int64)
    if T is None:
        T = len(d_seq)
    if len(d_seq) < T:
        raise ValueError(f"need actions through time {T}, got {len(d_seq)}")
    out = np.ones((T, ep.r))
    for t_apply in range(1, T + 1):
        d = int(d_seq[t_apply - 1])
        if d == 0:
            continue
        lags = np.arange(T - t_apply + 1)
        out[t_apply - 1 :] *= ep.levels[d].at_lags(lags)
    return out


def warp_trajectory(beta: np.ndarray, ep: EffectParams, d_seq) -> np.ndarray:
    """Latent feature trajectory eta^t = beta * psi^t for t = 1..len(d_seq).

    Under the idle level the factor is 1, so eta carries over unchanged; a
    non-zero action warps the coordinates it touches from its lag-0 term on.
    """
    beta = np.asarray(beta, dtype=float)
    if len(beta) != ep.r:
        raise ValueError(f"beta has length {len(beta)}, expected r={ep.r}")
    return beta[None, :] * psi_series(ep, d_seq)
