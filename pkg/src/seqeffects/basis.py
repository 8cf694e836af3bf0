"""Recurrent basis map from (behavior history, covariates) to r-vectors.

``phi^t = head(cell(x[0], z), ..., cell(x[t-1], z))`` summarizes the history
up to but not including time t, so the feature at time t is causal: it never
sees x[t].  The same parameterization serves two roles: drawn at random it is
the simulator's ground-truth basis; initialized at random and trained by
gradient it is the learner's adaptive basis.

With the ``bounded`` flag the head output is squashed by ``2*sigmoid(y) - 1``
into [-1, 1] per coordinate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .effects import sigmoid
from .recurrent import CELL_FIELDS, GatedCell
from .rng import master_rng

BASIS_PARAM_FIELDS = CELL_FIELDS + ("head_w", "head_b")


@dataclass
class BasisParams:
    cell: GatedCell
    head_w: np.ndarray  # (hidden, r)
    head_b: np.ndarray  # (r,)
    bounded: bool
    z_dim: int

    @property
    def r(self) -> int:
        return self.head_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    def get_param(self, name: str) -> np.ndarray:
        if name in CELL_FIELDS:
            return getattr(self.cell, name)
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps(
            {
                "z_dim": self.z_dim,
                "bounded": self.bounded,
                "cell": self.cell.to_dict(),
                "head_w": self.head_w.tolist(),
                "head_b": self.head_b.tolist(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "BasisParams":
        obj = json.loads(text)
        return cls(
            cell=GatedCell.from_dict(obj["cell"]),
            head_w=np.asarray(obj["head_w"], dtype=float),
            head_b=np.asarray(obj["head_b"], dtype=float),
            bounded=bool(obj["bounded"]),
            z_dim=int(obj["z_dim"]),
        )


@dataclass
class BasisTape:
    """Forward-pass activations kept for reverse-mode accumulation."""

    caches: list  # per-step cell caches
    hs: list  # per-step hidden states (B, hidden)
    outs: np.ndarray  # (B, T, r) head outputs (post-squash when bounded)
    batch: int


def basis_init_random(seed: int, z_dim: int, hidden: int, r: int,
                      bounded: bool = True) -> BasisParams:
    """Random basis with all weights uniform on (-0.5, 0.5), seeded."""
    if min(z_dim, hidden, r) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = master_rng(seed)
    cell = GatedCell.random(rng, in_dim=1 + z_dim, hidden=hidden)
    head_w = rng.uniform(-0.5, 0.5, size=(hidden, r))
    head_b = rng.uniform(-0.5, 0.5, size=r)
    return BasisParams(cell=cell, head_w=head_w, head_b=head_b,
                       bounded=bounded, z_dim=z_dim)


def _head(bp: BasisParams, h: np.ndarray) -> np.ndarray:
    y = h @ bp.head_w + bp.head_b
    if bp.bounded:
        return 2.0 * sigmoid(y) - 1.0
    return y


def basis_state_init(bp: BasisParams, batch: int) -> np.ndarray:
    return np.zeros((batch, bp.hidden))


def basis_state_step(bp: BasisParams, h: np.ndarray, x_j: np.ndarray,
                     z: np.ndarray) -> np.ndarray:
    """Advance the hidden state by one history entry x_j (shape (B,))."""
    step_in = np.concatenate([np.asarray(x_j, dtype=float)[:, None], z], axis=1)
    h_new, _ = bp.cell.step(step_in, h)
    return h_new

def basis_head(bp: BasisParams, h: np.ndarray) -> np.ndarray:
    return _head(bp, h)


def basis_eval(bp: BasisParams, x_hist, z) -> np.ndarray:
    """Feature vector phi^t from history x[0..t-1] and covariates z."""
    x_hist = np.asarray(x_hist, dtype=float)
    if x_hist.ndim != 1 or len(x_hist) == 0:
        raise ValueError("history must be a non-empty 1-d array")
    z = np.asarray(z, dtype=float).reshape(1, -1)
    h = basis_state_init(bp, 1)
    for xj in x_hist:
        h = basis_state_step(bp, h, np.array([xj]), z)
    return _head(bp, h)[0]


def basis_eval_series(bp: BasisParams, x, z) -> np.ndarray:
    """(T, r) matrix with row t-1 equal to basis_eval(x[0..t-1], z)."""
    x = np.asarray(x, dtype=float)
    phis, _ = basis_forward(bp, x[None, :], np.asarray(z, dtype=float)[None, :],
                            want_tape=False)
    return phis[0]


def basis_forward(bp: BasisParams, X: np.ndarray, Z: np.ndarray,
                  want_tape: bool = True):
    """Batched series evaluation.

    X is (N, T+1) behavior series incl. the initial entry, Z is (N, z_dim).
    Returns (phis, tape) with phis of shape (N, T, r); tape is None unless
    requested.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, t_plus = X.shape
    T = t_plus - 1
    h = basis_state_init(bp, n)
    caches, hs = [], []
    outs = np.empty((n, T, bp.r))
    for t in range(1, T + 1):
        step_in = np.concatenate([X[:, t - 1 : t], Z], axis=1)
        h, cache = bp.cell.step(step_in, h)
        outs[:, t - 1, :] = _head(bp, h)
        if want_tape:
            caches.append(cache)
            hs.append(h)
    tape = BasisTape(caches=caches, hs=hs, outs=outs, batch=n) if want_tape else None
    return outs, tape


def basis_backward(bp: BasisParams, tape: BasisTape,
                   upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(upstream * phis) w.r.t. every basis parameter.

    upstream must be (N, T, r) matching the taped forward pass.
    """
    upstream = np.asarray(upstream, dtype=float)
    T = len(tape.caches)
    if upstream.shape != (tape.batch, T, bp.r):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match tape "
            f"({tape.batch}, {T}, {bp.r})"
        )
    grads = bp.cell.zero_grads()
    grads["head_w"] = np.zeros_like(bp.head_w)
    grads["head_b"] = np.zeros_like(bp.head_b)
    dh_carry = np.zeros((tape.batch, bp.hidden))
    for t in range(T, 0, -1):
        dout = upstream[:, t - 1, :]
        if bp.bounded:
            out = tape.outs[:, t - 1, :]
            dy = dout * (1.0 - out * out) / 2.0
        else:
            dy = dout
        grads["head_w"] += tape.hs[t - 1].T @ dy
        grads["head_b"] += dy.sum(axis=0)
        dh = dy @ bp.head_w.T + dh_carry
        _, dh_carry = bp.cell.step_back(tape.caches[t - 1], dh, grads)
    return grads
