"""Black-box recurrent regressor over (behavior, one-hot action, covariates).

The generic sequence model the structured approach is benchmarked against:
a gated recurrent cell reading ``[x^{t-1}, onehot(d^t), z]`` at every step
with a linear head predicting x^t, trained on one-step-ahead squared error by
backpropagation through time, and rolled out autoregressively at prediction
time, feeding its own outputs back in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, UnitRecord
from .recurrent import CELL_FIELDS, GatedCell
from .rng import substream
from .train import Adam, TrainingDivergence


@dataclass
class BaselineParams:
    cell: GatedCell
    head_w: np.ndarray  # (hidden,)
    head_b: float
    K: int
    z_dim: int

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    @property
    def in_dim(self) -> int:
        return 1 + self.K + self.z_dim


@dataclass(frozen=True)
class BaselineConfig:
    lr: float = 0.01
    epochs: int = 200
    seed: int = 0
    hidden: int = 32
    holdout: float = 0.1

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1:
            raise ValueError("need lr >= 0 and epochs >= 1")


@dataclass
class BaselineFit:
    params: BaselineParams
    train_curve: np.ndarray
    holdout_curve: np.ndarray
    selected_epoch: int


def baseline_init(seed: int, K: int, z_dim: int, hidden: int) -> BaselineParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cell = GatedCell.random(rng, in_dim=1 + K + z_dim, hidden=hidden)
    head_w = rng.uniform(-0.5, 0.5, size=hidden)
    head_b = float(rng.uniform(-0.5, 0.5))
    return BaselineParams(cell=cell, head_w=head_w, head_b=head_b, K=K, z_dim=z_dim)


def _step_inputs(params: BaselineParams, x_prev: np.ndarray, d_now: np.ndarray,
                 Z: np.ndarray) -> np.ndarray:
    onehot = np.eye(params.K)[np.asarray(d_now, dtype=np.int64)]
    return np.concatenate([np.asarray(x_prev, dtype=float)[:, None], onehot, Z], axis=1)


def baseline_forward(params: BaselineParams, X: np.ndarray, D: np.ndarray,
                     Z: np.ndarray, want_tape: bool = False):
    """One-step-ahead predictions for all units; X is (N, T+1), D is (N, T)."""
    n, T = D.shape
    h = np.zeros((n, params.hidden))
    preds = np.empty((n, T))
    caches, hs = [], []
    for t in range(1, T + 1):
        step_in = _step_inputs(params, X[:, t - 1], D[:, t - 1], Z)
        h, cache = params.cell.step(step_in, h)
        preds[:, t - 1] = h @ params.head_w + params.head_b
        if want_tape:
            caches.append(cache)
            hs.append(h)
    return preds, (caches, hs) if want_tape else None


def baseline_loss_and_grads(params: BaselineParams, X: np.ndarray, D: np.ndarray,
                            Z: np.ndarray):
    """Mean squared one-step error and its gradients w.r.t. all parameters."""
    n, T = D.shape
    preds, (caches, hs) = baseline_forward(params, X, D, Z, want_tape=True)
    err = preds - X[:, 1:]
    loss = float(np.mean(err**2))
    dpred = 2.0 * err / err.size
    grads = params.cell.zero_grads()
    grads["head_w"] = np.zeros_like(params.head_w)
    grads["head_b"] = np.zeros(())
    dh_carry = np.zeros((n, params.hidden))
    for t in range(T, 0, -1):
        dy = dpred[:, t - 1 : t]
        grads["head_w"] += (hs[t - 1] * dy).sum(axis=0)
        grads["head_b"] += dy.sum()
        dh = dy * params.head_w[None, :] + dh_carry
        _, dh_carry = params.cell.step_back(caches[t - 1], dh, grads)
    return loss, grads


def _apply_bundle(params: BaselineParams, bundle: dict[str, np.ndarray]) -> BaselineParams:
    cell = GatedCell(**{f: np.asarray(bundle[f], dtype=float) for f in CELL_FIELDS})
    return BaselineParams(cell=cell, head_w=np.asarray(bundle["head_w"], dtype=float),
                          head_b=float(bundle["head_b"]), K=params.K, z_dim=params.z_dim)


def _to_bundle(params: BaselineParams) -> dict[str, np.ndarray]:
    bundle = {f: getattr(params.cell, f).copy() for f in CELL_FIELDS}
    bundle["head_w"] = params.head_w.copy()
    bundle["head_b"] = np.array(params.head_b)
    return bundle


def baseline_fit(ds: Dataset, cfg: BaselineConfig) -> BaselineFit:
    """Full-batch Adam descent on one-step squared error, best-holdout pick."""
    if len(ds) == 0:
        raise ValueError("cannot fit an empty dataset")
    X = np.stack([u.x for u in ds.units])
    D = np.stack([u.d for u in ds.units])
    Z = np.stack([u.z for u in ds.units])
    n_hold = int(round(cfg.holdout * len(ds)))
    if cfg.holdout > 0 and n_hold == 0:
        n_hold = 1
    perm = substream(cfg.seed, "baseline-holdout").permutation(len(ds))
    hold, tr = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])

    init_seed = int(substream(cfg.seed, "baseline-init").integers(0, 2**63))
    params = baseline_init(init_seed, ds.K, ds.z_dim, cfg.hidden)
    bundle = _to_bundle(params)
    opt = Adam(lr=cfg.lr)

    def mse(idx):
        preds, _ = baseline_forward(params, X[idx], D[idx], Z[idx])
        return float(np.mean((preds - X[idx][:, 1:]) ** 2))

    train_curve = [mse(tr)]
    holdout_curve = [mse(hold) if n_hold else train_curve[0]]
    best_epoch, best_bundle = 0, {k: v.copy() for k, v in bundle.items()}
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = baseline_loss_and_grads(params, X[tr], D[tr], Z[tr])
        if not np.isfinite(loss):
            raise TrainingDivergence(f"baseline loss non-finite at epoch {epoch}",
                                     epoch, train_curve)
        # Adam ascends; descend the loss by feeding it the negated gradients.
        opt.step(bundle, {k: -g for k, g in grads.items()})
        params = _apply_bundle(params, bundle)
        train_curve.append(mse(tr))
        holdout_curve.append(mse(hold) if n_hold else train_curve[-1])
        if holdout_curve[-1] < holdout_curve[best_epoch]:
            best_epoch = epoch
            best_bundle = {k: v.copy() for k, v in bundle.items()}
    return BaselineFit(
        params=_apply_bundle(params, best_bundle),
        train_curve=np.array(train_curve),
        holdout_curve=np.array(holdout_curve),
        selected_epoch=best_epoch,
    )


def baseline_predict(params: BaselineParams, unit: UnitRecord, future_d,
                     delta: int | None = None) -> np.ndarray:
    """Autoregressive rollout past the observed horizon."""
    future_d = np.asarray(future_d, dtype=np.int64)
    if delta is None:
        delta = len(future_d)
    if delta < 1 or len(future_d) < delta:
        raise ValueError("need future actions for every predicted step")
    if np.any(future_d < 0) or np.any(future_d >= params.K):
        raise ValueError("invalid future levels")
    z = np.asarray(unit.z, dtype=float)[None, :]
    h = np.zeros((1, params.hidden))
    for t in range(1, unit.horizon + 1):
        step_in = _step_inputs(params, unit.x[t - 1 : t], unit.d[t - 1 : t], z)
        h, _ = params.cell.step(step_in, h)
    out = np.empty(delta)
    x_last = float(unit.x[-1])
    for i in range(delta):
        step_in = _step_inputs(params, np.array([x_last]), future_d[i : i + 1], z)
        h, _ = params.cell.step(step_in, h)
        x_last = float(h[0] @ params.head_w + params.head_b)
        out[i] = x_last
    return out
