"""Fully-controlled synthetic data generator with known ground truth.

All generative parameters are drawn from seeded streams: effect embeddings
per level, a random recurrent basis bounded in [-1, 1], per-unit coefficient
vectors with unit-specific Gaussian scales, covariates, and an initial state
produced by a random feed-forward map of the covariates.  Action schedules
are sampled under rules that make the identification assumptions hold:

1. an all-default burn-in of length T0,
2. per unit, exactly I distinct non-default levels sampled without
   replacement,
3. at least `gap` (default 2) default steps after each non-default action,
4. in test mode, one per-unit-unseen level is appended at T+1 followed by
   defaults through T+delta.

Per-unit randomness comes from streams derived from (seed, unit_id), so
generating units in any order, or in parallel, is byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisParams, basis_head, basis_init_random, basis_state_init, basis_state_step
from .data import Dataset, UnitRecord
from .effects import EffectParams, UnboundedEffect, psi_series
from .rng import substream, unit_rng

SCHEDULE_GAP = 2  # default steps required after each non-default action


@dataclass(frozen=True)
class SimConfig:
    r: int = 5
    T: int = 20
    T0: int = 10
    K: int = 5
    N: int = 1000
    z_dim: int = 5
    I: int = 3
    sigma_noise: float = 1.0
    seed: int = 0
    hidden: int = 16
    schedule_mode: str = "train"  # "train" | "test_unseen"
    test_horizon: int = 5
    unit_offset: int = 0  # shift unit ids: same seed + disjoint offsets = fresh units from one world

    def __post_init__(self):
        if self.T0 < self.r:
            raise ValueError(f"T0={self.T0} must be >= r={self.r}")
        if not (0 <= self.I <= self.K - 1):
            raise ValueError(f"I={self.I} must be in [0, K-1]")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")
        if self.schedule_mode not in ("train", "test_unseen"):
            raise ValueError(f"unknown schedule_mode {self.schedule_mode!r}")
        if self.schedule_mode == "test_unseen":
            if self.I > self.K - 2:
                raise ValueError("test_unseen needs I <= K-2 so an unseen level exists")
            if self.test_horizon < 1 + SCHEDULE_GAP:
                raise ValueError("test_horizon too short for the post-action gap")
        if self.T - self.T0 < (SCHEDULE_GAP + 1) * self.I:
            raise ValueError(
                f"infeasible schedule: T-T0={self.T - self.T0} cannot hold "
                f"{self.I} actions with gap {SCHEDULE_GAP}"
            )

    @property
    def total_horizon(self) -> int:
        return self.T + (self.test_horizon if self.schedule_mode == "test_unseen" else 0)


@dataclass
class GroundTruth:
    """Everything the generator drew, for oracle tests."""

    effects: EffectParams
    basis: BasisParams
    betas: np.ndarray  # (N, r)
    mus: np.ndarray  # (N,)
    sigmas: np.ndarray  # (N,) per-unit coefficient scale
    sigma_noise: float
    seed: int


def sample_effect_params(rng: np.random.Generator, K: int, r: int) -> EffectParams:
    """Unbounded effect draws: levels alternate positive/negative ranges.

    Levels with ((d-1) mod 4) in {0, 1} draw w1, w2 ~ U(1, 2), w3 ~ U(2, 3);
    the other levels draw w1, w2 ~ U(-2, -1), w3 ~ U(-1, 0).  Level 0 is the
    implicit identity.
    """
    if K < 2:
        raise ValueError("K must be >= 2 so at least one non-default level exists")
    levels = {}
    for d in range(1, K):
        if (d - 1) % 4 < 2:
            w1 = rng.uniform(1.0, 2.0, size=r)
            w2 = rng.uniform(1.0, 2.0, size=r)
            w3 = rng.uniform(2.0, 3.0, size=r)
        else:
            w1 = rng.uniform(-2.0, -1.0, size=r)
            w2 = rng.uniform(-2.0, -1.0, size=r)
            w3 = rng.uniform(-1.0, 0.0, size=r)
        levels[d] = UnboundedEffect(w1, w2, w3)
    return EffectParams(r=r, levels=levels)


def sample_schedule(rng: np.random.Generator, T: int, T0: int, K: int, I: int,
                    mode: str = "train", test_horizon: int = 5) -> np.ndarray:
    """Action levels for times 1..T (train) or 1..T+test_horizon (test).

    Placement uses the standard gap-to-combination bijection: choose I
    increasing slots in a compressed range, then re-expand so consecutive
    actions are at least SCHEDULE_GAP + 1 apart and the last action still has
    a full gap before T.
    """
    gap = SCHEDULE_GAP
    lo, hi = T0 + 1, T - gap
    d = np.zeros(T, dtype=np.int64)
    if I > 0:
        m = hi - gap * (I - 1) - lo + 1
        if m < I:
            raise ValueError("infeasible schedule configuration")
        slots = np.sort(rng.choice(m, size=I, replace=False))
        positions = lo + slots + gap * np.arange(I)
        levels = rng.choice(np.arange(1, K), size=I, replace=False)
        d[positions - 1] = levels
    if mode == "train":
        return d
    unseen_pool = np.setdiff1d(np.arange(1, K), d[d != 0])
    unseen = int(rng.choice(unseen_pool))
    future = np.zeros(test_horizon, dtype=np.int64)
    future[0] = unseen
    return np.concatenate([d, future])


def _x0_map(rng: np.random.Generator, z_dim: int, hidden: int = 8):
    w1 = rng.uniform(-0.5, 0.5, size=(z_dim, hidden))
    b1 = rng.uniform(-0.5, 0.5, size=hidden)
    w2 = rng.uniform(-0.5, 0.5, size=hidden)
    b2 = rng.uniform(-0.5, 0.5)
    return lambda Z: np.tanh(Z @ w1 + b1) @ w2 + b2


def generate_dataset(cfg: SimConfig) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset and the ground truth that produced it."""
    effects = sample_effect_params(substream(cfg.seed, "effects"), cfg.K, cfg.r)
    basis_seed = int(substream(cfg.seed, "basis").integers(0, 2**63))
    basis = basis_init_random(basis_seed, cfg.z_dim, cfg.hidden, cfg.r, bounded=True)
    x0_fn = _x0_map(substream(cfg.seed, "x0"), cfg.z_dim)

    T_total = cfg.total_horizon
    Z = np.empty((cfg.N, cfg.z_dim))
    betas = np.empty((cfg.N, cfg.r))
    mus = np.empty(cfg.N)
    sigmas = np.empty(cfg.N)
    schedules = np.empty((cfg.N, T_total), dtype=np.int64)
    noise = np.empty((cfg.N, T_total))
    unit_ids = [f"u{cfg.unit_offset + n:06d}" for n in range(cfg.N)]
    for n, uid in enumerate(unit_ids):
        rng = unit_rng(cfg.seed, uid)
        Z[n] = rng.normal(0.0, np.sqrt(3.0), size=cfg.z_dim)
        mus[n] = rng.normal(0.0, 1.0)
        sigmas[n] = np.exp(rng.normal(0.0, 1.0))
        betas[n] = rng.normal(mus[n], sigmas[n], size=cfg.r)
        schedules[n] = sample_schedule(
            rng, cfg.T, cfg.T0, cfg.K, cfg.I, cfg.schedule_mode, cfg.test_horizon
        )
        noise[n] = rng.standard_normal(T_total)

    psis = np.empty((cfg.N, T_total, cfg.r))
    for n in range(cfg.N):
        psis[n] = psi_series(effects, schedules[n], T_total)

    X = np.empty((cfg.N, T_total + 1))
    X[:, 0] = x0_fn(Z)
    h = basis_state_init(basis, cfg.N)
    for t in range(1, T_total + 1):
        h = basis_state_step(basis, h, X[:, t - 1], Z)
        phi = basis_head(basis, h)
        mean = (phi * betas * psis[:, t - 1, :]).sum(axis=1)
        X[:, t] = mean + cfg.sigma_noise * noise[:, t - 1]

    units = [
        UnitRecord(unit_id=unit_ids[n], z=Z[n], x=X[n], d=schedules[n])
        for n in range(cfg.N)
    ]
    ds = Dataset(units=units, K=cfg.K, T=T_total, T0=cfg.T0, z_dim=cfg.z_dim,
                 r_hint=cfg.r)
    gt = GroundTruth(effects=effects, basis=basis, betas=betas, mus=mus,
                     sigmas=sigmas, sigma_noise=cfg.sigma_noise, seed=cfg.seed)
    return ds, gt
