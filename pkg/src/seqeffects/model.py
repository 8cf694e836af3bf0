"""Conditional-mean model, Gaussian evidence, and Monte-Carlo prediction.

The observation model is

    x^t | history, z, actions  ~  Normal( phi^t . (beta * psi^t), sigma^2 )

with a per-unit coefficient vector beta under an independent Normal(0,
sigma_beta^2) prior.  Because the model is linear in beta, the per-unit
posterior is an exact Gaussian and the marginal likelihood (evidence) has a
closed form.  The evidence and its parameter gradients are computed in the
r x r Woodbury form, never materializing the T x T covariance; a dense
reference implementation is kept for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import (
    BasisParams,
    basis_eval_series,
    basis_head,
    basis_state_init,
    basis_state_step,
)
from .data import UnitRecord
from .effects import EffectParams, psi_series
from .rng import unit_rng

LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """Linear algebra failed beyond recoverable conditioning."""


@dataclass(frozen=True)
class NoiseScales:
    """Observation noise std and prior std of the coefficient entries."""

    sigma: float
    sigma_beta: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.sigma_beta > 0):
            raise ValueError("sigma and sigma_beta must be strictly positive")


@dataclass
class PosteriorState:
    """Exact Gaussian posterior over one unit's coefficient vector."""

    mean: np.ndarray  # (r,)
    cov: np.ndarray  # (r, r)
    unit_id: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("posterior covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() <= 0:
            raise ValueError("posterior covariance must be positive definite")

    @property
    def r(self) -> int:
        return len(self.mean)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean[None, :] + rng.standard_normal((n, self.r)) @ chol.T


@dataclass(frozen=True)
class DesignRow:
    """One regression row: features phi^t * psi^t and target x^t."""

    row: np.ndarray
    target: float
    t: int = 0


def conditional_mean(phi, beta, psi) -> float:
    phi = np.asarray(phi, dtype=float)
    beta = np.asarray(beta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if not (len(phi) == len(beta) == len(psi)):
        raise ValueError(
            f"length mismatch: phi {len(phi)}, beta {len(beta)}, psi {len(psi)}"
        )
    return float(np.dot(phi * psi, beta))


def build_design(unit: UnitRecord, bp: BasisParams, ep: EffectParams,
                 t_from: int, t_to: int) -> list[DesignRow]:
    """Design rows for times t_from..t_to inclusive (1-based)."""
    if not (1 <= t_from <= t_to <= unit.horizon):
        raise ValueError(
            f"invalid row range [{t_from}, {t_to}] for horizon {unit.horizon}"
        )
    phis = basis_eval_series(bp, unit.x[: t_to + 1], unit.z)
    psis = psi_series(ep, unit.d, t_to)
    return [
        DesignRow(row=phis[t - 1] * psis[t - 1], target=float(unit.x[t]), t=t)
        for t in range(t_from, t_to + 1)
    ]


def _rows_to_arrays(rows) -> tuple[np.ndarray, np.ndarray]:
    features = np.array([np.asarray(row.row, dtype=float) for row in rows])
    targets = np.array([row.target for row in rows], dtype=float)
    return features, targets


def beta_posterior(rows, ns: NoiseScales, r: int | None = None,
                   unit_id: str = "") -> PosteriorState:
    """Exact coefficient posterior from design rows.

    With no rows the prior is returned (mean 0, covariance sigma_beta^2 I).
    """
    if len(rows) == 0:
        if r is None:
            raise ValueError("r is required to build the prior from zero rows")
        return PosteriorState(
            mean=np.zeros(r), cov=ns.sigma_beta**2 * np.eye(r), unit_id=unit_id
        )
    features, targets = _rows_to_arrays(rows)
    r_eff = features.shape[1]
    precision = (features.T @ features) / ns.sigma**2 + np.eye(r_eff) / ns.sigma_beta**2
    cond = np.linalg.cond(precision)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(
            f"normal matrix numerically singular (condition estimate {cond:.3e})"
        )
    cov = np.linalg.inv(precision)
    cov = (cov + cov.T) / 2.0
    mean = cov @ (features.T @ targets) / ns.sigma**2
    return PosteriorState(mean=mean, cov=cov, unit_id=unit_id)


def log_evidence(rows, ns: NoiseScales) -> float:
    """log N(y; 0, sigma^2 I + sigma_beta^2 Phi Phi^T) via the r x r form."""
    if len(rows) == 0:
        raise ValueError("log_evidence requires at least one row")
    features, targets = _rows_to_arrays(rows)
    value, _ = _evidence_batch(features[None], targets[None],
                               ns.sigma, ns.sigma_beta, want_grad=False)
    return float(value)


def log_evidence_dense(rows, ns: NoiseScales) -> float:
    """Reference implementation using the explicit T x T covariance."""
    features, targets = _rows_to_arrays(rows)
    T = len(targets)
    cov = ns.sigma**2 * np.eye(T) + ns.sigma_beta**2 * (features @ features.T)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalError("covariance not positive definite")
    quad = targets @ np.linalg.solve(cov, targets)
    return float(-0.5 * (T * LOG_2PI + logdet + quad))


def _evidence_batch(features: np.ndarray, targets: np.ndarray, sigma: float,
                    sigma_beta: float, want_grad: bool = True):
    """Total evidence over a batch of units with aligned shapes.

    features is (N, T, r), targets (N, T).  Returns (total, grads) where
    grads is None or a dict with d_features (N, T, r) and the scalar
    derivatives d_sigma2 and d_sigma_beta2.
    """
    n, T, r = features.shape
    s2 = sigma**2
    sb2 = sigma_beta**2
    gram = np.einsum("nti,ntj->nij", features, features)
    lam = np.einsum("nti,nt->ni", features, targets)
    precision = np.eye(r)[None] / sb2 + gram / s2
    sign, logdet = np.linalg.slogdet(precision)
    if np.any(sign <= 0):
        raise NumericalError("evidence precision matrix not positive definite")
    post_cov = np.linalg.inv(precision)
    post_mean = np.einsum("nij,nj->ni", post_cov, lam) / s2
    yy = np.einsum("nt,nt->n", targets, targets)
    quad = np.einsum("ni,ni->n", lam, post_mean)
    per_unit = (
        -0.5 * T * (LOG_2PI + np.log(s2))
        - 0.5 * (r * np.log(sb2) + logdet)
        - 0.5 * (yy - quad) / s2
    )
    total = float(per_unit.sum())
    if not want_grad:
        return total, None

    resid = (targets - np.einsum("nti,ni->nt", features, post_mean)) / s2  # a = Sigma^-1 y
    q_mat = np.einsum("nij,njk->nik", post_cov, gram)  # P G
    # Sigma^-1 Phi = (Phi - Phi Q / s2) / s2
    siginv_feat = (features - np.einsum("ntj,nji->nti", features, q_mat) / s2) / s2
    at_feat = (lam - np.einsum("nij,nj->ni", gram, post_mean)) / s2  # Phi^T a
    d_features = sb2 * (
        np.einsum("nt,ni->nti", resid, at_feat) - siginv_feat
    )
    tr_siginv = T / s2 - np.trace(q_mat, axis1=1, axis2=2) / s2**2
    d_sigma2 = 0.5 * (np.einsum("nt,nt->n", resid, resid) - tr_siginv).sum()
    gq = np.einsum("nij,njk->nik", gram, q_mat)
    tr_fsf = (np.trace(gram, axis1=1, axis2=2) - np.trace(gq, axis1=1, axis2=2) / s2) / s2
    d_sigma_beta2 = 0.5 * (
        np.einsum("ni,ni->n", at_feat, at_feat) - tr_fsf
    ).sum()
    return total, {
        "d_features": d_features,
        "d_sigma2": float(d_sigma2),
        "d_sigma_beta2": float(d_sigma_beta2),
    }


@dataclass
class Prediction:
    """Monte-Carlo forecast: per-step mean and the raw sample trajectories."""

    mean: np.ndarray  # (delta,) average of per-sample conditional means
    samples: np.ndarray  # (M, delta) noisy sampled trajectories

    @property
    def sample_std(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=0)


def predict_mc(unit: UnitRecord, t: int, bp: BasisParams, ep: EffectParams,
               ns: NoiseScales, posterior: PosteriorState, future_d,
               M: int, seed: int) -> Prediction:
    """Roll the generative model forward from time t under future actions.

    Each of the M samples draws a coefficient vector from the posterior and
    simulates x^{t+1..t+delta}, feeding its own sampled values back into the
    basis.  Observation noise is included in the sampled trajectories; the
    reported mean averages the per-step conditional means, so it estimates
    the interventional expectation rather than one noisy path.
    """
    future_d = np.asarray(future_d, dtype=np.int64)
    delta = len(future_d)
    if delta < 1 or M < 1:
        raise ValueError("need at least one future step and one sample")
    if not (0 <= t <= unit.horizon):
        raise ValueError(f"conditioning time {t} outside 0..{unit.horizon}")
    if np.any(future_d < 0):
        raise ValueError("invalid future levels")
    rng = unit_rng(seed, unit.unit_id)
    betas = posterior.sample(rng, M)  # (M, r)
    d_all = np.concatenate([unit.d[:t], future_d])
    psis = psi_series(ep, d_all, t + delta)[t:]  # (delta, r)
    z_batch = np.tile(np.asarray(unit.z, dtype=float), (M, 1))
    h = basis_state_init(bp, M)
    for x_obs in unit.x[: t + 1]:
        h = basis_state_step(bp, h, np.full(M, x_obs), z_batch)
    mus = np.empty((M, delta))
    samples = np.empty((M, delta))
    for i in range(delta):
        phi = basis_head(bp, h)  # (M, r)
        mu = (phi * psis[i][None, :] * betas).sum(axis=1)
        x_new = mu + ns.sigma * rng.standard_normal(M)
        mus[:, i] = mu
        samples[:, i] = x_new
        if i + 1 < delta:
            h = basis_state_step(bp, h, x_new, z_batch)
    return Prediction(mean=mus.mean(axis=0), samples=samples)


def rmse_by_horizon(preds: np.ndarray, actuals: np.ndarray) -> np.ndarray:
    """Per-horizon root-mean-squared error across units."""
    preds = np.asarray(preds, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if preds.shape != actuals.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {actuals.shape}")
    if preds.ndim == 1:
        preds, actuals = preds[None, :], actuals[None, :]
    return np.sqrt(np.mean((preds - actuals) ** 2, axis=0))
