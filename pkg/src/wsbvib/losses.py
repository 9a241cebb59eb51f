"""Training objectives.

Chamfer distances, the Gaussian latent KL, per-point Gaussian negative
log-likelihoods for ordered (correspondence) and unordered (cloud) labels, the
spread regularizer that rules out point collapse, the burn-in schedule, and
the two composite objectives (latent-only, and latent + stochastic-weights).

Everything here runs on torch tensors and preserves the caller's dtype, so
float64 inputs give float64 losses (the finite-difference tests rely on that)
while training runs float32. Inputs may be PointSets, numpy arrays, or torch
tensors; outputs are 0-dim tensors connected to the autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import LatentGaussian, PointSet
from .errors import ConfigError, DataError

# floor added inside logs and divisions; keeps early training finite when the
# sample variance collapses
VAR_FLOOR = 1e-8

SUPERVISION_MODES = ("pdm", "cloud")


@dataclass(frozen=True)
class LossConfig:
    """Objective weights and schedule.

    beta weighs the latent KL, alpha the spread regularizer (cloud supervision
    only). The probabilistic loss fades in after burnin_epochs over
    ramp_epochs. n_latent_samples_train is the latent sample count S used to
    estimate the predictive mean and variance; variance needs at least 2.
    """

    beta: float = 0.01
    alpha: float = 1.0
    burnin_epochs: int = 25
    ramp_epochs: int = 10
    n_latent_samples_train: int = 4
    squared_residual: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.burnin_epochs < 0 or self.ramp_epochs < 0:
            raise ConfigError("burn-in epochs must be >= 0")
        if self.n_latent_samples_train < 2:
            raise ConfigError("n_latent_samples_train must be >= 2 to estimate variance")


@dataclass
class LossBreakdown:
    """One objective evaluation, split into its terms.

    total = lambda * (nll + beta * kl_latent + alpha * spread)
          + (1 - lambda) * deterministic + kl_weights
    with lambda = burnin_lambda. deterministic (the burn-in loss on the mean
    prediction) is kept as a diagnostic so the identity above is checkable
    from the fields alone. Fields are 0-dim tensors when produced by the
    objectives; float() them for logging.
    """

    total: object
    nll: object
    kl_latent: object
    kl_weights: object
    spread: object
    burnin_lambda: float
    deterministic: object


def _as_points(x, name: str) -> torch.Tensor:
    if isinstance(x, PointSet):
        x = x.points
    t = torch.as_tensor(x)
    if t.ndim != 2 or t.shape[-1] != 3:
        raise DataError(f"{name} must be (M, 3), got {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise DataError(f"{name} is empty")
    return t


def _min_sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-row minimum squared distance from a to b, chunked to bound memory."""
    chunk = max(1, 8_000_000 // (b.shape[0] * 3))
    outs = []
    for start in range(0, a.shape[0], chunk):
        piece = a[start:start + chunk]
        d2 = ((piece[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        outs.append(d2.min(dim=1).values)
    return torch.cat(outs)


def chamfer_one_way(a, b) -> torch.Tensor:
    """Mean over a of the squared distance to the nearest point of b."""
    ta = _as_points(a, "A")
    tb = _as_points(b, "B")
    return _min_sq_dist(ta, tb).mean()


def chamfer_bidirectional(a, b) -> torch.Tensor:
    return chamfer_one_way(a, b) + chamfer_one_way(b, a)


def gaussian_kl(q: LatentGaussian) -> torch.Tensor:
    """KL from a diagonal Gaussian to the standard normal.

    Sums over the latent dimension; a leading batch dimension (one row per
    dropout realization) is averaged, which is the outer weight-expectation
    of the Bayesian objective.
    """
    mu = torch.as_tensor(q.mu)
    log_var = torch.as_tensor(q.log_var)
    per = 0.5 * (mu ** 2 + log_var.exp() - log_var - 1.0).sum(dim=-1)
    return per.mean() if per.ndim else per


def nll_pdm(mu_y, sigma_y, y, squared: bool = True) -> torch.Tensor:
    """Per-point Gaussian NLL against an ordered label, rows aligned by index.

    sigma_y holds per-point variances (an M-vector). squared=False switches
    the residual to the unsquared Euclidean norm.
    """
    mu = _as_points(mu_y, "mu_y")
    ty = _as_points(y, "y")
    if mu.shape[0] != ty.shape[0]:
        raise DataError(f"ordered NLL needs equal sizes, got {mu.shape[0]} vs {ty.shape[0]}")
    var = torch.as_tensor(sigma_y).reshape(-1) + VAR_FLOOR
    resid = ((mu - ty) ** 2).sum(-1)
    if not squared:
        resid = resid.clamp_min(1e-12).sqrt()
    return (resid / (2.0 * var) + 0.5 * var.log()).mean()


def nll_pc(mu_y, sigma_y, y, squared: bool = True) -> torch.Tensor:
    """Permutation-invariant NLL: each predicted point explains its nearest
    label point. With a shared scalar variance this reduces to
    CD(mu -> y) / (2 sigma^2) + log(sigma^2) / 2."""
    mu = _as_points(mu_y, "mu_y")
    ty = _as_points(y, "y")
    var = torch.as_tensor(sigma_y).reshape(-1)
    if var.shape[0] not in (1, mu.shape[0]):
        raise DataError(f"sigma_y must be scalar or per-point, got {var.shape[0]} for M={mu.shape[0]}")
    var = var + VAR_FLOOR
    resid = _min_sq_dist(mu, ty)
    if not squared:
        resid = resid.clamp_min(1e-12).sqrt()
    return (resid / (2.0 * var) + 0.5 * var.log()).mean()


def spread_regularizer(y, mu_y) -> torch.Tensor:
    """Chamfer from the label cloud to the prediction: every label region must
    have a predicted point nearby, which is exactly what fails when the
    prediction collapses to a cluster."""
    return chamfer_one_way(y, mu_y)


def burnin_weight(epoch: int, cfg: LossConfig) -> float:
    """0 during burn-in, linear ramp to 1 over ramp_epochs, then 1."""
    if epoch < 0:
        raise DataError("epoch must be >= 0")
    if epoch < cfg.burnin_epochs:
        return 0.0
    if cfg.ramp_epochs == 0:
        return 1.0
    return min(1.0, (epoch - cfg.burnin_epochs) / cfg.ramp_epochs)


def _check_supervision(supervision: str, y) -> None:
    if supervision not in SUPERVISION_MODES:
        raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}, got {supervision!r}")
    if isinstance(y, PointSet):
        if supervision == "pdm" and not y.ordered:
            raise DataError("pdm supervision needs an ordered label point set")
        if supervision == "cloud" and y.ordered:
            raise DataError("cloud supervision got an ordered label; pass the unordered cloud")


def _sample_stats(samples: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and per-point isotropic population variance over the sample axis."""
    mu = samples.mean(dim=0)
    var = samples.var(dim=0, unbiased=False).mean(dim=-1)
    return mu, var


def _deterministic_loss(mu: torch.Tensor, y, supervision: str) -> torch.Tensor:
    if supervision == "pdm":
        ty = _as_points(y, "y")
        if mu.shape[0] != ty.shape[0]:
            raise DataError("pdm deterministic loss needs matching sizes")
        return ((mu - ty) ** 2).sum(-1).mean()
    return chamfer_bidirectional(mu, y)


def vib_objective(pred_samples, q: LatentGaussian, y, cfg: LossConfig,
                  epoch: int, supervision: str) -> LossBreakdown:
    """Latent-bottleneck objective from S decoded latent samples.

    pred_samples is (S, M, 3). The probabilistic part (NLL of the sample mean
    under the sample variance, the beta-weighted latent KL, and for cloud
    supervision the alpha-weighted spread term) fades in with the burn-in
    weight; the remainder is the deterministic loss on the mean prediction.
    """
    samples = torch.as_tensor(pred_samples)
    if samples.ndim != 3 or samples.shape[0] < 2:
        raise DataError(f"pred_samples must be (S>=2, M, 3), got {tuple(samples.shape)}")
    _check_supervision(supervision, y)
    mu, var = _sample_stats(samples)
    if supervision == "pdm":
        nll = nll_pdm(mu, var, y, squared=cfg.squared_residual)
        spread = torch.zeros((), dtype=samples.dtype)
        alpha = 0.0
    else:
        nll = nll_pc(mu, var, y, squared=cfg.squared_residual)
        spread = spread_regularizer(y, mu)
        alpha = cfg.alpha
    kl_latent = gaussian_kl(q)
    lam = burnin_weight(epoch, cfg)
    det = _deterministic_loss(mu, y, supervision)
    total = lam * (nll + cfg.beta * kl_latent + alpha * spread) + (1.0 - lam) * det
    return LossBreakdown(total=total, nll=nll, kl_latent=kl_latent,
                         kl_weights=torch.zeros((), dtype=samples.dtype),
                         spread=spread, burnin_lambda=lam, deterministic=det)


def bvib_objective(pred_grid, q: LatentGaussian, weight_kl, y, cfg: LossConfig,
                   epoch: int, supervision: str) -> LossBreakdown:
    """Bayesian objective over a (D, S, M, 3) grid of predictions.

    D indexes dropout-mask realizations of the stochastic encoder, S latent
    samples within each. NLL and latent KL are averaged over D (the outer
    expectation over weights); the spread and deterministic terms act on the
    grand mean prediction; weight_kl (the concrete-dropout regularizer,
    computed by the network module) is added with coefficient exactly 1.
    """
    grid = torch.as_tensor(pred_grid)
    if grid.ndim != 4:
        raise DataError(f"pred_grid must be (D, S, M, 3), got {tuple(grid.shape)}")
    d, s = grid.shape[0], grid.shape[1]
    if d < 1:
        raise DataError("need at least one dropout realization")
    if s < 2:
        raise DataError("need at least two latent samples per realization")
    _check_supervision(supervision, y)

    nll_terms = []
    for di in range(d):
        mu_d, var_d = _sample_stats(grid[di])
        if supervision == "pdm":
            nll_terms.append(nll_pdm(mu_d, var_d, y, squared=cfg.squared_residual))
        else:
            nll_terms.append(nll_pc(mu_d, var_d, y, squared=cfg.squared_residual))
    nll = torch.stack(nll_terms).mean()
    kl_latent = gaussian_kl(q)

    grand_mu = grid.mean(dim=(0, 1))
    if supervision == "cloud":
        spread = spread_regularizer(y, grand_mu)
        alpha = cfg.alpha
    else:
        spread = torch.zeros((), dtype=grid.dtype)
        alpha = 0.0
    lam = burnin_weight(epoch, cfg)
    det = _deterministic_loss(grand_mu, y, supervision)
    klw = torch.as_tensor(weight_kl)
    total = (lam * (nll + cfg.beta * kl_latent + alpha * spread)
             + (1.0 - lam) * det + klw)
    return LossBreakdown(total=total, nll=nll, kl_latent=kl_latent,
                         kl_weights=klw, spread=spread, burnin_lambda=lam,
                         deterministic=det)
