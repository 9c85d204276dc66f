"""Forward corruption, training losses and the deterministic DDIM sampler.

Maps are torch tensors shaped (B, C, H, W) in the scaled [-1, 1] domain and
timesteps are 1-based integer tensors of shape (B,). Schedule tables are kept
in float64 and cast to the working dtype at the point of use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .schedule import NoiseSchedule

LAMBDA_VLB = 1e-3
LAMBDA_COUNT = 5e-3
DEFAULT_SAMPLING_STEPS = 100
# half-width of a likelihood bin; the value used for 8-bit data in the
# learned-variance formulation
BIN_HALF_WIDTH = 1.0 / 255.0


class NonFiniteLossError(FloatingPointError):
    pass


def _table(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t - 1]`` and shape it to broadcast against ``like``."""
    idx = (t.long() - 1).cpu().numpy()
    out = torch.as_tensor(np.asarray(values)[idx], dtype=like.dtype, device=like.device)
    return out.view(-1, *([1] * (like.ndim - 1)))


def _as_timesteps(t, batch: int, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t).long().reshape(-1)
    if t.numel() == 1 and batch != 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise ValueError(f"got {t.numel()} timesteps for a batch of {batch}")
    schedule.check_timestep(t.cpu().numpy())
    return t


def _flat_reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    x = x.reshape(x.shape[0], -1)
    if reduction == "sum":
        return x.sum(dim=1)
    if reduction == "mean":
        return x.mean(dim=1)
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


@dataclass
class DiffusionBatch:
    x0: torch.Tensor
    y: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    xt: torch.Tensor

    @classmethod
    def make(cls, x0, y, t, eps, schedule: NoiseSchedule) -> "DiffusionBatch":
        t = _as_timesteps(t, x0.shape[0], schedule)
        return cls(x0, y, t, eps, forward_corrupt(x0, eps, t, schedule))


@dataclass
class LossBreakdown:
    """Terms of the training objective; tensors keep the autograd graph."""

    weighted_eps_mse: torch.Tensor
    vlb: torch.Tensor
    count_l1: torch.Tensor
    total: torch.Tensor
    lambda_vlb: float = LAMBDA_VLB
    lambda_count: float = LAMBDA_COUNT

    @staticmethod
    def combine(weighted_eps_mse, vlb, count_l1, lambda_vlb, lambda_count):
        return (weighted_eps_mse + lambda_vlb * vlb) + lambda_count * count_l1

    def as_floats(self) -> dict:
        return {
            "weighted_eps_mse": float(self.weighted_eps_mse.detach()),
            "vlb": float(self.vlb.detach()),
            "count_l1": float(self.count_l1.detach()),
            "total": float(self.total.detach()),
        }


def forward_corrupt(x0, eps, t, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t = _as_timesteps(t, x0.shape[0], schedule)
    ab = _table(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(xt, eps, t, schedule: NoiseSchedule) -> torch.Tensor:
    ab = _table(schedule.alpha_bars, t, xt)
    return (xt - (1.0 - ab).sqrt() * eps) / ab.sqrt()


def q_posterior(x0, xt, t, schedule: NoiseSchedule):
    """Mean and clipped log-variance of q(x_{t-1} | x_t, x_0)."""
    mean = _table(schedule.posterior_mean_coef1, t, xt) * x0 + _table(
        schedule.posterior_mean_coef2, t, xt) * xt
    log_var = _table(schedule.posterior_log_variance_clipped, t, xt).expand_as(xt)
    return mean, log_var


def normal_kl(mean1, logvar1, mean2, logvar2):
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def discretized_gaussian_log_likelihood(x, mean, log_scale, half_width=BIN_HALF_WIDTH):
    """Log-probability of the bin around ``x`` under N(mean, exp(log_scale)^2).

    The outermost bins at -1 and +1 absorb the tails.
    """
    inv_std = torch.exp(-log_scale)
    centered = x - mean
    cdf_plus = torch.special.ndtr(inv_std * (centered + half_width))
    cdf_min = torch.special.ndtr(inv_std * (centered - half_width))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_min = torch.log((1.0 - cdf_min).clamp(min=1e-12))
    log_delta = torch.log((cdf_plus - cdf_min).clamp(min=1e-12))
    return torch.where(
        x < -0.999, log_cdf_plus, torch.where(x > 0.999, log_one_minus_cdf_min, log_delta)
    )


def learned_log_variance(var_interp, t, schedule: NoiseSchedule, like):
    """Interpolate in log space between the posterior variance and beta_t."""
    frac = (var_interp + 1.0) / 2.0
    min_log = _table(schedule.posterior_log_variance_clipped, t, like)
    max_log = _table(np.log(schedule.betas), t, like)
    return frac * max_log + (1.0 - frac) * min_log


def vlb_terms(x0, xt, t, eps_pred, var_interp, schedule: NoiseSchedule, reduction="sum"):
    """Per-sample variational bound term in bits.

    KL between the true and modelled posteriors for t > 1, the discretized
    decoder negative log-likelihood at t = 1.
    """
    true_mean, true_log_var = q_posterior(x0, xt, t, schedule)
    x0_pred = predict_x0(xt, eps_pred, t, schedule)
    model_mean, _ = q_posterior(x0_pred, xt, t, schedule)
    model_log_var = learned_log_variance(var_interp, t, schedule, xt)
    kl = _flat_reduce(normal_kl(true_mean, true_log_var, model_mean, model_log_var), reduction)
    nll = -_flat_reduce(
        discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * model_log_var), reduction
    )
    return torch.where(t.to(kl.device) == 1, nll, kl) / math.log(2.0)


def _check_finite(**tensors):
    for name, value in tensors.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"{name} contains non-finite values")


def hybrid_loss(
    eps_pred,
    var_interp,
    batch: DiffusionBatch,
    schedule: NoiseSchedule,
    lambda_vlb: float = LAMBDA_VLB,
    reduction: str = "sum",
) -> LossBreakdown:
    """SNR-weighted noise regression plus the learned-variance bound.

    ``reduction="sum"`` takes the squared L2 norm over each sample's pixels;
    ``"mean"`` averages over them instead (both terms are reduced alike).
    The bound sees the predicted noise through ``detach`` so it only trains
    the variance output.
    """
    if eps_pred.shape != batch.eps.shape:
        raise ValueError(f"shape mismatch: eps_pred {tuple(eps_pred.shape)} vs eps {tuple(batch.eps.shape)}")
    if var_interp.shape != batch.eps.shape:
        raise ValueError(f"shape mismatch: var_interp {tuple(var_interp.shape)} vs eps {tuple(batch.eps.shape)}")
    _check_finite(eps_pred=eps_pred, var_interp=var_interp)
    lam = _table(schedule.lambdas, batch.t, eps_pred).reshape(-1)
    sq = _flat_reduce((eps_pred - batch.eps) ** 2, reduction)
    weighted = (lam * sq).mean()
    vlb = vlb_terms(batch.x0, batch.xt, batch.t, eps_pred.detach(), var_interp, schedule,
                    reduction).mean()
    zero = torch.zeros((), dtype=weighted.dtype, device=weighted.device)
    total = LossBreakdown.combine(weighted, vlb, zero, lambda_vlb, 0.0)
    _check_finite(total=total)
    return LossBreakdown(weighted, vlb, zero, total, lambda_vlb, 0.0)


def count_loss(count_pred, count_true, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Batch mean of lambda_t * |predicted count - true count|."""
    count_pred = torch.as_tensor(count_pred).reshape(-1)
    count_true = torch.as_tensor(count_true, dtype=count_pred.dtype, device=count_pred.device).reshape(-1)
    if count_pred.shape != count_true.shape:
        raise ValueError(f"size mismatch: {count_pred.numel()} predictions vs {count_true.numel()} targets")
    t = _as_timesteps(t, count_pred.numel(), schedule)
    lam = _table(schedule.lambdas, t, count_pred).reshape(-1)
    return (lam * (count_pred - count_true).abs()).mean()


def overall_loss(hybrid: LossBreakdown, count, lambda_count: float = LAMBDA_COUNT) -> LossBreakdown:
    count = torch.as_tensor(count, dtype=hybrid.weighted_eps_mse.dtype)
    total = LossBreakdown.combine(hybrid.weighted_eps_mse, hybrid.vlb, count,
                                  hybrid.lambda_vlb, lambda_count)
    return replace(hybrid, count_l1=count, total=total, lambda_count=lambda_count)


# -- sampling ---------------------------------------------------------------

def ddim_timesteps(num_steps: int, sampling_steps: int) -> np.ndarray:
    """Uniformly spaced 1-based timesteps, in decreasing order."""
    if not 1 <= sampling_steps <= num_steps:
        raise ValueError(f"sampling steps must lie in 1..{num_steps}, got {sampling_steps}")
    if sampling_steps == 1:
        return np.array([num_steps])
    ts = np.unique(np.round(np.linspace(1, num_steps, sampling_steps)).astype(np.int64))
    return ts[::-1].copy()


def initial_noise(shape, seed, dtype=torch.float32, device="cpu") -> torch.Tensor:
    """Standard-normal start noise; one generator per batch element.

    ``seed`` is an int (element ``i`` uses ``seed + i``) or a sequence with
    one seed per element, so a given seed always yields the same field no
    matter how elements are batched.
    """
    batch = shape[0]
    if isinstance(seed, (int, np.integer)):
        seeds = [int(seed) + i for i in range(batch)]
    else:
        seeds = [int(s) for s in seed]
        if len(seeds) != batch:
            raise ValueError(f"got {len(seeds)} seeds for a batch of {batch}")
    out = torch.empty(shape, dtype=dtype)
    for i, s in enumerate(seeds):
        g = torch.Generator().manual_seed(s)
        out[i] = torch.randn(shape[1:], generator=g, dtype=torch.float64).to(dtype)
    return out.to(device)


def _eps_output(out):
    return out[0] if isinstance(out, (tuple, list)) else out


@torch.no_grad()
def ddim_sample(
    model: Callable,
    y: torch.Tensor,
    schedule: NoiseSchedule,
    num_sampling_steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int | Sequence[int] = 0,
    out_channels: int = 1,
    clip: bool = True,
    x_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from seeded noise to an x0 estimate.

    ``model(y, x_t, t)`` must return the noise prediction, or a tuple whose
    first element is it. Returns a map in the scaled domain, shaped
    (B, out_channels, H, W).
    """
    ts = ddim_timesteps(schedule.num_steps, num_sampling_steps)
    b, _, h, w = y.shape
    if x_init is None:
        x = initial_noise((b, out_channels, h, w), seed, dtype=y.dtype, device=y.device)
    else:
        x = x_init.to(dtype=y.dtype, device=y.device)
    x0 = x
    for i, t in enumerate(ts):
        tb = torch.full((b,), int(t), dtype=torch.long, device=y.device)
        eps = _eps_output(model(y, x, tb))
        ab = float(schedule.alpha_bars[t - 1])
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        if i + 1 < len(ts):
            ab_prev = float(schedule.alpha_bars[ts[i + 1] - 1])
            x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return x0
