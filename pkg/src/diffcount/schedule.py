"""Linear noise schedule and the SNR-based per-timestep loss weights.

Timesteps are 1-based throughout the public API (``t`` in ``1..T``); the
tables themselves are stored 0-based, so ``schedule.betas[t - 1]`` is the
variance used at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 1e-3
DEFAULT_BETA_END = 0.02
DEFAULT_K = 1.0
DEFAULT_GAMMA = 0.5


def snr_weight(beta, alpha_bar, k, gamma):
    """Loss weight for one step from its beta and cumulative alpha."""
    snr = alpha_bar / (1.0 - alpha_bar)
    return ((1.0 - beta) * (1.0 - alpha_bar) / beta) / (k + snr) ** gamma


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    beta_start: float
    beta_end: float
    k: float = DEFAULT_K
    gamma: float = DEFAULT_GAMMA
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)
    snrs: np.ndarray = field(init=False, repr=False, compare=False)
    lambdas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ValueError(f"num_steps must be a positive integer, got {self.num_steps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})"
            )
        if self.num_steps == 1:
            betas = np.array([self.beta_start], dtype=np.float64)
        else:
            betas = np.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        snrs = alpha_bars / (1.0 - alpha_bars)
        lambdas = snr_weight(betas, alpha_bars, self.k, self.gamma)
        for name, arr in [
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("snrs", snrs),
            ("lambdas", lambdas),
        ]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- derived tables used by the sampler and the variational term --------

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def posterior_log_variance_clipped(self) -> np.ndarray:
        # the first posterior variance is exactly zero; reuse the second one
        var = self.posterior_variance
        if len(var) > 1:
            var = np.concatenate([[var[1]], var[1:]])
        else:
            var = self.betas.copy()
        return np.log(var)

    @property
    def posterior_mean_coef1(self) -> np.ndarray:
        return self.betas * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)

    @property
    def posterior_mean_coef2(self) -> np.ndarray:
        return (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)

    def check_timestep(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.num_steps):
            raise IndexError(f"timestep out of range 1..{self.num_steps}: {t.min()}..{t.max()}")

    def weight_at(self, t: int) -> float:
        return weight_at(self, t)

    def to_config(self) -> dict:
        return {
            "num_steps": int(self.num_steps),
            "beta_start": float(self.beta_start),
            "beta_end": float(self.beta_end),
            "k": float(self.k),
            "gamma": float(self.gamma),
        }

    @classmethod
    def from_config(cls, config: dict) -> "NoiseSchedule":
        return build_schedule(**config)


def build_schedule(
    num_steps: int = DEFAULT_NUM_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    k: float = DEFAULT_K,
    gamma: float = DEFAULT_GAMMA,
) -> NoiseSchedule:
    """Build the linear schedule with endpoints inclusive over ``t = 1..T``."""
    return NoiseSchedule(num_steps, float(beta_start), float(beta_end), float(k), float(gamma))


def weight_at(schedule: NoiseSchedule, t: int) -> float:
    if not 1 <= t <= schedule.num_steps:
        raise IndexError(f"timestep {t} out of range 1..{schedule.num_steps}")
    return float(schedule.lambdas[t - 1])
