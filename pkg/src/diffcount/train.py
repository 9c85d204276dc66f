"""Training loop: corrupt, predict, hybrid + weighted count loss, AdamW step."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import training_batch
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (
    LAMBDA_COUNT,
    LAMBDA_VLB,
    DiffusionBatch,
    LossBreakdown,
    count_loss,
    hybrid_loss,
    overall_loss,
)
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class CheckpointMismatch(ValueError):
    pass


@dataclass
class TrainSettings:
    steps: int = 20000
    batch_size: int = 8
    crop: int = 256
    lr: float = 1e-4
    warmup: int = 5000
    weight_decay: float = 0.0
    lambda_vlb: float = LAMBDA_VLB
    lambda_count: float = LAMBDA_COUNT
    loss_reduction: str = "mean"
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0


@dataclass
class TrainHistory:
    total: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    vlb: list = field(default_factory=list)
    count: list = field(default_factory=list)

    def append(self, losses: LossBreakdown):
        f = losses.as_floats()
        self.total.append(f["total"])
        self.eps.append(f["weighted_eps_mse"])
        self.vlb.append(f["vlb"])
        self.count.append(f["count_l1"])

    def running(self, which="total", window=100) -> np.ndarray:
        x = np.asarray(getattr(self, which), dtype=np.float64)
        if len(x) < window:
            return np.array([x.mean()]) if len(x) else x
        c = np.cumsum(np.concatenate([[0.0], x]))
        return (c[window:] - c[:-window]) / window


def make_optimizer(model, settings: TrainSettings):
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr, betas=(0.9, 0.999),
                            weight_decay=settings.weight_decay)
    warmup = max(1, settings.warmup)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: min(1.0, (step + 1) / warmup))
    return opt, sched


def training_loss(model: Denoiser, images, density, counts, schedule: NoiseSchedule,
                  generator: torch.Generator, settings: TrainSettings) -> LossBreakdown:
    b = density.shape[0]
    t = torch.randint(1, schedule.num_steps + 1, (b,), generator=generator)
    eps = torch.randn(density.shape, generator=generator)
    batch = DiffusionBatch.make(density, images, t, eps, schedule)
    eps_pred, var_interp, feats = model(batch.y, batch.xt, batch.t)
    losses = hybrid_loss(eps_pred, var_interp, batch, schedule, settings.lambda_vlb,
                         settings.loss_reduction)
    if model.count_head is not None and settings.lambda_count > 0:
        pred = model.regress_count(feats.pooled)
        losses = overall_loss(losses, count_loss(pred, counts, t, schedule), settings.lambda_count)
    return losses


def train(model: Denoiser, samples, schedule: NoiseSchedule, settings: TrainSettings,
          checkpoint_dir=None, progress=None) -> TrainHistory:
    """Fit ``model`` on crops drawn from ``samples`` (a list of CrowdSample)."""
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    gen = torch.Generator().manual_seed(settings.seed)
    opt, lr_sched = make_optimizer(model, settings)
    history = TrainHistory()
    model.train()
    start = time.time()
    for step in range(1, settings.steps + 1):
        tb = training_batch(samples, settings.batch_size, settings.crop, rng)
        losses = training_loss(
            model, torch.from_numpy(tb.images), torch.from_numpy(tb.density),
            torch.from_numpy(tb.counts), schedule, gen, settings,
        )
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        opt.step()
        lr_sched.step()
        history.append(losses)
        if settings.log_every and step % settings.log_every == 0:
            msg = (f"step {step}/{settings.steps} loss {np.mean(history.total[-settings.log_every:]):.4f} "
                   f"({time.time() - start:.0f}s)")
            log.info(msg)
            if progress:
                progress(msg)
        if checkpoint_dir and settings.checkpoint_every and step % settings.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step{step:07d}.pt", model, schedule, step)
    model.eval()
    if checkpoint_dir:
        save_checkpoint(Path(checkpoint_dir) / "final.pt", model, schedule, settings.steps)
    return history


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, step: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "denoiser_config": model.config.to_dict(),
        "schedule": schedule.to_config(),
        "step": int(step),
        "weights": model.state_dict(),
    }, path)


def load_checkpoint(path, config: DenoiserConfig | None = None,
                    schedule: NoiseSchedule | None = None) -> tuple[Denoiser, NoiseSchedule]:
    """Restore a model; refuses when the stored configs differ from the given ones."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    stored_cfg = DenoiserConfig.from_dict(blob["denoiser_config"])
    stored_sched = NoiseSchedule.from_config(blob["schedule"])
    if config is not None and config != stored_cfg:
        raise CheckpointMismatch(f"{path}: denoiser config differs from the checkpoint's")
    if schedule is not None and schedule.to_config() != stored_sched.to_config():
        raise CheckpointMismatch(f"{path}: schedule differs from the checkpoint's")
    model = Denoiser(stored_cfg)
    model.load_state_dict(blob["weights"])
    model.eval()
    return model, stored_sched
