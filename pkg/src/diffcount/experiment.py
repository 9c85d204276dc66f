"""Desk-scale synthetic experiment: train, sample held-out scenes, score.

Used by the acceptance checks and handy on its own::

    python3 -m diffcount.experiment --iterations 12000 --out desk.json
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .config import RunConfig, desk_config
from .data import synth_dataset
from .denoiser import Denoiser
from .evaluation import evaluate
from .inference import combine, sample_density_maps
from .train import train

log = logging.getLogger(__name__)

SCENE_SIZE = 64
COUNT_RANGE = (10, 80)
TRAIN_SEED = 1
TEST_SEED = 2


@dataclass
class DeskResult:
    truth: list
    fused: list
    realizations: list  # [scene][realization]
    fused_mae: float
    single_maes: list
    running_loss_start: float
    running_loss_end: float
    train_seconds: float
    sample_seconds: float

    @property
    def mean_count(self) -> float:
        return float(np.mean(self.truth))

    @property
    def best_single_mae(self) -> float:
        return float(min(self.single_maes))

    @property
    def realization_mae_variance(self) -> float:
        """Population variance of the per-realization MAEs."""
        return float(np.var(self.single_maes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_count=self.mean_count, realization_mae_variance=self.realization_mae_variance)
        return d


def desk_data(n_train=256, n_test=32, size=SCENE_SIZE, count_range=COUNT_RANGE):
    train_set = synth_dataset(n_train, size, size, count_range, seed=TRAIN_SEED, prefix="train")
    test_set = synth_dataset(n_test, size, size, count_range, seed=TEST_SEED, prefix="test")
    return train_set, test_set


def run_desk_experiment(cfg: RunConfig, train_set, test_set, checkpoint_dir=None) -> DeskResult:
    """Train a fresh model under ``cfg`` and score ``cfg.realizations`` samples per test scene."""
    schedule = cfg.schedule()
    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.denoiser_config())
    t0 = time.time()
    history = train(model, train_set, schedule, cfg.train_settings(), checkpoint_dir=checkpoint_dir)
    train_seconds = time.time() - t0
    running = history.running()

    t0 = time.time()
    maps = sample_density_maps(model, [s.image for s in test_set], schedule, cfg.realization_seeds(),
                               cfg.sampling_steps, cfg.patch_size, cfg.sample_batch)
    preds = [combine(m, cfg.threshold, cfg.fusion_config()) for m in maps]
    sample_seconds = time.time() - t0

    truth = [s.count for s in test_set]
    per_real = [p.realization_counts for p in preds]
    single = [evaluate([(g, r[k]) for g, r in zip(truth, per_real)]).mae for k in range(cfg.realizations)]
    fused = [p.count for p in preds]
    result = DeskResult(truth, fused, per_real, evaluate(list(zip(truth, fused))).mae, single,
                        float(running[0]), float(running[-1]), train_seconds, sample_seconds)
    log.info("desk run (seed %d, branch %s): fused MAE %.2f, single %s, train %.0fs, sample %.0fs",
             cfg.seed, cfg.count_branch, result.fused_mae, np.round(single, 2), train_seconds, sample_seconds)
    return result


def main(argv=None):
    p = argparse.ArgumentParser(description="desk-scale synthetic experiment")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-count-branch", action="store_true")
    p.add_argument("--out", default=None, help="write the result as JSON")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    changes = {"seed": args.seed, "count_branch": not args.no_count_branch}
    if args.iterations:
        changes["iterations"] = args.iterations
    cfg = desk_config(**changes)
    result = run_desk_experiment(cfg, *desk_data())
    text = json.dumps(result.to_dict(), indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
