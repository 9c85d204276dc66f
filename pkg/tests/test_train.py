import numpy as np
import pytest
import torch

from diffcount.data import synth_dataset
from diffcount.denoiser import Denoiser, DenoiserConfig
from diffcount.schedule import build_schedule
from diffcount.train import (
    CheckpointMismatch,
    TrainHistory,
    TrainSettings,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train,
)

TINY = DenoiserConfig(base_channels=8, channel_multipliers=(1, 2), attention_depths=(),
                      num_res_blocks_per_depth=1, time_embed_dim=16, count_hidden=(8,))


def test_running_average():
    h = TrainHistory(total=list(range(1, 301)))
    r = h.running(window=100)
    assert len(r) == 201
    assert r[0] == pytest.approx(50.5) and r[-1] == pytest.approx(250.5)
    short = TrainHistory(total=[1.0, 3.0]).running(window=100)
    np.testing.assert_allclose(short, [2.0])


def test_warmup_is_linear_then_flat():
    m = torch.nn.Linear(2, 2)
    opt, sched = make_optimizer(m, TrainSettings(lr=1e-3, warmup=4))
    lrs = []
    for _ in range(6):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    np.testing.assert_allclose(lrs, [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])
    assert isinstance(opt, torch.optim.AdamW)
    assert opt.defaults["betas"] == (0.9, 0.999)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    m = Denoiser(TINY)
    sched = build_schedule()
    save_checkpoint(tmp_path / "c.pt", m, sched, step=7)
    back, s2 = load_checkpoint(tmp_path / "c.pt", TINY, sched)
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    np.testing.assert_array_equal(s2.alpha_bars, sched.alpha_bars)


def test_checkpoint_mismatch_refused(tmp_path):
    m = Denoiser(TINY)
    save_checkpoint(tmp_path / "c.pt", m, build_schedule())
    other = DenoiserConfig(**{**TINY.to_dict(), "base_channels": 16})
    with pytest.raises(CheckpointMismatch, match="denoiser config"):
        load_checkpoint(tmp_path / "c.pt", other)
    with pytest.raises(CheckpointMismatch, match="schedule"):
        load_checkpoint(tmp_path / "c.pt", TINY, build_schedule(num_steps=500))


def test_training_is_seeded(tmp_path):
    samples = synth_dataset(4, 16, 16, count_range=(1, 4), seed=0)
    settings = TrainSettings(steps=3, batch_size=2, crop=16, lr=1e-3, warmup=1, log_every=0)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        m = Denoiser(TINY)
        runs.append(train(m, samples, build_schedule(), settings).total)
    np.testing.assert_allclose(runs[0], runs[1], rtol=1e-5)


def test_checkpoints_written(tmp_path):
    samples = synth_dataset(2, 16, 16, count_range=(1, 3), seed=0)
    m = Denoiser(TINY)
    train(m, samples, build_schedule(), TrainSettings(steps=4, batch_size=2, crop=16, warmup=1, log_every=0,
                                                      checkpoint_every=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final.pt", "step0000002.pt", "step0000004.pt"]


def test_branchless_training_skips_count_term():
    samples = synth_dataset(2, 16, 16, count_range=(1, 3), seed=0)
    cfg = DenoiserConfig(**{**TINY.to_dict(), "count_branch": False})
    h = train(Denoiser(cfg), samples, build_schedule(), TrainSettings(steps=2, batch_size=2, crop=16, log_every=0))
    assert h.count == [0.0, 0.0]


def test_short_run_reduces_loss():
    samples = synth_dataset(16, 32, 32, count_range=(3, 12), seed=0)
    torch.manual_seed(0)
    m = Denoiser(TINY)
    h = train(m, samples, build_schedule(), TrainSettings(steps=400, batch_size=4, crop=16, lr=2e-3, warmup=20,
                                                          log_every=0))
    r = h.running(window=50)
    assert r[-1] < 0.5 * r[0]
