import dataclasses
import math

import numpy as np
import pytest

from egma.encoders import load_checkpoint
from egma.errors import ConfigError, NonFiniteLoss
from egma.heatmap import PatchGrid
from egma.mapping import LOSS_CSV_HEADER
from egma.synthetic import generate_planted_dataset
from egma.trainer import (
    TrainConfig,
    init_state,
    loss_and_grads,
    lr_at,
    parse_config,
    run_training,
    train_step,
)


@pytest.fixture(scope="module")
def data():
    return generate_planted_dataset(12, seed=0)


def _state(cfg, ds):
    return init_state(cfg, 32 * 32, len(ds.vocab))


def test_config_parsing():
    cfg = parse_config("# toy\nlr = 0.05\nepochs=3\n\ngrid = 7x7  # default\n")
    assert cfg.lr == 0.05 and cfg.epochs == 3 and cfg.batch_size == 16
    with pytest.raises(ConfigError, match="lrr"):
        parse_config("lrr = 0.1")
    with pytest.raises(ConfigError):
        parse_config("epochs = many")
    with pytest.raises(ConfigError):
        TrainConfig(gaze_fraction=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(grid="7by7")


def test_warmup_schedule():
    cfg = TrainConfig(lr=1.0, warmup_epochs=2)
    assert [lr_at(cfg, s, 2) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
    assert lr_at(TrainConfig(lr=0.3, warmup_epochs=0), 0, 5) == 0.3


def test_zero_lr_leaves_state(data):
    cfg = TrainConfig(lr=0.0)
    state = _state(cfg, data)
    new, bd = train_step(state, data.samples[:4], cfg)
    for a, b in zip(new.params.arrays(), state.params.arrays()):
        np.testing.assert_array_equal(a, b)
    assert new.log_tau == state.log_tau
    assert np.isfinite(bd.total)


def test_one_step_decreases_batch_loss(data):
    cfg = TrainConfig(lr=0.05, warmup_epochs=0)
    batch = data.samples[:6]
    state = _state(cfg, data)
    new, before = train_step(state, batch, cfg)
    after, _, _ = loss_and_grads(new.params, new.log_tau, batch, PatchGrid(), cfg.rho)
    assert after.total < before.total


def test_step_identities(data):
    cfg = TrainConfig()
    state = _state(cfg, data)
    _, bd = train_step(state, data.samples[:5], cfg)
    assert bd.total == bd.l_egf + bd.l_egm
    assert bd.tau > 0


def test_non_finite_loss_raises(data):
    cfg = TrainConfig()
    state = _state(cfg, data)
    bad = dataclasses.replace(data.samples[0], image=np.full((224, 224), np.nan))
    with pytest.raises(NonFiniteLoss) as err:
        train_step(state, [bad, data.samples[1]], cfg)
    assert "samples" in err.value.dump


def test_zero_epochs_checkpoint_is_init(tmp_path, data):
    cfg = TrainConfig(epochs=0, seed=4)
    run_training(cfg, data.samples, len(data.vocab), tmp_path)
    init = _state(cfg, data).params
    saved = load_checkpoint(tmp_path / "checkpoint.bin")
    for a, b in zip(saved.arrays(), init.arrays()):
        np.testing.assert_array_equal(a, b)


def test_training_is_deterministic(tmp_path, data):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=1, gaze_fraction=0.5)
    run_training(cfg, data.samples, len(data.vocab), tmp_path / "a")
    run_training(cfg, data.samples, len(data.vocab), tmp_path / "b", workers=3)
    for name in ("loss.csv", "checkpoint.bin", "checkpoint_epoch001.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOSS_CSV_HEADER)
    assert len(lines) == 1 + 2 * math.ceil(12 / 4)


def test_early_stop_callback(data):
    cfg = TrainConfig(epochs=5, batch_size=6)
    seen = []
    state, rows = run_training(cfg, data.samples, len(data.vocab),
                               on_epoch_end=lambda e, s: seen.append(e) or e == 2)
    assert seen == [1, 2]
    assert state.step == 4 and len(rows) == 4
