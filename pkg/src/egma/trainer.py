"""SGD training loop over encoder parameters and log-temperature."""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .contrastive import TAU_INIT, EmbeddingBundle, _ordered_map
from .encoders import (
    EncoderParams,
    encode_image,
    encode_image_backward,
    encode_sentences,
    encode_sentences_backward,
    image_patches,
    save_checkpoint,
)
from .errors import ConfigError, NonFiniteLoss
from .heatmap import PatchGrid
from .mapping import LOSS_CSV_HEADER, MappingConfig, total_loss
from .synthetic import select_gaze_subset

log = logging.getLogger(__name__)

FULL_SCALE_DEFAULTS = {"batch_size": 100, "lr": 1e-6, "weight_decay": 1e-4,
                       "epochs": 50, "warmup_epochs": 10, "tau_init": 0.07}


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    warmup_epochs: int = 10
    lr: float = 0.2
    weight_decay: float = 1e-4
    gaze_fraction: float = 1.0
    seed: int = 0
    grid: str = "7x7"
    d: int = 16
    tau_init: float = TAU_INIT
    rho: float = 0.25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.gaze_fraction <= 1.0:
            raise ConfigError("gaze_fraction must be in [0, 1]")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if not self.tau_init > 0:
            raise ConfigError("tau_init must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must be in (0, 1]")
        try:
            PatchGrid.parse(self.grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def patch_grid(self):
        return PatchGrid.parse(self.grid)


def parse_config(text):
    """Parse flat ``key = value`` lines into a :class:`TrainConfig`.

    Blank lines and ``#`` comments are ignored; unknown keys raise ConfigError.
    """
    types = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float, "str": str, int: int, float: float, str: str}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        try:
            values[key] = casts[types[key]](value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    return TrainConfig(**values)


def read_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


@dataclass
class TrainState:
    params: EncoderParams
    log_tau: float
    step: int = 0
    running: dict = field(default_factory=dict)

    @property
    def tau(self):
        return math.exp(self.log_tau)


def init_state(cfg, patch_pixels, vocab_size):
    params = EncoderParams.init(patch_pixels, vocab_size, cfg.d, cfg.seed,
                                (cfg.patch_grid.rows, cfg.patch_grid.cols))
    return TrainState(params, math.log(cfg.tau_init))


@contextmanager
def worker_pool(workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            yield ex
    else:
        yield None


def loss_and_grads(params, log_tau, samples, grid, rho=0.25, executor=None):
    """Total loss of ``samples`` and its gradients w.r.t. encoder params and log-tau.

    Returns ``(breakdown, EncoderParams-shaped gradient, dlog_tau)``.
    """
    def forward(s):
        ic, tc = {}, {}
        P = encode_image(s.image, grid, params, ic)
        S = encode_sentences(s.sentences, params, tc)
        return EmbeddingBundle(P, S), ic, tc

    encoded = _ordered_map(forward, samples, executor)
    batch = [e[0] for e in encoded]
    cfg = MappingConfig(log_tau=log_tau, rho=rho)
    bd = total_loss(batch, [s.gaze for s in samples], cfg, executor)

    def backward(k):
        _, ic, tc = encoded[k]
        dw, db = encode_image_backward(ic, bd.grads.dP[k])
        dt = encode_sentences_backward(tc, bd.grads.dS[k], params.vocab_size)
        return dw, db, dt

    parts = _ordered_map(backward, range(len(samples)), executor)
    grad = EncoderParams(np.zeros_like(params.w_img), np.zeros_like(params.b_img),
                         np.zeros_like(params.tokens), params.grid_rows, params.grid_cols)
    for dw, db, dt in parts:  # fixed order keeps the reduction deterministic
        grad.w_img += dw
        grad.b_img += db
        grad.tokens += dt
    return bd, grad, bd.grads.dlog_tau


def lr_at(cfg, step, steps_per_epoch):
    """Linear warmup over ``warmup_epochs`` epochs, constant afterwards."""
    warm = cfg.warmup_epochs * steps_per_epoch
    if warm <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / warm)


def train_step(state, batch, cfg, steps_per_epoch=1, executor=None):
    """One SGD step with decoupled weight decay on the encoder parameters and log-tau."""
    grid = cfg.patch_grid
    bd, grad, dlog_tau = loss_and_grads(state.params, state.log_tau, batch, grid, cfg.rho, executor)
    finite = np.isfinite(bd.total) and np.isfinite(dlog_tau) and all(
        np.all(np.isfinite(a)) for a in grad.arrays())
    if not finite:
        raise NonFiniteLoss(f"non-finite loss or gradient at step {state.step}",
                            dump={"step": state.step, "total": bd.total, "tau": state.tau,
                                  "samples": [s.sample_id for s in batch]})
    lr = lr_at(cfg, state.step, steps_per_epoch)
    params = state.params.copy()
    for p, g in zip(params.arrays(), grad.arrays()):
        p -= lr * g + lr * cfg.weight_decay * p
    log_tau = state.log_tau - lr * dlog_tau - lr * cfg.weight_decay * state.log_tau
    # exp overflows above ~709, so a runaway log-tau counts as a numeric failure too
    if not (np.isfinite(log_tau) and abs(log_tau) < 700
            and all(np.all(np.isfinite(a)) for a in params.arrays())):
        raise NonFiniteLoss(f"parameters left the finite range at step {state.step}",
                            dump={"step": state.step, "lr": lr, "log_tau": log_tau,
                                  "samples": [s.sample_id for s in batch]})
    running = dict(state.running)
    for key in LOSS_CSV_HEADER[1:]:
        prev = running.get(key)
        val = float(getattr(bd, key))
        running[key] = val if prev is None else 0.9 * prev + 0.1 * val
    return TrainState(params, log_tau, state.step + 1, running), bd


def run_training(cfg, samples, vocab_size, out_dir=None, workers=1, on_epoch_end=None):
    """Train on ``samples`` for ``cfg.epochs`` epochs.

    Writes ``loss.csv`` and one checkpoint per epoch plus ``checkpoint.bin`` to
    ``out_dir`` when given.  ``on_epoch_end(epoch, state)`` may return True to stop.
    Returns ``(state, loss_rows)``.
    """
    if not samples:
        raise ConfigError("dataset is empty")
    patch_pixels = image_patches(samples[0].image, cfg.patch_grid).shape[1]
    state = init_state(cfg, patch_pixels, vocab_size)
    return train_from(state, cfg, samples, out_dir, workers, on_epoch_end)


def train_from(state, cfg, samples, out_dir=None, workers=1, on_epoch_end=None):
    samples = select_gaze_subset(samples, cfg.gaze_fraction, cfg.seed)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    shuffle_rng = np.random.default_rng([cfg.seed, 3])
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    csv_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out / "loss.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(csv_fh, lineterminator="\n")
        writer.writerow(LOSS_CSV_HEADER)
    try:
        with worker_pool(workers) as ex:
            for epoch in range(cfg.epochs):
                order = shuffle_rng.permutation(n)
                for start in range(0, n, cfg.batch_size):
                    batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                    step = state.step
                    state, bd = train_step(state, batch, cfg, steps_per_epoch, ex)
                    row = bd.csv_row(step)
                    rows.append(row)
                    if writer is not None:
                        writer.writerow(row)
                log.info("epoch %d: total=%.5f tau=%.4f", epoch + 1,
                         state.running.get("total", float("nan")), state.tau)
                if out is not None:
                    save_checkpoint(out / f"checkpoint_epoch{epoch + 1:03d}.bin", state.params)
                if on_epoch_end is not None and on_epoch_end(epoch + 1, state):
                    break
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", state.params)
    return state, rows
