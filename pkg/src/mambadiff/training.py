"""Training loop: deterministic batches, Adam, EMA, checkpoints, metrics.

Every random draw is keyed by (seed, stream, step) through independent
generators, so a run is a pure function of its configuration and resuming
at ``start_step`` from a checkpoint replays the identical stream.
"""

from __future__ import annotations

import logging
import math
import os

import numpy as np

from .config import RunConfig
from .data import MetricsWriter, ToyDatasetSpec, generate_toy_batch, load_cifar10
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import EMAState, NoiseSchedule, training_loss
from .model import Denoiser
from .optim import Adam
from .tensor import BufferPool, record

log = logging.getLogger(__name__)

_DATA_STREAM = 1
_LOSS_STREAM = 2


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at step {step}")
        self.step = step


class ArrayDataset:
    """In-memory labelled images for estimator-style fitting."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = images.astype(np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)

    def batch(self, seed: int, step: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([seed, _DATA_STREAM, step])
        idx = rng.integers(0, len(self.images), size=size)
        return self.images[idx], self.labels[idx]


class Trainer:
    """Owns one training job defined by a :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig, dataset: ArrayDataset | None = None, init_from: str | None = None):
        self.cfg = cfg
        self.model = Denoiser(cfg.model_config(), seed=cfg.seed)
        if init_from:
            load_checkpoint(self.model, init_from)
        self.schedule = cfg.schedule()
        self.opt = Adam(
            self.model.named_params(),
            lr=cfg.lr,
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
        self.ema = EMAState(self.model.named_params(), rate=cfg.ema_rate)
        self.metrics = MetricsWriter()
        self.pool = BufferPool()
        if cfg.dataset == "toy":
            spec = ToyDatasetSpec(n_classes=cfg.classes, resolution=cfg.resolution, channels=cfg.channels, jitter=cfg.jitter)
            self.dataset = _ToyStream(spec)
        elif cfg.dataset == "cifar10":
            images, labels = load_cifar10(cfg.data_path)
            self.dataset = ArrayDataset(images, labels)
        elif cfg.dataset == "array":
            if dataset is None:
                raise ValueError("dataset='array' requires an ArrayDataset")
            self.dataset = dataset
        else:
            raise ValueError(f"unknown dataset {cfg.dataset!r}")

    # -- single step ----------------------------------------------------------

    def loss_at(self, step: int) -> float:
        """Loss of the batch at ``step`` with current weights (no update)."""
        x0, labels = self.dataset.batch(self.cfg.seed, step, self.cfg.batch_size)
        rng = np.random.default_rng([self.cfg.seed, _LOSS_STREAM, step])
        loss = training_loss(self.model, self.schedule, x0, labels, rng, self.cfg.label_dropout)
        return loss.item()

    def train_step(self, step: int) -> tuple[float, float]:
        """One optimization step; returns (loss, grad_norm)."""
        x0, labels = self.dataset.batch(self.cfg.seed, step, self.cfg.batch_size)
        rng = np.random.default_rng([self.cfg.seed, _LOSS_STREAM, step])
        self.pool.recycle()
        with self.pool.active():
            with record() as tape:
                loss = training_loss(self.model, self.schedule, x0, labels, rng, self.cfg.label_dropout)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            grads = tape.backward(loss)
        gnorm = math.sqrt(
            sum(float(np.sum(g.astype(np.float64) ** 2)) for p in self.model.named_params().values() if (g := grads.get(p)) is not None)
        )
        self.opt.step(grads)
        self.ema.update(self.model.named_params())
        return value, gnorm

    # -- full run --------------------------------------------------------------

    def run(self, out_dir: str) -> list[float]:
        """Train from start_step to train_steps, emitting artifacts into ``out_dir``.

        On a non-finite loss the run aborts (re-raising) with the last
        periodic checkpoint left in place.
        """
        cfg = self.cfg
        os.makedirs(out_dir, exist_ok=True)
        losses: list[float] = []
        try:
            for step in range(cfg.start_step, cfg.train_steps):
                value, gnorm = self.train_step(step)
                losses.append(value)
                if step % cfg.log_every == 0 or step == cfg.train_steps - 1:
                    dist = self.ema.distance(self.model.named_params())
                    self.metrics.log(step, value, gnorm, dist)
                    log.info("step %d loss %.4f grad %.3g ema %.3g", step, value, gnorm, dist)
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    self._save(out_dir)
        finally:
            self.metrics.dump(os.path.join(out_dir, "metrics.csv"))
        self._save(out_dir)
        return losses

    def _save(self, out_dir: str) -> None:
        save_checkpoint(self.model, os.path.join(out_dir, "model.ckpt"))
        ema_model = Denoiser(self.model.cfg, seed=self.cfg.seed)
        self.ema.copy_to(ema_model.named_params())
        save_checkpoint(ema_model, os.path.join(out_dir, "model.ema.ckpt"))


class _ToyStream:
    def __init__(self, spec: ToyDatasetSpec):
        self.spec = spec

    def batch(self, seed: int, step: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        return generate_toy_batch(self.spec, seed, step, size)
