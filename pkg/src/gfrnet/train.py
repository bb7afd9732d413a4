"""Seeded training loop shared by the CLI, the ablation harness and the tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchConfig, ModelParams, forward, init_params
from .autodiff import Graph
from .data import VGG_MEAN, VGG_STD, prepare_batch, random_crop
from .optim import OptState, sgd_step
from .supervision import class_weights, pixel_counts, stage_losses
from .tensor import derive_rng

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A loss or gradient became NaN/Inf during training."""


@dataclass
class TrainConfig:
    max_iter: int = 300
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    stage_weights: list | None = None
    class_balancing: bool = False
    crop: tuple | None = None
    batch_size: int = 1
    mean: tuple = VGG_MEAN
    std: tuple = VGG_STD
    lr_mult: dict = field(default_factory=dict)
    decay_all: bool = False


@dataclass
class TrainResult:
    params: ModelParams
    history: list  # rows: (iter, [stage losses], total, lr)
    weights: np.ndarray | None


def balancing_weights(samples, num_classes: int) -> np.ndarray:
    counts = sum(pixel_counts(s.labels, num_classes) for s in samples)
    return class_weights(counts)


def train(arch: ArchConfig, cfg: TrainConfig, samples: list, seed: int,
          params: ModelParams | None = None, on_checkpoint=None, checkpoint_every: int = 0) -> TrainResult:
    """Run ``cfg.max_iter`` SGD steps; every random choice derives from ``seed``.

    Samples are visited in a fresh seeded permutation each epoch. With
    ``checkpoint_every > 0``, ``on_checkpoint(iter, params)`` fires every that
    many steps.
    """
    if not samples:
        raise ValueError("training set is empty")
    params = params or init_params(arch, seed)
    params.set_mode("train")
    weights = balancing_weights(samples, arch.num_classes) if cfg.class_balancing else None
    stage_w = cfg.stage_weights or [1.0] * arch.num_stages
    opt = OptState(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power,
                   max(cfg.max_iter, 1), lr_mult=dict(cfg.lr_mult), decay_all=cfg.decay_all)
    crop_rng = derive_rng(seed, "crop")
    history = []
    order: list = []
    epoch = 0
    for it in range(cfg.max_iter):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(derive_rng(seed, "order", epoch).permutation(len(samples)))
                epoch += 1
            s = samples[order.pop(0)]
            if cfg.crop is not None and tuple(cfg.crop) != s.labels.shape:
                s = random_crop(s, cfg.crop[0], cfg.crop[1], crop_rng)
            batch.append(s)
        images, labels = prepare_batch(batch, cfg.mean, cfg.std)
        graph = Graph()
        out = forward(images, params, arch, graph)
        losses = stage_losses(out, labels, weights, stage_w)
        total = float(losses.total.value)
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss at iteration {it}")
        graph.backward(losses.total)
        grads = out.bound.grads()
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name} at iteration {it}")
        lr = sgd_step(params.arrays, grads, opt)
        history.append((it, losses.values(), total, lr))
        if it % 100 == 0:
            log.debug("iter %d total %.5f lr %.5g", it, total, lr)
        if checkpoint_every and on_checkpoint and (it + 1) % checkpoint_every == 0:
            on_checkpoint(it + 1, params)
    return TrainResult(params, history, weights)
