"""Train-prune loop with soft filter decay, followed by compaction and fine-tuning.

Each epoch ``t``:

1. ``alpha = decay(t)``, ``P = ramp(t)``;
2. one epoch of minibatch SGD (momentum, weight decay on every parameter);
3. test accuracy before pruning;
4. rank filters, pick the ``floor(n*P)`` weakest per layer, scale them by ``alpha``;
5. test accuracy after pruning.

Masks are recomputed from scratch every epoch, so a decayed filter can grow
back and leave the pruned set. After the last epoch the weakest filters are
zeroed for good, the model is compacted and optionally fine-tuned.
"""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .checkpoint import save_checkpoint
from .data import Dataset, hflip
from .errors import ConfigError, InputError, RunError
from .prune import FILTER, PruneConfig, apply_mask, compact, select_mask
from .schedules import CONSTANT, DecaySchedule, RateRamp

logger = logging.getLogger(__name__)

REPORT_FIELDS = ("epoch", "train_loss", "test_accuracy_before_prune", "test_accuracy_after_prune",
                 "accuracy_drop", "alpha", "prune_rate", "current_flops")
REPORT_VERSION = "# softprune reports v1"


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    pretrained_mode: bool = False
    prune: PruneConfig = field(default_factory=PruneConfig)
    decay: DecaySchedule | None = None
    ramp: RateRamp | None = None
    finetune_epochs: int = 0
    decay_momentum: bool = True
    hflip: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 2:
            raise ConfigError("epochs must be >= 2")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.lr_decay <= 0:
            raise ConfigError("batch_size, learning_rate and lr_decay must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.finetune_epochs < 0:
            raise ConfigError("momentum, weight_decay and finetune_epochs must be non-negative")
        ms = tuple(self.milestones)
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing fractions in (0, 1), got {ms}")
        self.milestones = ms
        if self.decay is None:
            self.decay = DecaySchedule(t_max=self.epochs)
        if self.decay.t_max != self.epochs:
            raise ConfigError(f"decay t_max {self.decay.t_max} != epochs {self.epochs}")
        if self.ramp is None:
            self.ramp = RateRamp(CONSTANT, self.prune.target_rate)
        if self.ramp.target_rate != self.prune.target_rate:
            raise ConfigError(f"ramp target {self.ramp.target_rate} != prune rate {self.prune.target_rate}")

    def lr_at(self, epoch):
        lr = self.learning_rate * (0.1 if self.pretrained_mode else 1.0)
        for m in self.milestones:
            if epoch >= int(m * self.epochs):
                lr *= self.lr_decay
        return lr


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    test_accuracy_before_prune: float
    test_accuracy_after_prune: float
    accuracy_drop: float
    alpha: float
    prune_rate: float
    current_flops: int


def evaluate(model, dataset, batch_size=500):
    """Fraction of samples whose argmax logit equals the label."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    pred = G.predict(model, dataset.images, batch_size)
    return float(np.mean(pred == dataset.labels))


def epoch_order(seed, epoch, count):
    """Sample order for one epoch; part of the reproducibility contract."""
    return np.random.default_rng((seed, epoch)).permutation(count)


def flip_flags(seed, epoch, count):
    return np.random.default_rng((seed, epoch, 1)).random(count) < 0.5


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, model, momentum, weight_decay):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {(l, k): np.zeros_like(a) for l, k, a in model.named_arrays()}

    def step(self, model, grads, lr):
        for layer, key, w in model.named_arrays():
            g = grads[layer][key] + self.weight_decay * w
            v = self.velocity[(layer, key)]
            v *= self.momentum
            v += g
            w -= lr * v
        model.touch()

    def weight_buffers(self):
        return {layer: v for (layer, key), v in self.velocity.items() if key == "weight"}


class Trainer:
    def __init__(self, model, train, test, config):
        if len(train) == 0:
            raise InputError("training set is empty")
        if tuple(train.sample_shape) != model.input_shape:
            raise InputError(f"dataset samples {train.sample_shape} do not match model input {model.input_shape}")
        self.model = model
        self.train = train
        self.test = test
        self.config = config
        self.opt = SGD(model, config.momentum, config.weight_decay)
        self.reports = []
        self.mask = None

    def train_epoch(self, epoch, lr, hard_mask=None):
        cfg = self.config
        n = len(self.train)
        order = epoch_order(cfg.seed, epoch, n)
        flips = flip_flags(cfg.seed, epoch, n) if cfg.hflip else None
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = self.train.images[idx]
            if flips is not None:
                x = np.where(flips[idx, None, None, None], hflip(x), x)
            loss, grads = G.loss_and_grads(self.model, x, self.train.labels[idx])
            if not math.isfinite(loss):
                raise RunError(f"loss diverged ({loss}) in epoch {epoch}", epoch=epoch)
            self.opt.step(self.model, grads, lr)
            if hard_mask is not None:
                apply_mask(self.model, hard_mask, 0.0, self.opt.weight_buffers())
            total += loss * len(idx)
        return total / n

    def current_flops(self, mask, rate):
        if mask.granularity == FILTER:
            scope = set(mask.per_layer)
            return G.count_flops(self.model, rate, widths="floor", scope=scope).total
        base = G.count_flops(self.model).total
        for name, keep in mask.per_layer.items():
            _, ho, wo = self.model.shapes[name]
            base -= int((~keep).sum()) * ho * wo
        return base

    def prune_epoch(self, epoch):
        cfg = self.config
        alpha = cfg.decay(epoch)
        rate = cfg.ramp(epoch, cfg.epochs)
        loss = self.train_epoch(epoch, cfg.lr_at(epoch))
        before = evaluate(self.model, self.test)
        self.mask = select_mask(self.model, cfg.prune, rate)
        apply_mask(self.model, self.mask, alpha, self.opt.weight_buffers() if cfg.decay_momentum else None)
        after = evaluate(self.model, self.test)
        report = EpochReport(epoch, loss, before, after, before - after, alpha, rate,
                             self.current_flops(self.mask, rate))
        self.reports.append(report)
        logger.info("epoch %d loss %.4f acc %.4f -> %.4f alpha %.3g rate %.3f",
                    epoch, loss, before, after, alpha, rate)
        return report

    def run_pruning(self, checkpoint_dir=None):
        cfg = self.config
        for epoch in range(cfg.epochs):
            self.prune_epoch(epoch)
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"checkpoint_epoch{epoch:03d}.ckpt"),
                                self.model, {"epoch": epoch})
        return self.reports

    def finalize(self):
        """Zero the final pruned set; compact it away for filter granularity."""
        self.mask = select_mask(self.model, self.config.prune)
        apply_mask(self.model, self.mask, 0.0, self.opt.weight_buffers())
        if self.mask.granularity == FILTER:
            self.model = compact(self.model, self.mask)
            self.opt = SGD(self.model, self.config.momentum, self.config.weight_decay)
        return self.model

    def finetune(self):
        cfg = self.config
        lr = cfg.lr_at(cfg.epochs - 1)
        hard = self.mask if self.mask is not None and self.mask.granularity != FILTER else None
        for i in range(cfg.finetune_epochs):
            loss = self.train_epoch(cfg.epochs + i, lr, hard_mask=hard)
            logger.info("finetune %d loss %.4f", i, loss)
        return self.model


def _split(data):
    if isinstance(data, Dataset):
        return data, data
    train, test = data
    return train, test


def run(model, data, config, checkpoint_dir=None):
    """Full pipeline. ``data`` is ``(train, test)`` or a single Dataset used for both.

    Returns ``(final_model, reports)``; ``model`` is trained in place up to
    compaction, after which a new, smaller graph is returned.
    """
    train, test = _split(data)
    trainer = Trainer(model, train, test, config)
    trainer.run_pruning(checkpoint_dir)
    trainer.finalize()
    trainer.finetune()
    return trainer.model, trainer.reports


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_VERSION + "\n")
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            d = asdict(r)
            w.writerow([repr(d[f]) if isinstance(d[f], float) else d[f] for f in REPORT_FIELDS])


def read_reports_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    out = []
    for row in body:
        d = dict(zip(header, row))
        out.append(EpochReport(int(d["epoch"]), float(d["train_loss"]), float(d["test_accuracy_before_prune"]),
                               float(d["test_accuracy_after_prune"]), float(d["accuracy_drop"]),
                               float(d["alpha"]), float(d["prune_rate"]), int(d["current_flops"])))
    return out
