"""Final-network training and evaluation, with the gradient-magnitude
instrumentation used by the skip-connection studies.

Paper-scale defaults (600 epochs, batch 256, one-cycle) are presets; desk
runs override epochs/batch/subset through the config.  The one-cycle base
learning rate is a documented choice -- the recipe names the policy without
its knobs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, backward
from .binary import binarize_weights
from .checkpoint import save_checkpoint
from .errors import ContractError, DivergenceError
from .layers import BinConv2d, BinSepConv2d, Module, conv_weight_parameters
from .optim import LrSchedule, lr_at, sgd_step, zero_grads
from .seeding import rng_for


@dataclass
class TrainConfig:
    epochs: int = 600
    batch: int = 256
    lr: float = 0.05  # one-cycle peak; the named policy leaves this open
    momentum: float = 0.9
    weight_decay: float = 3e-6
    schedule: str = "one_cycle"
    augment: bool = True
    seed: int = 0
    grad_log: bool = False
    eval_each_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1:
            raise ContractError("epochs must be >= 0 and batch >= 1")


@dataclass
class EvalResult:
    top1: float
    top5: float
    per_class: np.ndarray
    loss: float

    def __post_init__(self):
        assert 0.0 <= self.top1 <= self.top5 <= 100.0


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    top1: float
    top5: float
    lr: float
    grad_mag_sum: float


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "loss", "top1", "top5", "lr", "grad_mag_sum"])
        for r in rows:
            w.writerow([r.epoch, r.split, f"{r.loss:.6f}", f"{r.top1:.4f}",
                        f"{r.top5:.4f}", f"{r.lr:.6f}", f"{r.grad_mag_sum:.6f}"])


def log_grad_magnitudes(model: Module, epoch: int) -> tuple[int, float]:
    """(epoch, sum over conv layers of sum |grad|): the quantity behind the
    spiky-vs-stable gradient comparisons."""
    total = 0.0
    for p in conv_weight_parameters(model):
        if p.grad is not None:
            total += float(np.abs(p.grad).sum())
    return epoch, total


def _topk(logits: np.ndarray, labels: np.ndarray, k: int = 5):
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top1 = order[:, 0] == labels
    topk = (order == labels[:, None]).any(axis=1)
    return top1, topk


def train(model: Module, dataset, config: TrainConfig,
          eval_dataset=None) -> tuple[list[MetricsRow], list[tuple[int, float]]]:
    """SGD epoch loop; deterministic under config.seed.  Returns the metrics
    rows and the per-epoch gradient-magnitude log (empty unless enabled)."""
    params = model.parameters()
    n = dataset.num_examples
    batches = n // config.batch
    if config.epochs > 0 and batches == 0:
        raise ContractError(f"batch {config.batch} exceeds dataset size {n}")
    total_steps = max(1, config.epochs * batches)
    schedule = LrSchedule(config.schedule, config.lr, total_steps)
    shuffle_rng = rng_for(config.seed, "train_shuffle")
    augment_rng = rng_for(config.seed, "train_augment") if config.augment else None

    rows: list[MetricsRow] = []
    grad_rows: list[tuple[int, float]] = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        losses, hit1, hit5, seen = [], 0, 0, 0
        lr = config.lr
        grad_mag = 0.0
        for b in range(batches):
            idx = order[b * config.batch : (b + 1) * config.batch]
            x, y = dataset.batch(idx, augment_rng)
            lr = lr_at(schedule, step)
            logits = model.forward(Var(x), training=True)
            loss = ad.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}"
                )
            backward(loss)
            if b == batches - 1:
                grad_mag = log_grad_magnitudes(model, epoch)[1]
            sgd_step(params, lr, config.momentum, config.weight_decay)
            zero_grads(params)
            losses.append(float(loss.data))
            t1, t5 = _topk(logits.data, y)
            hit1 += int(t1.sum())
            hit5 += int(t5.sum())
            seen += len(y)
            step += 1
        rows.append(MetricsRow(epoch, "train", float(np.mean(losses)),
                               100.0 * hit1 / seen, 100.0 * hit5 / seen,
                               lr, grad_mag))
        if config.grad_log:
            grad_rows.append((epoch, grad_mag))
        if eval_dataset is not None and (
            config.eval_each_epoch or epoch == config.epochs - 1
        ):
            res = evaluate(model, eval_dataset)
            rows.append(MetricsRow(epoch, "test", res.loss, res.top1, res.top5,
                                   lr, 0.0))
    return rows, grad_rows


def evaluate(model: Module, dataset, batch: int = 256) -> EvalResult:
    """Eval-mode forward over the whole set; mutates nothing (batchnorm uses
    running statistics and no gradients are taken)."""
    n = dataset.num_examples
    if n == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    losses = []
    hit1 = hit5 = 0
    classes = dataset.num_classes
    per_class_hits = np.zeros(classes)
    per_class_seen = np.zeros(classes)
    for lo in range(0, n, batch):
        idx = np.arange(lo, min(n, lo + batch))
        x, y = dataset.batch(idx)
        logits = model.forward(Var(x), training=False)
        losses.append(float(ad.softmax_cross_entropy(logits, y).data) * len(y))
        t1, t5 = _topk(logits.data, y)
        hit1 += int(t1.sum())
        hit5 += int(t5.sum())
        np.add.at(per_class_hits, y, t1)
        np.add.at(per_class_seen, y, 1)
    per_class = np.divide(per_class_hits, per_class_seen,
                          out=np.zeros(classes), where=per_class_seen > 0)
    return EvalResult(100.0 * hit1 / n, 100.0 * hit5 / n, 100.0 * per_class,
                      sum(losses) / n)


# ---------------------------------------------------------------------------
# checkpoints


def model_checkpoint_entries(model: Module) -> dict:
    return model.state_entries()


def save_model(path, model: Module) -> None:
    save_checkpoint(path, model.state_entries())


def frozen_inference_entries(model: Module) -> dict:
    """Deployment form: binary conv master weights become packed sign bits
    plus per-filter scales; everything else (batchnorms, stem, classifier)
    stays float."""
    skip: set[int] = set()
    entries: dict = {}
    for name, mod in model.named_modules():
        prefix = name + "." if name else ""
        if isinstance(mod, BinConv2d):
            bits, beta = binarize_weights(mod.weight.data)
            entries[prefix + "weight.bits"] = bits
            entries[prefix + "weight.beta"] = beta
            skip.add(id(mod.weight))
        elif isinstance(mod, BinSepConv2d):
            c = mod.w_depth.data.shape[0]
            bits, beta = binarize_weights(mod.w_depth.data[:, None])
            entries[prefix + "w_depth.bits"] = bits
            entries[prefix + "w_depth.beta"] = beta
            bits, beta = binarize_weights(mod.w_point.data)
            entries[prefix + "w_point.bits"] = bits
            entries[prefix + "w_point.beta"] = beta
            skip.update((id(mod.w_depth), id(mod.w_point)))
    for pname, p in model.named_parameters():
        if id(p) not in skip:
            entries[pname] = p.data
    for bname, b in model.named_buffers():
        entries[bname] = b
    return entries


def export_frozen(path, model: Module) -> None:
    save_checkpoint(path, frozen_inference_entries(model))
