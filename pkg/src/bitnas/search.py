"""Differentiable architecture search with the annealed diversity bonus.

The search objective subtracts an exponentially annealed entropy term from
the validation cross-entropy:

    loss(t) = CE - lambda * H(p) * exp(-t / tau)

with p the row-softmax of the architecture tables and t the fractional
epoch.  Early on this pulls p toward uniform so parameter-free ops cannot
crowd out the still-undertrained binary convolutions; the bonus decays to
nothing and the plain objective takes over.  Updates alternate per batch
pair: an architecture step on a validation batch (weights frozen,
first-order), then a weight step on a training batch (alphas frozen).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, backward
from .errors import ContractError, DivergenceError
from .layers import conv_weight_parameters
from .optim import LrSchedule, lr_at, sgd_step, zero_grads
from .space import (
    ArchParams,
    LayerType,
    SuperNet,
    build_supernet,
    is_parameterized,
)


@dataclass
class SearchConfig:
    lambda_: float = 1.0
    tau: float = 7.7
    epochs: int = 50
    batch: int = 64
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    cells: int = 8
    channels: int = 16
    seed: int = 0
    no_skip: bool = False
    no_zeroise: bool = False
    no_div: bool = False
    no_dilated: bool = False
    keep_sepconv: bool = False
    num_intermediate_nodes: int = 4

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if self.lambda_ < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lambda_}")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.no_div else self.lambda_


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    entropy: float
    div_coeff: float
    param_op_fraction: float
    grad_mag_sum: float
    argmax_ops: list[str] = field(default_factory=list)


@dataclass
class SearchLog:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "entropy",
                        "div_coeff", "param_op_fraction", "grad_mag_sum",
                        "argmax_ops"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}",
                            f"{r.entropy:.6f}", f"{r.div_coeff:.6f}",
                            f"{r.param_op_fraction:.6f}", f"{r.grad_mag_sum:.6f}",
                            ";".join(r.argmax_ops)])


def arch_entropy_value(params: ArchParams) -> float:
    """Plain-number entropy in float64: sum over every edge row of
    -sum p ln p."""
    total = 0.0
    for _, table in params.tables():
        z = table.data.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        total += float(-(p * np.log(p)).sum())
    return total


def arch_entropy(normal: Var, reduce: Var) -> Var:
    """Tape version of the entropy over both tables (gradients reach alpha)."""
    total = None
    for table in (normal, reduce):
        p = ad.softmax(table, axis=-1)
        h = ad.scale(ad.sum_all(ad.mul(p, ad.logv(p))), -1.0)
        total = h if total is None else ad.add(total, h)
    return total


def diversity_coefficient(lambda_: float, tau: float, t: float) -> float:
    """lambda * exp(-t / tau); strictly decreasing in t, equals lambda at 0."""
    if t < 0:
        raise ContractError(f"epoch index must be >= 0, got {t}")
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    return lambda_ * math.exp(-t / tau)


def search_loss(ce_loss: Var, normal: Var, reduce: Var,
                lambda_: float, tau: float, t: float) -> Var:
    """ce - coeff * H(p); the entropy term's gradient flows to alpha only."""
    coeff = diversity_coefficient(lambda_, tau, t)
    if coeff == 0.0:
        return ce_loss
    return ad.sub(ce_loss, ad.scale(arch_entropy(normal, reduce), coeff))


def argmax_ops(params: ArchParams) -> list[LayerType]:
    """Per-edge argmax over both tables, normal rows first."""
    out = []
    for _, table in params.tables():
        for row in table.data:
            out.append(params.ops[int(row.argmax())])
    return out


def parameterized_fraction(params: ArchParams) -> float:
    ops = argmax_ops(params)
    return sum(1 for op in ops if is_parameterized(op)) / len(ops)


def _conv_grad_magnitude(net: SuperNet) -> float:
    """Sum of |grad| over every convolution weight (see trainer counterpart)."""
    total = 0.0
    for p in conv_weight_parameters(net):
        if p.grad is not None:
            total += float(np.abs(p.grad).sum())
    return total


def run_search(config: SearchConfig, dataset) -> tuple[ArchParams, SearchLog, SuperNet]:
    """Alternating first-order search.  Deterministic for a fixed seed: the
    split, batch order and initialization all flow from config.seed.

    ``dataset`` must expose search_split(seed) -> (train_half, val_half),
    each with .num_examples and .batch(indices) -> (x, labels); see data.py.
    """
    train_half, val_half = dataset.search_split(config.seed)
    if train_half.num_examples == 0 or val_half.num_examples == 0:
        raise ContractError("empty dataset")

    net = build_supernet(
        cells=config.cells, channels=config.channels,
        no_skip=config.no_skip, no_zeroise=config.no_zeroise,
        no_dilated=config.no_dilated, keep_sepconv=config.keep_sepconv,
        num_classes=dataset.num_classes, in_channels=dataset.channels,
        num_intermediate_nodes=config.num_intermediate_nodes,
        seed=config.seed,
    )
    weights = net.parameters()
    alphas = net.arch_parameters()

    batches = min(train_half.num_examples, val_half.num_examples) // config.batch
    if batches == 0:
        raise ContractError(
            f"batch size {config.batch} exceeds the split size"
        )
    schedule = LrSchedule("cosine", config.lr, max(1, config.epochs * batches))
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0x5113FF1E])
    )

    log = SearchLog()
    lam = config.effective_lambda
    step = 0
    for epoch in range(config.epochs):
        train_order = shuffle_rng.permutation(train_half.num_examples)
        val_order = shuffle_rng.permutation(val_half.num_examples)
        train_losses, val_losses = [], []
        grad_mag = 0.0
        for b in range(batches):
            t_frac = epoch + b / batches
            lr = lr_at(schedule, step)

            # architecture step on a validation batch; weights frozen
            vx, vy = val_half.batch(val_order[b * config.batch:(b + 1) * config.batch])
            for p in weights:
                p.requires_grad = False
            logits = net.forward(Var(vx), training=True)
            ce = ad.softmax_cross_entropy(logits, vy)
            loss = search_loss(ce, net.arch.normal, net.arch.reduce,
                               lam, config.tau, t_frac)
            _check_finite(loss, epoch, b, "architecture")
            backward(loss)
            sgd_step(alphas, lr, config.momentum, weight_decay=0.0)
            zero_grads(alphas)
            val_losses.append(float(ce.data))

            # weight step on a training batch; alphas frozen
            tx, ty = train_half.batch(train_order[b * config.batch:(b + 1) * config.batch])
            for p in weights:
                p.requires_grad = True
            for a in alphas:
                a.requires_grad = False
            logits = net.forward(Var(tx), training=True)
            ce = ad.softmax_cross_entropy(logits, ty)
            _check_finite(ce, epoch, b, "weight")
            backward(ce)
            if b == batches - 1:
                grad_mag = _conv_grad_magnitude(net)
            sgd_step(weights, lr, config.momentum, config.weight_decay)
            zero_grads(weights)
            for a in alphas:
                a.requires_grad = True
            train_losses.append(float(ce.data))
            step += 1

        log.records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(train_losses)),
            val_loss=float(np.mean(val_losses)),
            entropy=arch_entropy_value(net.arch),
            div_coeff=diversity_coefficient(lam, config.tau, epoch),
            param_op_fraction=parameterized_fraction(net.arch),
            grad_mag_sum=grad_mag,
            argmax_ops=[op.value for op in argmax_ops(net.arch)],
        ))
    return net.arch, log, net


def _check_finite(loss: Var, epoch: int, batch: int, kind: str):
    if not np.isfinite(loss.data).all():
        raise DivergenceError(
            f"non-finite loss in {kind} step at epoch {epoch}, batch {batch}"
        )
