"""Scripted diagnostic studies at desk scale.

* quant_error_study: trains a small probe net (one layer type repeated three
  times, then three fully connected layers) in float or binary precision and
  reports accuracy -- the layer-type robustness comparison that justifies
  excluding separable convolutions from the space.
* run_ablation: search -> derive -> train -> evaluate under ablation flags
  (no skip / no zeroise / no diversity / no dilated / keep sepconv).
* skip_gradient_probe: trains twin networks (inter-cell skips on and off) on
  a fixed genotype, logging conv-gradient magnitudes per epoch.

Probe net shape (the layer-type study's fixture): each repeated block has 32
channels, the first with stride 2; fully connected sizes 512 -> 128 -> 10.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ContractError
from .genotype import Genotype, derive
from .layers import (
    BatchNorm2d,
    BinConv2d,
    BinSepConv2d,
    Conv2d,
    Linear,
    Module,
)
from .netbuild import NetworkSpec, build_network
from .search import SearchConfig, run_search
from .seeding import rng_for
from .trainer import EvalResult, TrainConfig, evaluate, train

PROBE_LAYERS = {
    "conv3": (3, 1, False),
    "conv5": (5, 1, False),
    "dil3": (3, 2, False),
    "dil5": (5, 2, False),
    "sep3": (3, 1, True),
    "sep5": (5, 1, True),
}
PROBE_CHANNELS = 32
PROBE_FC = (512, 128)


@dataclass
class StudySpec:
    subset: int = 10000
    test_subset: int = 2000
    epochs: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    batch: int = 64
    lr: float = 0.05
    search: SearchConfig = field(default_factory=SearchConfig)
    train_cells: int = 5
    train_channels: int = 8
    train_epochs: int = 20
    gamma: float = 1.0

    def __post_init__(self):
        if not self.seeds:
            raise ContractError("at least one seed required")


class _FloatSep(Module):
    """Float separable conv: depthwise then pointwise, BN + ReLU after."""

    def __init__(self, cin, cout, k, stride, rng):
        from .autodiff import Parameter
        from .layers import he_init

        self.k, self.stride, self.padding = k, stride, k // 2
        self.w_depth = Parameter(he_init(rng, (cin, k, k), k * k))
        self.point = Conv2d(cin, cout, 1, padding=0, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, training):
        h = ad.depthwise_conv2d(x, self.w_depth, self.stride, 1, self.padding)
        h = self.point.forward(h, training)
        return ad.relu(self.bn.forward(h, training))

    def conv_weights(self):
        return [self.w_depth]


class _FloatConvBlock(Module):
    def __init__(self, cin, cout, k, dilation, stride, rng):
        self.conv = Conv2d(cin, cout, k, stride=stride, dilation=dilation, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, training):
        return ad.relu(self.bn.forward(self.conv.forward(x, training), training))


class ProbeNet(Module):
    """Three repeated blocks of one layer type, then three FC layers."""

    def __init__(self, layer: str, precision: str, in_channels: int = 3,
                 input_hw: int = 32, num_classes: int = 10, seed: int = 0):
        if layer not in PROBE_LAYERS:
            raise ContractError(
                f"unknown probe layer {layer!r}; choose from {sorted(PROBE_LAYERS)}"
            )
        if precision not in ("float", "binary"):
            raise ContractError(f"precision must be float or binary, not {precision!r}")
        k, dil, sep = PROBE_LAYERS[layer]
        rng = rng_for(seed, f"probe_{layer}_{precision}")
        blocks = []
        cin = in_channels
        for i in range(3):
            stride = 2 if i == 0 else 1
            if precision == "float":
                if sep:
                    blocks.append(_FloatSep(cin, PROBE_CHANNELS, k, stride, rng))
                else:
                    blocks.append(_FloatConvBlock(cin, PROBE_CHANNELS, k, dil,
                                                  stride, rng))
            else:
                if sep:
                    blocks.append(BinSepConv2d(cin, PROBE_CHANNELS, k,
                                               stride=stride, dilation=dil, rng=rng))
                else:
                    blocks.append(BinConv2d(cin, PROBE_CHANNELS, k, stride=stride,
                                            dilation=dil, rng=rng))
            cin = PROBE_CHANNELS
        self.blocks = blocks
        flat = PROBE_CHANNELS * (input_hw // 2) ** 2
        self.fc = [Linear(flat, PROBE_FC[0], rng=rng),
                   Linear(PROBE_FC[0], PROBE_FC[1], rng=rng),
                   Linear(PROBE_FC[1], num_classes, rng=rng)]

    def forward(self, x: Var, training: bool) -> Var:
        h = x
        for b in self.blocks:
            h = b.forward(h, training)
        h = ad.flatten(h)
        h = ad.relu(self.fc[0].forward(h, training))
        h = ad.relu(self.fc[1].forward(h, training))
        return self.fc[2].forward(h, training)


def quant_error_study(layer: str, precision: str, spec: StudySpec,
                      train_data, test_data, seed: int = 0) -> EvalResult:
    """Train the probe net for one (layer type, precision) pair and report
    its test accuracy."""
    subset = train_data.take(spec.subset)
    net = ProbeNet(layer, precision, in_channels=train_data.channels, seed=seed)
    cfg = TrainConfig(epochs=spec.epochs, batch=spec.batch, lr=spec.lr,
                      weight_decay=1e-4, schedule="cosine", augment=False,
                      seed=seed)
    train(net, subset, cfg)
    return evaluate(net, test_data.take(spec.test_subset))


def quant_error_table(spec: StudySpec, train_data, test_data,
                      layers=("conv3", "sep3"),
                      precisions=("float", "binary")) -> dict:
    """mean top-1 per (layer, precision) over spec.seeds."""
    table = {}
    for layer in layers:
        for precision in precisions:
            accs = [
                quant_error_study(layer, precision, spec, train_data, test_data,
                                  seed=s).top1
                for s in spec.seeds
            ]
            table[(layer, precision)] = float(np.mean(accs))
    return table


ABLATION_FLAGS = {
    "full": {},
    "no_skip": {"no_skip": True},
    "no_zeroise": {"no_zeroise": True},
    "no_div": {"no_div": True},
    "no_dilated": {"no_dilated": True},
    "keep_sepconv": {"keep_sepconv": True},
}


def run_ablation(variants, spec: StudySpec, train_data, test_data) -> dict:
    """search -> derive -> train -> evaluate per variant and seed; returns
    {variant: {"top1": mean, "genotype": last genotype}}."""
    results = {}
    for variant in variants:
        if variant not in ABLATION_FLAGS:
            raise ContractError(f"unknown ablation variant {variant!r}")
        flags = ABLATION_FLAGS[variant]
        accs, genotype = [], None
        for seed in spec.seeds:
            cfg = replace(spec.search, seed=seed, **flags)
            params, _, _ = run_search(cfg, train_data.take(spec.subset))
            genotype = derive(params, spec.gamma, seed=seed)
            net_spec = NetworkSpec(
                genotype, spec.train_cells, spec.train_channels,
                num_classes=train_data.num_classes,
                input_shape=(train_data.channels, 32, 32),
                inter_cell_skip=not cfg.no_skip,
            )
            model = build_network(net_spec, seed=seed)
            tcfg = TrainConfig(epochs=spec.train_epochs, batch=spec.batch,
                               lr=spec.lr, weight_decay=3e-6, schedule="one_cycle",
                               augment=False, seed=seed)
            train(model, train_data.take(spec.subset), tcfg)
            accs.append(evaluate(model, test_data.take(spec.test_subset)).top1)
        results[variant] = {"top1": float(np.mean(accs)), "genotype": genotype}
    return results


def skip_gradient_probe(genotype: Genotype, cells: int, channels: int,
                        spec: StudySpec, train_data, with_skip: bool,
                        seed: int = 0):
    """Train one twin (skips on or off) with per-epoch conv-gradient logging;
    returns (metrics rows, [(epoch, grad_mag_sum)])."""
    net_spec = NetworkSpec(genotype, cells, channels,
                           num_classes=train_data.num_classes,
                           input_shape=(train_data.channels, 32, 32),
                           inter_cell_skip=with_skip)
    model = build_network(net_spec, seed=seed)
    cfg = TrainConfig(epochs=spec.train_epochs, batch=spec.batch, lr=spec.lr,
                      weight_decay=3e-6, schedule="one_cycle", augment=False,
                      seed=seed, grad_log=True)
    rows, grads = train(model, train_data.take(spec.subset), cfg)
    return model, rows, grads


def write_grad_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "grad_mag_sum"])
        for epoch, mag in rows:
            w.writerow([epoch, f"{mag:.6f}"])
