"""Command-line surface tying the pipeline together.

Subcommands: search, derive, train, eval, flops, study, export.  Every
artifact embeds the effective config hash; a run is reproducible from its
seed alone.  Exit codes: 0 success, 2 usage error, 1 runtime failure with a
one-line ``error: ...`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import apply_file_values, config_hash, parse_config_file
from .data import load_cifar10, load_mnist, write_synthetic_cifar10
from .errors import ContractError, DivergenceError, FormatError, GeometryError
from .genotype import (
    Genotype,
    all_zeroise_genotype,
    derive,
    deserialize,
    op_proportion,
    serialize,
)
from .netbuild import (
    NetworkSpec,
    build_network,
    count_flops,
    inference_speedup,
    memory_savings,
)
from .search import SearchConfig, run_search
from .space import ArchParams, CellTemplate, LayerType, op_set
from .studies import (
    StudySpec,
    quant_error_table,
    run_ablation,
    skip_gradient_probe,
    write_grad_csv,
)
from .trainer import (
    TrainConfig,
    evaluate,
    export_frozen,
    train,
    write_metrics_csv,
)


class UsageError(Exception):
    pass


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--dataset", default="cifar10",
                   choices=["cifar10", "mnist", "synthetic"])
    p.add_argument("--synthetic-train", type=int, default=6000)
    p.add_argument("--synthetic-test", type=int, default=1500)
    p.add_argument("--subset", type=int, default=0,
                   help="use only the first N training examples (0 = all)")


def _add_flag_args(p):
    p.add_argument("--no-skip", action="store_true", default=None)
    p.add_argument("--no-zeroise", action="store_true", default=None)
    p.add_argument("--no-div", action="store_true", default=None)
    p.add_argument("--no-dilated", action="store_true", default=None)
    p.add_argument("--keep-sepconv", action="store_true", default=None)


def _load_data(args, seed: int):
    if args.dataset == "synthetic":
        directory = Path(args.data)
        if not (directory / "test_batch.bin").exists():
            write_synthetic_cifar10(directory, args.synthetic_train,
                                    args.synthetic_test, seed=seed)
        sets = load_cifar10(directory)
    elif args.dataset == "cifar10":
        sets = load_cifar10(args.data)
    else:
        sets = load_mnist(args.data)
    if args.subset:
        sets = {"train": sets["train"].take(args.subset), "test": sets["test"]}
    return sets


def _set_if(args, cfg, mapping):
    for arg_name, field_name in mapping.items():
        val = getattr(args, arg_name)
        if val is not None:
            setattr(cfg, field_name, val)


# ---------------------------------------------------------------------------
# search


def cmd_search(args) -> int:
    cfg = SearchConfig()
    if args.config:
        apply_file_values(cfg, parse_config_file(args.config), set())
    _set_if(args, cfg, {
        "seed": "seed", "epochs": "epochs", "batch": "batch", "lr": "lr",
        "cells": "cells", "channels": "channels", "lambda_": "lambda_",
        "tau": "tau", "weight_decay": "weight_decay",
        "no_skip": "no_skip", "no_zeroise": "no_zeroise", "no_div": "no_div",
        "no_dilated": "no_dilated", "keep_sepconv": "keep_sepconv",
    })
    chash = config_hash(cfg)
    sets = _load_data(args, cfg.seed)
    params, log, _net = run_search(cfg, sets["train"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = {
        "arch.normal": params.normal.data,
        "arch.reduce": params.reduce.data,
        "meta.seed": np.array([cfg.seed], np.float32),
        "meta.ops": ";".join(op.value for op in params.ops).encode(),
        "meta.config_hash": chash.encode(),
    }
    save_checkpoint(out / "arch_params.bnck", entries)
    log.write_csv(out / "search_log.csv")
    print(f"search done: {out / 'arch_params.bnck'} (config {chash})")
    return 0


# ---------------------------------------------------------------------------
# derive


def _load_arch_params(path) -> tuple[ArchParams, int, str]:
    entries = load_checkpoint(path)
    for need in ("arch.normal", "arch.reduce", "meta.ops"):
        if need not in entries:
            raise FormatError(f"{path}: missing entry {need}")
    ops = tuple(LayerType(v) for v in entries["meta.ops"].decode().split(";"))
    from .autodiff import Parameter

    params = ArchParams(Parameter(entries["arch.normal"]),
                        Parameter(entries["arch.reduce"]), ops)
    seed = int(entries.get("meta.seed", np.zeros(1))[0])
    chash = entries.get("meta.config_hash", b"").decode()
    return params, seed, chash


def cmd_derive(args) -> int:
    if args.gamma <= 0:
        raise UsageError(f"--gamma must be > 0, got {args.gamma}")
    params, seed, chash = _load_arch_params(args.arch_params)
    nodes = _nodes_for_edges(params.normal.data.shape[0])
    genotype = derive(params, args.gamma, CellTemplate(nodes),
                      seed=seed, config_hash=chash)
    Path(args.out).write_text(serialize(genotype) + "\n")
    print(f"derived genotype -> {args.out}")
    return 0


def _nodes_for_edges(edge_count: int) -> int:
    m, total = 0, 0
    while total < edge_count:
        total += 2 + m
        m += 1
    if total != edge_count:
        raise FormatError(f"impossible edge count {edge_count}")
    return m


def _read_genotype(path, keep_sepconv=False, no_zeroise=False,
                   no_dilated=False) -> Genotype:
    allowed = op_set(no_zeroise=no_zeroise, no_dilated=no_dilated,
                     keep_sepconv=keep_sepconv)
    return deserialize(Path(path).read_text(), allowed_ops=allowed)


# ---------------------------------------------------------------------------
# train / eval / export


def cmd_train(args) -> int:
    cfg = TrainConfig()
    if args.config:
        apply_file_values(cfg, parse_config_file(args.config), set())
    _set_if(args, cfg, {
        "seed": "seed", "epochs": "epochs", "batch": "batch", "lr": "lr",
        "weight_decay": "weight_decay", "grad_log": "grad_log",
    })
    if args.no_augment:
        cfg.augment = False
    try:
        genotype = _read_genotype(args.genotype,
                                  keep_sepconv=bool(args.keep_sepconv),
                                  no_zeroise=bool(args.no_zeroise),
                                  no_dilated=bool(args.no_dilated))
    except FormatError as exc:
        if args.no_zeroise or args.no_dilated:
            raise UsageError(str(exc)) from exc
        raise
    chash = config_hash(cfg)
    sets = _load_data(args, cfg.seed)
    data = sets["train"]
    spec = NetworkSpec(genotype, args.cells, args.channels,
                       num_classes=data.num_classes,
                       input_shape=(data.channels, 32, 32),
                       inter_cell_skip=not bool(args.no_skip))
    model = build_network(spec, seed=cfg.seed)
    rows, grads = train(model, data, cfg, eval_dataset=sets["test"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = dict(model.state_entries())
    entries["meta.genotype"] = serialize(genotype).encode()
    entries["meta.spec"] = json.dumps({
        "cells": args.cells, "channels": args.channels,
        "num_classes": data.num_classes, "in_channels": data.channels,
        "inter_cell_skip": not bool(args.no_skip),
    }).encode()
    entries["meta.config_hash"] = chash.encode()
    save_checkpoint(out / "model.bnck", entries)
    write_metrics_csv(out / "metrics.csv", rows)
    if cfg.grad_log:
        write_grad_csv(out / "grad_magnitudes.csv", grads)
    final = [r for r in rows if r.split == "test"]
    if final:
        print(f"final test top1 {final[-1].top1:.2f}% top5 {final[-1].top5:.2f}% "
              f"(config {chash})")
    return 0


def _rebuild_from_checkpoint(path):
    entries = load_checkpoint(path)
    if "meta.genotype" not in entries or "meta.spec" not in entries:
        raise FormatError(f"{path}: not a model checkpoint (missing meta)")
    meta = json.loads(entries["meta.spec"].decode())
    genotype = deserialize(entries["meta.genotype"].decode(),
                           allowed_ops=tuple(LayerType))
    spec = NetworkSpec(genotype, meta["cells"], meta["channels"],
                       num_classes=meta["num_classes"],
                       input_shape=(meta["in_channels"], 32, 32),
                       inter_cell_skip=meta["inter_cell_skip"])
    model = build_network(spec)
    weights = {k: v for k, v in entries.items() if not k.startswith("meta.")}
    model.load_state(weights)
    return model, spec


def cmd_eval(args) -> int:
    model, _spec = _rebuild_from_checkpoint(args.checkpoint)
    sets = _load_data(args, seed=0)
    res = evaluate(model, sets[args.split])
    print(f"top1 {res.top1:.2f}%  top5 {res.top5:.2f}%  loss {res.loss:.4f}")
    return 0


def cmd_export(args) -> int:
    model, _spec = _rebuild_from_checkpoint(args.checkpoint)
    export_frozen(args.out, model)
    print(f"frozen inference checkpoint -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# flops


def cmd_flops(args) -> int:
    genotype = _read_genotype(args.genotype, keep_sepconv=True)
    spec = NetworkSpec(genotype, args.cells, args.channels,
                       input_shape=tuple(args.input_shape),
                       inter_cell_skip=not bool(args.no_skip))
    report = count_flops(spec)
    print(report.as_text())
    print(f"memory savings vs float twin:  {memory_savings(spec):.2f}x")
    print(f"inference speed-up (1/64):     {inference_speedup(spec):.2f}x")
    if args.csv:
        Path(args.csv).write_text(report.as_csv())
        print(f"breakdown -> {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# studies


def cmd_study(args) -> int:
    sets = _load_data(args, seed=args.seed or 0)
    spec = StudySpec(
        subset=args.subset or 10000,
        test_subset=args.test_subset,
        epochs=args.epochs if args.epochs is not None else 20,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        batch=args.batch or 64,
        search=SearchConfig(cells=4, channels=8, epochs=10, batch=args.batch or 64),
        train_cells=args.cells or 5,
        train_channels=args.channels or 8,
        train_epochs=args.epochs if args.epochs is not None else 20,
    )
    out = Path(args.out) if args.out else (
        Path("results") / args.kind / time.strftime("%Y%m%d-%H%M%S")
    )
    out.mkdir(parents=True, exist_ok=True)
    train_data, test_data = sets["train"], sets["test"]

    if args.kind == "quant-error":
        layers = args.layers.split(",")
        table = quant_error_table(spec, train_data, test_data, layers=layers)
        lines = ["layer,precision,top1"]
        for (layer, precision), acc in sorted(table.items()):
            lines.append(f"{layer},{precision},{acc:.2f}")
        (out / "quant_error.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    elif args.kind == "ablation":
        variants = args.variants.split(",")
        results = run_ablation(variants, spec, train_data, test_data)
        lines = ["variant,top1"]
        for v in variants:
            lines.append(f"{v},{results[v]['top1']:.2f}")
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    elif args.kind == "sepconv":
        results = run_ablation(["full", "keep_sepconv"], spec,
                               train_data, test_data)
        keep = results["keep_sepconv"]["genotype"]
        prop = (op_proportion(keep, LayerType.SEP_CONV_3x3)
                + op_proportion(keep, LayerType.SEP_CONV_5x5))
        lines = ["variant,top1,sepconv_proportion",
                 f"full,{results['full']['top1']:.2f},0.0000",
                 f"keep_sepconv,{results['keep_sepconv']['top1']:.2f},{prop:.4f}"]
        (out / "sepconv.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    else:  # skip-probe
        genotype = (_read_genotype(args.genotype) if args.genotype
                    else all_zeroise_genotype())
        for with_skip in (True, False):
            tag = "with_skip" if with_skip else "no_skip"
            _, rows, grads = skip_gradient_probe(
                genotype, args.cells or 5, args.channels or 8, spec,
                train_data, with_skip, seed=spec.seeds[0])
            write_grad_csv(out / f"grads_{tag}.csv", grads)
            write_metrics_csv(out / f"metrics_{tag}.csv", rows)
        print(f"skip probe CSVs -> {out}")
    print(f"study artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bitnas",
        description="search, derive, train and analyze 1-bit convnets",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the differentiable search")
    _add_data_args(p)
    _add_flag_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--cells", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="discretize searched parameters")
    p.add_argument("--arch-params", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train", help="train a genotype network")
    _add_data_args(p)
    _add_flag_args(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--cells", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--grad-log", action="store_true", default=None)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="complexity report for a genotype")
    p.add_argument("--genotype", required=True)
    p.add_argument("--cells", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--input-shape", type=int, nargs=3, default=(3, 32, 32))
    p.add_argument("--no-skip", action="store_true", default=None)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("study", help="run a diagnostic study")
    p.add_argument("kind", choices=["quant-error", "ablation", "sepconv",
                                    "skip-probe"])
    _add_data_args(p)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--cells", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--test-subset", type=int, default=2000)
    p.add_argument("--layers", default="conv3,sep3")
    p.add_argument("--variants", default="full,no_skip,no_zeroise,no_div")
    p.add_argument("--genotype")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("export", help="write a frozen inference checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FormatError, GeometryError, DivergenceError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
