#!/usr/bin/env python3
"""End-to-end demo on the synthetic offline dataset: search a cell, derive
the genotype, train the network, evaluate, report complexity, and export a
frozen inference checkpoint.  Everything lands under runs/demo/."""

import subprocess
import sys

BASE = ["python3", "-m", "bitnas.cli"]
DATA = ["--data", "runs/demo/data", "--dataset", "synthetic",
        "--synthetic-train", "4000", "--synthetic-test", "1000"]


def run(*args):
    cmd = BASE + list(args)
    print("+", " ".join(cmd))
    subprocess.run(cmd, check=True)


def main():
    run("search", *DATA, "--out", "runs/demo/search", "--seed", "7",
        "--cells", "4", "--channels", "8", "--epochs", "4", "--batch", "32")
    run("derive", "--arch-params", "runs/demo/search/arch_params.bnck",
        "--gamma", "1.0", "--out", "runs/demo/genotype.json")
    run("train", *DATA, "--genotype", "runs/demo/genotype.json",
        "--cells", "5", "--channels", "8", "--epochs", "10", "--batch", "64",
        "--seed", "7", "--out", "runs/demo/train")
    run("eval", *DATA, "--checkpoint", "runs/demo/train/model.bnck")
    run("flops", "--genotype", "runs/demo/genotype.json",
        "--cells", "8", "--channels", "16")
    run("export", "--checkpoint", "runs/demo/train/model.bnck",
        "--out", "runs/demo/frozen.bnck")


if __name__ == "__main__":
    sys.exit(main())
