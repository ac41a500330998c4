#!/usr/bin/env python3
"""Search-and-train ablations: full vs no-skip / no-zeroise / no-diversity /
no-dilated, each as search -> derive -> train -> evaluate."""

import subprocess
import sys

def main():
    subprocess.run([
        "python3", "-m", "bitnas.cli", "study", "ablation",
        "--data", "runs/study_data", "--dataset", "synthetic",
        "--synthetic-train", "6000", "--synthetic-test", "1500",
        "--subset", "5000", "--epochs", "15", "--seeds", "0,1,2",
        "--variants", "full,no_skip,no_zeroise,no_div",
    ], check=True)

if __name__ == "__main__":
    sys.exit(main())
