#!/usr/bin/env python3
"""Gradient-magnitude probe: trains skip/no-skip twins of a fixed genotype
and writes paired per-epoch conv-gradient CSVs for plotting."""

import subprocess
import sys

def main():
    subprocess.run([
        "python3", "-m", "bitnas.cli", "study", "skip-probe",
        "--data", "runs/study_data", "--dataset", "synthetic",
        "--synthetic-train", "4000", "--synthetic-test", "1000",
        "--subset", "2000", "--epochs", "30", "--cells", "6",
        "--channels", "8", "--seeds", "0",
    ], check=True)

if __name__ == "__main__":
    sys.exit(main())
