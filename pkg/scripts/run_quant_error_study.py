#!/usr/bin/env python3
"""Layer-type robustness study at desk scale: each layer type repeated three
times plus three FC layers, trained in float and binary precision."""

import subprocess
import sys

def main():
    subprocess.run([
        "python3", "-m", "bitnas.cli", "study", "quant-error",
        "--data", "runs/study_data", "--dataset", "synthetic",
        "--synthetic-train", "10000", "--synthetic-test", "2000",
        "--subset", "10000", "--epochs", "20", "--seeds", "0,1,2",
        "--layers", "conv3,conv5,dil3,dil5,sep3,sep5",
    ], check=True)

if __name__ == "__main__":
    sys.exit(main())
