"""Write the bundled synthetic datasets as CSV files.

Usage: python3 scripts/make_datasets.py [OUTDIR]
"""
import sys
from pathlib import Path

from ssgam.datasets import additive_benchmark, diabetes_like


def main(outdir="data"):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    additive_benchmark(n=200, snr=3, seed=0).to_csv(out / "simulation.csv", index=False,
                                                     float_format="%.17g")
    full = diabetes_like(n=624, seed=0)
    full.iloc[:524].to_csv(out / "diabetes_train.csv", index=False, float_format="%.17g")
    full.iloc[524:].to_csv(out / "diabetes_test.csv", index=False, float_format="%.17g")
    print(f"wrote simulation.csv, diabetes_train.csv, diabetes_test.csv to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
