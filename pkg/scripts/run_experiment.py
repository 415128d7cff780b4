#!/usr/bin/env python3
"""Run the full pipeline for a config and print the ground-truth/target WER table.

    python scripts/run_experiment.py --config configs/tiny.yaml
    python scripts/run_experiment.py --out runs/default --workers 4
"""
import argparse
import csv
import sys
from pathlib import Path

from asrdefense.cli import main as cli_main
from asrdefense.config import load_config


def print_table(results: Path) -> None:
    rows = list(csv.DictReader(results.open()))
    budgets = sorted({float(r["epsilon"]) for r in rows})
    attacks = sorted({int(r["iterations"]) for r in rows})
    systems = list(dict.fromkeys(r["system"] for r in rows))
    cell = {(r["system"], int(r["iterations"]), float(r["epsilon"])): r for r in rows}
    for it in attacks:
        name = "FGSM" if it == 1 else f"PGD-{it}"
        print(f"\n{name}: GT WER / TGT WER (%), benign WER in the last column")
        print(f"{'system':<30}" + "".join(f"{e:>16g}" for e in budgets) + f"{'benign':>9}")
        for s in systems:
            line = f"{s:<30}"
            for e in budgets:
                r = cell[(s, it, e)]
                line += f"{float(r['gt_wer']):>8.1f}/{float(r['tgt_wer'] or 'nan'):<7.1f}"
            line += f"{float(cell[(s, it, budgets[0])]['benign_wer']):>9.2f}"
            print(line)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--workers", type=int)
    args = parser.parse_args()
    argv = ["pipeline"]
    for flag in ("config", "out", "workers"):
        if getattr(args, flag) is not None:
            argv += [f"--{flag}", str(getattr(args, flag))]
    code = cli_main(argv)
    out = args.out or Path(load_config(args.config).out)
    results = out / "results" / "results.csv"
    if results.exists():
        print_table(results)
    return code


if __name__ == "__main__":
    sys.exit(main())
