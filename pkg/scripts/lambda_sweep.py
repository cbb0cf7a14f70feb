"""Run the ten-value lambda sweep as child runs and print the cost curve.

    FLOWCTL_THREADS=4 python scripts/lambda_sweep.py --checkpoint runs/toy/field.fctl
"""
import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

from flowctl.cli import main as flowctl
from flowctl.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy_sweep.toml")
    ap.add_argument("--checkpoint", default="runs/toy/field.fctl")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = RunConfig.load(args.config)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not Path(args.checkpoint).is_file():
        sys.exit(f"missing base checkpoint {args.checkpoint}; run `flowctl train --config configs/toy.toml` first")
    shutil.copy(args.checkpoint, out / "field.fctl")
    rc = flowctl(["sample", "--config", args.config, "--out", str(out)])
    if rc:
        sys.exit(rc)
    rc = flowctl(["sample", "--config", args.config, "--out", str(out / "base"), "--lambda", "0",
                  "--checkpoint-in", str(out / "field.fctl")])
    if rc:
        sys.exit(rc)
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'lambda':>8} {'mean focus cost':>16}")
    base = json.loads((out / "base" / "manifest.json").read_text())["mean_endpoint_cost"]
    print(f"{0:>8g} {base:>16.4f}  (base)")
    for r in rows:
        print(f"{float(r['lambda']):>8g} {float(r['mean_endpoint_cost']):>16.4f}")


if __name__ == "__main__":
    main()
