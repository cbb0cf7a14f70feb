"""End-to-end toy experiment through the command-line front end.

train -> base sample -> test-time controlled sample -> fine-tune -> controlled
sample with the learned control -> eval against the base run.

    python scripts/run_pipeline.py --config configs/toy.toml --out runs/pipeline
"""
import argparse
import sys
from pathlib import Path

from flowctl.cli import main as flowctl


def step(*argv):
    print("+ flowctl", " ".join(argv), flush=True)
    rc = flowctl(list(argv))
    if rc:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--out", default="runs/pipeline")
    args = ap.parse_args()
    out = Path(args.out)
    cfg = ["--config", args.config]
    field = str(out / "train" / "field.fctl")

    step("train", *cfg, "--out", str(out / "train"))
    step("sample", *cfg, "--checkpoint-in", field, "--lambda", "0", "--out", str(out / "base"))
    step("sample", *cfg, "--checkpoint-in", field, "--out", str(out / "test_time"))
    step("finetune", *cfg, "--checkpoint-in", field, "--out", str(out / "finetune"))
    step("sample", *cfg, "--checkpoint-in", field, "--control", str(out / "finetune" / "control.fctl"),
         "--out", str(out / "adjoint_matching"))
    step("eval", "--base", str(out / "base"),
         "--candidate", str(out / "test_time"), str(out / "adjoint_matching"), "--out", str(out / "eval"))


if __name__ == "__main__":
    main()
