"""Full experiment grid: build both dataset variants, train the three fusion
setups on each, evaluate them, run the ablations and write the summary table.

    python3 scripts/run_experiment.py --out runs/ --patients 1000 --preset toy
    python3 scripts/run_experiment.py --raw /data/mimic --out runs/ --preset full
"""

import argparse
import sys
from pathlib import Path

from t2dm_screen.cli import EXIT_OK, run_cli

SETUPS = (("vilt", "vilt"), ("resnet-lstm", "joint"), ("resnet-lstm", "early"))


def call(*argv) -> None:
    argv = [str(a) for a in argv]
    print("+ t2dm-screen", " ".join(argv), flush=True)
    code = run_cli(argv)
    if code != EXIT_OK:
        sys.exit(code)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--raw", default=None, help="MIMIC-format directory; a synthetic cohort is generated if omitted")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--preset", choices=["full", "toy"], default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablations", nargs="*", default=["noise", "missing"], choices=["noise", "missing", "no-pretrain"])
    p.add_argument("--bootstrap", type=int, default=1000)
    args = p.parse_args()

    out = Path(args.out)
    raw = Path(args.raw) if args.raw else out / "raw"
    if args.raw is None:
        call("genfixture", "--patients", args.patients, "--seed", args.seed, "--out", raw)
    for variant in ("ecg", "no-ecg"):
        ds = out / f"dataset_{variant}"
        call("build", "--raw", raw, "--out", ds, "--variant", variant, "--seed", args.seed)
        for model, strategy in SETUPS:
            run = out / "runs" / f"{model}_{strategy}_{variant}"
            call("train", "--dataset", ds, "--model", model, "--strategy", strategy, "--preset", args.preset,
                 "--seed", args.seed, "--out", run)
            call("eval", "--run", run, "--bootstrap", args.bootstrap, "--seed", args.seed)
            for kind in args.ablations:
                call("ablate", "--run", run, "--kind", kind, "--bootstrap", args.bootstrap, "--seed", args.seed)
    call("report", "--runs", out / "runs")


if __name__ == "__main__":
    main()
