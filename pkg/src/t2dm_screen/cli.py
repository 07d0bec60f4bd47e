"""Command-line entry point: genfixture, build, train, eval, ablate, report.

Exit codes: 0 success, 1 usage error, 2 data/validation/config error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import ablation, metrics
from .dataset import BuildConfig, IntegrityError, build_dataset, load_dataset, persist_dataset, split_tensors
from .fixtures import FixtureConfig, generate_cohort
from .ingest import ConfigError, DataError
from .kernels import THREADS_ENV, WeightFileError, set_determinism
from .models import VariantMismatch
from .training import TrainConfig, TrainingDiverged, fit, image_transform, load_checkpoint, predict

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("t2dm_screen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
ABLATE_KINDS = {"noise": "noise", "missing": "missing_cxr", "no-pretrain": "no_pretrain"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".toml":
        return tomllib.loads(text)
    return json.loads(text)


# --- subcommands ---------------------------------------------------------------

def cmd_genfixture(args) -> int:
    cfg = FixtureConfig(
        n_patients=args.patients,
        prevalence=args.prevalence,
        ehr_signal=args.ehr_signal,
        cxr_signal=args.cxr_signal,
        ecg_signal=args.ecg_signal,
        edge_cases=not args.no_edge_cases,
        seed=args.seed,
    )
    expected = generate_cohort(cfg, args.out)
    print(json.dumps(expected["summary"], sort_keys=True))
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = BuildConfig(
        variant=args.variant,
        rate_min=args.rate,
        duration_h=args.duration,
        impute=args.impute,
        seed=args.seed,
        split_by_patient=args.split_by_patient,
        feature_map=args.feature_map,
    )
    ds, report = build_dataset(args.raw, cfg)
    out = persist_dataset(ds, args.out, report)
    _write_json(out / "config.json", {"command": "build", "raw": str(args.raw), "build_config": asdict(cfg)})
    print(json.dumps(report.counts, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = _load_config_file(args.config)
    model_cfg = overrides.pop("model_config", {})
    strategy = args.strategy or ("vilt" if args.model == "vilt" else "joint")
    make = TrainConfig.toy if args.preset == "toy" else TrainConfig.defaults
    cfg = make(args.model, strategy, seed=args.seed, threads=args.threads, model_config=model_cfg, **overrides)
    ds = load_dataset(args.dataset)
    echo = {"command": "train", "dataset_path": str(Path(args.dataset).resolve())}
    try:
        _, history = fit(ds, cfg, args.out, echo=echo)
    except TrainingDiverged as exc:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.csv").write_text(exc.history.to_csv())
        _write_json(out / "history.json", exc.history.to_dict())
        raise
    last = history.points[-1]
    print(f"trained {cfg.model}/{cfg.strategy}: {len(history.points)} validation points, "
          f"last val AUROC {last.val_auroc:.4f}, {history.wall_clock:.1f}s")
    return EXIT_OK


def _run_echo(run: Path) -> dict:
    path = run / "config.json"
    if not path.is_file():
        raise ConfigError(f"{run} is not a run directory (no config.json)")
    return json.loads(path.read_text())


def cmd_eval(args) -> int:
    run = Path(args.run)
    echo = _run_echo(run)
    set_determinism(args.seed, args.threads)
    model, _ = load_checkpoint(run / "checkpoint")
    ds = load_dataset(args.dataset or echo["dataset_path"])
    data = split_tensors(ds, args.split, image_transform(model))
    scores = predict(model, data)
    report = metrics.evaluate(scores, data.y.numpy(), args.bootstrap, args.seed)
    _write_json(run / "eval.json", {
        "split": args.split, "bootstrap": args.bootstrap, "seed": args.seed,
        "model": model.kind, "strategy": echo["train_config"]["strategy"], "variant": ds.variant,
        "report": metrics.report_to_dict(report),
    })
    (run / "scores.csv").write_text("id,label,score\n" + "".join(
        f"{i},{int(y)},{s!r}\n" for i, y, s in zip(data.ids, data.y.tolist(), scores.tolist())
    ))
    for name, m in report.items():
        print(f"{name}: {metrics.format_ci(m)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = Path(args.run)
    echo = _run_echo(run)
    set_determinism(args.seed, args.threads)
    model, _ = load_checkpoint(run / "checkpoint")
    ds = load_dataset(args.dataset or echo["dataset_path"])
    spec = ablation.AblationSpec(kind=ABLATE_KINDS[args.kind], seed=args.seed, bootstrap_iters=args.bootstrap)
    train_cfg = TrainConfig.from_dict(echo["train_config"]) if spec.kind == "no_pretrain" else None
    rep = ablation.run_ablation_suite(model, ds, spec, train_cfg)
    stem = f"ablation_{spec.kind}"
    (run / f"{stem}.csv").write_text(rep.to_csv())
    (run / f"{stem}.txt").write_text(rep.to_text())
    print(rep.to_text(), end="")
    return EXIT_OK


def _label(ev: dict) -> str:
    if ev["model"] == "vilt":
        return "ViLT"
    return "ResNet-LSTM_Early" if ev["strategy"] == "early" else "ResNet-LSTM_Joint"


VARIANT_LABEL = {"ecg": "E+C+G", "no-ecg": "E+C"}


def cmd_report(args) -> int:
    root = Path(args.runs)
    rows: dict[str, dict[str, dict]] = {}
    ablations = []
    for ev_path in sorted(root.glob("*/eval.json")):
        ev = json.loads(ev_path.read_text())
        rows.setdefault(_label(ev), {})[VARIANT_LABEL[ev["variant"]]] = metrics.report_from_dict(ev["report"])
        for txt in sorted(ev_path.parent.glob("ablation_*.txt")):
            ablations.append(f"## {ev_path.parent.name}: {txt.stem}\n\n{txt.read_text()}")
    if not rows:
        raise ConfigError(f"no evaluated runs (*/eval.json) under {root}")
    table = metrics.results_table(rows)
    (root / "results.txt").write_text(table)
    (root / "results.csv").write_text(metrics.results_csv(rows))
    if ablations:
        (root / "ablations.txt").write_text("\n".join(ablations))
    print(table, end="")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="t2dm-screen", description="Multimodal T2DM screening pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("genfixture", help="write a synthetic MIMIC-format cohort")
    g.add_argument("--patients", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--prevalence", type=float, default=0.31)
    g.add_argument("--ehr-signal", type=float, default=FixtureConfig.ehr_signal)
    g.add_argument("--cxr-signal", type=float, default=FixtureConfig.cxr_signal)
    g.add_argument("--ecg-signal", type=float, default=FixtureConfig.ecg_signal)
    g.add_argument("--no-edge-cases", action="store_true")
    g.set_defaults(func=cmd_genfixture)

    b = sub.add_parser("build", help="build a standardized, split dataset")
    b.add_argument("--raw", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--variant", choices=["ecg", "no-ecg"], default="ecg")
    b.add_argument("--rate", type=int, default=30, help="bin width in minutes")
    b.add_argument("--duration", type=int, default=48, help="window length in hours")
    b.add_argument("--impute", choices=["zero", "mean", "previous", "next"], default="zero")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--split-by-patient", action="store_true")
    b.add_argument("--feature-map", default=None)
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="train a fusion model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", choices=["vilt", "resnet-lstm"], required=True)
    t.add_argument("--strategy", choices=["vilt", "joint", "early"], default=None)
    t.add_argument("--preset", choices=["full", "toy"], default="full",
                   help="full-scale optimiser defaults, or the toy-scale settings")
    t.add_argument("--config", default=None, help="TOML/JSON overrides of the training config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=None, help=f"defaults to ${THREADS_ENV} or 1")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run on its test split")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", default=None)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--bootstrap", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite on a trained run")
    a.add_argument("--run", required=True)
    a.add_argument("--kind", choices=list(ABLATE_KINDS), required=True)
    a.add_argument("--dataset", default=None)
    a.add_argument("--bootstrap", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--threads", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="summarize evaluated runs under a directory")
    r.add_argument("--runs", required=True)
    r.set_defaults(func=cmd_report)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataError, IntegrityError, WeightFileError, VariantMismatch, ValueError,
            FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())
