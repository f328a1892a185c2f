"""Command-line entry point: ``ted <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .dataset import write_csv_triples
from .experiments import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    RunRecord,
    evaluate_artifacts,
    generate_synthetic_triples,
    generate_ttt,
    report,
    run_experiment,
)
from .knn import KnnConfig
from .tictactoe import MODES, TIE_BREAKS

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it to our usage code instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if cfg.source.get("kind") == "csv":
        # pin data paths relative to the config file so saved runs can be re-evaluated from anywhere
        base = os.path.dirname(os.path.abspath(args.config))
        source = dict(cfg.source)
        for key in ("path", "schema"):
            if isinstance(source.get(key), str):
                source[key] = os.path.normpath(os.path.join(base, source[key]))
        cfg = cfg.replace(source=source)
    return cfg


def _out_dir(args, cfg) -> str:
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir in the config")
    return out


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cmd_generate_ttt(args):
    _ensure_parent(args.out)
    path = generate_ttt(args.out, args.mode, args.tie_break)
    print(f"wrote {path}")


def cmd_generate_synth(args):
    ds = generate_synthetic_triples(
        n=args.n,
        n_features=args.features,
        e_dim=args.e_dim,
        n_clusters=args.clusters,
        noise=args.noise,
        seed=args.seed,
    )
    _ensure_parent(args.out)
    write_csv_triples(ds, args.out, label_names=["y"], explanation_names=list(ds.e_space.names))
    print(f"wrote {args.out} ({len(ds)} rows)")


def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    record = run_experiment(cfg, out, evaluate=False)
    print(f"trained {record.method}; artifacts in {out}: {', '.join(sorted(record.artifacts.values()))}")


def cmd_evaluate(args):
    try:
        sigma = KnnConfig.parse_sigma(args.sigma) if args.sigma is not None else None
        for k in args.k or ():
            KnnConfig(k, "adaptive" if sigma is None else sigma)
    except ValueError as exc:
        raise ConfigError(f"bad --k/--sigma: {exc}") from None
    record = evaluate_artifacts(args.run_dir, knn_k=args.k, sigma=sigma, base_dir=args.base_dir)
    sys.stdout.write(report(record, args.format))


def cmd_run(args):
    cfg = _load_config(args)
    out = args.out or cfg.output_dir
    record = run_experiment(cfg, out)
    sys.stdout.write(report(record, args.format))


def cmd_report(args):
    path = args.record
    if os.path.isdir(path):
        # report.json holds the latest scores (written by run and evaluate); run.json may predate them
        scored = os.path.join(path, "report.json")
        path = scored if os.path.exists(scored) else os.path.join(path, "run.json")
    with open(path, encoding="utf-8") as fh:
        record = RunRecord.from_dict(json.load(fh))
    sys.stdout.write(report(record, args.format))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ted", description="Train and evaluate models on (features, label, explanation) triples.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-ttt", help="write the tic-tac-toe triple CSV and schema")
    g.add_argument("--out", required=True, help="CSV path; the schema goes next to it")
    g.add_argument("--mode", choices=MODES, default="move-and-explanation")
    g.add_argument("--tie-break", choices=TIE_BREAKS, default="preference")
    g.set_defaults(func=cmd_generate_ttt)

    g = sub.add_parser("generate-synth", help="write a synthetic triple CSV with Y linear in E")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--features", type=int, default=20)
    g.add_argument("--e-dim", type=int, default=5)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate_synth)

    for name, func, helptext in (
        ("train", cmd_train, "train the configured method and persist its artifacts"),
        ("run", cmd_run, "train, evaluate and report in one go"),
    ):
        g = sub.add_parser(name, help=helptext)
        g.add_argument("--config", required=True, help="experiment config (JSON)")
        g.add_argument("--out", help="output directory (overrides output_dir)")
        g.add_argument("--seed", type=int, help="override the config seed")
        if name == "run":
            g.add_argument("--format", choices=("text", "json"), default="text")
        g.set_defaults(func=func)

    g = sub.add_parser("evaluate", help="score the artifacts of a trained run directory")
    g.add_argument("run_dir")
    g.add_argument("--k", type=int, nargs="+", help="kNN sweep to evaluate (default: from config)")
    g.add_argument("--sigma", help="kernel bandwidth or 'adaptive'")
    g.add_argument("--base-dir", help="directory that relative data paths resolve against")
    g.add_argument("--format", choices=("text", "json"), default="text")
    g.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("report", help="render a saved run as a table or JSON")
    g.add_argument("record", help="report.json, run.json or a run directory")
    g.add_argument("--format", choices=("text", "json"), default="text")
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as exc:
        if exc.stage == "config":
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
