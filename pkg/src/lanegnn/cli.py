"""Command-line entry point: ``lanegnn {train,eval,ablate,replay}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(non-finite loss, replay mismatch).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, config_hash, load_config
from .errors import ConfigError, InvariantError, ScenarioError, TrainingAborted, UsageError
from .plots import plot_comparison, plot_training_curves
from .replay import TrajectoryParseError, replay_file
from .sim import write_trajectory_csv
from .tensor import load_checkpoint
from .training import (
    EVAL_COLUMNS,
    ablation_rows,
    evaluate,
    format_table,
    load_agent,
    train,
    write_comparison_csv,
)

log = logging.getLogger("lanegnn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lanegnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, type=Path, help="experiment YAML")
        sp.add_argument("--seed", type=int, help="override the seed")
        if out:
            sp.add_argument("--out", type=Path, help="output directory")

    t = sub.add_parser("train", help="train one agent")
    common(t)
    t.add_argument("--network", choices=("gnn", "flat"), help="override network.kind")

    e = sub.add_parser("eval", help="evaluate a checkpoint with mean actions")
    common(e)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--n-scenarios", type=int)
    e.add_argument("--noise", type=float, action="append",
                   help="distance noise stddev in metres (repeatable, default 0)")
    e.add_argument("--trajectories", action="store_true",
                   help="also dump per-step trajectories to CSV")

    a = sub.add_parser("ablate", help="nominal vs noisy comparison table")
    common(a)
    a.add_argument("--checkpoint", required=True, action="append", type=Path,
                   help="checkpoint file (repeat once per network)")
    a.add_argument("--n-scenarios", type=int)
    a.add_argument("--noise", type=float, action="append",
                   help="noise levels (repeatable); default from config")

    r = sub.add_parser("replay", help="recompute rewards and outcomes of a trajectory dump")
    common(r, out=False)
    r.add_argument("trajectory", type=Path)
    return p


def _out_dir(args, cfg: ExperimentConfig, suffix: str = "") -> Path:
    out = args.out if args.out is not None else Path(cfg.output_dir) / suffix
    out.mkdir(parents=True, exist_ok=True)
    return out


def _network_label(kind: str) -> str:
    return {"gnn": "GNN", "flat": "NN"}[kind]


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    if args.network:
        cfg = cfg.with_network(args.network)
    out = _out_dir(args, cfg, cfg.network.kind)

    def progress(row):
        log.info("update %s  success %.3f  collision %.3f  return %.3f",
                 row["update"], float(row["success_rate"]), float(row["collision_rate"]),
                 float(row["mean_return"]))

    result = train(cfg, out, progress)
    png = plot_training_curves(result.metrics, out / "training_curves.png",
                               f"{_network_label(cfg.network.kind)} seed {cfg.train.seed}")
    print(f"checkpoint: {result.checkpoint}\nmetrics: {result.metrics}\nfigure: {png}")
    return EXIT_OK


def _load_for_checkpoint(cfg: ExperimentConfig, path: Path):
    """Pick the network kind from the checkpoint metadata, then load."""
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    _, meta = load_checkpoint(path)
    kind = json.loads(meta).get("network", cfg.network.kind)
    cfg = cfg.with_network(kind)
    actor, _, _ = load_agent(path, cfg)
    return cfg, actor


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    cfg, actor = _load_for_checkpoint(cfg, args.checkpoint)
    out = _out_dir(args, cfg, "eval")
    seed = args.seed if args.seed is not None else cfg.evaluation.seed
    n = args.n_scenarios if args.n_scenarios is not None else cfg.evaluation.n_scenarios
    rows = []
    for noise in args.noise or [0.0]:
        report, trajs = evaluate(cfg, actor, noise, n, seed, record=args.trajectories)
        row = {"network": _network_label(cfg.network.kind), "noise_stddev": repr(noise),
               **report.as_row()}
        rows.append(row)
        print(f"{row['network']} noise={noise:g}: success {report.success_rate:.3f}  "
              f"collision {report.collision_rate:.3f}  timeout {report.timeout_rate:.3f}  "
              f"mean return {report.mean_return:.4f}")
        if args.trajectories:
            write_trajectory_csv(out / f"trajectories_{cfg.network.kind}_noise{noise:g}.csv", trajs)
    path = out / f"eval_{cfg.network.kind}.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# checkpoint: {args.checkpoint}\n# eval_seed: {seed}\n"
                 f"# config_hash: {config_hash(cfg)}\n")
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"report: {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    seed = args.seed if args.seed is not None else base.evaluation.seed
    n = args.n_scenarios if args.n_scenarios is not None else base.evaluation.n_scenarios
    noises = args.noise if args.noise is not None else list(base.ablation.noise_stddev)
    reports = {}
    for path in args.checkpoint:
        cfg, actor = _load_for_checkpoint(base, path)
        label = _network_label(cfg.network.kind)
        if label in reports:
            raise ConfigError(f"two checkpoints for network {label}")
        per = {}
        for noise in [0.0, *noises]:
            per[float(noise)], _ = evaluate(cfg, actor, noise, n, seed)
        reports[label] = per
    rows = ablation_rows(reports, [float(x) for x in noises])
    out = _out_dir(args, base, "ablation")
    meta = {"eval_seed": seed, "n_scenarios": n, "config_hash": config_hash(base),
            "checkpoints": " ".join(str(p) for p in args.checkpoint)}
    write_comparison_csv(out / "comparison.csv", rows, meta)
    table = format_table(rows)
    (out / "comparison.txt").write_text(table + "\n")
    plot_comparison(rows, out / "comparison.png")
    print(table)
    print(f"report: {out / 'comparison.csv'}")
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_config(args.config)
    if not args.trajectory.exists():
        raise ConfigError(f"trajectory file {args.trajectory} does not exist")
    n_episodes, mismatches = replay_file(args.trajectory, cfg.env)
    for m in mismatches:
        print(f"MISMATCH {m}")
    if mismatches:
        print(f"{len(mismatches)} mismatches in {n_episodes} episodes")
        return EXIT_RUNTIME
    print(f"{n_episodes} episodes replayed clean")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ScenarioError, TrajectoryParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, InvariantError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
