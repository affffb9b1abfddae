"""Command line: ``amortlab <verb> [options]``.

Verbs ``generate``, ``train`` and ``evaluate`` run an experiment up to that
stage; ``reproduce <artifact>`` runs everything behind one table or figure;
``bench`` times flow sampling against Metropolis.  Failures exit with status
2 and name the failing stage on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import (
    ARTIFACTS,
    EXPERIMENTS,
    PROFILES,
    STAGES,
    ConfigError,
    StageError,
    bench_timing,
    load_config,
    make_config,
    reproduce,
    run_experiment,
    timing_medians,
)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amortlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of configuration keys")
    common.add_argument("--seed", type=_u64, help="root seed (unsigned 64-bit)")
    common.add_argument("--out", help="run directory")
    common.add_argument("--profile", choices=sorted(PROFILES), help="default sizes (desk or paper)")
    common.add_argument("--checkpoints", help="comma-separated training epochs to evaluate")
    common.add_argument("--experiment", choices=EXPERIMENTS, help="overrides the config's experiment")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in STAGES:
        sub.add_parser(verb, parents=[common], help=f"run the pipeline up to the {verb} stage")
    rep = sub.add_parser("reproduce", parents=[common], help="run the experiment behind a table or figure")
    rep.add_argument("artifact", choices=sorted(ARTIFACTS))
    bench = sub.add_parser("bench", parents=[common], help="time flow sampling against Metropolis")
    bench.add_argument("--n-tasks", type=int, default=None, help="number of timed tasks")
    return parser


def _config(args, experiment: str | None):
    overrides = load_config(args.config) if args.config else {}
    if args.seed is not None:
        overrides["root_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.checkpoints is not None:
        overrides["checkpoints"] = args.checkpoints
    if args.experiment is not None:
        overrides["experiment"] = args.experiment
    if experiment is not None:
        if overrides.get("experiment", experiment) != experiment:
            raise ConfigError(f"config experiment {overrides['experiment']!r} does not match {experiment!r}")
        overrides["experiment"] = experiment
    profile = args.profile or overrides.pop("profile", "desk")
    if "experiment" not in overrides:
        raise ConfigError("no experiment given; set 'experiment' in --config or pass --experiment")
    return make_config(profile=profile, overrides=overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        if args.verb == "reproduce":
            cfg = _config(args, ARTIFACTS[args.artifact])
            for path in reproduce(args.artifact, cfg):
                print(path)
        elif args.verb == "bench":
            cfg = _config(args, "RingPosterior")
            stage = "bench"
            n = cfg.bench_tasks if args.n_tasks is None else args.n_tasks
            path = bench_timing(cfg, n)
            print(path)
            for method, ms in timing_medians(path).items():
                print(f"{method}: median {ms:.1f} ms per task")
        else:
            cfg = _config(args, None)
            stages = STAGES[: STAGES.index(args.verb) + 1]
            manifest = run_experiment(cfg, stages)
            print(f"{cfg.output_dir}: {manifest.status} ({', '.join(manifest.stages_done)})")
    except StageError as exc:
        print(f"amortlab: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"amortlab: stage '{stage}' failed: {exc}", file=sys.stderr)
        return 2
    return 0
