#!/usr/bin/env python3
"""
AnimaRL Command-Line Interface
generate / estimate / train / evaluate subcommands with reproducible run manifests
"""

import argparse
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from chase_env import CHASER, EVADER, WorldConfig
from data_io import (
    DatasetFormatError,
    DatasetParseError,
    make_splits,
    read_dataset,
    read_splits,
    select,
    write_dataset,
    write_splits,
)
from demo_generator import INDEPENDENT, SHARED, generate_both_conditions, generate_demos
from locomotion_id import DEFAULT_TH_ACC, EstimationError, fit_role, label_actions, write_parameter_report
from policy_evaluator import PolicyEvaluator
from qfunction import METHODS, CheckpointMismatchError
from training import RunConfig, TrainingLog, load_agents, run_training, save_agents
from validate_dataset import DatasetValidator

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ESTIMATION = 3
EXIT_MISMATCH = 4

MANIFEST_NAME = "run_manifest.json"

load_dotenv()


class RunManifest(BaseModel):
    """Record of one CLI run, written next to its outputs"""
    subcommand: str
    config_path: Optional[str] = None
    seed: int
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    tool_version: str = __version__
    argv: List[str] = Field(default_factory=list)
    duration_seconds: float = 0.0


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    """Write run_manifest.json atomically (temp file + rename)"""
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / MANIFEST_NAME
    tmp = out_dir / f".{MANIFEST_NAME}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
    os.replace(tmp, target)
    return target


def parse_condition(value: str) -> Optional[int]:
    """1 -> flag 0 (independent reward), 2 -> flag 1 (shared reward), both -> None"""
    if value == "both":
        return None
    if value not in ("1", "2"):
        raise argparse.ArgumentTypeError(f"condition must be 1, 2 or both, got '{value}'")
    return int(value) - 1


def parse_flip(value: str) -> tuple:
    try:
        first, second = (int(v) - 1 for v in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"flip must look like 1:2, got '{value}'")
    if first not in (0, 1) or second not in (0, 1):
        raise argparse.ArgumentTypeError(f"flip conditions must be 1 or 2, got '{value}'")
    return first, second


def load_world(path: Optional[str]) -> WorldConfig:
    return WorldConfig.from_config_file(path) if path else WorldConfig()


def cmd_generate(args) -> int:
    config = load_world(args.config)
    verbose = not args.quiet
    condition = args.condition
    if condition is None:
        episodes = generate_both_conditions(config, args.n, args.seed, verbose=verbose)
    else:
        episodes = generate_demos(config, args.n, condition, args.seed, verbose=verbose)

    out = Path(args.out)
    write_dataset(episodes, out)
    outputs = [str(out)]
    if verbose:
        print(f"💾 Wrote {len(episodes)} episodes to {out}")

    validator = DatasetValidator(
        boundary_half_width=config.boundary_half_width, time_limit=config.time_limit, verbose=False
    )
    ok, issues = validator.validate_episodes(episodes)
    if not ok:
        for issue in issues[:10]:
            print(f"⚠️  {issue}", file=sys.stderr)

    if args.split_counts:
        train, validation, test = (int(v) for v in args.split_counts.split(","))
        spec = make_splits(episodes, {"train": train, "validation": validation, "test": test}, args.seed)
        splits_path = out.with_suffix(".splits.json")
        write_splits(spec, splits_path)
        outputs.append(str(splits_path))

    args.manifest.outputs = outputs
    return EXIT_OK


def cmd_estimate(args) -> int:
    data = Path(args.data)
    episodes = read_dataset(data)
    if args.splits:
        episodes = select(episodes, read_splits(args.splits).stages["estimation"].train)
    verbose = not args.quiet

    results = {}
    for role in (CHASER, EVADER):
        results[role] = fit_role(episodes, role, th_acc=args.th_acc, verbose=verbose)
        if verbose:
            p = results[role]
            print(f"📊 {role}: d={p.d:.3f} u={p.u:.3f} RMSE={p.rmse:.3f} ({p.n_transitions} onsets)")
            if p.d_exceeds_one:
                print(f"⚠️  {role}: estimated d > 1")

    ground_truth = None
    if args.config:
        config = load_world(args.config)
        ground_truth = {
            CHASER: {"d": config.damping, "u": config.mobility(config.chaser_indices[0]).u},
            EVADER: {"d": config.damping, "u": config.input_amplitude}
        }
    out = write_parameter_report(args.out, results, ground_truth)
    args.manifest.inputs = [str(data)]
    args.manifest.outputs = [str(out)]
    if verbose:
        print(f"💾 Parameter report saved to {out}")
    return EXIT_OK


def _training_demos(args) -> list:
    episodes = read_dataset(args.data)
    if args.splits:
        episodes = select(episodes, read_splits(args.splits).stages["offline"].train)
    if not all(ep.has_actions for ep in episodes):
        params = {role: fit_role(episodes, role, th_acc=args.th_acc) for role in (CHASER, EVADER)}
        episodes = label_actions(episodes, params)
    return episodes


def cmd_train(args) -> int:
    config = load_world(args.config)
    verbose = not args.quiet

    if args.run_config:
        run_config = RunConfig.from_config_file(args.run_config)
        if run_config.method != args.method:
            raise ValueError(f"Run config method '{run_config.method}' differs from --method {args.method}")
    else:
        overrides = {"seed": args.seed, "co_train_evader": args.co_train_evader, "eval_interval": args.eval_interval}
        schedule = {
            "total_steps": args.steps,
            "offline_epochs": args.epochs,
            "learning_rate": args.lr,
            "offline_learning_rate": args.offline_lr
        }
        overrides.update({k: v for k, v in schedule.items() if v is not None})
        run_config = RunConfig.preset(args.method, pretrain=args.pretrain, **overrides)

    demos = _training_demos(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.csv"
    if log_path.exists():
        log_path.unlink()

    if verbose:
        print("=" * 60)
        print(f"TRAINING {run_config.method.upper()}{' (pretrained)' if run_config.pretrain else ''}")
        print("=" * 60)
    agents, log = run_training(config, run_config, demos, TrainingLog(log_path), verbose=verbose)
    paths = save_agents(agents, out_dir, config, run_config)

    args.manifest.inputs = [str(args.data)]
    args.manifest.outputs = [str(p) for p in paths] + [str(log_path)]
    if verbose:
        print(f"💾 Saved {len(paths)} checkpoints and the log to {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    gt = read_dataset(args.gt_data)
    if args.splits:
        gt = select(gt, read_splits(args.splits).stages["online"].test)
    if args.condition is not None:
        gt = [ep for ep in gt if ep.condition == args.condition]
    if not gt:
        raise ValueError("No GT episodes left after filtering")
    verbose = not args.quiet
    inputs = [str(args.gt_data)]

    if not args.checkpoint:
        config = load_world(args.config)
        evaluator = PolicyEvaluator(
            config, gt, seed=args.seed, n_rep=args.n_rep, kde_rep=args.kde_rep, verbose=verbose
        )
        by_condition: Dict[int, list] = {}
        for ep in gt:
            by_condition.setdefault(ep.condition, []).append(ep)
        evaluator.evaluate_episodes("gt", by_condition)
    else:
        evaluator = None
        for checkpoint in args.checkpoint:
            agents, config, run_config = load_agents(checkpoint)
            if evaluator is None:
                eps = args.eps if args.eps is not None else run_config.schedule.eps_test
                evaluator = PolicyEvaluator(
                    config, gt, n_episodes=args.episodes, seed=args.seed, eps=eps,
                    n_rep=args.n_rep, kde_rep=args.kde_rep, verbose=verbose
                )
            label = Path(checkpoint).name
            evaluator.evaluate_policy(label, agents)
            for first, second in args.flip or []:
                evaluator.counterfactual(label, agents, first, second)
            inputs.append(str(checkpoint))
        contrasts = [tuple(c.split(":")) for c in args.contrast or []]
        evaluator.compare_methods(contrasts)
        baseline = args.baseline or ("bc" if "bc" in evaluator.metrics else None)
        if baseline is not None:
            if baseline not in evaluator.metrics:
                raise ValueError(f"--baseline '{baseline}' is not one of the evaluated checkpoints")
            for label in evaluator.metrics:
                if label != baseline:
                    evaluator.paired_comparison(baseline, label)

    paths = evaluator.write_reports(Path(args.out))
    if verbose:
        evaluator.print_summary()
    args.manifest.inputs = inputs
    args.manifest.outputs = [str(p) for p in paths.values()]
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="animarl",
        description="AnimaRL: locomotion identification, imitation-shaped Q-learning and evaluation"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=os.getenv("ANIMARL_WORLD_CONFIG"),
                        help="World config file (KEY=value); defaults to the built-in world")
    common.add_argument("--seed", type=int, default=int(os.getenv("ANIMARL_SEED", "0")), help="Run seed (default: 0)")
    common.add_argument("--quiet", action="store_true", help="Suppress progress output")

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Generate scripted demonstrations")
    gen.add_argument("--n", type=int, default=500, help="Number of episodes (default: 500)")
    gen.add_argument("--condition", type=parse_condition, default=None,
                     help="1 (independent reward), 2 (shared reward) or both (default: both)")
    gen.add_argument("--out", type=str, default="data/demos.jsonl", help="Output dataset (default: data/demos.jsonl)")
    gen.add_argument("--split-counts", type=str, default=None,
                     help="Also write train,validation,test splits, e.g. 400,50,50")
    gen.set_defaults(func=cmd_generate)

    est = sub.add_parser("estimate", parents=[common], help="Estimate locomotion parameters d and u")
    est.add_argument("--data", type=str, required=True, help="Dataset file")
    est.add_argument("--th-acc", type=float, default=DEFAULT_TH_ACC,
                     help=f"Onset acceleration threshold (default: {DEFAULT_TH_ACC})")
    est.add_argument("--splits", type=str, default=None, help="Use the estimation-stage training ids of this split file")
    est.add_argument("--out", type=str, default="reports/locomotion.env", help="Parameter report (default: reports/locomotion.env)")
    est.set_defaults(func=cmd_estimate)

    tr = sub.add_parser("train", parents=[common], help="Train chaser policies")
    tr.add_argument("--method", type=str, choices=METHODS, required=True, help="Training method")
    tr.add_argument("--pretrain", action=argparse.BooleanOptionalAction, default=True,
                    help="Offline pretraining before online steps (default: on)")
    tr.add_argument("--run-config", type=str, default=None, help="Run config file; overrides the presets")
    tr.add_argument("--data", type=str, required=True, help="Demonstration dataset")
    tr.add_argument("--splits", type=str, default=None, help="Use the offline-stage training ids of this split file")
    tr.add_argument("--out", type=str, default="runs/model", help="Output directory (default: runs/model)")
    tr.add_argument("--steps", type=int, default=None, help="Online steps (default: 1005000)")
    tr.add_argument("--epochs", type=int, default=None, help="Offline epochs (default: 30)")
    tr.add_argument("--lr", type=float, default=None, help="Online learning rate (default: method preset)")
    tr.add_argument("--offline-lr", type=float, default=None, help="Offline learning rate (default: method preset)")
    tr.add_argument("--th-acc", type=float, default=DEFAULT_TH_ACC, help="Threshold used when actions must be inferred")
    tr.add_argument("--co-train-evader", action="store_true", help="Learn an evader policy instead of replaying demos")
    tr.add_argument("--eval-interval", type=int, default=0, help="Evaluation snapshot period in steps (default: off)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", parents=[common], help="Evaluate checkpoints against GT demonstrations")
    ev.add_argument("--checkpoint", type=str, action="append", help="Training output directory (repeatable)")
    ev.add_argument("--gt-data", type=str, required=True, help="Ground-truth dataset")
    ev.add_argument("--splits", type=str, default=None, help="Use the online-stage test ids of this split file")
    ev.add_argument("--condition", type=parse_condition, default=None, help="1, 2 or both (default: both)")
    ev.add_argument("--flip", type=parse_flip, action="append", help="Counterfactual flip, e.g. 1:2 (repeatable)")
    ev.add_argument("--contrast", type=str, action="append", help="A priori contrast between two checkpoints, e.g. dqcil:bc")
    ev.add_argument("--baseline", type=str, default=None,
                    help="Checkpoint label every other method is compared with on paired seeds (default: bc when evaluated)")
    ev.add_argument("--episodes", type=int, default=50, help="Rollouts per condition (default: 50)")
    ev.add_argument("--eps", type=float, default=None, help="Test exploration rate (default: schedule eps_test)")
    ev.add_argument("--n-rep", type=int, default=10_000, help="Bootstrap replicates (default: 10000)")
    ev.add_argument("--kde-rep", type=int, default=1_000, help="Bootstrap replicates of the KDE gaps (default: 1000)")
    ev.add_argument("--out", type=str, default="reports/eval", help="Report directory (default: reports/eval)")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def _output_dir(args) -> Path:
    out = Path(args.out)
    return out if args.command in ("train", "evaluate") else out.parent


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code"""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    args.manifest = RunManifest(subcommand=args.command, config_path=args.config, seed=args.seed, argv=argv)
    start = time.time()
    try:
        code = args.func(args)
    except EstimationError as e:
        print(f"❌ Estimation failed: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    except CheckpointMismatchError as e:
        print(f"❌ Checkpoint mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, DatasetFormatError, DatasetParseError, ValidationError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    args.manifest.duration_seconds = time.time() - start
    try:
        write_manifest(args.manifest, _output_dir(args))
    except OSError as e:
        print(f"❌ Could not write run manifest: {e}", file=sys.stderr)
        return EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
