import argparse
import logging
import os
import sys

import inquirer
import questionary
from questionary import Choice

# Add the project root directory to sys.path to allow importing from app
# Get the project root directory (3 levels up from this file)
project_root = os.path.abspath(
    os.path.join(os.path.dirname(__file__), "..", "..", "..")
)
sys.path.insert(0, project_root)

# Now import from app package
from app.configuration import GUIDANCE_STRATEGIES, PRESET_ALIASES, PRESETS, load_config
from app.harness.checkpoint import list_checkpoints, load_checkpoint
from app.harness.evaluation import evaluate_pass_at_k, write_evaluation
from app.harness.ppl_study import ppl_study, write_ppl_table
from app.harness.report import run_generate_report
from app.harness.training import (
    MATRIX_ROWS,
    make_layout,
    run_strategy_matrix,
    run_training,
)
from app.shared.curriculum import (
    STRATEGIES,
    difficulty_shift_probe,
    estimate_all,
    nir,
    read_order,
    write_probe_report,
    write_scores,
)
from app.shared.errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    NumericDivergenceError,
    ValidationError,
)
from app.shared.policy import build_initial_policy
from app.shared.taskgen import build_dataset, read_dataset, with_ranks, write_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def setup_logging():
    logging.basicConfig(
        level=os.getenv("LAB_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler()],
    )


def config_from_args(args, **extra):
    """Layered configuration with the subcommand's named flags on top."""
    overrides = {}
    for pair in args.set or ():
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(preset=args.preset, config_path=args.config, overrides=overrides)


def load_problems(cfg, path):
    if path:
        return read_dataset(path)
    return build_dataset(cfg.task)


def load_params(cfg, checkpoint, seed):
    if checkpoint:
        return load_checkpoint(checkpoint).params
    return build_initial_policy(make_layout(cfg), cfg.policy, seed)


def parse_ks(text, k_max):
    """'1,2,4' -> (1, 2, 4); every k must lie in [1, k_max]."""
    if not text:
        return ()
    try:
        ks = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"--pass-at-curve expects comma-separated integers, got '{text}'") from None
    if any(not 1 <= k <= k_max for k in ks):
        raise ConfigError(f"--pass-at-curve values must be in [1, {k_max}], got '{text}'")
    return ks


def cmd_gen_data(args):
    cfg = config_from_args(
        args,
        **{
            "task.count": args.count,
            "task.seed": args.seed,
            "task.n_min": args.n_min,
            "task.n_max": args.n_max,
            "task.op_set": args.ops,
        },
    )
    problems = build_dataset(cfg.task)
    write_dataset(problems, args.out)
    print(f"✅ Wrote {len(problems)} problems to {args.out}")


def cmd_estimate_difficulty(args):
    cfg = config_from_args(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    problems = load_problems(cfg, args.data)
    params = load_params(cfg, args.checkpoint, seed)
    scores = estimate_all(
        params,
        problems,
        cfg.curriculum.n_rollouts_estimate,
        seed,
        cfg.grpo.temperature,
        cfg.policy.max_len,
    )
    write_scores(scores, args.out)
    if args.ranked_out:
        ordered = sorted(problems, key=lambda p: scores[p.id].score)
        write_dataset(with_ranks(problems, {p.id: i for i, p in enumerate(ordered)}), args.ranked_out)
    print(f"✅ Wrote difficulty scores of {len(scores)} problems to {args.out}")


def cmd_train(args):
    cfg = config_from_args(
        args,
        **{
            "curriculum.strategy": args.strategy,
            "train.guidance": args.guidance,
            "train.output_dir": args.output_dir,
            "train.seeds": str(args.seed) if args.seed is not None else None,
        },
    )
    problems = load_problems(cfg, args.data)
    run_training(cfg, problems, resume=args.resume)


def cmd_eval(args):
    cfg = config_from_args(args, **{"eval.pass_at_k": args.pass_at})
    curve_ks = parse_ks(args.pass_at_curve, cfg.eval.pass_at_k)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    problems = load_problems(cfg, args.data)
    params = load_params(cfg, args.checkpoint, seed)
    result = evaluate_pass_at_k(
        params, problems, cfg.eval.pass_at_k, cfg.grpo.temperature, seed, cfg.policy.max_len
    )
    if args.out:
        write_evaluation(result, args.out, curve_ks)
    print(f"✅ pass@{result.k} = {result.rate:.4f} over {len(problems)} problems")
    for k, rate in result.curve(curve_ks).items():
        print(f"   pass@{k} = {rate:.4f} (unbiased {result.unbiased_rate(k):.4f})")


def cmd_probe_shift(args):
    cfg = config_from_args(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    problems = [p for p in load_problems(cfg, args.data) if p.predefined_rank is not None]
    window = sorted(problems, key=lambda p: p.predefined_rank)
    window = window[args.window_start : args.window_start + args.window_size]
    params = load_params(cfg, args.checkpoint, seed)
    report = difficulty_shift_probe(
        params,
        window,
        cfg.curriculum.n_rollouts_reestimate,
        seed,
        cfg.grpo.temperature,
        cfg.policy.max_len,
        args.round,
    )
    write_probe_report(report, args.out)
    print(f"✅ NIR = {report.nir:.3f}, 25th-75th percentile band = {list(report.band)}")


def cmd_ppl_study(args):
    cfg = config_from_args(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    probe = [p for p in load_problems(cfg, args.data) if p.has_expert][: cfg.eval.probe_size]
    checkpoints = [("initial", build_initial_policy(make_layout(cfg), cfg.policy, seed))]
    for path in list_checkpoints(args.run_dir):
        checkpoints.append((os.path.basename(path), load_checkpoint(path).params))
    rows = ppl_study(
        checkpoints,
        probe,
        seed,
        cfg.eval.samples_per_problem,
        cfg.grpo.temperature,
        cfg.policy.max_len,
    )
    path = write_ppl_table(rows, os.path.join(args.run_dir, "ppl.csv"))
    print(f"✅ Wrote {len(rows)} PPL rows to {path}")


def cmd_nir(args):
    rate = nir(read_order(args.order_a), read_order(args.order_b))
    print(f"{rate:.6f}")


def cmd_report(args):
    path = run_generate_report(args.run_dir)
    if path is None:
        raise DatasetError(f"cannot generate a report for {args.run_dir}")
    print(f"✅ Report written to {path}")


def cmd_matrix(args):
    cfg = config_from_args(args, **{"train.output_dir": args.output_dir})
    problems = load_problems(cfg, args.data)
    eval_problems = read_dataset(args.eval_data) if args.eval_data else problems
    combos = None
    if args.combos:
        combos = [tuple(c.split("/")) for c in args.combos.split(",")]
    run_strategy_matrix(cfg, problems, eval_problems, combos)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adcl-lab",
        description="Curriculum and guided-rollout RL lab on synthetic arithmetic chains",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS) + sorted(PRESET_ALIASES))
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a key")
    common.add_argument("--seed", type=int)

    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[common], help="generate a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--ops", help="comma-separated operators, e.g. add,sub")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("estimate-difficulty", parents=[common], help="write a difficulty table")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--ranked-out", help="also write the dataset with predefined ranks")
    p.set_defaults(func=cmd_estimate_difficulty)

    p = sub.add_parser("train", parents=[common], help="train one strategy")
    p.add_argument("--data")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--guidance", choices=GUIDANCE_STRATEGIES)
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="pass@k of a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--pass-at", type=int)
    p.add_argument("--pass-at-curve", help="comma-separated k values, each at most --pass-at")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-shift", parents=[common], help="difficulty shift probe")
    p.add_argument("--data", required=True, help="dataset with predefined ranks")
    p.add_argument("--checkpoint")
    p.add_argument("--window-start", type=int, default=0)
    p.add_argument("--window-size", type=int, default=100)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe_shift)

    p = sub.add_parser("ppl-study", parents=[common], help="PPL of four trajectory types")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_ppl_study)

    p = sub.add_parser("nir", help="normalized inversion rate of two order files")
    p.add_argument("order_a")
    p.add_argument("order_b")
    p.set_defaults(func=cmd_nir)

    p = sub.add_parser("report", help="Markdown report of a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("matrix", parents=[common], help="train and compare strategies")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--output-dir")
    p.add_argument("--combos", help="comma-separated strategy/guidance pairs, e.g. pcl/none")
    p.set_defaults(func=cmd_matrix)
    return parser


def run_command(args):
    """Run a parsed command and map lab errors onto exit codes."""
    try:
        args.func(args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"❌ {e}")
        return EXIT_CONFIG
    except NumericDivergenceError as e:
        logger.error(f"Numeric divergence: {e}")
        print(f"❌ {e}")
        return EXIT_DIVERGED
    except (CheckpointError, DatasetError, OSError) as e:
        logger.error(f"I/O error: {e}")
        print(f"❌ {e}")
        return EXIT_IO
    return EXIT_OK


def prompt_for_next_action(parser):
    """Ask the user what action they want to perform next."""
    questions = [
        inquirer.List(
            "next_action",
            message="What would you like to do next?",
            choices=[
                "Generate Dataset",
                "Train",
                "Run Strategy Matrix",
                "Evaluate pass@k",
                "Generate Run Report",
                "Exit",
            ],
        ),
    ]
    answers = inquirer.prompt(questions)
    selected = answers["next_action"] if answers else "Exit"

    if selected == "Generate Dataset":
        answers = inquirer.prompt([inquirer.Text("out", message="Dataset path", default="output/dataset.jsonl")])
        argv = ["gen-data", "--out", answers["out"]]
    elif selected == "Train":
        answers = inquirer.prompt(
            [
                inquirer.List("strategy", message="Curriculum", choices=list(STRATEGIES)),
                inquirer.List("guidance", message="Guidance", choices=list(GUIDANCE_STRATEGIES)),
                inquirer.List("preset", message="Preset", choices=sorted(PRESETS)),
            ]
        )
        argv = ["train"] + [f"--{k}={v}" for k, v in answers.items()]
    elif selected == "Run Strategy Matrix":
        combo_choices = [
            Choice(title=label, value=f"{strategy}/{guidance}")
            for (strategy, guidance), label in MATRIX_ROWS.items()
        ]
        selected_combos = questionary.checkbox(
            "Select strategies to compare:", choices=combo_choices
        ).ask()
        if not selected_combos:
            print("No strategies selected.")
            return prompt_for_next_action(parser)
        argv = ["matrix", "--preset", "desk", "--combos", ",".join(selected_combos)]
    elif selected == "Evaluate pass@k":
        answers = inquirer.prompt(
            [
                inquirer.Text("checkpoint", message="Checkpoint path"),
                inquirer.Text("pass_at", message="k", default="8"),
            ]
        )
        argv = ["eval", "--checkpoint", answers["checkpoint"], "--pass-at", answers["pass_at"]]
    elif selected == "Generate Run Report":
        answers = inquirer.prompt([inquirer.Text("run_dir", message="Run directory")])
        argv = ["report", "--run-dir", answers["run_dir"]]
    else:
        print("Exiting. Goodbye!")
        return EXIT_OK

    run_command(parser.parse_args(argv))
    # After each action, ask again what to do next
    return prompt_for_next_action(parser)


def main(argv=None):
    """Main function to run the CLI."""
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        print("Welcome to the ADCL / EGSR lab!")
        return prompt_for_next_action(parser)
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
