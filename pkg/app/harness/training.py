"""
Training Module

The training loop: curriculum schedule (NoCL, PCL, ADCL), per-problem
rollout groups with the optional EGSR or off-policy splice, mu clipped
surrogate updates per data step, metrics, events and batch checkpoints.
Also runs the strategy matrix across (curriculum x guidance) and seeds.

A run with a given configuration and seed is bitwise reproducible: every
random draw comes from a stream keyed by (seed, purpose, problem, step,
index), and resuming from a batch checkpoint continues the same streams.
"""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from app.configuration import render_config
from app.harness.checkpoint import (
    Checkpoint,
    checkpoint_path,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from app.harness.evaluation import evaluate_pass_at_k
from app.harness.metrics import (
    MetricsRecord,
    RunLog,
    read_metrics,
    write_metrics_csv,
    write_nir_history,
)
from app.shared.curriculum import (
    adcl_resort,
    estimate_all,
    measure_batch_shift,
    shuffled_schedule,
    sort_and_partition,
)
from app.shared.egsr import (
    assemble_mixed,
    can_guide,
    egsr_objective_and_grad,
    guided_rollouts,
    guided_success_rate,
    make_guidance,
    should_trigger,
    splice_offpolicy,
)
from app.shared.errors import (
    CheckpointError,
    ConfigError,
    NumericDivergenceError,
    NumericError,
    ValidationError,
)
from app.shared.grpo import ExpertSampler, grpo_objective_and_grad, make_group, sgd_step
from app.shared.policy import FeatureLayout, build_initial_policy, encode_context, sample_trajectory
from app.shared.seeding import stream, streams

logger = logging.getLogger(__name__)

# Row labels of the strategy comparison table.
MATRIX_ROWS = {
    ("nocl", "none"): "+RL",
    ("pcl", "none"): "+PCL",
    ("adcl", "none"): "+ADCL",
    ("nocl", "offpolicy"): "+off-policy",
    ("nocl", "egsr-a"): "+EGSR(a)",
    ("nocl", "egsr-sa"): "+EGSR(s,a)",
    ("adcl", "egsr-sa"): "+ADCL&EGSR",
}


@dataclass
class RunResult:
    params: object
    initial_params: object
    metrics: list
    checkpoints: list
    curriculum: object
    run_dir: str
    step: int = 0
    interrupted: bool = False


@dataclass(frozen=True, eq=False)
class ProblemStep:
    """Rollout group of one problem at one data step, ready for optimization."""

    group: object
    mixed: bool
    triggered: bool


def run_name(cfg, seed):
    return f"{cfg.curriculum.strategy}-{cfg.train.guidance}-seed{seed}"


def make_layout(cfg):
    return FeatureLayout(position_cap=cfg.policy.position_cap)


def _check_expert_data(cfg, dataset):
    if cfg.train.guidance == "none" or cfg.guidance_mode == "answer_only":
        return
    with_expert = sum(1 for p in dataset if p.has_expert)
    if with_expert == 0:
        raise ConfigError(
            f"train.guidance={cfg.train.guidance} needs expert solutions, the dataset has none"
        )
    if with_expert < len(dataset):
        logger.warning(
            f"{len(dataset) - with_expert} of {len(dataset)} problems have no expert "
            f"solution and will train without guidance"
        )


def build_schedule(cfg, dataset, params, seed, estimator=None):
    """Initial curriculum state of a run."""
    k = cfg.curriculum.k
    if cfg.curriculum.strategy == "nocl":
        return shuffled_schedule(dataset, k, stream(seed, "shuffle"))
    if estimator is None:
        scores = estimate_all(
            params,
            dataset,
            cfg.curriculum.n_rollouts_estimate,
            seed,
            cfg.grpo.temperature,
            cfg.policy.max_len,
        )
    else:
        scores = {p.id: float(estimator(p)) for p in dataset}
    return sort_and_partition(dataset, scores, k, cfg.curriculum.strategy)


def steps_for_batch(cfg, batch_size):
    if cfg.train.steps_per_batch >= 0:
        return cfg.train.steps_per_batch
    return math.ceil(batch_size / cfg.train.problems_per_step)


def step_problems(batch_ids, data_index, per_step):
    """Problem ids of the data_index-th step over a batch, cycling."""
    start = data_index * per_step
    return [batch_ids[(start + i) % len(batch_ids)] for i in range(min(per_step, len(batch_ids)))]


def rollout_problem(cfg, params_old, problem, seed, data_step, log=None, step=0):
    """
    Sample a group for one problem and apply the run's guidance strategy.

    Args:
        cfg (RunConfig): Run configuration
        params_old (PolicyParams): Policy at the start of the data step
        problem (Problem): The problem
        seed (int): Run seed
        data_step (int): Data step index, keys the random streams
        log (RunLog, optional): Receives fallback events
        step (int): Next optimization step, recorded on events

    Returns:
        ProblemStep: The group with advantages populated
    """
    g, temperature, max_len = cfg.grpo.group_size, cfg.grpo.temperature, cfg.policy.max_len
    ctx = encode_context(problem)
    trajectories = [
        sample_trajectory(params_old, ctx, temperature, max_len, rng)
        for rng in streams(seed, "rollout", problem.id, data_step, g)
    ]
    group = make_group(problem, trajectories, cfg.reward)
    guidance = cfg.train.guidance
    if guidance == "none" or not should_trigger(group, cfg.egsr):
        return ProblemStep(group.with_advantages(), mixed=False, triggered=False)

    m = cfg.egsr.guided_count
    if guidance == "offpolicy":
        if not problem.has_expert:
            return _fallback(group, problem, log, step)
        sampler = ExpertSampler(fidelity=cfg.train.expert_fidelity).validate()
        experts = [
            sampler.sample(problem, rng) for rng in streams(seed, "expert", problem.id, data_step, m)
        ]
        return ProblemStep(splice_offpolicy(group, experts, cfg.reward), mixed=False, triggered=True)

    mode = cfg.guidance_mode
    if not can_guide(problem, mode):
        return _fallback(group, problem, log, step)
    guided = guided_rollouts(
        params_old,
        problem,
        make_guidance(problem, mode),
        m,
        cfg.grpo,
        max_len,
        streams(seed, "guided", problem.id, data_step, m),
    )
    return ProblemStep(assemble_mixed(group, guided, cfg.egsr, cfg.reward), mixed=True, triggered=True)


def _fallback(group, problem, log, step):
    if log is not None:
        log.event("guidance_fallback", step, problem_id=problem.id)
    return ProblemStep(group.with_advantages(), mixed=False, triggered=False)


def batch_objective(cfg, params, problem_steps, ref_params):
    """Mean objective and gradient over the problems of a data step."""
    total, grad = 0.0, np.zeros(params.layout.n_params)
    for item in problem_steps:
        if item.mixed:
            value, g = egsr_objective_and_grad(params, item.group, cfg.egsr, cfg.grpo, ref_params)
        else:
            value, g = grpo_objective_and_grad(params, item.group, cfg.grpo, ref_params)
        total += value
        grad += g
    n = len(problem_steps)
    return total / n, grad / n


def _step_stats(problem_steps):
    rewards = [t.reward for item in problem_steps for t in item.group.trajectories]
    triggered = [item for item in problem_steps if item.triggered]
    rates = [r for r in (guided_success_rate(item.group) for item in triggered) if r is not None]
    return (
        float(np.mean([r.total for r in rewards])),
        float(np.mean([r.accuracy for r in rewards])),
        len(triggered),
        float(np.mean(rates)) if rates else None,
    )


def _finish_run(run_dir, state, records):
    write_metrics_csv(records, os.path.join(run_dir, "metrics.csv"))
    write_nir_history(state.nir_history, os.path.join(run_dir, "nir_history.csv"))


def train(
    cfg,
    dataset,
    seed=None,
    run_dir=None,
    initial_params=None,
    resume=False,
    stop_after_batches=None,
    estimator=None,
):
    """
    Train one (configuration, seed) run.

    Args:
        cfg (RunConfig): Run configuration
        dataset (sequence): Problems to train on
        seed (int, optional): Defaults to the first configured seed
        run_dir (str, optional): Defaults to <output_dir>/<strategy>-<guidance>-seed<seed>
        initial_params (PolicyParams, optional): Replaces the configured initial policy
        resume (bool): Continue from the run's latest batch checkpoint if one exists
        stop_after_batches (int, optional): Stop after this many batches of this call
        estimator (callable, optional): Problem -> difficulty, replaces sampled estimates

    Returns:
        RunResult: Final params, metrics of this call, checkpoint paths and state

    Raises:
        ConfigError: Guidance strategy without expert data
        NumericDivergenceError: Non-finite objective or gradient; earlier checkpoints stay
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("training needs a non-empty dataset")
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = run_dir or os.path.join(cfg.output_dir, run_name(cfg, seed))
    _check_expert_data(cfg, dataset)
    problems = {p.id: p for p in dataset}
    if len(problems) != len(dataset):
        raise ValidationError("dataset problem ids must be unique")

    layout = make_layout(cfg) if initial_params is None else initial_params.layout
    params0 = initial_params or build_initial_policy(layout, cfg.policy, seed)
    ref_params = params0
    fingerprint = cfg.fingerprint()

    resume_from = latest_checkpoint(run_dir) if resume else None
    if resume_from:
        ckpt = load_checkpoint(resume_from, layout, fingerprint)
        if ckpt.rng_state and ckpt.rng_state.get("seed") != seed:
            raise CheckpointError(
                f"{resume_from} was written by seed {ckpt.rng_state.get('seed')}, not {seed}"
            )
        params, state = ckpt.params, ckpt.curriculum
        step, data_step = ckpt.step, ckpt.data_step
        log = RunLog(run_dir, resume_step=step)
        logger.info(f"Resuming {run_dir} at batch {state.current_batch}, step {step}")
    else:
        log = RunLog(run_dir)
        params, step, data_step = params0, 0, 0
        state = build_schedule(cfg, dataset, params0, seed, estimator)
        log.event(
            "schedule",
            0,
            strategy=state.strategy,
            batch_sizes=[len(b) for b in state.batches],
        )
        with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as f:
            f.write(render_config(cfg))

    checkpoints, records, batches_done = [], [], 0
    mu, lr = cfg.grpo.inner_iters, cfg.grpo.learning_rate
    with log:
        while not state.done:
            b = state.current_batch
            batch_ids = state.batches[b]
            for data_index in range(steps_for_batch(cfg, len(batch_ids))):
                ids = step_problems(batch_ids, data_index, cfg.train.problems_per_step)
                started = time.perf_counter()
                params_old = params
                problem_steps = [
                    rollout_problem(cfg, params_old, problems[pid], seed, data_step, log, step + 1)
                    for pid in ids
                ]
                mean_total, mean_acc, trigger_count, guided_rate = _step_stats(problem_steps)
                for _ in range(mu):
                    try:
                        objective, grad = batch_objective(cfg, params, problem_steps, ref_params)
                        params = sgd_step(params, grad, lr)
                    except NumericError as e:
                        log.event("divergence", step + 1, message=str(e))
                        raise NumericDivergenceError(
                            f"training diverged at step {step + 1}: {e}"
                        ) from e
                    step += 1
                    wall_ms = 0
                    if cfg.train.record_wall_time:
                        wall_ms = int((time.perf_counter() - started) * 1000)
                    record = MetricsRecord(
                        step=step,
                        batch_index=b,
                        mean_total_reward=mean_total,
                        mean_accuracy_reward=mean_acc,
                        trigger_count=trigger_count,
                        guided_success_rate=guided_rate,
                        objective=float(objective),
                        grad_norm=float(np.linalg.norm(grad)),
                        wall_ms=wall_ms,
                    )
                    log.record(record)
                    records.append(record)
                data_step += 1

            if not state.is_last and cfg.curriculum.strategy == "adcl":
                state = adcl_resort(
                    params,
                    state,
                    problems,
                    cfg.curriculum.n_rollouts_reestimate,
                    seed,
                    cfg.grpo.temperature,
                    cfg.policy.max_len,
                    step,
                    estimator,
                )
                log.event("reestimate", step, batch=b + 1, nir=state.nir_history[-1][1])
            elif not state.is_last and cfg.curriculum.strategy == "pcl" and cfg.curriculum.track_shift:
                state = measure_batch_shift(
                    params,
                    state,
                    problems,
                    cfg.curriculum.n_rollouts_reestimate,
                    seed,
                    cfg.grpo.temperature,
                    cfg.policy.max_len,
                    step,
                    estimator,
                    cfg.curriculum.shift_window,
                )
                window_batch = state.k - 1 if cfg.curriculum.shift_window == "last" else b + 1
                log.event("shift", step, batch=window_batch, nir=state.nir_history[-1][1])

            state = state.advance()
            path = save_checkpoint(
                checkpoint_path(run_dir, b),
                Checkpoint(
                    params=params,
                    step=step,
                    data_step=data_step,
                    curriculum=state,
                    rng_state={"seed": seed, "data_step": data_step},
                    config_fingerprint=fingerprint,
                ),
            )
            checkpoints.append(path)
            log.event("checkpoint", step, batch=b, path=os.path.basename(path))
            logger.info(f"Finished batch {b + 1}/{state.k} at step {step}")
            batches_done += 1
            if stop_after_batches is not None and batches_done >= stop_after_batches:
                break

    if state.done:
        _finish_run(run_dir, state, read_metrics(run_dir))
    return RunResult(
        params=params,
        initial_params=params0,
        metrics=records,
        checkpoints=checkpoints,
        curriculum=state,
        run_dir=run_dir,
        step=step,
        interrupted=not state.done,
    )


def run_training(cfg, dataset, seeds=None, resume=False):
    """Train every configured seed and print a one-line summary per run."""
    results = []
    for seed in seeds or cfg.seeds:
        result = train(cfg, dataset, seed=seed, resume=resume)
        last = result.metrics[-1] if result.metrics else None
        summary = f"mean reward {last.mean_total_reward:.3f}" if last else "no steps"
        print(f"✅ {run_name(cfg, seed)}: {result.step} steps, {summary}")
        results.append(result)
    return results


def run_strategy_matrix(cfg, dataset, eval_problems, combos=None, seeds=None, output_dir=None):
    """
    Train each (curriculum, guidance) combination for each seed and compare.

    Args:
        cfg (RunConfig): Base configuration
        dataset (sequence): Training problems
        eval_problems (sequence): Held-out problems for pass@k
        combos (sequence, optional): (strategy, guidance) pairs; defaults to MATRIX_ROWS
        seeds (sequence, optional): Defaults to cfg.seeds
        output_dir (str, optional): Defaults to cfg.output_dir

    Returns:
        list: One dict per (combination, seed)
    """
    combos = list(combos or MATRIX_ROWS)
    output_dir = output_dir or cfg.output_dir
    k = cfg.eval.pass_at_k
    rows = []
    for strategy, guidance in combos:
        run_cfg = cfg.with_values(
            **{
                "curriculum.strategy": strategy,
                "train.guidance": guidance,
                "train.output_dir": output_dir,
            }
        )
        for seed in seeds or cfg.seeds:
            result = train(run_cfg, dataset, seed=seed)
            before = evaluate_pass_at_k(
                result.initial_params, eval_problems, k, run_cfg.grpo.temperature, seed, run_cfg.policy.max_len
            )
            after = evaluate_pass_at_k(
                result.params, eval_problems, k, run_cfg.grpo.temperature, seed, run_cfg.policy.max_len
            )
            label = MATRIX_ROWS.get((strategy, guidance), f"+{strategy}/{guidance}")
            rows.append(
                {
                    "label": label,
                    "strategy": strategy,
                    "guidance": guidance,
                    "seed": seed,
                    "steps": result.step,
                    f"pass@{k}_before": before.rate,
                    f"pass@{k}_after": after.rate,
                    "triggers": sum(r.trigger_count for r in result.metrics),
                }
            )
            print(f"✅ {label} seed {seed}: pass@{k} {before.rate:.3f} -> {after.rate:.3f}")

    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "matrix.csv")
    if rows:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        logger.info(f"Wrote strategy matrix to {path}")
    return rows
