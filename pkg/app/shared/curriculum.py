"""
Curriculum Module

Difficulty estimation by rollout accuracy, the predefined (PCL) and
adaptive (ADCL) batch schedules, the normalized inversion rate between two
orderings, and the probe that measures how far a model's current difficulty
ranking has drifted from the ranking fixed at the start of training.
"""

import json
import logging
import os
from bisect import bisect
from dataclasses import dataclass, field, replace

import numpy as np

from app.shared.errors import DatasetError, ValidationError
from app.shared.policy import NO_GUIDANCE, encode_context, sample_trajectory
from app.shared.seeding import stream
from app.shared.taskgen import VOCAB_SIZE, verify_answer

logger = logging.getLogger(__name__)

STRATEGIES = ("nocl", "pcl", "adcl")
SHIFT_WINDOWS = ("next", "last")


@dataclass(frozen=True)
class DifficultyScore:
    problem_id: str
    score: float
    n_rollouts: int
    estimated_at_step: int = 0
    successes: int = 0

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ValidationError(f"n_rollouts must be >= 1, got {self.n_rollouts}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"difficulty score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class CurriculumState:
    """
    Ordered batches plus everything measured about them.

    history holds one {problem_id: score} table per estimation round and
    nir_history one (round, nir) pair per re-estimation.
    """

    strategy: str
    batches: tuple
    current_batch: int = 0
    history: tuple = ()
    ranks: dict = field(default_factory=dict)
    nir_history: tuple = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown curriculum strategy '{self.strategy}'")
        if not 0 <= self.current_batch <= len(self.batches):
            raise ValidationError(f"current_batch {self.current_batch} out of range")

    @property
    def k(self):
        return len(self.batches)

    @property
    def is_last(self):
        return self.current_batch >= self.k - 1

    @property
    def done(self):
        return self.current_batch >= self.k

    def visit_order(self):
        """Problem ids in the order the schedule visits them."""
        return [pid for batch in self.batches for pid in batch]

    def advance(self):
        if self.done:
            raise ValidationError("curriculum already finished")
        return replace(self, current_batch=self.current_batch + 1)

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "batches": [list(b) for b in self.batches],
            "current_batch": self.current_batch,
            "history": [dict(table) for table in self.history],
            "ranks": dict(self.ranks),
            "nir_history": [[r, v] for r, v in self.nir_history],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            strategy=data["strategy"],
            batches=tuple(tuple(b) for b in data["batches"]),
            current_batch=int(data["current_batch"]),
            history=tuple(dict(table) for table in data["history"]),
            ranks=dict(data["ranks"]),
            nir_history=tuple((int(r), float(v)) for r, v in data["nir_history"]),
        )


def estimate_difficulty(params, problem, n_rollouts, temperature, rng, max_len=32, step=0):
    """
    Estimate the difficulty of a problem as 1 - accuracy over unguided rollouts.

    Args:
        params (PolicyParams): Policy to measure
        problem (Problem): The problem
        n_rollouts (int): Number of samples
        temperature (float): Sampling temperature
        rng (numpy.random.Generator): Random stream for all samples
        max_len (int): Token budget per sample
        step (int): Training step recorded on the score

    Returns:
        DifficultyScore: The estimate
    """
    if n_rollouts < 1:
        raise ValidationError(f"n_rollouts must be >= 1, got {n_rollouts}")
    ctx = encode_context(problem, NO_GUIDANCE)
    successes = 0
    for _ in range(n_rollouts):
        traj = sample_trajectory(params, ctx, temperature, max_len, rng)
        successes += int(verify_answer(problem, traj.tokens))
    return DifficultyScore(
        problem_id=problem.id,
        score=1.0 - successes / n_rollouts,
        n_rollouts=n_rollouts,
        estimated_at_step=step,
        successes=successes,
    )


def estimate_all(params, problems, n_rollouts, seed, temperature, max_len=32, round_index=0, step=0):
    """Estimate every problem with its own stream keyed by (problem id, round)."""
    scores = {}
    for problem in problems:
        rng = stream(seed, "estimate", problem.id, round_index)
        scores[problem.id] = estimate_difficulty(
            params, problem, n_rollouts, temperature, rng, max_len, step
        )
    solved = sum(1 for s in scores.values() if s.score < 1.0)
    logger.info(
        f"Estimated difficulty of {len(scores)} problems (round {round_index}, "
        f"{solved} solved at least once)"
    )
    return scores


def _score_value(score):
    return score.score if isinstance(score, DifficultyScore) else float(score)


def partition_sizes(m, k):
    """Sizes of k contiguous batches over m items, larger batches first."""
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    if k > m:
        raise ValidationError(f"K={k} exceeds the dataset size {m}")
    base, remainder = divmod(m, k)
    return [base + 1 if i < remainder else base for i in range(k)]


def _split(ids, k):
    batches, start = [], 0
    for size in partition_sizes(len(ids), k):
        batches.append(tuple(ids[start : start + size]))
        start += size
    return tuple(batches)


def sort_and_partition(dataset, scores, k, strategy="pcl"):
    """
    Sort ascending by difficulty (stable) and split into K batches.

    Args:
        dataset (sequence): Problems in dataset order
        scores (dict): problem_id -> DifficultyScore or float
        k (int): Number of batches
        strategy (str): Strategy recorded on the state

    Returns:
        CurriculumState: Batches with predefined ranks recorded
    """
    missing = [p.id for p in dataset if p.id not in scores]
    if missing:
        raise ValidationError(f"no difficulty score for {missing[0]} ({len(missing)} missing)")
    ordered = sorted(dataset, key=lambda p: _score_value(scores[p.id]))
    ids = [p.id for p in ordered]
    table = {p.id: _score_value(scores[p.id]) for p in dataset}
    return CurriculumState(
        strategy=strategy,
        batches=_split(ids, k),
        history=(table,),
        ranks={pid: rank for rank, pid in enumerate(ids)},
    )


def shuffled_schedule(dataset, k, rng):
    """NoCL schedule: a seeded permutation split into K batches."""
    ids = [p.id for p in dataset]
    order = [ids[i] for i in rng.permutation(len(ids))]
    return CurriculumState(strategy="nocl", batches=_split(order, k))


def _reestimate(params, state, problems, n_rollouts, seed, temperature, max_len, step, estimator, target=None):
    if state.is_last:
        raise ValidationError(
            f"no batch follows batch {state.current_batch} of {state.k}"
        )
    round_index = len(state.history)
    target = state.current_batch + 1 if target is None else target
    batch_ids = state.batches[target]
    if estimator is None:
        scored = estimate_all(
            params,
            [problems[pid] for pid in batch_ids],
            n_rollouts,
            seed,
            temperature,
            max_len,
            round_index,
            step,
        )
        table = {pid: scored[pid].score for pid in batch_ids}
    else:
        table = {pid: float(estimator(problems[pid])) for pid in batch_ids}
    new_order = tuple(sorted(batch_ids, key=lambda pid: table[pid]))
    rate = nir(batch_ids, new_order)
    logger.info(f"Re-estimated batch {target} (round {round_index}): NIR={rate:.3f}")
    return table, new_order, round_index, rate


def adcl_resort(
    params,
    state,
    problems,
    n_rollouts,
    seed,
    temperature=0.7,
    max_len=32,
    step=0,
    estimator=None,
):
    """
    Re-estimate the next batch under the current params and re-sort only it.

    Args:
        params (PolicyParams): Current policy
        state (CurriculumState): Schedule; current_batch must not be the last
        problems (dict): problem_id -> Problem
        n_rollouts (int): Samples per problem
        seed (int): Run seed
        temperature (float): Sampling temperature
        max_len (int): Token budget
        step (int): Training step recorded on the scores
        estimator (callable, optional): Problem -> difficulty, replaces sampling

    Returns:
        CurriculumState: State with the next batch re-sorted
    """
    table, new_order, round_index, rate = _reestimate(
        params, state, problems, n_rollouts, seed, temperature, max_len, step, estimator
    )
    batches = list(state.batches)
    batches[state.current_batch + 1] = new_order
    return replace(
        state,
        batches=tuple(batches),
        history=state.history + (table,),
        nir_history=state.nir_history + ((round_index, rate),),
    )


def measure_batch_shift(
    params,
    state,
    problems,
    n_rollouts,
    seed,
    temperature=0.7,
    max_len=32,
    step=0,
    estimator=None,
    window="last",
):
    """
    Re-estimate a batch and record its NIR against the predefined order
    without reordering anything.

    window="next" measures the batch that follows the current one, as
    adcl_resort does. window="last" measures the final batch at every
    round, so successive rates describe how far the same problems drift
    from their initial ranking as training proceeds.
    """
    if window not in SHIFT_WINDOWS:
        raise ValidationError(f"unknown shift window '{window}'")
    target = state.k - 1 if window == "last" else None
    table, _, round_index, rate = _reestimate(
        params, state, problems, n_rollouts, seed, temperature, max_len, step, estimator, target
    )
    return replace(
        state,
        history=state.history + (table,),
        nir_history=state.nir_history + ((round_index, rate),),
    )


def count_inversions(sequence):
    inversions = 0
    sorted_so_far = []
    for i, value in enumerate(sequence):
        j = bisect(sorted_so_far, value)
        inversions += i - j
        sorted_so_far.insert(j, value)
    return inversions


def nir(order_a, order_b):
    """
    Normalized inversion rate: discordant pairs / C(n, 2).

    Raises:
        ValidationError: Orders hold different ids, duplicates, or fewer than 2
    """
    order_a, order_b = list(order_a), list(order_b)
    n = len(order_a)
    if n < 2:
        raise ValidationError(f"NIR needs at least 2 items, got {n}")
    if len(set(order_a)) != n or len(set(order_b)) != len(order_b):
        raise ValidationError("NIR orders must not contain duplicates")
    if set(order_a) != set(order_b):
        raise ValidationError("NIR orders must hold the same ids")
    position = {item: i for i, item in enumerate(order_b)}
    return count_inversions([position[item] for item in order_a]) / (n * (n - 1) / 2)


def uniform_success_probability(max_len=32, vocab_size=VOCAB_SIZE):
    """
    Exact success probability of the uniform policy.

    A sample succeeds iff it is j tokens that are neither ANS nor END,
    then ANS, the right digit and END, with j + 3 <= max_len. The result
    does not depend on the chain.
    """
    if max_len < 3:
        raise ValidationError(f"max_len must be >= 3, got {max_len}")
    free = (vocab_size - 2) / vocab_size
    prefix = sum(free**j for j in range(max_len - 2))
    return prefix / vocab_size**3


@dataclass(frozen=True)
class ProbeRow:
    problem_id: str
    predefined_rank: int
    actual_rank: int
    round: int = 0


@dataclass(frozen=True)
class ProbeReport:
    rows: tuple
    band: tuple
    nir: float

    @property
    def deviations(self):
        return [row.actual_rank - row.predefined_rank for row in self.rows]


def difficulty_shift_probe(
    params,
    window,
    n_rollouts,
    seed,
    temperature=0.7,
    max_len=32,
    round_index=0,
    estimator=None,
):
    """
    Compare the predefined ranks of a window against ranks measured now.

    Actual ranks reuse the window's predefined rank values, assigned in
    ascending measured difficulty; ties keep predefined order.

    Args:
        params (PolicyParams): Current policy
        window (sequence): Problems carrying predefined_rank
        n_rollouts (int): Samples per problem
        seed (int): Run seed
        temperature (float): Sampling temperature
        max_len (int): Token budget
        round_index (int): Probe round, keys the random streams
        estimator (callable, optional): Problem -> difficulty, replaces sampling

    Returns:
        ProbeReport: Rank pairs, the 25th-75th percentile band and the NIR
    """
    window = list(window)
    if not window:
        raise ValidationError("probe window is empty")
    if any(p.predefined_rank is None for p in window):
        raise ValidationError("every probe problem needs a predefined_rank")

    predefined = sorted(window, key=lambda p: p.predefined_rank)
    if estimator is None:
        scores = estimate_all(params, predefined, n_rollouts, seed, temperature, max_len, round_index)
        difficulty = {pid: s.score for pid, s in scores.items()}
    else:
        difficulty = {p.id: float(estimator(p)) for p in predefined}
    actual = sorted(predefined, key=lambda p: difficulty[p.id])

    rank_values = [p.predefined_rank for p in predefined]
    actual_rank = {p.id: rank_values[i] for i, p in enumerate(actual)}
    rows = tuple(
        ProbeRow(p.id, p.predefined_rank, actual_rank[p.id], round_index) for p in predefined
    )
    deviations = np.array([r.actual_rank - r.predefined_rank for r in rows])
    band = (
        int(np.percentile(deviations, 25, method="lower")),
        int(np.percentile(deviations, 75, method="higher")),
    )
    rate = nir([p.id for p in predefined], [p.id for p in actual]) if len(window) > 1 else 0.0
    return ProbeReport(rows=rows, band=band, nir=rate)


def write_probe_report(reports, path):
    """Write one or more probe reports as JSONL rows."""
    if isinstance(reports, ProbeReport):
        reports = [reports]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            for row in report.rows:
                f.write(
                    json.dumps(
                        {
                            "problem_id": row.problem_id,
                            "predefined_rank": row.predefined_rank,
                            "actual_rank": row.actual_rank,
                            "round": row.round,
                        }
                    )
                    + "\n"
                )
    return path


def write_scores(scores, path):
    """Write a difficulty score table as JSONL."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for s in scores.values():
            f.write(
                json.dumps(
                    {
                        "problem_id": s.problem_id,
                        "score": s.score,
                        "n_rollouts": s.n_rollouts,
                        "estimated_at_step": s.estimated_at_step,
                        "successes": s.successes,
                    }
                )
                + "\n"
            )
    logger.info(f"Wrote {len(scores)} difficulty scores to {path}")
    return path


def read_order(path):
    """Read an ordering file: one problem id per line, or a JSONL score table."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.strip() for line in f if line.strip()]
    except FileNotFoundError:
        raise DatasetError(f"order file not found: {path}") from None
    if lines and lines[0].startswith("{"):
        try:
            records = [json.loads(line) for line in lines]
            return [r["problem_id"] for r in sorted(records, key=lambda r: r["score"])]
        except (KeyError, ValueError) as e:
            raise DatasetError(f"{path}: {e}") from None
    return lines
