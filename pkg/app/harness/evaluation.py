"""
Evaluation Module

pass@k over unguided samples. The i-th sample of a problem always comes
from the same stream, so pass@k for a smaller k is computed on a prefix of
the pool used for a larger k and can never exceed it.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from app.shared.errors import ValidationError
from app.shared.policy import NO_GUIDANCE, encode_context, sample_trajectory
from app.shared.seeding import stream
from app.shared.taskgen import verify_answer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PassAtK:
    k: int
    passed: dict
    correct: dict
    rate: float
    # index of the first correct sample per problem, None when all failed
    first_correct: dict = field(default_factory=dict)

    def unbiased_rate(self, k):
        """Mean unbiased pass@k over problems, estimated from this pool."""
        return float(np.mean([unbiased_pass_at_k(self.k, c, k) for c in self.correct.values()]))

    def prefix_rate(self, k):
        """pass@k on the first k samples of each problem's pool."""
        if not 1 <= k <= self.k:
            raise ValidationError(f"prefix k must be in [1, {self.k}], got {k}")
        if not self.first_correct:
            return 0.0
        hits = sum(i is not None and i < k for i in self.first_correct.values())
        return hits / len(self.first_correct)

    def curve(self, ks):
        return {k: self.prefix_rate(k) for k in sorted(set(ks))}


def sample_correctness(params, problem, n, temperature, seed, max_len=32, step=0):
    """Correctness of the first n pooled samples of a problem."""
    ctx = encode_context(problem, NO_GUIDANCE)
    outcomes = []
    for i in range(n):
        traj = sample_trajectory(params, ctx, temperature, max_len, stream(seed, "eval", problem.id, step, i))
        outcomes.append(verify_answer(problem, traj.tokens))
    return outcomes


def evaluate_pass_at_k(params, problems, k, temperature=0.7, seed=0, max_len=32, step=0):
    """
    Sample k unguided trajectories per problem; a problem passes iff any is correct.

    Args:
        params (PolicyParams): Policy to evaluate
        problems (sequence): Problems
        k (int): Samples per problem
        temperature (float): Sampling temperature
        seed (int): Seed of the sample pool
        max_len (int): Token budget
        step (int): Pool index, for evaluating at several training points

    Returns:
        PassAtK: Per-problem results and the aggregate rate
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    problems = list(problems)
    passed, correct, first = {}, {}, {}
    for problem in problems:
        outcomes = sample_correctness(params, problem, k, temperature, seed, max_len, step)
        passed[problem.id] = any(outcomes)
        correct[problem.id] = sum(outcomes)
        first[problem.id] = outcomes.index(True) if any(outcomes) else None
    rate = sum(passed.values()) / len(problems) if problems else 0.0
    logger.info(f"pass@{k} = {rate:.4f} over {len(problems)} problems")
    return PassAtK(k=k, passed=passed, correct=correct, rate=rate, first_correct=first)


def pass_at_k_curve(params, problems, ks, temperature=0.7, seed=0, max_len=32):
    """pass@k for several k from one pool of max(ks) samples per problem."""
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ValidationError("ks must be positive")
    result = evaluate_pass_at_k(params, problems, ks[-1], temperature, seed, max_len)
    return result.curve(ks)


def unbiased_pass_at_k(n, c, k):
    """
    Unbiased pass@k from n samples with c correct: 1 - C(n-c, k) / C(n, k).

    Uses the product form 1 - prod_{i<k} (n-c-i)/(n-i) for stability.
    """
    if not 0 <= c <= n:
        raise ValidationError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    product = 1.0
    for i in range(k):
        product *= (n - c - i) / (n - i)
    return 1.0 - product


def write_evaluation(result, path, curve_ks=()):
    """eval.json with unbiased and prefix pass@k for each of curve_ks and the pool size."""
    ks = sorted({result.k, *curve_ks})
    if ks[0] < 1 or ks[-1] > result.k:
        raise ValidationError(f"curve k must be in [1, {result.k}], got {ks}")
    record = {
        "k": result.k,
        "rate": result.rate,
        "unbiased": {str(k): result.unbiased_rate(k) for k in ks},
        "curve": {str(k): rate for k, rate in result.curve(ks).items()},
        "passed": result.passed,
        "correct": result.correct,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2)
    return path
