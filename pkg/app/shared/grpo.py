"""
GRPO Module

Group-normalized advantages, clipped importance ratios, the k3 KL penalty,
the clipped surrogate objective with its exact gradient, the importance
ratios of the naive off-policy baseline and the gradient-ascent update.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.shared.errors import NumericError, ValidationError
from app.shared.policy import (
    NO_GUIDANCE,
    Trajectory,
    encode_context,
    logprob_under,
    score_tokens,
    weighted_grad,
)
from app.shared.reward import RewardConfig, score_trajectory
from app.shared.taskgen import VOCAB_SIZE, Token, expert_solution_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    inner_iters: int = 4
    learning_rate: float = 1e-6
    temperature: float = 0.7

    def validate(self):
        if self.group_size < 2:
            raise ValidationError(f"grpo.group_size must be >= 2, got {self.group_size}")
        if self.clip_eps <= 0:
            raise ValidationError(f"grpo.clip_eps must be > 0, got {self.clip_eps}")
        if self.kl_beta < 0:
            raise ValidationError(f"grpo.kl_beta must be >= 0, got {self.kl_beta}")
        if self.inner_iters < 1:
            raise ValidationError(f"grpo.inner_iters must be >= 1, got {self.inner_iters}")
        if self.temperature <= 0:
            raise ValidationError(f"grpo.temperature must be > 0, got {self.temperature}")
        if self.learning_rate < 0:
            raise ValidationError("grpo.learning_rate must be >= 0")
        return self


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    problem: object
    trajectories: tuple
    rewards: tuple
    advantages: Optional[tuple] = None

    def __post_init__(self):
        if len(self.trajectories) != len(self.rewards):
            raise ValidationError("trajectories and rewards differ in length")
        if self.advantages is not None and len(self.advantages) != len(self.rewards):
            raise ValidationError("advantages and rewards differ in length")

    @property
    def provenance(self):
        return tuple(t.provenance for t in self.trajectories)

    @property
    def size(self):
        return len(self.trajectories)

    def with_advantages(self):
        return RolloutGroup(
            self.problem,
            self.trajectories,
            self.rewards,
            tuple(compute_advantages(self.rewards)),
        )


def make_group(problem, trajectories, reward_cfg=RewardConfig()):
    """Score trajectories and wrap them as a group without advantages."""
    scored = tuple(score_trajectory(problem, t, reward_cfg) for t in trajectories)
    return RolloutGroup(problem, scored, tuple(t.reward.total for t in scored))


def compute_advantages(rewards):
    """
    Standardize rewards with the population std.

    A group whose rewards are all equal gets all-zero advantages.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValidationError(f"need at least 2 rewards, got {rewards.size}")
    if np.all(rewards == rewards[0]):
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / rewards.std()


def _ratios(logp, gen_logprobs):
    log_r = np.asarray(logp) - np.asarray(gen_logprobs, dtype=np.float64)
    ratios = np.exp(log_r)
    bad = np.flatnonzero(~np.isfinite(ratios) | (ratios <= 0))
    if bad.size:
        raise NumericError("non-finite importance ratio", step=int(bad[0]))
    return ratios


def token_ratios(params_new, ctx_score, traj, temperature):
    """pi_new(y_t | ctx_score, y_<t) / exp(gen_logprobs_t) per token."""
    logp = logprob_under(params_new, ctx_score, traj.tokens, temperature)
    return _ratios(logp, traj.gen_logprobs)


def offpolicy_ratios(params_new, expert_traj, ctx, temperature):
    """Ratios against the expert sampler's recorded log-probabilities."""
    if expert_traj.provenance != "external_expert":
        raise ValidationError("offpolicy_ratios needs an external_expert trajectory")
    return token_ratios(params_new, ctx, expert_traj, temperature)


def clipped_term(ratio, advantage, eps):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A)."""
    clamped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clamped * advantage)


def kl_term(params, ref_params, ctx, traj, temperature):
    """Per-token k3 estimator exp(d) - d - 1 with d = log pi_ref - log pi."""
    delta = logprob_under(ref_params, ctx, traj.tokens, temperature) - logprob_under(
        params, ctx, traj.tokens, temperature
    )
    return np.exp(delta) - delta - 1.0


def group_surrogate(params, problem, trajectories, advantages, weights, cfg, ref_params):
    """
    Clipped surrogate over a set of trajectories and its gradient.

    Each trajectory i contributes weights[i] * mean_t[clip term - beta * kl].
    Numerators are always scored under the unguided context of the problem.

    Args:
        params (PolicyParams): Current policy
        problem (Problem): The problem all trajectories answer
        trajectories (sequence): Trajectories carrying gen_logprobs
        advantages (sequence): One advantage per trajectory
        weights (sequence): One outer weight per trajectory
        cfg (GrpoConfig): Clip, KL and temperature settings
        ref_params (PolicyParams): Reference policy of the KL term

    Returns:
        tuple: (objective, flat gradient)
    """
    ctx = encode_context(problem, NO_GUIDANCE)
    temperature, eps, beta = cfg.temperature, cfg.clip_eps, cfg.kl_beta
    objective = 0.0
    grad = np.zeros(params.layout.n_params)

    for traj, advantage, weight in zip(trajectories, advantages, weights):
        length = len(traj.tokens)
        if length == 0:
            raise ValidationError(f"zero-length trajectory for {problem.id}")
        scored = score_tokens(params, ctx, traj.tokens, temperature)
        logp = scored.token_logprobs
        ratios = _ratios(logp, traj.gen_logprobs)

        unclipped = ratios * advantage
        clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps) * advantage
        terms = np.minimum(unclipped, clipped)
        token_w = np.where(unclipped <= clipped, unclipped, 0.0)

        if beta > 0:
            ref_logp = score_tokens(ref_params, ctx, traj.tokens, temperature).token_logprobs
            delta = ref_logp - logp
            terms = terms - beta * (np.exp(delta) - delta - 1.0)
            token_w = token_w + beta * (np.exp(delta) - 1.0)

        objective += weight * float(np.sum(terms)) / length
        if np.any(token_w != 0.0):
            grad += weighted_grad(params, scored, token_w * (weight / length), temperature)

    if not math.isfinite(objective):
        raise NumericError(f"non-finite objective for {problem.id}")
    return objective, grad


def grpo_objective_and_grad(params, group, cfg, ref_params=None):
    """The GRPO objective of one group with advantages populated."""
    if group.advantages is None:
        raise ValidationError("group advantages are not populated")
    if group.size == 0:
        raise ValidationError("empty rollout group")
    ref_params = params if ref_params is None else ref_params
    weights = [1.0 / group.size] * group.size
    return group_surrogate(
        params, group.problem, group.trajectories, group.advantages, weights, cfg, ref_params
    )


def sgd_step(params, grad, learning_rate):
    """Gradient ascent: theta + lr * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError(f"non-finite gradient entry {bad}")
    return params.with_theta(params.theta + learning_rate * grad)


@dataclass(frozen=True)
class ExpertSampler:
    """
    Constructed expert policy for the off-policy baseline.

    Emits the expert dialect token with probability `fidelity` and any other
    token uniformly otherwise; stops early if it happens to emit END.
    """

    fidelity: float = 0.99
    vocab_size: int = VOCAB_SIZE

    def validate(self):
        if not 0.0 < self.fidelity < 1.0:
            raise ValidationError(f"expert fidelity must be in (0, 1), got {self.fidelity}")
        return self

    def sample(self, problem, rng):
        expert = expert_solution_tokens(problem)
        hit = math.log(self.fidelity)
        miss = math.log((1.0 - self.fidelity) / (self.vocab_size - 1))
        tokens, logprobs = [], []
        for target in expert:
            if rng.random() < self.fidelity:
                token, logprob = target, hit
            else:
                other = int(rng.integers(0, self.vocab_size - 1))
                token, logprob = other + (other >= target), miss
            tokens.append(int(token))
            logprobs.append(logprob)
            if token == Token.END:
                break
        return Trajectory(
            problem_id=problem.id,
            tokens=tuple(tokens),
            gen_logprobs=tuple(logprobs),
            guidance_mode="none",
            provenance="external_expert",
        )
