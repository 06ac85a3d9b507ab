"""
EGSR Module

Expert-guided self-reformulation: when a rollout group earns nothing, the
old policy is re-sampled with guidance built from the expert solution,
the guided samples replace part of the group, and the mixed group is
optimized with the unguided context in every ratio numerator.

Also hosts the splice used by the naive off-policy baseline, which puts
expert-sampler trajectories into the group instead.
"""

import logging
from dataclasses import dataclass

from app.shared.errors import ValidationError
from app.shared.grpo import group_surrogate, make_group
from app.shared.policy import Guidance, encode_context, sample_trajectory
from app.shared.reward import RewardConfig

logger = logging.getLogger(__name__)

TRIGGERS = ("total_reward_zero", "accuracy_zero")
EGSR_MODES = ("answer_only", "solution_and_answer")


@dataclass(frozen=True)
class EgsrConfig:
    guided_count: int = 4
    trigger: str = "total_reward_zero"
    guidance_mode: str = "solution_and_answer"

    def validate(self, group_size=8):
        if not 1 <= self.guided_count < group_size:
            raise ValidationError(
                f"egsr.guided_count must be in [1, {group_size - 1}], got {self.guided_count}"
            )
        if self.trigger not in TRIGGERS:
            raise ValidationError(f"egsr.trigger must be one of {TRIGGERS}")
        if self.guidance_mode not in EGSR_MODES:
            raise ValidationError(f"egsr.guidance_mode must be one of {EGSR_MODES}")
        return self


def should_trigger(group, cfg):
    """True when the group earned no reward (total or accuracy, per cfg)."""
    rewards = [t.reward for t in group.trajectories]
    if any(r is None for r in rewards):
        raise ValidationError("should_trigger needs scored trajectories")
    if cfg.trigger == "accuracy_zero":
        return all(r.accuracy == 0 for r in rewards)
    return all(r.total == 0 for r in rewards)


def make_guidance(problem, mode):
    if mode == "answer_only":
        return Guidance(mode, answer=problem.answer)
    if mode == "solution_and_answer":
        if problem.expert_steps is None:
            raise ValidationError(f"{problem.id} has no expert solution")
        return Guidance(mode, answer=problem.answer, step_hints=tuple(problem.expert_steps))
    raise ValidationError(f"unknown guidance mode '{mode}'")


def can_guide(problem, mode):
    return mode == "answer_only" or problem.expert_steps is not None


def guided_rollouts(params_old, problem, guidance, count, cfg, max_len, rngs):
    """
    Sample `count` trajectories from the old policy under guidance.

    Args:
        params_old (PolicyParams): Policy at the start of the step
        problem (Problem): The problem
        guidance (Guidance): Guidance built by make_guidance
        count (int): Number of trajectories (M)
        cfg (GrpoConfig): Supplies the temperature
        max_len (int): Token budget
        rngs (sequence): One random stream per trajectory

    Returns:
        list: Trajectories tagged guided, log-probabilities recorded under guidance
    """
    if count < 1:
        raise ValidationError(f"guided count must be >= 1, got {count}")
    if len(rngs) < count:
        raise ValidationError("one random stream per guided trajectory is required")
    ctx = encode_context(problem, guidance)
    return [
        sample_trajectory(params_old, ctx, cfg.temperature, max_len, rng, provenance="guided")
        for rng in rngs[:count]
    ]


def _splice(group, replacements, reward_cfg):
    g, m = group.size, len(replacements)
    if not 1 <= m < g:
        raise ValidationError(f"cannot splice {m} trajectories into a group of {g}")
    kept = [t for t in group.trajectories if t.provenance == "on_policy"][: g - m]
    if len(kept) != g - m:
        raise ValidationError("group does not hold enough on-policy trajectories")
    mixed = make_group(group.problem, kept + list(replacements), reward_cfg)
    return mixed.with_advantages()


def assemble_mixed(group, guided, cfg, reward_cfg=RewardConfig()):
    """Keep the first G - M on-policy rollouts, append the guided ones, rescore."""
    if len(guided) != cfg.guided_count:
        raise ValidationError(
            f"expected {cfg.guided_count} guided trajectories, got {len(guided)}"
        )
    if any(t.provenance != "guided" for t in guided):
        raise ValidationError("assemble_mixed needs guided trajectories")
    return _splice(group, guided, reward_cfg)


def splice_offpolicy(group, expert_trajectories, reward_cfg=RewardConfig()):
    """Replace the tail of the group with expert-sampler trajectories."""
    if any(t.provenance != "external_expert" for t in expert_trajectories):
        raise ValidationError("splice_offpolicy needs external_expert trajectories")
    return _splice(group, expert_trajectories, reward_cfg)


def egsr_objective_and_grad(params, mixed, cfg, grpo_cfg, ref_params=None):
    """
    Objective of a mixed group: on-policy and guided subsets are averaged
    separately (1 / (G - M) and 1 / M) over pooled advantages.
    """
    if mixed.advantages is None:
        raise ValidationError("group advantages are not populated")
    if mixed.size == 0:
        raise ValidationError("empty rollout group")
    ref_params = params if ref_params is None else ref_params
    guided = sum(1 for p in mixed.provenance if p == "guided")
    on_policy = mixed.size - guided
    if guided > cfg.guided_count or on_policy == 0:
        raise ValidationError(
            f"mixed group has {guided} guided of {mixed.size} rollouts, "
            f"expected at most {cfg.guided_count} with at least one on-policy"
        )
    weights = [
        1.0 / guided if p == "guided" else 1.0 / on_policy for p in mixed.provenance
    ]
    return group_surrogate(
        params,
        mixed.problem,
        mixed.trajectories,
        mixed.advantages,
        weights,
        grpo_cfg,
        ref_params,
    )


def guided_success_rate(group):
    """Accuracy rate among the guided trajectories of a group, or None."""
    rewards = [t.reward for t in group.trajectories if t.provenance == "guided"]
    if not rewards:
        return None
    return sum(r.accuracy for r in rewards) / len(rewards)

