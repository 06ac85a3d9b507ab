"""
Reward Module

Composite rule-based reward: lambda1 * format + lambda2 * accuracy.
"""

from dataclasses import dataclass, replace

from app.shared.errors import ValidationError
from app.shared.taskgen import check_format, verify_answer


@dataclass(frozen=True)
class RewardConfig:
    lambda1: float = 1.0
    lambda2: float = 2.0

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError(
                f"reward weights must be >= 0, got {self.lambda1}, {self.lambda2}"
            )
        return self


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: int
    total: float


def score(problem, tokens, cfg=RewardConfig()):
    """Score a token sequence against a problem."""
    fmt = int(check_format(tokens))
    acc = int(verify_answer(problem, tokens))
    return RewardBreakdown(fmt, acc, cfg.lambda1 * fmt + cfg.lambda2 * acc)


def score_trajectory(problem, trajectory, cfg=RewardConfig()):
    """Return the trajectory with its reward attached."""
    return replace(trajectory, reward=score(problem, trajectory.tokens, cfg))
