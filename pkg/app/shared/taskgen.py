"""
Task Generation Module

Seeded modular-arithmetic chain problems with an expert oracle, the token
vocabulary they are written in, format checking and answer verification,
and the line-delimited dataset file.

A problem is a start value v0 and a chain of (operator, operand) pairs;
each step computes v_i = (v_{i-1} op k_i) mod 10 and the answer is v_n.
"""

import json
import logging
import os
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional

import numpy as np

from app.shared.errors import DatasetError, ValidationError

logger = logging.getLogger(__name__)

MODULUS = 10
N_LIMIT = 12
OPERATORS = ("add", "sub", "mul")
DATASET_FIELDS = (
    "id",
    "initial_value",
    "ops",
    "expert_steps",
    "answer",
    "predefined_rank",
)


class Token(IntEnum):
    D0 = 0
    D1 = 1
    D2 = 2
    D3 = 3
    D4 = 4
    D5 = 5
    D6 = 6
    D7 = 7
    D8 = 8
    D9 = 9
    STEP = 10
    ANS = 11
    END = 12
    PAD = 13


VOCAB_SIZE = len(Token)


def digit(value):
    """Token id of a digit value."""
    return int(value)


def is_digit(token):
    return 0 <= int(token) <= 9


def apply_op(value, op, operand):
    """One chain step; sub wraps to stay non-negative."""
    if op == "add":
        return (value + operand) % MODULUS
    if op == "sub":
        return (value - operand) % MODULUS
    if op == "mul":
        return (value * operand) % MODULUS
    raise ValidationError(f"unknown operator '{op}'")


def evaluate_chain(initial_value, ops):
    """Return the intermediate values v_1..v_n of a chain."""
    values = []
    value = initial_value
    for op, operand in ops:
        value = apply_op(value, op, operand)
        values.append(value)
    return tuple(values)


@dataclass(frozen=True)
class TaskSpec:
    modulus: int = MODULUS
    chain_length_range: tuple = (2, 6)
    op_set: tuple = OPERATORS
    count: int = 400
    seed: int = 0

    def validate(self):
        n_min, n_max = self.chain_length_range
        if self.modulus != MODULUS:
            raise ValidationError(f"modulus must be {MODULUS}, got {self.modulus}")
        if n_min < 2:
            raise ValidationError(f"n_min must be >= 2, got {n_min}")
        if n_max < n_min:
            raise ValidationError(f"n_max must be >= n_min, got {n_max} < {n_min}")
        if n_max > N_LIMIT:
            raise ValidationError(f"n_max must be <= {N_LIMIT}, got {n_max}")
        if not self.op_set:
            raise ValidationError("op_set must be non-empty")
        unknown = [op for op in self.op_set if op not in OPERATORS]
        if unknown:
            raise ValidationError(f"op_set contains unknown operators {unknown}")
        if self.count < 1:
            raise ValidationError(f"count must be >= 1, got {self.count}")
        return self


@dataclass(frozen=True)
class Problem:
    id: str
    initial_value: int
    ops: tuple
    expert_steps: Optional[tuple]
    answer: int
    predefined_rank: Optional[int] = None

    @property
    def chain_length(self):
        return len(self.ops)

    @property
    def has_expert(self):
        return self.expert_steps is not None

    def validate(self):
        """Check chain consistency; raises ValidationError."""
        if not 0 <= self.initial_value < MODULUS:
            raise ValidationError(
                f"{self.id}: initial_value {self.initial_value} outside [0, 9]"
            )
        for op, operand in self.ops:
            if op not in OPERATORS or not 0 <= operand < MODULUS:
                raise ValidationError(f"{self.id}: invalid op ({op}, {operand})")
        values = evaluate_chain(self.initial_value, self.ops)
        if self.expert_steps is not None and tuple(self.expert_steps) != values:
            raise ValidationError(f"{self.id}: expert_steps do not match the chain")
        if not values or self.answer != values[-1]:
            raise ValidationError(f"{self.id}: answer does not match the chain")
        return self


def make_problem(problem_id, initial_value, ops, with_expert=True, rank=None):
    """Build a problem and derive its expert steps and answer."""
    ops = tuple((op, int(operand)) for op, operand in ops)
    values = evaluate_chain(int(initial_value), ops)
    return Problem(
        id=problem_id,
        initial_value=int(initial_value),
        ops=ops,
        expert_steps=values if with_expert else None,
        answer=values[-1],
        predefined_rank=rank,
    )


def build_dataset(spec):
    """
    Generate spec.count problems, a pure function of the spec.

    Args:
        spec (TaskSpec): Generation parameters

    Returns:
        list: Problems with unique ids
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A5C]))
    n_min, n_max = spec.chain_length_range
    op_set = tuple(op for op in OPERATORS if op in spec.op_set)

    problems = []
    for index in range(spec.count):
        length = int(rng.integers(n_min, n_max + 1))
        initial_value = int(rng.integers(0, MODULUS))
        op_idx = rng.integers(0, len(op_set), size=length)
        operands = rng.integers(0, MODULUS, size=length)
        ops = [(op_set[int(i)], int(k)) for i, k in zip(op_idx, operands)]
        problems.append(make_problem(f"chain-{index:05d}", initial_value, ops))

    logger.info(f"Generated {len(problems)} problems (seed={spec.seed})")
    return problems


def expert_solution_tokens(problem):
    """The expert dialect: STEP-marked intermediate values, then the answer."""
    if problem.expert_steps is None:
        raise ValidationError(f"{problem.id} has no expert solution")
    tokens = []
    for value in problem.expert_steps:
        tokens.extend((Token.STEP, digit(value)))
    tokens.extend((Token.ANS, digit(problem.answer), Token.END))
    return tuple(int(t) for t in tokens)


def check_format(tokens):
    """True iff the only ANS is followed by one digit and a terminal END; earlier tokens are free."""
    tokens = list(tokens)
    if len(tokens) < 3 or tokens.count(Token.ANS) != 1:
        return False
    return tokens[-1] == Token.END and tokens[-3] == Token.ANS and is_digit(tokens[-2])


def extract_answer(tokens):
    """Digit after ANS for well-formed sequences, else None."""
    if not check_format(tokens):
        return None
    return int(tokens[-2])


def verify_answer(problem, tokens):
    answer = extract_answer(tokens)
    return answer is not None and answer == problem.answer


def render_tokens(tokens):
    return " ".join(Token(t).name for t in tokens)


def parse_tokens(text):
    try:
        return tuple(int(Token[name]) for name in text.split())
    except KeyError as e:
        raise ValidationError(f"unknown token {e}") from None


def problem_to_record(problem):
    """Ordered dict of the dataset fields."""
    return {
        "id": problem.id,
        "initial_value": problem.initial_value,
        "ops": [[op, operand] for op, operand in problem.ops],
        "expert_steps": (
            list(problem.expert_steps) if problem.expert_steps is not None else None
        ),
        "answer": problem.answer,
        "predefined_rank": problem.predefined_rank,
    }


def write_dataset(problems, path):
    """Write problems as UTF-8 JSON lines in the fixed field order."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for problem in problems:
            f.write(json.dumps(problem_to_record(problem)) + "\n")
    logger.info(f"Wrote {len(problems)} problems to {path}")
    return path


def read_dataset(path):
    """Read and validate a dataset file; raises DatasetError."""
    problems = []
    seen = set()
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                    steps = record["expert_steps"]
                    problem = Problem(
                        id=str(record["id"]),
                        initial_value=int(record["initial_value"]),
                        ops=tuple((op, int(k)) for op, k in record["ops"]),
                        expert_steps=tuple(steps) if steps is not None else None,
                        answer=int(record["answer"]),
                        predefined_rank=record.get("predefined_rank"),
                    ).validate()
                except (KeyError, TypeError, ValueError) as e:
                    raise DatasetError(f"{path}:{line_no}: {e}") from None
                if problem.id in seen:
                    raise DatasetError(f"{path}:{line_no}: duplicate id {problem.id}")
                seen.add(problem.id)
                problems.append(problem)
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None
    logger.info(f"Loaded {len(problems)} problems from {path}")
    return problems


def with_ranks(problems, ranks):
    """Copy problems with predefined_rank taken from an id -> rank mapping."""
    return [replace(p, predefined_rank=ranks.get(p.id, p.predefined_rank)) for p in problems]
