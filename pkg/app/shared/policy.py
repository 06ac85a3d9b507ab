"""
Policy Module

The featurized softmax autoregressive policy: contexts (problem + guidance
encodings), the versioned feature layout, sampling, scoring, analytic
gradients and perplexity, plus constructors for the initial policies used
by experiments.

Every feature is binary, so a feature row is stored as the array of its
active indices (padded with a sentinel that points at an all-zero column).
Logits for token v at a step are sum(theta[v, active]) / temperature.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from scipy.special import log_softmax

from app.shared.errors import NumericError, ValidationError
from app.shared.seeding import stream
from app.shared.taskgen import (
    MODULUS,
    OPERATORS,
    VOCAB_SIZE,
    Token,
    apply_op,
    is_digit,
)

logger = logging.getLogger(__name__)

LAYOUT_VERSION = 1
GUIDANCE_MODES = ("none", "answer_only", "solution_and_answer")
PROVENANCES = ("on_policy", "guided", "external_expert")
SKILL_PROFILES = ("binary", "graded")

ALL_BLOCKS = (
    "bias",
    "last_token",
    "prev_token",
    "position",
    "operator",
    "operand",
    "transition",
    "answer_value",
    "guide_answer",
    "guide_hint",
)
GUIDANCE_BLOCKS = ("guide_answer", "guide_hint")
OP_DONE = len(OPERATORS)
NO_TOKEN = VOCAB_SIZE


@dataclass(frozen=True)
class PolicyConfig:
    max_len: int = 32
    position_cap: int = 16
    init: str = "base"
    base_skills: tuple = (("add", 1.0), ("sub", 0.5), ("mul", 0.2))
    base_strength: float = 4.0
    format_strength: float = 4.0
    guidance_strength: float = 3.0
    skill_profile: str = "binary"
    misconception_strength: float = 0.0

    def validate(self):
        if self.max_len < 3:
            raise ValidationError(f"policy.max_len must be >= 3, got {self.max_len}")
        if self.position_cap < 1:
            raise ValidationError("policy.position_cap must be >= 1")
        if self.init not in ("zero", "base"):
            raise ValidationError(f"policy.init must be zero or base, got {self.init}")
        for op, fraction in self.base_skills:
            if op not in OPERATORS or not 0.0 <= fraction <= 1.0:
                raise ValidationError(f"policy.base_skills entry {op}:{fraction} invalid")
        if self.skill_profile not in SKILL_PROFILES:
            raise ValidationError(f"policy.skill_profile must be one of {SKILL_PROFILES}")
        if self.misconception_strength < 0.0:
            raise ValidationError("policy.misconception_strength must be >= 0")
        return self


@dataclass(frozen=True)
class FeatureLayout:
    """Named blocks of binary features; theta is laid out token-major."""

    blocks: tuple = ALL_BLOCKS
    position_cap: int = 16
    vocab_size: int = VOCAB_SIZE
    version: int = LAYOUT_VERSION

    def __post_init__(self):
        unknown = [b for b in self.blocks if b not in ALL_BLOCKS]
        if unknown or len(set(self.blocks)) != len(self.blocks):
            raise ValidationError(f"invalid feature blocks {self.blocks}")

    def block_size(self, name):
        sizes = {
            "bias": 1,
            "last_token": self.vocab_size + 1,
            "prev_token": self.vocab_size + 1,
            "position": self.position_cap,
            "operator": len(OPERATORS) + 1,
            "operand": MODULUS,
            "transition": MODULUS * len(OPERATORS) * MODULUS,
            "answer_value": MODULUS,
            "guide_answer": MODULUS,
            "guide_hint": MODULUS,
        }
        return sizes[name]

    @cached_property
    def offsets(self):
        offsets, start = {}, 0
        for name in self.blocks:
            offsets[name] = start
            start += self.block_size(name)
        return offsets

    @cached_property
    def feature_dim(self):
        return sum(self.block_size(name) for name in self.blocks)

    @property
    def n_params(self):
        return self.vocab_size * self.feature_dim

    def has(self, name):
        return name in self.offsets

    def index(self, block, offset=0):
        """Feature index of an entry of a block."""
        return self.offsets[block] + offset

    def flat_index(self, token, feature):
        """Position of (token, feature) in the flat theta vector."""
        if not (0 <= token < self.vocab_size and 0 <= feature < self.feature_dim):
            raise ValidationError(f"({token}, {feature}) outside the layout")
        return int(token) * self.feature_dim + int(feature)

    def block_slice(self, name):
        start = self.offsets[name]
        return slice(start, start + self.block_size(name))

    def describe(self):
        return {
            "version": self.version,
            "vocab_size": self.vocab_size,
            "position_cap": self.position_cap,
            "blocks": [[name, self.block_size(name)] for name in self.blocks],
        }

    @cached_property
    def hash(self):
        text = json.dumps(self.describe(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class PolicyParams:
    theta: np.ndarray
    layout: FeatureLayout
    version: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.layout.n_params:
            raise ValidationError(
                f"theta has {theta.size} entries, layout needs {self.layout.n_params}"
            )
        if not np.all(np.isfinite(theta)):
            raise NumericError("theta contains non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def weights(self):
        """(V, F) view of theta."""
        return self.theta.reshape(self.layout.vocab_size, self.layout.feature_dim)

    @cached_property
    def padded_weights(self):
        """Weights with an extra all-zero sentinel column."""
        w = np.zeros((self.layout.vocab_size, self.layout.feature_dim + 1))
        w[:, :-1] = self.weights
        return w

    def with_theta(self, theta):
        return PolicyParams(theta, self.layout, self.version + 1)

    def equals(self, other):
        return (
            self.layout.hash == other.layout.hash
            and np.array_equal(self.theta, other.theta)
        )


@dataclass(frozen=True)
class Guidance:
    mode: str = "none"
    answer: Optional[int] = None
    step_hints: Optional[tuple] = None

    def validate(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValidationError(f"unknown guidance mode '{self.mode}'")
        if (self.answer is not None) != (self.mode != "none"):
            raise ValidationError("guidance answer must be present iff mode != none")
        if (self.step_hints is not None) != (self.mode == "solution_and_answer"):
            raise ValidationError(
                "guidance step_hints must be present iff mode = solution_and_answer"
            )
        return self


NO_GUIDANCE = Guidance()


@dataclass(frozen=True, eq=False)
class Context:
    problem: object
    guidance: Guidance

    @property
    def key(self):
        return (self.problem, self.guidance)


@dataclass(frozen=True)
class Trajectory:
    problem_id: str
    tokens: tuple
    gen_logprobs: tuple
    guidance_mode: str = "none"
    provenance: str = "on_policy"
    reward: object = None

    def __post_init__(self):
        if len(self.tokens) != len(self.gen_logprobs):
            raise ValidationError("gen_logprobs length must equal tokens length")
        if any(lp > 0.0 for lp in self.gen_logprobs):
            raise ValidationError("gen_logprobs must be <= 0")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance '{self.provenance}'")

    def __len__(self):
        return len(self.tokens)


@dataclass
class DecodeState:
    """Prefix summary the feature map depends on."""

    running: int
    position: int = 0
    last: int = NO_TOKEN
    prev: int = NO_TOKEN
    digits: int = 0
    answered: bool = False

    def advance(self, token):
        token = int(token)
        if not self.answered:
            if is_digit(token):
                self.digits += 1
                self.running = token
            elif token == Token.ANS:
                self.answered = True
        self.prev, self.last = self.last, token
        self.position += 1


def encode_context(problem, guidance=NO_GUIDANCE):
    """
    Encode a problem and its guidance.

    Args:
        problem (Problem): The task instance
        guidance (Guidance): Guidance derived from the expert solution

    Returns:
        Context: The validated pair; phi reads problem features from the
            problem and guidance features from the guidance
    """
    guidance.validate()
    if guidance.answer is not None and guidance.answer != problem.answer:
        raise ValidationError(
            f"guidance answer {guidance.answer} does not match {problem.id}"
        )
    if guidance.step_hints is not None and (
        problem.expert_steps is None
        or tuple(guidance.step_hints) != tuple(problem.expert_steps)
    ):
        raise ValidationError(f"guidance step hints do not match {problem.id}")

    return Context(problem, guidance)


def _active(layout, problem, guidance, state):
    """Active feature indices for one decode step."""
    active = []
    n = len(problem.ops)
    in_chain = not state.answered and state.digits < n
    for name in layout.blocks:
        base = layout.offsets[name]
        if name == "bias":
            active.append(base)
        elif name == "last_token":
            active.append(base + state.last)
        elif name == "prev_token":
            active.append(base + state.prev)
        elif name == "position":
            active.append(base + min(state.position, layout.position_cap - 1))
        elif name == "operator" and not state.answered:
            op = OPERATORS.index(problem.ops[state.digits][0]) if in_chain else OP_DONE
            active.append(base + op)
        elif name == "operand" and in_chain:
            active.append(base + problem.ops[state.digits][1])
        elif name == "transition" and in_chain:
            op, operand = problem.ops[state.digits]
            code = (state.running * len(OPERATORS) + OPERATORS.index(op)) * MODULUS
            active.append(base + code + operand)
        elif name == "answer_value" and state.last == Token.ANS:
            active.append(base + state.running)
        elif (
            name == "guide_answer"
            and state.last == Token.ANS
            and guidance.answer is not None
        ):
            active.append(base + guidance.answer)
        elif name == "guide_hint" and in_chain and guidance.step_hints is not None:
            active.append(base + guidance.step_hints[state.digits])
    return active


def _row(layout, problem, guidance, state):
    row = np.full(len(layout.blocks), layout.feature_dim, dtype=np.int64)
    active = _active(layout, problem, guidance, state)
    row[: len(active)] = active
    return row


@lru_cache(maxsize=32768)
def _active_matrix(layout, problem, guidance, tokens):
    state = DecodeState(running=problem.initial_value)
    rows = np.full((len(tokens), len(layout.blocks)), layout.feature_dim, dtype=np.int64)
    for t, token in enumerate(tokens):
        rows[t] = _row(layout, problem, guidance, state)
        state.advance(token)
    rows.setflags(write=False)
    return rows


def active_matrix(layout, ctx, tokens):
    """(L, blocks) active indices of phi(ctx, tokens[:t]) for each t."""
    return _active_matrix(layout, ctx.problem, ctx.guidance, tuple(int(t) for t in tokens))


def feature_matrix(layout, ctx, tokens):
    """Dense (L, F) feature rows, for inspection and tests."""
    active = active_matrix(layout, ctx, tokens)
    dense = np.zeros((len(active), layout.feature_dim + 1))
    for t, row in enumerate(active):
        dense[t, row] = 1.0
    return dense[:, :-1]


def _log_probs(params, active, temperature):
    """Row-wise log-softmax of the logits for a stack of active rows."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    logits = params.padded_weights[:, active].sum(axis=2).T / temperature
    if not np.all(np.isfinite(logits)):
        bad = int(np.argwhere(~np.isfinite(logits))[0][0])
        raise NumericError("non-finite logits", step=bad)
    return log_softmax(logits, axis=1)


def token_distribution(params, ctx, prefix, temperature):
    """Next-token probabilities after a prefix."""
    state = DecodeState(running=ctx.problem.initial_value)
    for token in prefix:
        state.advance(token)
    row = _row(params.layout, ctx.problem, ctx.guidance, state)
    return np.exp(_log_probs(params, row[None, :], temperature)[0])


def sample_trajectory(
    params, ctx, temperature, max_len, rng, provenance="on_policy"
):
    """
    Sample until END or max_len tokens.

    Args:
        params (PolicyParams): Generating policy
        ctx (Context): Conditioning context
        temperature (float): Sampling temperature
        max_len (int): Token budget
        rng (numpy.random.Generator): Random stream

    Returns:
        Trajectory: Tokens with log-probabilities under the sampling distribution
    """
    layout, problem, guidance = params.layout, ctx.problem, ctx.guidance
    state = DecodeState(running=problem.initial_value)
    tokens, logprobs = [], []
    while len(tokens) < max_len:
        row = _row(layout, problem, guidance, state)
        logp = _log_probs(params, row[None, :], temperature)[0]
        cdf = np.cumsum(np.exp(logp))
        token = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                    layout.vocab_size - 1)
        tokens.append(token)
        logprobs.append(min(float(logp[token]), 0.0))
        state.advance(token)
        if token == Token.END:
            break
    return Trajectory(
        problem_id=problem.id,
        tokens=tuple(tokens),
        gen_logprobs=tuple(logprobs),
        guidance_mode=guidance.mode,
        provenance=provenance,
    )


@dataclass(frozen=True, eq=False)
class Scored:
    """Log-probabilities of a token sequence plus what the gradient needs."""

    tokens: tuple
    active: np.ndarray
    log_probs: np.ndarray = field(repr=False)

    @property
    def token_logprobs(self):
        return self.log_probs[np.arange(len(self.tokens)), list(self.tokens)]


def score_tokens(params, ctx, tokens, temperature):
    tokens = tuple(int(t) for t in tokens)
    if any(not 0 <= t < params.layout.vocab_size for t in tokens):
        raise ValidationError("token outside the vocabulary")
    active = active_matrix(params.layout, ctx, tokens)
    if not tokens:
        return Scored(tokens, active, np.zeros((0, params.layout.vocab_size)))
    return Scored(tokens, active, _log_probs(params, active, temperature))


def logprob_under(params, ctx, tokens, temperature):
    """Per-token log-probabilities of a sequence under params and ctx."""
    return np.minimum(score_tokens(params, ctx, tokens, temperature).token_logprobs, 0.0)


def weighted_grad(params, scored, weights, temperature):
    """Gradient of sum_t weights[t] * log pi(y_t) as a flat vector."""
    layout = params.layout
    grad = np.zeros((layout.feature_dim + 1, layout.vocab_size))
    if len(scored.tokens):
        weights = np.asarray(weights, dtype=np.float64)
        coef = -np.exp(scored.log_probs)
        coef[np.arange(len(scored.tokens)), list(scored.tokens)] += 1.0
        coef *= (weights / temperature)[:, None]
        blocks = scored.active.shape[1]
        np.add.at(grad, scored.active.reshape(-1), np.repeat(coef, blocks, axis=0))
    return np.ascontiguousarray(grad[:-1].T).reshape(-1)


def grad_logprob(params, ctx, tokens, temperature):
    """Analytic gradient of the summed log-probability."""
    scored = score_tokens(params, ctx, tokens, temperature)
    return weighted_grad(params, scored, np.ones(len(scored.tokens)), temperature)


def perplexity(params, ctx, tokens):
    """exp(-mean log-probability) at temperature 1."""
    if len(tokens) == 0:
        raise ValidationError("perplexity of an empty sequence")
    return float(math.exp(-float(np.mean(logprob_under(params, ctx, tokens, 1.0)))))


# Initial policies


def zero_params(layout):
    return PolicyParams(np.zeros(layout.n_params), layout)


def _add(w, layout, token, block, offset, value):
    if layout.has(block):
        w[int(token), layout.index(block, offset)] += value


def build_copy_hint_policy(layout, strength=10.0):
    """Policy that only copies the per-step guidance hint."""
    w = np.zeros((layout.vocab_size, layout.feature_dim))
    for d in range(MODULUS):
        _add(w, layout, d, "guide_hint", d, strength)
    return PolicyParams(w, layout)


def build_base_policy(layout, cfg, seed=0, skills=None, strength=None):
    """
    Construct the starting policy of an experiment.

    The policy knows the output format, a seeded fraction of the
    transitions of each operator, and follows guidance features. The
    graded skill profile instead gives every transition a seeded strength
    between 0 and base_strength, saturating for a fraction 2 * skill of
    them, so skills improve unevenly across problems during training.
    With misconception_strength > 0 every transition short of full
    strength also leans towards a seeded wrong result, so the policy
    fails consistently where it is unsure instead of guessing.

    Args:
        layout (FeatureLayout): Feature layout
        cfg (PolicyConfig): Strengths and skill fractions
        seed (int): Seed selecting which transitions are known
        skills (tuple, optional): Overrides cfg.base_skills
        strength (float, optional): Overrides cfg.base_strength

    Returns:
        PolicyParams: The constructed parameters
    """
    skills = dict(cfg.base_skills if skills is None else skills)
    strength = cfg.base_strength if strength is None else strength
    f, g = cfg.format_strength, cfg.guidance_strength
    w = np.zeros((layout.vocab_size, layout.feature_dim))

    _add(w, layout, Token.ANS, "operator", OP_DONE, f)
    for d in range(MODULUS):
        for op_index in range(len(OPERATORS)):
            _add(w, layout, d, "operator", op_index, f / 2)
        _add(w, layout, d, "answer_value", d, f)
        _add(w, layout, d, "guide_hint", d, g)
        _add(w, layout, d, "guide_answer", d, g)
    _add(w, layout, Token.END, "prev_token", Token.ANS, f)

    rng = stream(seed, "init")
    wrong_rng = stream(seed, "init", "misconception")
    m = cfg.misconception_strength
    known = 0
    for op_index, op in enumerate(OPERATORS):
        fraction = skills.get(op, 0.0)
        draws = rng.random((MODULUS, MODULUS))
        shifts = wrong_rng.integers(1, MODULUS, size=(MODULUS, MODULUS))
        if cfg.skill_profile == "graded":
            weights = strength * np.minimum(1.0, 2.0 * fraction * draws)
        else:
            weights = np.where(draws < fraction, strength, 0.0)
        for v in range(MODULUS):
            for k in range(MODULUS):
                code = (v * len(OPERATORS) + op_index) * MODULUS + k
                result = apply_op(v, op, k)
                if weights[v, k] > 0.0:
                    _add(w, layout, result, "transition", code, weights[v, k])
                known += int(draws[v, k] < fraction)
                if m > 0.0 and weights[v, k] < strength:
                    # transitions short of full strength lean towards one wrong result
                    _add(w, layout, (result + shifts[v, k]) % MODULUS, "transition", code, m)
    logger.info(f"Built {cfg.skill_profile} base policy with {known} known transitions")
    return PolicyParams(w, layout)


def build_initial_policy(layout, cfg, seed=0):
    if cfg.init == "zero":
        return zero_params(layout)
    return build_base_policy(layout, cfg, seed)

