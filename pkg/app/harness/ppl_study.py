"""
PPL Study Module

Perplexity of four kinds of trajectories under the unguided current policy,
one row per checkpoint: fresh unguided samples, expert token sequences,
samples guided by solution and answer, and samples guided by the answer.
"""

import csv
import logging
import os
from dataclasses import astuple, dataclass, fields

import numpy as np

from app.shared.egsr import make_guidance
from app.shared.errors import ValidationError
from app.shared.policy import NO_GUIDANCE, encode_context, perplexity, sample_trajectory
from app.shared.seeding import streams
from app.shared.taskgen import expert_solution_tokens

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PplRow:
    checkpoint: str
    unguided: float
    expert: float
    guided_solution_answer: float
    guided_answer: float


PPL_FIELDS = tuple(f.name for f in fields(PplRow))


def ppl_study(checkpoints, probe, seed, samples_per_problem=4, temperature=0.7, max_len=32):
    """
    Mean perplexity of each trajectory type, per checkpoint.

    Args:
        checkpoints (sequence): (label, PolicyParams) pairs
        probe (sequence): Problems with expert solutions
        seed (int): Seed of the sampled trajectories
        samples_per_problem (int): Samples per problem for each sampled type
        temperature (float): Sampling temperature
        max_len (int): Token budget

    Returns:
        list: One PplRow per checkpoint
    """
    probe = list(probe)
    if not probe:
        raise ValidationError("probe set is empty")
    missing = [p.id for p in probe if not p.has_expert]
    if missing:
        raise ValidationError(f"probe problem {missing[0]} has no expert solution")

    rows = []
    for index, (label, params) in enumerate(checkpoints):
        values = {"unguided": [], "expert": [], "guided_solution_answer": [], "guided_answer": []}
        for problem in probe:
            scoring_ctx = encode_context(problem, NO_GUIDANCE)
            sources = (
                ("unguided", scoring_ctx),
                ("guided_solution_answer", encode_context(problem, make_guidance(problem, "solution_and_answer"))),
                ("guided_answer", encode_context(problem, make_guidance(problem, "answer_only"))),
            )
            for offset, (name, sampling_ctx) in enumerate(sources):
                rngs = streams(seed, "ppl", problem.id, index, samples_per_problem, offset * samples_per_problem)
                for rng in rngs:
                    traj = sample_trajectory(params, sampling_ctx, temperature, max_len, rng)
                    values[name].append(perplexity(params, scoring_ctx, traj.tokens))
            values["expert"].append(perplexity(params, scoring_ctx, expert_solution_tokens(problem)))
        row = PplRow(str(label), **{name: float(np.mean(v)) for name, v in values.items()})
        logger.info(
            f"PPL {row.checkpoint}: unguided={row.unguided:.3f} expert={row.expert:.3f} "
            f"guided(s,a)={row.guided_solution_answer:.3f} guided(a)={row.guided_answer:.3f}"
        )
        rows.append(row)
    return rows


def write_ppl_table(rows, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PPL_FIELDS)
        for row in rows:
            writer.writerow(astuple(row))
    return path


def read_ppl_table(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            PplRow(r["checkpoint"], *(float(r[name]) for name in PPL_FIELDS[1:]))
            for r in csv.DictReader(f)
        ]
