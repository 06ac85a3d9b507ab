"""
Run configuration.

Layering, lowest precedence first: preset -> key=value config file ->
environment (.env via python-dotenv) -> CLI overrides. Every value lives
under a dotted key such as grpo.clip_eps; unknown keys are rejected.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

from dotenv import load_dotenv

from app.shared.curriculum import SHIFT_WINDOWS, STRATEGIES
from app.shared.egsr import EgsrConfig
from app.shared.errors import ConfigError, ValidationError
from app.shared.grpo import GrpoConfig
from app.shared.policy import PolicyConfig
from app.shared.reward import RewardConfig
from app.shared.taskgen import OPERATORS, TaskSpec

load_dotenv()

logger = logging.getLogger(__name__)

GUIDANCE_STRATEGIES = ("none", "offpolicy", "egsr-a", "egsr-sa")
EGSR_GUIDANCE = {"egsr-a": "answer_only", "egsr-sa": "solution_and_answer"}

DEFAULTS = {
    "task.modulus": 10,
    "task.n_min": 2,
    "task.n_max": 6,
    "task.op_set": ("add", "sub", "mul"),
    "task.count": 400,
    "task.seed": 0,
    "reward.lambda1": 1.0,
    "reward.lambda2": 2.0,
    "grpo.group_size": 8,
    "grpo.clip_eps": 0.2,
    "grpo.kl_beta": 0.0,
    "grpo.inner_iters": 4,
    "grpo.learning_rate": 1e-6,
    "grpo.temperature": 0.7,
    "egsr.guided_count": 4,
    "egsr.trigger": "total_reward_zero",
    "egsr.guidance_mode": "auto",
    "policy.max_len": 32,
    "policy.position_cap": 16,
    "policy.init": "base",
    "policy.base_skills": (("add", 1.0), ("sub", 0.5), ("mul", 0.2)),
    "policy.base_strength": 4.0,
    "policy.format_strength": 4.0,
    "policy.guidance_strength": 3.0,
    "policy.skill_profile": "binary",
    "policy.misconception_strength": 0.0,
    "curriculum.strategy": "adcl",
    "curriculum.k": 4,
    "curriculum.n_rollouts_estimate": 32,
    "curriculum.n_rollouts_reestimate": 32,
    "curriculum.track_shift": False,
    "curriculum.shift_window": "last",
    "train.guidance": "egsr-sa",
    "train.problems_per_step": 8,
    "train.steps_per_batch": -1,
    "train.seeds": (0,),
    "train.output_dir": "output",
    "train.preset_name": "paper",
    "train.record_wall_time": False,
    "train.expert_fidelity": 0.99,
    "eval.pass_at_k": 8,
    "ppl.samples_per_problem": 4,
    "ppl.probe_size": 32,
}

PRESETS = {
    # Training hyperparameters as published.
    "paper": {},
    # Laptop runs: a large step size and cheaper mid-training re-estimation.
    "desk": {
        "grpo.learning_rate": 1.0,
        "curriculum.n_rollouts_reestimate": 16,
        "train.preset_name": "desk",
        "train.seeds": (0, 1, 2),
        "train.steps_per_batch": 38,
    },
}
# PCL run tracking the difficulty shift of the final batch.
PRESETS["desk-shift"] = {
    **PRESETS["desk"],
    "policy.skill_profile": "graded",
    "policy.base_skills": (("add", 0.5), ("sub", 0.5), ("mul", 0.5)),
    "policy.base_strength": 8.0,
    "grpo.learning_rate": 0.3,
    "curriculum.strategy": "pcl",
    "curriculum.track_shift": True,
    "curriculum.n_rollouts_estimate": 256,
    "curriculum.n_rollouts_reestimate": 256,
    "train.guidance": "none",
    "train.preset_name": "desk-shift",
}
# Long chains a confidently wrong policy fails, trained without a curriculum.
PRESETS["desk-boundary"] = {
    **PRESETS["desk"],
    "task.n_min": 7,
    "task.n_max": 8,
    "task.count": 100,
    "task.seed": 7,
    "policy.skill_profile": "graded",
    "policy.base_skills": (("add", 0.5), ("sub", 0.5), ("mul", 0.5)),
    "policy.base_strength": 10.0,
    "policy.format_strength": 10.0,
    "policy.guidance_strength": 16.0,
    "policy.misconception_strength": 10.0,
    "grpo.learning_rate": 3.0,
    "egsr.trigger": "accuracy_zero",
    "curriculum.strategy": "nocl",
    "curriculum.k": 2,
    "eval.pass_at_k": 32,
    "train.preset_name": "desk-boundary",
}

PRESET_ALIASES = {"full": "paper"}

ENV_KEYS = {"LAB_OUTPUT_DIR": "train.output_dir"}


@dataclass(frozen=True)
class CurriculumConfig:
    strategy: str = "adcl"
    k: int = 4
    n_rollouts_estimate: int = 32
    n_rollouts_reestimate: int = 32
    track_shift: bool = False
    shift_window: str = "last"

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"curriculum.strategy must be one of {STRATEGIES}")
        if self.k < 1:
            raise ValidationError(f"curriculum.k must be >= 1, got {self.k}")
        if self.n_rollouts_estimate < 1 or self.n_rollouts_reestimate < 1:
            raise ValidationError("curriculum rollout counts must be >= 1")
        if self.shift_window not in SHIFT_WINDOWS:
            raise ValidationError(f"curriculum.shift_window must be one of {SHIFT_WINDOWS}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    guidance: str = "egsr-sa"
    problems_per_step: int = 8
    steps_per_batch: int = -1
    seeds: tuple = (0,)
    output_dir: str = "output"
    preset_name: str = "paper"
    record_wall_time: bool = False
    expert_fidelity: float = 0.99

    def validate(self):
        if self.guidance not in GUIDANCE_STRATEGIES:
            raise ValidationError(f"train.guidance must be one of {GUIDANCE_STRATEGIES}")
        if self.problems_per_step < 1:
            raise ValidationError("train.problems_per_step must be >= 1")
        if self.steps_per_batch < -1:
            raise ValidationError("train.steps_per_batch must be >= -1 (-1 = one pass over the batch)")
        if not self.seeds:
            raise ValidationError("train.seeds must be non-empty")
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise ValidationError("train.seeds must be 64-bit unsigned integers")
        if not 0.0 < self.expert_fidelity < 1.0:
            raise ValidationError("train.expert_fidelity must be in (0, 1)")
        return self


@dataclass(frozen=True)
class EvalConfig:
    pass_at_k: int = 8
    samples_per_problem: int = 4
    probe_size: int = 32

    def validate(self):
        if self.pass_at_k < 1:
            raise ValidationError("eval.pass_at_k must be >= 1")
        if self.samples_per_problem < 1 or self.probe_size < 1:
            raise ValidationError("ppl.samples_per_problem and ppl.probe_size must be >= 1")
        return self


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    reward: RewardConfig
    grpo: GrpoConfig
    egsr: EgsrConfig
    policy: PolicyConfig
    curriculum: CurriculumConfig
    train: TrainConfig
    eval: EvalConfig
    values: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def uses_egsr(self):
        return self.train.guidance in EGSR_GUIDANCE

    @property
    def guidance_mode(self):
        return self.egsr.guidance_mode if self.uses_egsr else "none"

    @property
    def output_dir(self):
        return self.train.output_dir

    @property
    def seeds(self):
        return self.train.seeds

    def with_values(self, **overrides):
        """A copy with dotted-key overrides, e.g. with_values(**{"grpo.kl_beta": 0.1})."""
        values = dict(self.values)
        for key, value in overrides.items():
            values[key] = coerce(key, value)
        return build_run_config(values)

    def fingerprint(self):
        """Hash of everything that shapes a run's artifacts."""
        relevant = {
            k: v for k, v in self.values.items() if k not in ("train.output_dir", "train.seeds")
        }
        return hashlib.sha256(
            json.dumps(relevant, sort_keys=True, default=list).encode("utf-8")
        ).hexdigest()


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _parse_skills(text):
    skills = []
    for item in text.split(","):
        op, fraction = item.split(":")
        skills.append((op.strip(), float(fraction)))
    return tuple(skills)


def coerce(key, value):
    """Convert a raw value (usually a string) to the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key '{key}'")
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    default = DEFAULTS[key]
    text = value.strip()
    try:
        if key == "policy.base_skills":
            return _parse_skills(text)
        if key == "train.seeds":
            return tuple(int(s) for s in text.split(",") if s.strip())
        if key == "task.op_set":
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"cannot parse {key}={value}: {e}") from None


def parse_config_file(config_path):
    """
    Parse a flat key=value configuration file.

    Args:
        config_path (str): Path to the configuration file

    Returns:
        dict: Dotted keys to typed values
    """
    values = {}
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {config_path}: {e}") from None

    for line_no, line in enumerate(lines, 1):
        line = line.strip()
        # Skip comments and empty lines
        if line.startswith("#") or not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{config_path}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().lower()] = coerce(key.strip().lower(), value)
    return values


def parse_overrides(pairs):
    """Turn ['grpo.kl_beta=0.1', ...] into typed values."""
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not key=value")
        key, value = pair.split("=", 1)
        values[key.strip()] = coerce(key.strip(), value)
    return values


def _egsr_guidance_mode(mode, guidance):
    """Resolve egsr.guidance_mode; "auto" follows train.guidance."""
    implied = EGSR_GUIDANCE.get(guidance)
    if mode == "auto":
        return implied or "solution_and_answer"
    if implied is not None and mode != implied:
        raise ConfigError(
            f"egsr.guidance_mode={mode} conflicts with train.guidance={guidance} (implies {implied})"
        )
    return mode


def build_run_config(values):
    """Assemble and validate a RunConfig from a complete dotted-key dict."""
    v = dict(DEFAULTS)
    v.update(values)
    unknown = [k for k in v if k not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown configuration key '{unknown[0]}'")
    bad_ops = [op for op in v["task.op_set"] if op not in OPERATORS]
    if bad_ops:
        raise ConfigError(f"task.op_set contains unknown operators {bad_ops}")

    try:
        grpo = GrpoConfig(
            group_size=v["grpo.group_size"],
            clip_eps=v["grpo.clip_eps"],
            kl_beta=v["grpo.kl_beta"],
            inner_iters=v["grpo.inner_iters"],
            learning_rate=v["grpo.learning_rate"],
            temperature=v["grpo.temperature"],
        ).validate()
        train = TrainConfig(
            guidance=v["train.guidance"],
            problems_per_step=v["train.problems_per_step"],
            steps_per_batch=v["train.steps_per_batch"],
            seeds=tuple(v["train.seeds"]),
            output_dir=v["train.output_dir"],
            preset_name=v["train.preset_name"],
            record_wall_time=v["train.record_wall_time"],
            expert_fidelity=v["train.expert_fidelity"],
        ).validate()
        cfg = RunConfig(
            task=TaskSpec(
                modulus=v["task.modulus"],
                chain_length_range=(v["task.n_min"], v["task.n_max"]),
                op_set=tuple(v["task.op_set"]),
                count=v["task.count"],
                seed=v["task.seed"],
            ).validate(),
            reward=RewardConfig(v["reward.lambda1"], v["reward.lambda2"]).validate(),
            grpo=grpo,
            egsr=EgsrConfig(
                guided_count=v["egsr.guided_count"],
                trigger=v["egsr.trigger"],
                guidance_mode=_egsr_guidance_mode(v["egsr.guidance_mode"], train.guidance),
            ).validate(grpo.group_size),
            policy=PolicyConfig(
                max_len=v["policy.max_len"],
                position_cap=v["policy.position_cap"],
                init=v["policy.init"],
                base_skills=tuple(v["policy.base_skills"]),
                base_strength=v["policy.base_strength"],
                format_strength=v["policy.format_strength"],
                guidance_strength=v["policy.guidance_strength"],
                skill_profile=v["policy.skill_profile"],
                misconception_strength=v["policy.misconception_strength"],
            ).validate(),
            curriculum=CurriculumConfig(
                strategy=v["curriculum.strategy"],
                k=v["curriculum.k"],
                n_rollouts_estimate=v["curriculum.n_rollouts_estimate"],
                n_rollouts_reestimate=v["curriculum.n_rollouts_reestimate"],
                track_shift=v["curriculum.track_shift"],
                shift_window=v["curriculum.shift_window"],
            ).validate(),
            train=train,
            eval=EvalConfig(
                pass_at_k=v["eval.pass_at_k"],
                samples_per_problem=v["ppl.samples_per_problem"],
                probe_size=v["ppl.probe_size"],
            ).validate(),
            values=v,
        )
    except ValidationError as e:
        raise ConfigError(str(e)) from None
    if cfg.curriculum.k > cfg.task.count:
        raise ConfigError(
            f"curriculum.k={cfg.curriculum.k} exceeds task.count={cfg.task.count}"
        )
    return cfg


def load_config(preset=None, config_path=None, overrides=None, use_env=True):
    """
    Resolve the layered configuration.

    Args:
        preset (str, optional): paper, desk or desk-shift (full is an alias of paper); falls back
            to LAB_PRESET, then paper
        config_path (str, optional): key=value file applied over the preset
        overrides (dict or list, optional): CLI values, highest precedence
        use_env (bool): Read LAB_* variables from the environment

    Returns:
        RunConfig: The validated configuration
    """
    if preset is None:
        preset = os.getenv("LAB_PRESET", "paper") if use_env else "paper"
    preset = PRESET_ALIASES.get(preset, preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}', expected one of {sorted(PRESETS)}")

    values = dict(PRESETS[preset])
    values["train.preset_name"] = preset
    if config_path:
        values.update(parse_config_file(config_path))
    if use_env:
        for env_key, key in ENV_KEYS.items():
            if os.getenv(env_key):
                values[key] = coerce(key, os.getenv(env_key))
    if isinstance(overrides, dict):
        values.update({k: coerce(k, val) for k, val in overrides.items()})
    else:
        values.update(parse_overrides(overrides))

    cfg = build_run_config(values)
    logger.debug(f"Resolved configuration (preset={preset}): {cfg.fingerprint()[:12]}")
    return cfg


def render_config(cfg):
    """key=value text of a configuration, readable back by parse_config_file."""
    lines = []
    for key in DEFAULTS:
        value = cfg.values[key]
        if key == "policy.base_skills":
            text = ",".join(f"{op}:{fraction}" for op, fraction in value)
        elif isinstance(value, tuple):
            text = ",".join(str(x) for x in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"
