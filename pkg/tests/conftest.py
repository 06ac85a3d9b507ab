import os

import pytest

from app.configuration import load_config
from app.shared.policy import FeatureLayout, PolicyParams
from app.shared.taskgen import make_problem

# 14 tokens x 13 features = 182 parameters
SMALL_BLOCKS = ("bias", "operator", "position")
# 14 tokens x 14 features = 196 parameters, with a guidance block
GUIDED_BLOCKS = ("operator", "guide_hint")


def pytest_collection_modifyitems(config, items):
    if os.getenv("LAB_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set LAB_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_layout():
    return FeatureLayout(blocks=SMALL_BLOCKS, position_cap=8)


@pytest.fixture
def guided_layout():
    return FeatureLayout(blocks=GUIDED_BLOCKS, position_cap=8)


@pytest.fixture
def full_layout():
    return FeatureLayout()


@pytest.fixture
def problem():
    # 3 -> 7 -> 1
    return make_problem("p-1", 3, [("add", 4), ("mul", 3)])


@pytest.fixture
def random_params():
    def make(layout, rng, scale=0.5):
        return PolicyParams(rng.normal(0.0, scale, layout.n_params), layout)

    return make


@pytest.fixture
def tiny_config(tmp_path):
    """A configuration small enough to train in a couple of seconds."""
    return load_config(
        preset="paper",
        use_env=False,
        overrides={
            "task.count": 16,
            "task.n_max": 3,
            "curriculum.k": 4,
            "curriculum.n_rollouts_estimate": 4,
            "curriculum.n_rollouts_reestimate": 4,
            "grpo.group_size": 4,
            "grpo.inner_iters": 2,
            "grpo.learning_rate": 0.5,
            "egsr.guided_count": 2,
            "train.problems_per_step": 2,
            "train.steps_per_batch": 2,
            "train.output_dir": str(tmp_path / "runs"),
        },
    )
