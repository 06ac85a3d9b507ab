import numpy as np
import pytest

from app.harness.checkpoint import (
    HEADER,
    Checkpoint,
    checkpoint_path,
    latest_checkpoint,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from app.shared.curriculum import sort_and_partition
from app.shared.errors import CheckpointError
from app.shared.policy import encode_context, sample_trajectory
from app.shared.seeding import stream
from app.shared.taskgen import make_problem


@pytest.fixture
def checkpoint(full_layout, random_params):
    problems = [make_problem(f"c{i}", i, [("add", i), ("mul", 2)]) for i in range(6)]
    curriculum = sort_and_partition(problems, {p.id: i / 6 for i, p in enumerate(problems)}, 3, "adcl")
    return Checkpoint(
        params=random_params(full_layout, np.random.default_rng(0)),
        step=12,
        data_step=3,
        curriculum=curriculum.advance(),
        rng_state={"seed": 0, "data_step": 3},
        config_fingerprint="abc123",
        extra={"seed": 0},
    )


def test_round_trip_restores_the_run_state(tmp_path, checkpoint, problem):
    path = save_checkpoint(tmp_path / "batch-00.ckpt", checkpoint)
    loaded = load_checkpoint(path, checkpoint.params.layout, "abc123")
    assert loaded.params.equals(checkpoint.params)
    assert loaded.params.version == checkpoint.params.version
    assert (loaded.step, loaded.data_step) == (12, 3)
    assert loaded.curriculum == checkpoint.curriculum
    assert loaded.extra == {"seed": 0}
    assert loaded.rng_state == {"seed": 0, "data_step": 3}

    ctx = encode_context(problem)
    for i in range(5):
        a = sample_trajectory(checkpoint.params, ctx, 0.7, 32, stream(0, "rollout", problem.id, 4, i))
        b = sample_trajectory(loaded.params, ctx, 0.7, 32, stream(0, "rollout", problem.id, 4, i))
        assert a == b


def test_layout_is_rebuilt_from_the_trailer(tmp_path, checkpoint):
    path = save_checkpoint(tmp_path / "c.ckpt", checkpoint)
    loaded = load_checkpoint(path)
    assert loaded.params.layout.hash == checkpoint.params.layout.hash


def test_no_temporary_file_is_left_behind(tmp_path, checkpoint):
    save_checkpoint(tmp_path / "c.ckpt", checkpoint)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.ckpt"]


def corrupt(path, edit):
    data = bytearray(path.read_bytes())
    path.write_bytes(bytes(edit(data)))


def test_truncated_file_is_rejected(tmp_path, checkpoint):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, checkpoint)
    corrupt(path, lambda data: data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    corrupt(path, lambda data: data[:20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_flipped_byte_is_rejected(tmp_path, checkpoint):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, checkpoint)

    def flip(data):
        data[HEADER.size + 100] ^= 0xFF
        return data

    corrupt(path, flip)
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_unknown_format_version_is_rejected(tmp_path, checkpoint):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, checkpoint)

    def bump(data):
        data[8:12] = (99).to_bytes(4, "little")
        return data

    corrupt(path, bump)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_layout_and_configuration_must_match(tmp_path, checkpoint, small_layout):
    path = save_checkpoint(tmp_path / "c.ckpt", checkpoint)
    with pytest.raises(CheckpointError, match="layout"):
        load_checkpoint(path, small_layout)
    with pytest.raises(CheckpointError, match="configuration"):
        load_checkpoint(path, checkpoint.params.layout, "other")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_checkpoints_are_listed_in_batch_order(tmp_path, checkpoint):
    run_dir = str(tmp_path)
    for b in (2, 0, 10, 1):
        save_checkpoint(checkpoint_path(run_dir, b), checkpoint)
    (tmp_path / "checkpoints" / "notes.txt").write_text("x")
    names = [p.rsplit("/", 1)[-1] for p in list_checkpoints(run_dir)]
    assert names == ["batch-00.ckpt", "batch-01.ckpt", "batch-02.ckpt", "batch-10.ckpt"]
    assert latest_checkpoint(run_dir).endswith("batch-10.ckpt")
    assert latest_checkpoint(str(tmp_path / "empty")) is None
