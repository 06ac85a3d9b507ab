import json

import pytest

from app.shared.errors import DatasetError, ValidationError
from app.shared.taskgen import (
    Token,
    TaskSpec,
    apply_op,
    build_dataset,
    check_format,
    expert_solution_tokens,
    extract_answer,
    make_problem,
    parse_tokens,
    read_dataset,
    render_tokens,
    verify_answer,
    with_ranks,
    write_dataset,
)


def test_build_dataset_is_a_pure_function_of_its_parameters():
    spec = TaskSpec(count=50, seed=7)
    a, b = build_dataset(spec), build_dataset(spec)
    assert a == b
    assert len({p.id for p in a}) == 50
    assert build_dataset(TaskSpec(count=50, seed=8)) != a


def test_generated_problems_are_consistent():
    for problem in build_dataset(TaskSpec(count=100, chain_length_range=(2, 6), seed=1)):
        problem.validate()
        assert 2 <= problem.chain_length <= 6
        assert problem.answer == problem.expert_steps[-1]


def test_op_set_restricts_operators():
    problems = build_dataset(TaskSpec(count=30, op_set=("add",), seed=3))
    assert {op for p in problems for op, _ in p.ops} == {"add"}


@pytest.mark.parametrize(
    "kwargs, bound",
    [
        ({"chain_length_range": (1, 4)}, "n_min"),
        ({"chain_length_range": (5, 4)}, "n_max"),
        ({"chain_length_range": (2, 13)}, "n_max"),
        ({"op_set": ()}, "op_set"),
        ({"op_set": ("div",)}, "op_set"),
        ({"count": 0}, "count"),
    ],
)
def test_task_spec_validation_names_the_bound(kwargs, bound):
    with pytest.raises(ValidationError, match=bound):
        TaskSpec(**kwargs).validate()


def test_apply_op_wraps_modulo_ten():
    assert apply_op(3, "sub", 5) == 8
    assert apply_op(9, "add", 4) == 3
    assert apply_op(7, "mul", 3) == 1


def test_expert_solution_tokens(problem):
    assert render_tokens(expert_solution_tokens(problem)) == "STEP D7 STEP D1 ANS D1 END"


def test_expert_tokens_require_expert_steps():
    bare = make_problem("p-2", 1, [("add", 1), ("add", 1)], with_expert=False)
    with pytest.raises(ValidationError):
        expert_solution_tokens(bare)


@pytest.mark.parametrize(
    "text, ok",
    [
        ("ANS D7 END", True),
        ("STEP D2 D9 PAD ANS D0 END", True),
        ("ANS D7", False),
        ("ANS STEP END", False),
        ("ANS D1 ANS D7 END", False),
        ("END ANS D7 END", True),
        ("END ANS D1 END", True),
        ("D4 ANS D4 END", True),
        ("ANS END", False),
        ("ANS D1 END D2", False),
        ("D7 END", False),
        ("", False),
    ],
)
def test_check_format(text, ok):
    assert check_format(parse_tokens(text)) is ok


def test_verify_answer(problem):
    assert verify_answer(problem, parse_tokens("ANS D1 END"))
    assert not verify_answer(problem, parse_tokens("ANS D2 END"))
    assert not verify_answer(problem, parse_tokens("ANS D1"))
    assert extract_answer(parse_tokens("D3 ANS D4 END")) == 4


def test_parse_tokens_rejects_unknown_names():
    assert parse_tokens("STEP D7") == (Token.STEP, 7)
    with pytest.raises(ValidationError):
        parse_tokens("STEP D77")


def test_dataset_file_round_trip(tmp_path):
    problems = build_dataset(TaskSpec(count=12, seed=2))
    problems = with_ranks(problems, {problems[0].id: 5})
    path = write_dataset(problems, tmp_path / "data.jsonl")
    assert read_dataset(path) == problems
    first = json.loads(open(path, encoding="utf-8").readline())
    assert list(first) == [
        "id",
        "initial_value",
        "ops",
        "expert_steps",
        "answer",
        "predefined_rank",
    ]
    assert first["predefined_rank"] == 5


def test_dataset_without_expert_steps_round_trips(tmp_path):
    bare = make_problem("p-9", 4, [("sub", 5), ("mul", 2)], with_expert=False)
    path = write_dataset([bare], tmp_path / "bare.jsonl")
    assert read_dataset(path)[0].expert_steps is None


def test_read_dataset_reports_the_bad_line(tmp_path):
    problems = build_dataset(TaskSpec(count=2, seed=0))
    path = write_dataset(problems, tmp_path / "data.jsonl")
    lines = open(path, encoding="utf-8").read().splitlines()
    record = json.loads(lines[1])
    record["answer"] = (record["answer"] + 1) % 10
    lines[1] = json.dumps(record)
    (tmp_path / "data.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(DatasetError, match=":2:"):
        read_dataset(path)


def test_read_dataset_rejects_duplicates_and_missing_files(tmp_path):
    problem = make_problem("dup", 1, [("add", 2), ("add", 3)])
    path = write_dataset([problem, problem], tmp_path / "dup.jsonl")
    with pytest.raises(DatasetError, match="duplicate"):
        read_dataset(path)
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "missing.jsonl")
