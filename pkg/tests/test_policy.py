import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.shared.errors import NumericError, ValidationError
from app.shared.policy import (
    NO_GUIDANCE,
    FeatureLayout,
    Guidance,
    PolicyConfig,
    PolicyParams,
    active_matrix,
    build_base_policy,
    build_copy_hint_policy,
    encode_context,
    feature_matrix,
    grad_logprob,
    logprob_under,
    perplexity,
    sample_trajectory,
    token_distribution,
    zero_params,
)
from app.shared.seeding import stream
from app.shared.taskgen import (
    OPERATORS,
    VOCAB_SIZE,
    TaskSpec,
    Token,
    apply_op,
    build_dataset,
    expert_solution_tokens,
    make_problem,
    verify_answer,
)


def test_full_layout_dimensions(full_layout):
    assert VOCAB_SIZE == 14
    assert full_layout.feature_dim == 391
    assert full_layout.n_params == 14 * 391
    assert full_layout.block_size("transition") == 300


def test_layout_hash_depends_on_blocks(small_layout, full_layout):
    assert small_layout.hash == FeatureLayout(blocks=small_layout.blocks, position_cap=8).hash
    assert small_layout.hash != full_layout.hash


def test_params_validate_length_and_finiteness(small_layout):
    with pytest.raises(ValidationError):
        PolicyParams(np.zeros(small_layout.n_params - 1), small_layout)
    theta = np.zeros(small_layout.n_params)
    theta[3] = np.nan
    with pytest.raises(NumericError):
        PolicyParams(theta, small_layout)


def test_flat_index_addresses_the_weight_matrix(small_layout):
    theta = np.zeros(small_layout.n_params)
    index = small_layout.flat_index(Token.ANS, small_layout.index("bias"))
    theta[index] = 2.5
    params = PolicyParams(theta, small_layout)
    assert params.weights[Token.ANS, small_layout.index("bias")] == 2.5
    with pytest.raises(ValidationError):
        small_layout.flat_index(VOCAB_SIZE, 0)


def test_zero_policy_is_uniform(full_layout, problem):
    ctx = encode_context(problem)
    probs = token_distribution(zero_params(full_layout), ctx, (), 0.7)
    assert_allclose(probs, np.full(VOCAB_SIZE, 1 / VOCAB_SIZE), rtol=1e-12)


def test_non_positive_temperature_is_rejected(small_layout, problem):
    with pytest.raises(ValidationError):
        token_distribution(zero_params(small_layout), encode_context(problem), (), 0.0)


def test_sampling_is_deterministic_given_the_stream(small_layout, problem, random_params):
    params = random_params(small_layout, np.random.default_rng(0))
    ctx = encode_context(problem)
    a = sample_trajectory(params, ctx, 0.7, 20, stream(1, "rollout", problem.id, 0, 0))
    b = sample_trajectory(params, ctx, 0.7, 20, stream(1, "rollout", problem.id, 0, 0))
    assert a == b
    assert 1 <= len(a) <= 20


def test_recorded_logprobs_match_rescoring(full_layout, problem, random_params):
    params = random_params(full_layout, np.random.default_rng(1), scale=0.3)
    ctx = encode_context(problem)
    for index in range(5):
        traj = sample_trajectory(params, ctx, 0.7, 32, stream(2, "rollout", problem.id, 0, index))
        assert_allclose(traj.gen_logprobs, logprob_under(params, ctx, traj.tokens, 0.7), atol=1e-12)


def fd_contexts():
    problems = build_dataset(TaskSpec(count=8, chain_length_range=(2, 4), seed=11))
    contexts = []
    for p in problems:
        contexts.append(encode_context(p))
        contexts.append(encode_context(p, Guidance("solution_and_answer", p.answer, p.expert_steps)))
    return contexts


@pytest.mark.parametrize("layout_name", ["small_layout", "guided_layout"])
def test_gradient_matches_finite_differences(layout_name, request, random_params):
    layout = request.getfixturevalue(layout_name)
    rng = np.random.default_rng(3)
    contexts = fd_contexts()
    h = 1e-5
    for n in range(50):
        params = random_params(layout, rng)
        ctx = contexts[n % len(contexts)]
        tokens = tuple(int(t) for t in rng.integers(0, VOCAB_SIZE, size=int(rng.integers(1, 9))))
        analytic = grad_logprob(params, ctx, tokens, 0.7)
        numeric = np.zeros_like(analytic)
        for i in range(layout.n_params):
            up, down = params.theta.copy(), params.theta.copy()
            up[i] += h
            down[i] -= h
            f_up = logprob_under(PolicyParams(up, layout), ctx, tokens, 0.7).sum()
            f_down = logprob_under(PolicyParams(down, layout), ctx, tokens, 0.7).sum()
            numeric[i] = (f_up - f_down) / (2 * h)
        assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_distributions_are_normalized_for_random_params(full_layout, random_params):
    rng = np.random.default_rng(8)
    contexts = fd_contexts()
    for n in range(100):
        params = random_params(full_layout, rng, scale=2.0)
        ctx = contexts[n % len(contexts)]
        prefix = tuple(int(t) for t in rng.integers(0, VOCAB_SIZE, size=int(rng.integers(0, 10))))
        probs = token_distribution(params, ctx, prefix, 0.7)
        assert np.all(probs > 0)
        assert abs(probs.sum() - 1.0) <= 1e-12


def test_higher_temperature_flattens_the_distribution(full_layout, problem, random_params):
    rng = np.random.default_rng(9)
    ctx = encode_context(problem)
    for _ in range(20):
        params = random_params(full_layout, rng)
        assert token_distribution(params, ctx, (), 1.4).max() < token_distribution(params, ctx, (), 0.7).max()


def test_feature_rows_are_binary_with_one_entry_per_active_block(full_layout, problem):
    ctx = encode_context(problem)
    tokens = expert_solution_tokens(problem)
    dense = feature_matrix(full_layout, ctx, tokens)
    assert dense.shape == (len(tokens), full_layout.feature_dim)
    assert set(np.unique(dense)) <= {0.0, 1.0}
    active = active_matrix(full_layout, ctx, tokens)
    real = (active < full_layout.feature_dim).sum(axis=1)
    assert_allclose(dense.sum(axis=1), real)


def test_unguided_context_activates_no_guidance_features(full_layout, problem):
    tokens = expert_solution_tokens(problem)
    dense = feature_matrix(full_layout, encode_context(problem), tokens)
    for block in ("guide_answer", "guide_hint"):
        assert not dense[:, full_layout.block_slice(block)].any()


def test_guidance_only_matters_through_guidance_weights(full_layout, problem, random_params):
    params = random_params(full_layout, np.random.default_rng(4))
    w = params.weights.copy()
    for block in ("guide_answer", "guide_hint"):
        w[:, full_layout.block_slice(block)] = 0.0
    params = PolicyParams(w, full_layout)
    tokens = expert_solution_tokens(problem)
    guided = encode_context(problem, Guidance("solution_and_answer", 1, problem.expert_steps))
    assert_allclose(
        logprob_under(params, guided, tokens, 0.7),
        logprob_under(params, encode_context(problem), tokens, 0.7),
        rtol=0,
        atol=0,
    )


def test_answer_guidance_changes_only_guidance_features(full_layout, problem):
    tokens = expert_solution_tokens(problem)
    plain = feature_matrix(full_layout, encode_context(problem), tokens)
    guided = feature_matrix(full_layout, encode_context(problem, Guidance("answer_only", answer=problem.answer)), tokens)
    changed = np.flatnonzero((plain != guided).any(axis=0))
    assert changed.size > 0
    guide = full_layout.block_slice("guide_answer")
    assert all(guide.start <= i < guide.stop for i in changed)


def test_distinct_problems_have_distinct_problem_features(full_layout):
    a = make_problem("a", 2, [("add", 3), ("mul", 4)])
    b = make_problem("b", 2, [("add", 5), ("mul", 4)])
    tokens = (5, 0, Token.ANS, 0, Token.END)
    fa = feature_matrix(full_layout, encode_context(a), tokens)
    fb = feature_matrix(full_layout, encode_context(b), tokens)
    operand = full_layout.block_slice("operand")
    assert not np.array_equal(fa[:, operand], fb[:, operand])


def test_encode_context_rejects_inconsistent_guidance(problem):
    with pytest.raises(ValidationError):
        encode_context(problem, Guidance("answer_only", answer=(problem.answer + 1) % 10))
    with pytest.raises(ValidationError):
        encode_context(problem, Guidance("solution_and_answer", problem.answer, (0, 0)))
    with pytest.raises(ValidationError):
        encode_context(problem, Guidance("answer_only"))


def test_copy_hint_policy_follows_the_hint(full_layout):
    params = build_copy_hint_policy(full_layout)
    for p in build_dataset(TaskSpec(count=20, seed=5)):
        guided = encode_context(p, Guidance("solution_and_answer", p.answer, p.expert_steps))
        for t, step in enumerate(p.expert_steps):
            probs = token_distribution(params, guided, tuple(p.expert_steps[:t]), 0.7)
            assert probs[step] > 0.9
        traj = sample_trajectory(params, guided, 0.7, 32, stream(0, "guided", p.id, 0, 0))
        assert traj.tokens[: len(p.expert_steps)] == tuple(p.expert_steps)


def test_base_policy_solves_known_chains(full_layout):
    params = build_base_policy(full_layout, PolicyConfig(), seed=0)
    add_chain = make_problem("add-chain", 2, [("add", 3), ("add", 5)])
    ctx = encode_context(add_chain)
    solved = sum(
        verify_answer(add_chain, sample_trajectory(params, ctx, 0.7, 32, stream(0, "rollout", "x", 0, i)).tokens)
        for i in range(64)
    )
    assert solved > 32


def test_base_policy_is_seeded(full_layout):
    cfg = PolicyConfig()
    a = build_base_policy(full_layout, cfg, seed=0)
    assert a.equals(build_base_policy(full_layout, cfg, seed=0))
    assert not a.equals(build_base_policy(full_layout, cfg, seed=1))


def transition_weights(params):
    """(token, v, op, k) view of the transition block."""
    block = params.weights[:, params.layout.block_slice("transition")]
    return block.reshape(VOCAB_SIZE, 10, len(OPERATORS), 10)


def test_binary_profile_knows_a_transition_fully_or_not_at_all(full_layout):
    w = transition_weights(build_base_policy(full_layout, PolicyConfig(), seed=3))
    assert set(np.unique(w)) == {0.0, 4.0}
    assert np.all(w[:, :, OPERATORS.index("add"), :].sum(axis=0) == 4.0)


def test_graded_profile_spreads_strength_over_transitions(full_layout):
    cfg = PolicyConfig(base_skills=(("add", 0.5), ("sub", 0.5)), base_strength=8.0, skill_profile="graded")
    w = transition_weights(build_base_policy(full_layout, cfg, seed=3))
    mul = OPERATORS.index("mul")
    assert not w[:, :, mul, :].any()
    known = np.delete(w, mul, axis=2).sum(axis=0)
    assert np.all((known > 0.0) & (known <= 8.0))
    assert known.min() < 2.0 and known.max() > 6.0
    # one target token per transition
    assert np.all((np.delete(w, mul, axis=2) > 0).sum(axis=0) == 1)


def test_misconceptions_point_unknown_transitions_at_a_wrong_result(full_layout):
    cfg = PolicyConfig(misconception_strength=6.0)
    w = transition_weights(build_base_policy(full_layout, cfg, seed=3))
    plain = transition_weights(build_base_policy(full_layout, PolicyConfig(), seed=3))
    assert np.all((w > 0).sum(axis=0) == 1)
    totals = w.sum(axis=0)
    assert set(np.unique(totals)) == {4.0, 6.0}
    assert np.array_equal(totals == 4.0, plain.sum(axis=0) == 4.0)
    for op_index, op in enumerate(OPERATORS):
        for v in range(10):
            for k in range(10):
                target = int(np.argmax(w[:, v, op_index, k]))
                assert (target == apply_op(v, op, k)) == (totals[v, op_index, k] == 4.0)


def test_guidance_overrides_misconceptions_on_long_chains(full_layout):
    cfg = PolicyConfig(
        base_skills=(("add", 0.5), ("sub", 0.5), ("mul", 0.5)),
        base_strength=10.0,
        format_strength=10.0,
        guidance_strength=16.0,
        misconception_strength=10.0,
        skill_profile="graded",
    )
    params = build_base_policy(full_layout, cfg, seed=0)
    for p in build_dataset(TaskSpec(chain_length_range=(7, 8), count=10, seed=7)):
        unguided = encode_context(p)
        guided = encode_context(p, Guidance("solution_and_answer", p.answer, p.expert_steps))
        for t, step in enumerate(p.expert_steps):
            prefix = tuple(p.expert_steps[:t])
            assert np.argmax(token_distribution(params, unguided, prefix, 0.7)) != step
            assert token_distribution(params, guided, prefix, 0.7)[step] > 0.99


def test_unknown_skill_profile_is_rejected():
    with pytest.raises(ValidationError):
        PolicyConfig(skill_profile="smooth").validate()


def test_zero_policy_perplexity_is_vocab_size(full_layout, problem):
    ppl = perplexity(zero_params(full_layout), encode_context(problem), expert_solution_tokens(problem))
    assert ppl == pytest.approx(VOCAB_SIZE, rel=1e-12)
    with pytest.raises(ValidationError):
        perplexity(zero_params(full_layout), encode_context(problem), ())


def test_decode_state_counts_digits_before_the_answer_only(full_layout, problem):
    # add, mul, chain done, then nothing once ANS has been emitted
    ctx = encode_context(problem, NO_GUIDANCE)
    tokens = (7, 1, 11, 1, 12)
    active = active_matrix(full_layout, ctx, tokens)
    op_slice = full_layout.block_slice("operator")
    ops = [[int(i) - op_slice.start for i in row if op_slice.start <= i < op_slice.stop] for row in active]
    assert ops == [[0], [2], [3], [], []]
