import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microunlearn.corpus import BlockSchedule
from microunlearn.engine import (
    DivergenceDetected,
    EmptyBatch,
    FimAccumulator,
    NonFiniteScore,
    TokenImportanceTable,
    UnlearnConfig,
    Variant,
    apply_token_intervention,
    build_importance_table,
    combine_objective,
    compute_gradient_pair,
    project_forget_gradient,
    regularizer_grad,
    run_gradient_ascent,
    run_unlearning,
    serialize_trace,
    token_importance,
    update_fim,
)
from microunlearn.hierarchy import Level, assign_token_levels
from microunlearn.model import (
    EMBEDDING,
    GradientBundle,
    ShapeMismatch,
    init_model,
)
from microunlearn.privacy import NoiseSource, PrivacyParams

from helpers import example_with, randomize_adapters


def make_examples(n, vocab=16, qlen=3, seed=0, subject="surgery", base_id=0):
    rng = np.random.default_rng(seed)
    return tuple(
        example_with(
            [int(x) for x in rng.integers(0, vocab, qlen)],
            [int(rng.integers(0, vocab))],
            subject=subject,
            eid=base_id + i,
        )
        for i in range(n)
    )


def uniform_map(vocab=16, level=Level.L2):
    return assign_token_levels([(t, level) for t in range(vocab)], vocab)


def test_gradient_pair_identical_batches():
    m = randomize_adapters(init_model(16, 8, 1, 2, seed=0), seed=1)
    batch = make_examples(4)
    g_r, g_f = compute_gradient_pair(m, batch, batch)
    for gid in g_r.per_group:
        np.testing.assert_array_equal(g_r.per_group[gid], g_f.per_group[gid])
    assert g_r.loss_value == g_f.loss_value


def test_gradient_pair_empty_batch():
    m = init_model(16, 8, 1, 2, seed=0)
    with pytest.raises(EmptyBatch):
        compute_gradient_pair(m, make_examples(2), [])
    with pytest.raises(EmptyBatch):
        compute_gradient_pair(m, [], make_examples(2))


def test_projection_hand_example():
    out = project_forget_gradient(
        np.array([1.0, 1.0]), np.array([1.0, 0.0]), alpha_level=0.5, epsilon_stab=0.0
    )
    np.testing.assert_allclose(out, [0.5, 1.0], rtol=1e-15)


def test_projection_orthogonal_unchanged():
    g_f = np.array([0.0, 1.0])
    g_r = np.array([1.0, 0.0])
    out = project_forget_gradient(g_f, g_r, 0.7, 0.0)
    np.testing.assert_array_equal(out, g_f)


def test_projection_parallel_annihilated():
    g = np.array([0.3, -0.2, 0.9])
    out = project_forget_gradient(g, g, 1.0, 1e-14)
    assert np.linalg.norm(out) < 1e-10


def test_projection_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        project_forget_gradient(np.ones(3), np.ones(2), 1.0, 0.0)


@given(
    vec=st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=8),
    ref=st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=8),
    c=st.sampled_from([0.5, 2.0, 10.0]),
)
@settings(max_examples=200, deadline=None)
def test_projection_positive_homogeneity(vec, ref, c):
    n = min(len(vec), len(ref))
    g_f, g_r = np.array(vec[:n]), np.array(ref[:n])
    lhs = project_forget_gradient(c * g_f, g_r, 1.0, 0.0)
    rhs = c * project_forget_gradient(g_f, g_r, 1.0, 0.0)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_projection_orthogonality_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(500):
        dim = int(rng.integers(2, 32))
        g_f = rng.normal(0, 1, dim)
        g_r = rng.normal(0, 1, dim)
        if np.linalg.norm(g_r) <= 1e-8:
            continue
        out = project_forget_gradient(g_f, g_r, 1.0, 0.0)
        denom = np.linalg.norm(out) * np.linalg.norm(g_r)
        if denom == 0.0:
            continue
        assert abs(float(out @ g_r)) / denom < 1e-6


def test_regularizer_examples():
    theta = np.array([1.0, -2.0])
    np.testing.assert_array_equal(regularizer_grad(theta, theta, 0.7), [0.0, 0.0])
    np.testing.assert_array_equal(
        regularizer_grad(theta, np.zeros(2), 0.0), [0.0, 0.0]
    )
    np.testing.assert_allclose(
        regularizer_grad(theta, np.zeros(2), 0.5), [1.0, -2.0], rtol=1e-15
    )


def test_combine_objective():
    g_r = np.array([1.0, 0.0])
    g_fp = np.array([0.0, 2.0])
    reg = np.array([0.1, 0.1])
    np.testing.assert_allclose(
        combine_objective(g_r, g_fp, 0.5, reg), [1.1, -0.9], rtol=1e-15
    )
    np.testing.assert_array_equal(
        combine_objective(g_r, g_fp, 0.0, np.zeros(2)), g_r
    )
    np.testing.assert_array_equal(
        combine_objective(np.zeros(2), g_fp, 1.0, np.zeros(2)), -g_fp
    )


def test_token_importance():
    assert token_importance(0.0, 5.0, 1.0, 1e-5) == 0.0
    assert token_importance(2.0, 1.0, 1.0, 0.0) == pytest.approx(2.0)
    assert token_importance(2.0, 1.0, 0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        token_importance(-1.0, 1.0, 1.0, 0.0)


def bundle_with_rows(rows, emb_shape=(8, 2)):
    per_group = {f"{EMBEDDING}.B": np.ones(emb_shape), "block_0.B": np.ones((4, 2))}
    return GradientBundle(
        per_group=per_group,
        per_token_embedding={t: np.asarray(v, dtype=float) for t, v in rows.items()},
        loss_value=1.0,
    )


def test_intervention_identity_when_scores_zero():
    g = bundle_with_rows({1: [1.0, 1.0]})
    out = apply_token_intervention(g, TokenImportanceTable(scores={1: 0.0}))
    np.testing.assert_array_equal(out.per_group[f"{EMBEDDING}.B"], np.ones((8, 2)))
    np.testing.assert_array_equal(out.per_token_embedding[1], [1.0, 1.0])


def test_intervention_doubles_scored_row():
    g = bundle_with_rows({1: [1.0, 1.0], 2: [1.0, 0.0]})
    out = apply_token_intervention(g, TokenImportanceTable(scores={1: 1.0}))
    emb = out.per_group[f"{EMBEDDING}.B"]
    np.testing.assert_array_equal(emb[1], [2.0, 2.0])
    for t in range(8):
        if t != 1:
            np.testing.assert_array_equal(emb[t], [1.0, 1.0])
    np.testing.assert_array_equal(out.per_token_embedding[1], [2.0, 2.0])
    np.testing.assert_array_equal(out.per_token_embedding[2], [1.0, 0.0])
    np.testing.assert_array_equal(out.per_group["block_0.B"], np.ones((4, 2)))


def test_intervention_rejects_nan():
    g = bundle_with_rows({1: [1.0, 1.0]})
    with pytest.raises(NonFiniteScore):
        apply_token_intervention(g, TokenImportanceTable(scores={1: float("nan")}))


def test_build_importance_uses_beta_once():
    g_f = bundle_with_rows({1: [3.0, 4.0]})
    g_r = bundle_with_rows({1: [0.0, 0.0]})
    cm = uniform_map(8, Level.L4)
    table = build_importance_table(g_f, g_r, cm.token_level, epsilon_stab=1.0)
    # beta_L4 = 1.0, |g_f| = 5, |g_r| = 0 -> I = 5 / (0 + 1) = 5
    assert table.scores[1] == pytest.approx(5.0)


def test_fim_single_push_and_window():
    acc = FimAccumulator(capacity=2)
    mk = lambda x: GradientBundle(
        per_group={"g": np.array([x])}, per_token_embedding={}, loss_value=0.0
    )
    update_fim(acc, mk(2.0), "forget")
    np.testing.assert_allclose(acc.estimate("forget")["g"], [4.0])
    update_fim(acc, mk(3.0), "forget")
    update_fim(acc, mk(4.0), "forget")
    np.testing.assert_allclose(acc.estimate("forget")["g"], [(9.0 + 16.0) / 2])
    assert all(v >= 0 for v in acc.estimate("forget")["g"])
    with pytest.raises(ValueError):
        update_fim(acc, mk(1.0), "sideways")
    with pytest.raises(NonFiniteScore):
        update_fim(acc, mk(float("nan")), "forget")


# ---------------------------------------------------------------------------
# run_unlearning


def tiny_setup(seed=0, n_f=6, n_r=6, vocab=16):
    m = init_model(vocab, 8, 1, 2, seed=seed)
    forget = make_examples(n_f, vocab=vocab, seed=1, subject="surgery")
    retain = make_examples(n_r, vocab=vocab, seed=2, subject="cardiology", base_id=100)
    examples = {e.id: e for e in forget + retain}
    sched = BlockSchedule(
        blocks=(
            (tuple(e.id for e in forget), tuple(e.id for e in retain)),
        ),
        retain_ratio_m=1,
    )
    cm = uniform_map(vocab)
    privacy = PrivacyParams.create(4.0, 1e-5, 0.05, 1.0, enabled=True)
    return m, sched, examples, cm, privacy


def test_run_zero_blocks_noop():
    m, _, examples, cm, privacy = tiny_setup()
    sched = BlockSchedule(blocks=(), retain_ratio_m=1)
    cfg = UnlearnConfig(lambda_forget=0.0)
    out, trace = run_unlearning(m, sched, examples, cfg, privacy, cm, NoiseSource(0))
    for gid, arr in m.trainable_arrays().items():
        np.testing.assert_array_equal(arr, out.trainable_arrays()[gid])
    assert trace.records == []


def test_run_eta_zero_keeps_params_but_traces():
    m, sched, examples, cm, privacy = tiny_setup()
    cfg = UnlearnConfig(eta_lr=0.0, epochs=1, steps_per_block=2)
    out, trace = run_unlearning(m, sched, examples, cfg, privacy, cm, NoiseSource(0))
    for gid, arr in m.trainable_arrays().items():
        np.testing.assert_array_equal(arr, out.trainable_arrays()[gid])
    assert len(trace.records) == 2
    assert all(math.isfinite(r.loss_forget) for r in trace.records)


def test_run_deterministic_traces():
    m, sched, examples, cm, privacy = tiny_setup()
    cfg = UnlearnConfig(epochs=2, steps_per_block=2)
    _, t1 = run_unlearning(m, sched, examples, cfg, privacy, cm, NoiseSource(11))
    _, t2 = run_unlearning(m, sched, examples, cfg, privacy, cm, NoiseSource(11))
    assert serialize_trace(t1) == serialize_trace(t2)


def test_ggonly_vs_full_first_step_differs_only_on_scaled_rows():
    m, sched, examples, cm, privacy = tiny_setup()
    # disable clip rescaling and noise so the single difference is the
    # token intervention
    privacy_off = PrivacyParams.create(4.0, 1e-5, 0.05, math.inf, enabled=False)
    cfg = UnlearnConfig(epochs=1, steps_per_block=1, gamma_reg=0.0)
    _, t_full = run_unlearning(
        m, sched, examples, replace(cfg, variant=Variant.FULL), privacy_off, cm,
        NoiseSource(5),
    )
    _, t_gg = run_unlearning(
        m, sched, examples, replace(cfg, variant=Variant.GG_ONLY), privacy_off, cm,
        NoiseSource(5),
    )
    up_full, up_gg = t_full.updates[0], t_gg.updates[0]
    forget_tokens = {
        t for e in (examples[i] for i in sched.blocks[0][0]) for t in e.tokens
    }
    for gid in up_full:
        if gid == f"{EMBEDDING}.B":
            diff_rows = {
                t
                for t in range(m.vocab_size)
                if not np.array_equal(up_full[gid][t], up_gg[gid][t])
            }
            assert diff_rows <= forget_tokens
            assert diff_rows  # the intervention did scale something
        else:
            np.testing.assert_array_equal(up_full[gid], up_gg[gid])


def test_divergence_detected_on_blowup():
    m, sched, examples, cm, privacy = tiny_setup()
    wild = PrivacyParams.create(4.0, 1e-5, 0.05, 1e9, enabled=False)
    cfg = UnlearnConfig(
        eta_lr=50.0, lambda_forget=5.0, epochs=50, steps_per_block=8,
        divergence_multiplier=2.0,
    )
    with pytest.raises(DivergenceDetected):
        run_unlearning(m, sched, examples, cfg, privacy=wild, concept_map=cm,
                       noise=NoiseSource(0))


def test_retention_protection_first_order_on_quadratic():
    # On a quadratic pair of objectives, a step along the combined direction
    # with full projection never increases retain loss to first order.
    rng = np.random.default_rng(0)
    for _ in range(50):
        dim = int(rng.integers(2, 10))
        a = rng.normal(0, 1, dim)
        b = rng.normal(0, 1, dim)
        q_r = rng.normal(0, 1, (dim, dim))
        q_f = rng.normal(0, 1, (dim, dim))
        h_r = q_r @ q_r.T + np.eye(dim) * 1e-3
        h_f = q_f @ q_f.T + np.eye(dim) * 1e-3
        theta = rng.normal(0, 1, dim)
        g_r = h_r @ (theta - a)
        g_f = h_f @ (theta - b)
        if np.linalg.norm(g_r) < 1e-8:
            continue
        g_fp = project_forget_gradient(g_f, g_r, 1.0, 0.0)
        step = -combine_objective(g_r, g_fp, lambda_forget=2.0, reg_grad=np.zeros(dim))
        assert float(g_r @ step) <= 1e-9 * max(1.0, np.linalg.norm(g_r) ** 2)


def test_custom_coefficient_table_changes_run():
    from microunlearn.hierarchy import LevelCoefficients

    m, sched, examples, cm, privacy = tiny_setup()
    m = randomize_adapters(m, seed=9, scale=0.1)
    cfg = UnlearnConfig(epochs=1, steps_per_block=2)
    flat_table = {lv: LevelCoefficients(0.5, 0.5) for lv in Level}
    _, t_default = run_unlearning(m, sched, examples, cfg, privacy, cm, NoiseSource(3))
    _, t_custom = run_unlearning(
        m, sched, examples, cfg, privacy, cm, NoiseSource(3), coeff_table=flat_table
    )
    assert serialize_trace(t_default) != serialize_trace(t_custom)


def test_gradient_ascent_baseline_moves_up_forget_loss():
    m, sched, examples, cm, privacy = tiny_setup()
    m = randomize_adapters(m, seed=3, scale=0.1)
    sched_small = BlockSchedule(blocks=sched.blocks, retain_ratio_m=1)
    cfg = UnlearnConfig(eta_lr=0.5, epochs=4, steps_per_block=2)
    out, trace = run_gradient_ascent(m, sched_small, examples, cfg)
    assert trace.records[-1].loss_forget > trace.records[0].loss_forget
    assert len(trace.records) == 8
