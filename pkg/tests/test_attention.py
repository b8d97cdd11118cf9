import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from hplb.attention import (
    AttentionHead,
    AttentionWorkload,
    SelectionPolicy,
    dense_attention,
    output_error,
    recovery_curve,
    recovery_ratio,
    selection_mask,
    sparse_attention,
)
from hplb.errors import BudgetError, ShapeError

POLICIES = list(SelectionPolicy)


def random_head(rng, n_q, n_k, d, scale=1.0):
    return AttentionHead(rng.standard_normal((n_q, d)) * scale, rng.standard_normal((n_k, d)) * scale,
                         rng.standard_normal((n_k, d)))


def test_single_key_gets_all_weight():
    weights, out = dense_attention(([[0.3, -1.2]], [[5.0, 2.0]], [[7.0, -3.0]]))
    assert weights.tolist() == [[1.0]]
    np.testing.assert_array_equal(out, [[7.0, -3.0]])


def test_zero_queries_give_uniform_weights():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((4, 3))
    weights, out = dense_attention((np.zeros((2, 3)), rng.standard_normal((4, 3)), v))
    np.testing.assert_allclose(weights, 0.25, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-15)


def test_two_key_softmax_against_scalar_formula():
    weights, _ = dense_attention(([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]))
    s = 1 / math.sqrt(2)
    sigma = math.exp(s) / (math.exp(s) + 1.0)
    assert weights[0, 0] == pytest.approx(sigma, abs=1e-15)
    assert weights[0, 1] == pytest.approx(1 - sigma, abs=1e-15)


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(11)
    head = random_head(rng, 3, 7, 4)
    weights, out = dense_attention(head)
    ref_w, ref_o = oracles.dense(head.q.tolist(), head.k.tolist(), head.v.tolist())
    np.testing.assert_allclose(weights, ref_w, atol=1e-12)
    np.testing.assert_allclose(out, ref_o, atol=1e-12)


def test_large_scores_do_not_overflow():
    q = np.array([[1000.0, 0.0]])
    k = np.array([[1000.0, 0.0], [999.0, 0.0]])
    weights, out = dense_attention((q, k, np.eye(2)))
    assert np.all(np.isfinite(weights)) and np.all(np.isfinite(out))
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_causal_mask_hides_future_keys():
    rng = np.random.default_rng(5)
    q = rng.standard_normal((3, 2))
    k = rng.standard_normal((5, 2))
    head = AttentionHead(q, k, rng.standard_normal((5, 2)), causal=True)
    weights, _ = dense_attention(head)
    # queries sit at positions 2, 3, 4 of a 5-token context
    for i in range(3):
        assert np.all(weights[i, i + 3:] == 0.0)
        assert weights[i, : i + 3].sum() == pytest.approx(1.0, abs=1e-12)


def test_full_budget_equals_dense_for_both_policies():
    rng = np.random.default_rng(2)
    head = random_head(rng, 4, 9, 3)
    _, ref = dense_attention(head)
    for policy in POLICIES:
        np.testing.assert_allclose(sparse_attention(head, 9, policy), ref, atol=1e-9)


def test_budget_one_picks_argmax_value_row():
    rng = np.random.default_rng(8)
    head = random_head(rng, 5, 12, 4)
    scores = head.q @ head.k.T
    out = sparse_attention(head, 1, SelectionPolicy.PER_QUERY_TOPK)
    np.testing.assert_array_equal(out, head.v[np.argmax(scores, axis=1)])


def test_two_queries_four_keys_budget_two_against_sort_oracle():
    rng = np.random.default_rng(2024)
    head = random_head(rng, 2, 4, 3)
    expected = oracles.sparse_per_query(head.q.tolist(), head.k.tolist(), head.v.tolist(), 2)
    np.testing.assert_allclose(sparse_attention(head, 2), expected, atol=1e-12)


def test_ties_prefer_lower_key_index():
    # all four keys score the same; k=2 must keep keys 0 and 1
    head = AttentionHead(np.ones((1, 2)), np.ones((4, 2)), np.arange(8.0).reshape(4, 2))
    mask = selection_mask(head, 2)
    assert mask.tolist() == [[True, True, False, False]]
    np.testing.assert_allclose(sparse_attention(head, 2), [[1.0, 2.0]])
    mask = selection_mask(head, 2, SelectionPolicy.COLUMN_AGGREGATE_TOPK)
    assert mask.tolist() == [[True, True, False, False]]


def test_column_aggregate_shares_one_key_set():
    rng = np.random.default_rng(4)
    head = random_head(rng, 6, 10, 3)
    mask = selection_mask(head, 3, "column_aggregate_topk")
    assert (mask == mask[0]).all() and mask[0].sum() == 3
    expected = oracles.sparse_column_aggregate(head.q.tolist(), head.k.tolist(), head.v.tolist(), 3)
    np.testing.assert_allclose(sparse_attention(head, 3, "column_aggregate_topk"), expected, atol=1e-12)


@pytest.mark.parametrize("k", [0, 10, -1])
def test_budget_out_of_range(k):
    head = random_head(np.random.default_rng(0), 2, 9, 2)
    with pytest.raises(BudgetError):
        sparse_attention(head, k)


def test_non_integer_budget_rejected():
    head = random_head(np.random.default_rng(0), 2, 9, 2)
    with pytest.raises(BudgetError):
        sparse_attention(head, 2.5)


def test_shape_errors_name_head_and_axis():
    rng = np.random.default_rng(0)
    good = random_head(rng, 2, 5, 3)
    bad = AttentionHead(rng.standard_normal((2, 3)), rng.standard_normal((5, 3)), rng.standard_normal((4, 3)))
    with pytest.raises(ShapeError) as info:
        AttentionWorkload((good, bad))
    assert info.value.head == 1 and info.value.axis == "n_k"
    assert "head 1" in str(info.value)
    with pytest.raises(ShapeError) as info:
        dense_attention((np.zeros((2, 3)), np.zeros((5, 2)), np.zeros((5, 3))))
    assert info.value.axis == "d_h"


def test_non_finite_inputs_rejected():
    q = np.array([[np.nan, 0.0]])
    with pytest.raises(ShapeError):
        dense_attention((q, np.zeros((3, 2)), np.zeros((3, 2))))


def test_workload_requires_shared_context_length():
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeError):
        AttentionWorkload((random_head(rng, 2, 5, 2), random_head(rng, 2, 6, 2)))
    with pytest.raises(ShapeError):
        AttentionWorkload(())


def test_recovery_one_hot_rows():
    w = np.eye(4)[[2, 0, 3]]
    assert recovery_ratio(w, 1) == 1.0


def test_recovery_uniform_rows():
    assert recovery_ratio(np.full((3, 8), 1 / 8), 2) == pytest.approx(0.25, abs=1e-15)


def test_recovery_two_rows_hand_sorted():
    w = np.array([[0.7, 0.1, 0.1, 0.1], [0.4, 0.3, 0.2, 0.1]])
    assert recovery_ratio(w, 2, SelectionPolicy.PER_QUERY_TOPK) == pytest.approx(0.75, abs=1e-12)
    assert recovery_ratio(w, 0) == 0.0
    assert recovery_ratio(w, 4) == 1.0
    with pytest.raises(BudgetError):
        recovery_ratio(w, 5)


def test_recovery_column_aggregate_uses_shared_columns():
    w = np.array([[0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.7]])
    # column sums tie between keys 0 and 3; budget 1 keeps key 0
    assert recovery_ratio(w, 1, SelectionPolicy.COLUMN_AGGREGATE_TOPK) == pytest.approx(0.4, abs=1e-15)
    assert recovery_ratio(w, 2, SelectionPolicy.COLUMN_AGGREGATE_TOPK) == pytest.approx(0.8, abs=1e-15)


def test_output_error_examples():
    rng = np.random.default_rng(0)
    dense = rng.standard_normal((3, 4))
    assert output_error(dense, dense) == 0.0
    assert output_error(2 * dense, dense) == pytest.approx(1.0, abs=1e-15)
    sparse = rng.standard_normal((3, 4))
    diff = (sparse - dense).tolist()
    expected = oracles.frobenius(diff) / oracles.frobenius(dense.tolist())
    assert output_error(sparse, dense) == pytest.approx(expected, rel=1e-13)


def test_output_error_zero_reference():
    assert output_error(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    assert output_error(np.ones((2, 2)), np.zeros((2, 2))) == math.inf
    with pytest.raises(ShapeError):
        output_error(np.zeros((2, 3)), np.zeros((3, 2)))


def test_error_shrinks_with_budget_on_median():
    rng = np.random.default_rng(99)
    n = 32
    budgets = [n // 8, n // 4, n // 2, n]
    errors = {k: [] for k in budgets}
    for _ in range(120):
        head = random_head(rng, 4, n, 8, scale=1.5)
        _, ref = dense_attention(head)
        for k in budgets:
            errors[k].append(output_error(sparse_attention(head, k), ref))
    medians = [float(np.median(errors[k])) for k in budgets]
    assert all(b <= a for a, b in zip(medians, medians[1:]))
    assert medians[-1] == 0.0


def test_deterministic_outputs():
    head = random_head(np.random.default_rng(12), 3, 20, 4)
    a = sparse_attention(head, 5)
    b = sparse_attention(head, 5)
    assert a.tobytes() == b.tobytes()


heads = st.builds(
    lambda seed, n_q, n_k, d, scale: random_head(np.random.default_rng(seed), n_q, n_k, d, scale),
    st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 24), st.integers(1, 6),
    st.sampled_from([0.1, 1.0, 3.0]),
)


@settings(max_examples=60, deadline=None)
@given(heads)
def test_weights_are_row_stochastic(head):
    weights, out = dense_attention(head)
    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)
    assert out.shape == (head.n_queries, head.head_dim)


@settings(max_examples=60, deadline=None)
@given(heads, st.sampled_from(POLICIES))
def test_recovery_curve_is_monotone(head, policy):
    weights, _ = dense_attention(head)
    curve = recovery_curve(weights, policy)
    assert curve[0] == 0.0 and curve[-1] == 1.0
    assert np.all(np.diff(curve) >= 0)
    assert np.all(curve <= 1.0)


@settings(max_examples=40, deadline=None)
@given(heads, st.sampled_from(POLICIES))
def test_full_budget_identity_property(head, policy):
    _, ref = dense_attention(head)
    np.testing.assert_allclose(sparse_attention(head, head.context_length, policy), ref, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(heads, st.data())
def test_sparse_outputs_are_convex_combinations(head, data):
    k = data.draw(st.integers(1, head.context_length))
    out = sparse_attention(head, k)
    assert np.all(out <= head.v.max(axis=0) + 1e-12)
    assert np.all(out >= head.v.min(axis=0) - 1e-12)
