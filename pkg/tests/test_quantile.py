import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcf.quantile import (
    EmptyInputError,
    QuantileSketch,
    conformal_rank,
    fcp_quantile,
    fcp_quantile_sketch,
    is_vacuous,
    sketch_build,
    sketch_merge,
    sketch_query,
    split_cp_quantile,
)


def exact_rank_fraction(sorted_values, value):
    return np.searchsorted(sorted_values, value, side="right") / len(sorted_values)


def oracle_fcp(client_scores, alpha):
    """Independent rank rule: sort, then take the ceil((N+K)(1-alpha))-th value (exact rationals)."""
    from fractions import Fraction

    pooled = sorted(float(x) for s in client_scores for x in s)
    n, k_clients = len(pooled), len(client_scores)
    a = Fraction(str(alpha))
    k = math.ceil((n + k_clients) * (1 - a))
    return pooled[min(k, n) - 1]


def test_split_cp_examples():
    assert split_cp_quantile([0.1 * i for i in range(1, 10)], 0.1) == pytest.approx(0.9)
    assert split_cp_quantile([0.37], 0.3) == 0.37
    assert split_cp_quantile([0.2, 0.4], 0.5) == 0.4


def test_fcp_examples():
    pooled = [0.05 * i for i in range(1, 19)]
    assert fcp_quantile([pooled[:7], pooled[7:]], 0.2) == pytest.approx(0.80)
    data = list(np.random.default_rng(0).random(37))
    assert fcp_quantile([data], 0.1) == split_cp_quantile(data, 0.1)
    eight = [0.1, 0.5, 0.2, 0.9, 0.3, 0.4, 0.7, 0.6]
    assert conformal_rank(8, 2, 0.1) == 9
    assert fcp_quantile([eight[:4], eight[4:]], 0.1) == 0.9
    assert is_vacuous(8, 2, 0.1)


def test_empty_inputs():
    with pytest.raises(EmptyInputError):
        split_cp_quantile([], 0.1)
    with pytest.raises(EmptyInputError):
        fcp_quantile([], 0.1)
    with pytest.raises(EmptyInputError):
        sketch_query(QuantileSketch.empty(), 0.5)


@given(
    st.lists(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30), min_size=1, max_size=6),
    st.sampled_from([0.05, 0.1, 0.2, 0.3, 0.5, 0.9]),
)
@settings(max_examples=300, deadline=None)
def test_fcp_matches_oracle(clients, alpha):
    assert fcp_quantile(clients, alpha) == oracle_fcp(clients, alpha)


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=12, max_size=60), st.sampled_from([0.05, 0.1, 0.2]))
@settings(max_examples=100, deadline=None)
def test_fcp_monotone_in_number_of_clients(values, alpha):
    prev = -math.inf
    for k in range(1, 6):
        parts = [values[i::k] for i in range(k)]
        lam = fcp_quantile(parts, alpha)
        assert lam >= prev
        prev = lam
    # at least the split-CP quantile without the +K adjustment
    n = len(values)
    plain = sorted(values)[max(math.ceil(n * (1 - alpha)), 1) - 1]
    assert fcp_quantile([values], alpha) >= plain


def test_singleton_sketch():
    s = sketch_build([0.42], 100)
    assert len(s.means) == 1
    for q in (0.0, 0.3, 0.5, 1.0):
        assert sketch_query(s, q) == 0.42


def test_sketch_rank_error_uniform():
    values = np.random.default_rng(1).random(100_000)
    ordered = np.sort(values)
    s = sketch_build(values, 100)
    assert abs(exact_rank_fraction(ordered, sketch_query(s, 0.9)) - 0.9) <= 0.005
    assert len(s.means) <= 200
    assert s.total_weight == 100_000
    assert s.min == ordered[0] and s.max == ordered[-1]
    assert all(np.diff(s.means) >= 0)


def test_sorted_vs_shuffled():
    rng = np.random.default_rng(2)
    values = rng.beta(2, 5, 50_000)
    ordered = np.sort(values)
    a = sketch_build(ordered, 100)
    b = sketch_build(rng.permutation(values), 100)
    for q in (0.1, 0.5, 0.9, 0.95):
        assert abs(exact_rank_fraction(ordered, sketch_query(a, q)) - exact_rank_fraction(ordered, sketch_query(b, q))) <= 0.005


def test_merge_identity_and_commutativity():
    rng = np.random.default_rng(3)
    a = sketch_build(rng.random(5000), 100)
    b = sketch_build(rng.normal(size=3000), 100)
    assert sketch_merge(a, QuantileSketch.empty(100)) == a
    assert sketch_merge(QuantileSketch.empty(100), a) == a
    ab, ba = sketch_merge(a, b), sketch_merge(b, a)
    assert ab.total_weight == 8000
    assert ab.min == min(a.min, b.min) and ab.max == max(a.max, b.max)
    for q in np.linspace(0, 1, 41):
        assert abs(sketch_query(ab, q) - sketch_query(ba, q)) <= 1e-9


def test_merge_compression_mismatch():
    with pytest.raises(ValueError):
        sketch_merge(sketch_build([1.0], 100), sketch_build([2.0], 50))


def test_merged_vs_pooled():
    rng = np.random.default_rng(4)
    parts = [rng.random(20_000) ** (i + 1) for i in range(5)]
    pooled = np.sort(np.concatenate(parts))
    merged = QuantileSketch.empty(100)
    for p in parts:
        merged = sketch_merge(merged, sketch_build(p, 100))
    for q in (0.8, 0.9, 0.95):
        assert abs(exact_rank_fraction(pooled, sketch_query(merged, q)) - q) <= 0.01


def test_query_endpoints_and_small_exact():
    s = sketch_build([5, 3, 1, 4, 2], 1000)
    assert sketch_query(s, 0.0) == 1
    assert sketch_query(s, 1.0) == 5
    assert sketch_query(s, 0.5) == 3


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=400), st.integers(10, 200))
@settings(max_examples=100, deadline=None)
def test_query_monotone_and_roundtrip(values, compression):
    s = sketch_build(values, compression)
    qs = np.linspace(0, 1, 51)
    answers = [sketch_query(s, q) for q in qs]
    assert all(b >= a - 1e-12 for a, b in zip(answers, answers[1:]))
    assert QuantileSketch.from_bytes(s.to_bytes()) == s
    assert len(s.means) <= 2 * compression


def test_fcp_sketch_close_to_exact():
    rng = np.random.default_rng(5)
    parts = [rng.random(20_000) for _ in range(5)]
    pooled = np.sort(np.concatenate(parts))
    exact = fcp_quantile(parts, 0.1)
    approx = fcp_quantile_sketch([sketch_build(p, 100) for p in parts], 0.1)
    assert abs(exact_rank_fraction(pooled, approx) - exact_rank_fraction(pooled, exact)) <= 0.005
