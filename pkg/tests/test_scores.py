"""Score tests. The oracle recomputes scores with exact rationals and loops."""

import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcf.domain import ClientDataset, ValidationError
from fedcf.scores import (
    ScoreConfig,
    aps_matrix,
    aps_score,
    daps_scores,
    keyed_uniform,
    raps_matrix,
    raps_score,
    score_client,
    score_federation,
)

from conftest import make_example


def oracle_rank(probs, y):
    """1-based descending rank, ties broken by ascending label."""
    return 1 + sum(1 for c, p in enumerate(probs) if p > probs[y] or (p == probs[y] and c < y))


def oracle_aps(probs, y, u):
    r = oracle_rank(probs, y)
    above = sum(p for c, p in enumerate(probs) if oracle_rank(probs, c) <= r)
    return above - u * probs[y]


def oracle_raps(probs, y, u, nu, k_reg):
    return oracle_aps(probs, y, u) + nu * max(oracle_rank(probs, y) - k_reg, 0)


# hand-computed spec examples

def test_aps_examples():
    p = [0.6, 0.3, 0.1]
    assert aps_score(p, 1, 0.5) == pytest.approx(0.75, abs=1e-15)
    assert aps_score(p, 0, 1.0) == 0.0
    assert aps_score(p, 2, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_raps_examples():
    p = [0.6, 0.3, 0.1]
    assert raps_score(p, 1, 0.5, 0.1, 1) == pytest.approx(0.85, abs=1e-15)
    assert raps_score(p, 1, 0.5, 0.0, 1) == aps_score(p, 1, 0.5)
    assert raps_score(p, 0, 0.5, 0.1, 1) == aps_score(p, 0, 0.5)


def test_daps_examples():
    base = {"v": np.array([0.4]), "a": np.array([0.2]), "b": np.array([0.6])}
    out = daps_scores(base, {"v": ["a", "b"]}, 0.5)
    assert out["v"][0] == pytest.approx(0.4, abs=1e-15)
    same = daps_scores(base, {"v": ["a", "b"], "a": ["v"]}, 0.0)
    for k in base:
        assert np.array_equal(same[k], base[k])
    isolated = daps_scores(base, {"v": []}, 0.9)
    assert np.array_equal(isolated["v"], base["v"])


def test_daps_dangling_reference():
    with pytest.raises(ValidationError):
        daps_scores({"v": np.array([0.1])}, {"v": ["ghost"]}, 0.5)


def test_label_out_of_range():
    with pytest.raises(ValidationError):
        aps_score([0.5, 0.5], 2, 0.1)


def test_tie_break_ascending_label():
    p = [0.25, 0.25, 0.5]
    # label 0 ranks before label 1 at equal probability
    assert aps_score(p, 0, 0.0) == pytest.approx(0.75)
    assert aps_score(p, 1, 0.0) == pytest.approx(1.0)


# properties against the oracle

probs_strategy = st.integers(2, 6).flatmap(
    lambda c: st.lists(st.integers(0, 20), min_size=c, max_size=c).filter(lambda xs: sum(xs) > 0)
)


@given(probs_strategy, st.integers(0, 100), st.integers(0, 30), st.integers(0, 4))
@settings(max_examples=300, deadline=None)
def test_matrix_scores_match_exact_oracle(weights, u100, nu100, k_reg):
    total = sum(weights)
    exact = [Fraction(w, total) for w in weights]
    probs = np.array([float(f) for f in exact])
    u, nu = Fraction(u100, 100), Fraction(nu100, 100)
    aps = aps_matrix(probs[None, :], np.array([float(u)]))[0]
    raps = raps_matrix(probs[None, :], np.array([float(u)]), float(nu), k_reg)[0]
    for y in range(len(weights)):
        assert aps[y] == pytest.approx(float(oracle_aps(exact, y, u)), abs=1e-12)
        assert raps[y] == pytest.approx(float(oracle_raps(exact, y, u, nu, k_reg)), abs=1e-12)
        assert -1e-12 <= aps[y] <= 1 + 1e-12
        assert raps[y] <= 1 + float(nu) * max(len(weights) - k_reg, 0) + 1e-12


@given(probs_strategy, st.floats(0, 1))
@settings(max_examples=200, deadline=None)
def test_top_label_has_smallest_aps(weights, u):
    probs = np.array(weights, float) / sum(weights)
    scores = aps_matrix(probs[None, :], np.array([u]))[0]
    top = int(np.argsort(-probs, kind="stable")[0])
    assert scores[top] <= scores.min() + 1e-12


@given(probs_strategy)
@settings(max_examples=200, deadline=None)
def test_aps_u0_monotone_in_rank(weights):
    probs = np.array(weights, float) / sum(weights)
    scores = aps_matrix(probs[None, :], np.array([0.0]))[0]
    order = np.argsort(-probs, kind="stable")
    assert np.all(np.diff(scores[order]) >= -1e-12)


@given(probs_strategy, st.floats(0, 1), st.floats(0.01, 1), st.integers(0, 3), st.floats(0, 2))
@settings(max_examples=200, deadline=None)
def test_raps_sets_subset_of_aps_sets(weights, u, nu, k_reg, lam):
    probs = np.array(weights, float) / sum(weights)
    aps = aps_matrix(probs[None, :], np.array([u]))[0]
    raps = raps_matrix(probs[None, :], np.array([u]), nu, k_reg)[0]
    assert set(np.flatnonzero(raps <= lam)) <= set(np.flatnonzero(aps <= lam))


@given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=2, max_size=6))
@settings(max_examples=100, deadline=None)
def test_daps_delta_one_is_neighbor_mean(rows):
    base = {str(i): np.array(r) for i, r in enumerate(rows)}
    adj = {"0": [str(i) for i in range(1, len(rows))]}
    out = daps_scores(base, adj, 1.0)
    expected = np.mean([rows[i] for i in range(1, len(rows))], axis=0)
    assert np.allclose(out["0"], expected, atol=1e-15)


# acceptance criterion 10 companion: brute-force set equivalence on the 3-class grid

def _grid_probs():
    for a in range(11):
        for b in range(11 - a):
            yield (Fraction(a, 10), Fraction(b, 10), Fraction(10 - a - b, 10))


def direct_aps_set(probs, u, lam):
    """Walk labels in descending order; include each while its randomized mass fits."""
    order = sorted(range(len(probs)), key=lambda c: (-probs[c], c))
    out, cum = set(), Fraction(0)
    for c in order:
        if cum + (1 - u) * probs[c] <= lam:
            out.add(c)
        cum += probs[c]
    return out


def test_grid_prediction_sets_match_direct_definition():
    lams = [Fraction(k, 10) + Fraction(1, 37) for k in range(-1, 11)]
    us = [Fraction(0), Fraction(1, 3), Fraction(1, 2), Fraction(1)]
    mismatches = 0
    for probs, u in itertools.product(_grid_probs(), us):
        p = np.array([float(x) for x in probs])
        scores = aps_matrix(p[None, :], np.array([float(u)]))[0]
        for lam in lams:
            if set(np.flatnonzero(scores <= float(lam))) != direct_aps_set(probs, u, lam):
                mismatches += 1
    assert mismatches == 0


# keyed randomness

def _client(order):
    rows = [("e0", 0, (0.7, 0.2, 0.1)), ("e1", 1, (0.2, 0.5, 0.3)), ("e2", 2, (0.3, 0.3, 0.4)), ("e3", 0, (0.7, 0.2, 0.1))]
    rows = [rows[i] for i in order]
    return ClientDataset(0, tuple(make_example(i, 0, "calib", y, 0, p) for i, y, p in rows))


def test_permuted_order_gives_identical_scores():
    cfg = ScoreConfig(seed=9)
    a = score_client(_client([0, 1, 2, 3]), cfg)
    b = score_client(_client([3, 1, 0, 2]), cfg)
    by_id_a = dict(zip(["e0", "e1", "e2", "e3"], a.calib))
    by_id_b = dict(zip(["e3", "e1", "e0", "e2"], b.calib))
    for k in by_id_a:
        assert np.array_equal(by_id_a[k], by_id_b[k])


def test_seed_changes_uniforms_and_scores_stay_in_range():
    assert keyed_uniform(1, "e0") != keyed_uniform(2, "e0")
    for seed in range(5):
        s = score_client(_client([0, 1, 2, 3]), ScoreConfig(seed=seed)).calib
        assert s.min() >= 0 and s.max() <= 1 + 1e-12


def test_identical_probs_different_ids_may_differ():
    s = score_client(_client([0, 1, 2, 3]), ScoreConfig(seed=4)).calib
    assert not np.array_equal(s[0], s[3])
    assert keyed_uniform(4, "e0") != keyed_uniform(4, "e3")


def test_daps_needs_neighbors():
    with pytest.raises(ValidationError):
        score_client(_client([0, 1, 2, 3]), ScoreConfig(kind="daps"))


def test_daps_federation_matches_manual_diffusion():
    probs = [(0.6, 0.3, 0.1), (0.2, 0.5, 0.3), (0.1, 0.1, 0.8)]
    nbrs = [("n1", "n2"), ("n0",), ()]
    calib = tuple(
        make_example(f"n{i}", 0, "calib", 0, 0, p, neighbors=nb) for i, (p, nb) in enumerate(zip(probs, nbrs))
    )
    ds = ClientDataset(0, calib)
    cfg = ScoreConfig(kind="daps", diffusion=0.5, seed=3)
    got = score_federation([ds], cfg)[0].calib
    u = [keyed_uniform(3, f"n{i}") for i in range(3)]
    base = [np.array([oracle_aps([Fraction(x).limit_denominator(10) for x in p], y, Fraction(u[i])) for y in range(3)], float)
            for i, p in enumerate(probs)]
    want0 = 0.5 * base[0] + 0.5 * (base[1] + base[2]) / 2
    want1 = 0.5 * base[1] + 0.5 * base[0]
    assert np.allclose(got[0], want0, atol=1e-12)
    assert np.allclose(got[1], want1, atol=1e-12)
    assert np.allclose(got[2], base[2], atol=1e-12)
