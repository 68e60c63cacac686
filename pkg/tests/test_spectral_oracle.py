import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsrvi.chain_model import ChainModel, random_model
from rsrvi.spectral_oracle import (OracleError, dense_perron, enumerate_min, n_policies,
                                   policy_matrix, policy_perron)


def two_action_model():
    # action 1 is cheaper in state 0 only
    P = np.full((2, 2, 2), 0.5)
    k = np.array([[math.log(2), math.log(1.5)], [math.log(4), math.log(5)]])
    return ChainModel(P, k)


def test_rank_one_perron(rank_one):
    r = policy_perron(rank_one, [0, 0])
    assert r.rho == pytest.approx(3.0, rel=1e-14)
    np.testing.assert_allclose(r.eigvec, [1.0, 2.0], rtol=1e-13)
    assert r.residual <= 1e-13


def test_enumerate_picks_cheapest_policy():
    m = two_action_model()
    lam, pol = enumerate_min(m)
    # Q_v rank one: rho = (e^{k0} + e^{k1}) / 2
    assert lam == pytest.approx((1.5 + 4) / 2, rel=1e-13)
    assert pol.tolist() == [1, 0]
    assert n_policies(m) == 4


def test_enumerate_first_minimizer_wins():
    P = np.full((2, 2, 2), 0.5)
    m = ChainModel(P, np.zeros((2, 2)))
    _, pol = enumerate_min(m)
    assert pol.tolist() == [0, 0]


def test_enumerate_cap():
    with pytest.raises(OracleError, match="cap"):
        enumerate_min(random_model(0, 6, 3, 0.0), cap=100)


def test_power_iteration_failure_reported():
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    m = ChainModel(P, [[0.0], [1.0]])
    with pytest.raises(OracleError, match="did not reach"):
        policy_perron(m, [0, 0], max_iter=100)


def test_dense_cap():
    with pytest.raises(OracleError):
        dense_perron(random_model(0, 51, 1, 0.0), np.zeros(51, dtype=int))


def test_cost_shift_scales_rho():
    m = random_model(9, 5, 2, 0.02)
    lam, pol = enumerate_min(m)
    lam2, pol2 = enumerate_min(ChainModel(m.P, m.k + 0.7))
    assert lam2 == pytest.approx(math.exp(0.7) * lam, rel=1e-12)
    assert pol2.tolist() == pol.tolist()


def test_policy_matrix_rows():
    m = two_action_model()
    np.testing.assert_allclose(policy_matrix(m, [1, 1]), [[0.75, 0.75], [2.5, 2.5]])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 8), m=st.integers(1, 3),
       data=st.data())
def test_power_matches_dense(seed, n, m, data):
    model = random_model(seed, n, m, 0.02)
    pol = data.draw(st.lists(st.integers(0, m - 1), min_size=n, max_size=n))
    a, b = policy_perron(model, pol), dense_perron(model, pol)
    assert a.rho == pytest.approx(b.rho, rel=1e-10)
    np.testing.assert_allclose(a.eigvec / a.eigvec.sum(), b.eigvec / b.eigvec.sum(),
                               rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 5), m=st.integers(1, 3))
def test_enumerate_is_minimum_over_dense(seed, n, m):
    model = random_model(seed, n, m, 0.02)
    lam, pol = enumerate_min(model)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        other = rng.integers(0, m, n)
        assert lam <= dense_perron(model, other).rho * (1 + 1e-10)
    assert dense_perron(model, pol).rho == pytest.approx(lam, rel=1e-10)


def test_zero_cost_rho_is_one():
    m = random_model(3, 5, 2, 0.02)
    m = ChainModel(m.P, np.zeros((5, 2)))
    r = policy_perron(m, [1, 0, 1, 0, 1])
    assert r.rho == pytest.approx(1.0, rel=1e-13)
    np.testing.assert_allclose(r.eigvec, 1.0, rtol=1e-12)
    assert dense_perron(m, [0] * 5).rho == pytest.approx(1.0, rel=1e-13)


def test_symmetric_two_state_rho_is_one():
    p = 0.3
    P = np.array([[[1 - p, p]], [[p, 1 - p]]])
    assert policy_perron(ChainModel(P, np.zeros((2, 1))), [0, 0]).rho == pytest.approx(1.0)


def test_single_action_enumeration_is_policy_perron():
    m = random_model(12, 6, 1, 0.02)
    lam, pol = enumerate_min(m)
    assert pol.tolist() == [0] * 6
    assert lam == policy_perron(m, pol).rho


def test_dominating_action_is_chosen_everywhere():
    m = random_model(8, 4, 1, 0.05)
    P = np.repeat(m.P, 3, axis=1)
    k = m.k + np.array([0.2, -0.1, 0.3])
    _, pol = enumerate_min(ChainModel(P, k))
    assert pol.tolist() == [1] * 4


def test_rank_one_dense():
    from conftest import rank_one_model
    assert dense_perron(rank_one_model(), [0, 0]).rho == pytest.approx(3.0, rel=1e-14)


def test_diagonal_dominant_oracles_agree():
    P = np.array([[0.8, 0.1, 0.1], [0.15, 0.7, 0.15], [0.05, 0.15, 0.8]])[:, None, :]
    m = ChainModel(P, [[0.1], [-0.2], [0.3]])
    a, b = policy_perron(m, [0, 0, 0]), dense_perron(m, [0, 0, 0])
    assert a.rho == pytest.approx(b.rho, rel=1e-10)
    np.testing.assert_allclose(a.eigvec, b.eigvec / b.eigvec[0], rtol=1e-10)
