import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cmim.mi_estimators import (
    EstimatorKind,
    ScorePair,
    discrete_mi_oracle,
    dv_estimate,
    dv_mi_lower_bound,
    gaussian_mi_oracle,
    jsd_mi_lower_bound,
    make_marginal_pairing,
    softplus,
    softplus_tensor,
)

LN2 = math.log(2.0)
finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


def test_softplus_values():
    assert softplus(0.0) == pytest.approx(LN2, abs=1e-12)
    assert softplus(-100.0) == pytest.approx(math.exp(-100.0), rel=1e-12)
    # log(1 + e^20) at 30 digits: 20.0000000020611536...
    assert softplus(20.0) == pytest.approx(20.0000000020611536, abs=1e-12)
    assert softplus(800.0) == 800.0


def test_softplus_tensor_matches_scalar_and_has_half_slope_at_zero():
    z = torch.tensor([-100.0, -1.0, 0.0, 1.0, 20.0, 800.0], dtype=torch.float64, requires_grad=True)
    out = softplus_tensor(z)
    assert np.allclose(out.detach().numpy(), [softplus(v) for v in z.tolist()], rtol=1e-14, atol=0)
    out.sum().backward()
    assert z.grad[2].item() == pytest.approx(0.5)


@given(finite)
def test_softplus_identity(z):
    assert softplus(z) - softplus(-z) == pytest.approx(z, abs=1e-9)


@given(finite, finite)
def test_softplus_monotone(a, b):
    lo, hi = sorted((a, b))
    assert softplus(lo) <= softplus(hi)


@pytest.mark.parametrize(
    "joint, marginal, expected",
    [
        ([0.0], [0.0], -2 * LN2),
        # -2 * sp(-1), evaluated at high precision
        ([1.0], [-1.0], -0.626523375036445668),
        ([10.0, 10.0], [-10.0, -10.0], -9.07977984337292935e-5),
    ],
)
def test_jsd_examples(joint, marginal, expected):
    est = jsd_mi_lower_bound(ScorePair(joint, marginal))
    assert est.estimator_kind is EstimatorKind.JSD
    assert est.value == pytest.approx(expected, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize(
    "joint, marginal, expected",
    [
        ([0.0, 0.0], [0.0, 0.0], 0.0),
        ([1.0, 1.0], [0.0, 0.0], 1.0),
        ([1.0, 1.0], [0.0, 2.0], -0.43378083048302719),
    ],
)
def test_dv_examples(joint, marginal, expected):
    est = dv_mi_lower_bound(ScorePair(joint, marginal))
    assert est.estimator_kind is EstimatorKind.DV
    assert est.value == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("joint, marginal", [([], [0.0]), ([0.0], [])])
def test_empty_sample_rejected(joint, marginal):
    with pytest.raises(ValueError, match="empty sample"):
        ScorePair(joint, marginal)


def test_nonfinite_scores_rejected():
    with pytest.raises(ValueError):
        ScorePair([float("nan")], [0.0])


def test_jsd_all_zero_scores_is_minus_two_ln2():
    est = jsd_mi_lower_bound(ScorePair(np.zeros(37), np.zeros(11)))
    assert est.value == pytest.approx(-2 * LN2, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(finite, min_size=1, max_size=20),
    st.lists(finite, min_size=1, max_size=20),
    st.floats(min_value=-100, max_value=100, allow_nan=False),
)
def test_dv_shift_invariance(joint, marginal, c):
    base = dv_mi_lower_bound(ScorePair(joint, marginal)).value
    shifted = dv_mi_lower_bound(ScorePair(np.add(joint, c), np.add(marginal, c))).value
    assert shifted == pytest.approx(base, abs=1e-9)


def test_dv_handles_huge_marginal_scores():
    est = dv_estimate(torch.tensor([0.0]), torch.tensor([1000.0, 1000.0]))
    assert est.item() == pytest.approx(-1000.0)


def _derangements(n):
    return {p for p in itertools.permutations(range(n)) if all(p[i] != i for i in range(n))}


def test_pairing_examples():
    assert make_marginal_pairing(2, 0).tolist() == [1, 0]
    assert make_marginal_pairing(2, 12345).tolist() == [1, 0]
    assert len(_derangements(4)) == 9
    assert tuple(make_marginal_pairing(4, 7)) in _derangements(4)
    with pytest.raises(ValueError, match="cannot form marginal pairs"):
        make_marginal_pairing(1, 0)


@given(st.integers(min_value=2, max_value=200), st.integers(min_value=0, max_value=2**31))
def test_pairing_is_deterministic_derangement(n, seed):
    p = make_marginal_pairing(n, seed)
    assert sorted(p.tolist()) == list(range(n))
    assert not np.any(p == np.arange(n))
    assert np.array_equal(p, make_marginal_pairing(n, seed))


def test_pairing_covers_all_small_derangements():
    seen = {tuple(make_marginal_pairing(4, s)) for s in range(300)}
    assert seen == _derangements(4)


@pytest.mark.parametrize(
    "table, expected",
    [
        (np.full((2, 2), 0.25), 0.0),
        (np.diag([0.5, 0.5]), LN2),
        ([[0.4, 0.1], [0.1, 0.4]], 0.8 * math.log(1.6) + 0.2 * math.log(0.4)),
    ],
)
def test_discrete_oracle(table, expected):
    assert discrete_mi_oracle(table) == pytest.approx(expected, abs=1e-12)


def test_discrete_oracle_value_frozen():
    # 0.8 ln 1.6 + 0.2 ln 0.4 = 0.192744757...
    assert discrete_mi_oracle([[0.4, 0.1], [0.1, 0.4]]) == pytest.approx(0.19274475702175750, abs=1e-12)


@pytest.mark.parametrize("table", [[[0.5, 0.4]], [[0.5, 0.6], [0.0, -0.1]]])
def test_discrete_oracle_rejects_bad_tables(table):
    with pytest.raises(ValueError):
        discrete_mi_oracle(table)


def test_gaussian_oracle():
    assert gaussian_mi_oracle(0.0) == 0.0
    assert gaussian_mi_oracle(0.8) == pytest.approx(0.51082562376599070, abs=1e-12)
    assert gaussian_mi_oracle(-0.8) == gaussian_mi_oracle(0.8)
    for bad in (1.0, -1.0, 1.5):
        with pytest.raises(ValueError):
            gaussian_mi_oracle(bad)


def test_gaussian_oracle_agrees_with_discretised_plugin():
    # Fine-grid quadrature of the bivariate normal density as an independent check.
    rho = 0.8
    grid = np.linspace(-7, 7, 1401)
    x, y = np.meshgrid(grid, grid, indexing="ij")
    dens = np.exp(-(x**2 - 2 * rho * x * y + y**2) / (2 * (1 - rho**2)))
    table = dens / dens.sum()
    assert discrete_mi_oracle(table) == pytest.approx(gaussian_mi_oracle(rho), abs=2e-3)


def test_fixed_critic_dv_is_a_lower_bound():
    rng = np.random.default_rng(0)
    joint = rng.dirichlet(np.ones(9)).reshape(3, 3)
    critic = rng.normal(0, 1.5, size=(3, 3))
    n = 100_000
    cells = rng.choice(9, size=n, p=joint.ravel())
    xs, ys = np.divmod(cells, 3)
    perm = make_marginal_pairing(n, 1)
    est = dv_mi_lower_bound(ScorePair(critic[xs, ys], critic[xs, ys[perm]])).value
    assert est <= discrete_mi_oracle(joint) + 0.05
