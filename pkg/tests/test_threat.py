import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from blmrobust import autodiff as ad
from blmrobust.errors import BoxViolation, SigmaZero
from blmrobust.model import build_logits, param_nodes
from blmrobust.pipeline import PAD_LENGTH, channel_stats, preprocess, probs_and_labels
from blmrobust.threat import (
    PerturbationVars,
    StructuredBudget,
    admissibility_check,
    assemble_delta,
    delta_node,
    in_preprocessed_image,
    infeasibility_witness,
    reparam_normalized,
    reparam_signal,
    signal_delta,
    signal_wrapper_node,
)

from conftest import BUDGET, random_window
from oracles import grid_admissible, unpadded_mean

unit = st.floats(-1.0, 1.0)


def u_arrays(T):
    return arrays(np.float64, (T, 3), elements=unit)


def test_zero_u_gives_zero_delta():
    assert not assemble_delta(np.zeros((7, 3)), BUDGET).any()


def test_budget_tightness():
    d = assemble_delta(np.ones((5, 3)), BUDGET)
    np.testing.assert_allclose(d, 0.12, rtol=0, atol=1e-15)
    np.testing.assert_allclose(np.abs(d).max(axis=0), BUDGET.per_channel, rtol=0, atol=0)


def test_opposite_independent_part():
    u = np.zeros((1, 3))
    u[0, 0], u[0, 1] = 1.0, -1.0
    assert assemble_delta(u, BUDGET)[0, 0] == pytest.approx(0.08, abs=1e-15)


def test_perturbation_vars_box():
    with pytest.raises(BoxViolation):
        assemble_delta(PerturbationVars.from_stacked(np.full((3, 3), 1.5)), BUDGET)
    with pytest.raises(BoxViolation):
        assemble_delta(np.full((3, 3), -1.01), BUDGET)
    pv = PerturbationVars.zeros(4)
    assert pv.stacked().shape == (4, 3)


@given(u_arrays(6), st.floats(0, 0.3), st.floats(0, 0.3))
def test_assembled_delta_within_budget(u, com, ind):
    b = StructuredBudget.from_pair(com, ind)
    d = assemble_delta(u, b)
    assert np.all(np.abs(d) <= com + ind + 1e-15)


def test_reparam_normalized_identity(rng):
    pi = preprocess(random_window(rng, 40))
    np.testing.assert_array_equal(reparam_normalized(pi, BUDGET, np.zeros((PAD_LENGTH, 3))), pi.z)


def test_reparam_normalized_is_admissible(rng):
    pi = preprocess(random_window(rng, 40))
    u = rng.uniform(-1, 1, size=(PAD_LENGTH, 3))
    diff = reparam_normalized(pi, BUDGET, u) - pi.z
    assert admissibility_check(diff, None, BUDGET, scale=np.ones(2)).feasible


def test_reparam_normalized_logit_gradient(tiny_params, rng):
    pi = preprocess(random_window(rng, 40))
    g = ad.Graph()
    u = g.input("u")
    z = g.const(pi.z[None]) + delta_node(u, BUDGET)
    logits = build_logits(z, param_nodes(g, tiny_params), tiny_params.cfg).logits
    g.set_output(ad.sum_(ad.slice_axis(logits, 1, 1, 2)))
    u0 = rng.uniform(-1, 1, size=(1, PAD_LENGTH, 3))
    entries = rng.choice(u0.size, size=60, replace=False)
    rep = ad.finite_diff_report(g, {"u": u0}, "u", h=1e-5, entries=entries, skip_kinks=True)
    assert rep.n_checked > 30
    assert rep.max_rel_error < 1e-4


def test_reparam_signal_identity(rng):
    x = random_window(rng, 50)
    got = reparam_signal(x, BUDGET, np.zeros((50, 3)))
    ref = preprocess(x)
    assert got.z.tobytes() == ref.z.tobytes()
    np.testing.assert_array_equal(got.mask, ref.mask)


@given(u_arrays(24), st.integers(0, 1000))
def test_reparam_signal_bound_and_round_trip(u, seed):
    x = random_window(np.random.default_rng(seed), 24)
    sigma = channel_stats(x)[1][0, 0]
    d = signal_delta(x, BUDGET, u)
    assert np.all(np.abs(d) <= sigma * BUDGET.per_channel * (1 + 1e-12))
    assert admissibility_check(d, x, BUDGET).feasible


def test_reparam_signal_xent_gradient(tiny_params, rng):
    x = random_window(rng, 64)
    sigma = channel_stats(x)[1]
    g = ad.Graph()
    u = g.input("u")
    z, _ = signal_wrapper_node(g.const(x[None]), g.const(sigma), u, BUDGET)
    logits = build_logits(z, param_nodes(g, tiny_params), tiny_params.cfg).logits
    g.set_output(ad.sum_(ad.softmax_xent(logits, np.eye(3)[[1]])))
    u0 = rng.uniform(-1, 1, size=(1, 64, 3))
    entries = rng.choice(u0.size, size=60, replace=False)
    rep = ad.finite_diff_report(g, {"u": u0}, "u", h=1e-5, entries=entries, skip_kinks=True)
    assert rep.max_rel_error < 1e-3


def test_reparam_signal_constant_window():
    with pytest.raises(SigmaZero):
        reparam_signal(np.ones((10, 2)), BUDGET, np.zeros((10, 3)))


def test_admissibility_zero_delta(rng):
    x = random_window(rng, 10)
    adm = admissibility_check(np.zeros((10, 2)), x, BUDGET)
    assert adm.feasible
    np.testing.assert_array_equal(adm.witness, 0.0)


def test_admissibility_interval_examples():
    ones = np.ones(2)
    adm = admissibility_check(np.array([[0.12, 0.12]]), None, BUDGET, scale=ones)
    assert adm.feasible and adm.witness[0] == pytest.approx(1.0, abs=1e-7)
    assert not admissibility_check(np.array([[0.12, -0.12]]), None, BUDGET, scale=ones).feasible


@given(st.integers(1, 4), st.integers(0, 10**6), st.floats(0.0, 1.6))
def test_admissibility_matches_grid(W, seed, spread):
    rng = np.random.default_rng(seed)
    com = rng.uniform(0.02, 0.2, size=2)
    ind = rng.uniform(0.0, 0.05, size=2)
    b = StructuredBudget(tuple(com), tuple(ind))
    d = assemble_delta(rng.uniform(-1, 1, size=(W, 3)), b) * spread
    d += rng.normal(scale=0.01, size=d.shape) * (seed % 2)
    interval = admissibility_check(d, None, b, scale=np.ones(2), slack=0.0).feasible
    if grid_admissible(d, com, ind):
        assert interval
    if interval:
        assert grid_admissible(d, com, ind, widen=0.01)


def test_image_membership_of_clean_input(rng):
    pi = preprocess(random_window(rng, 30))
    assert in_preprocessed_image(pi.z, pi.mask)


@pytest.mark.parametrize("eps", [0.01, 0.1, 1.0])
def test_infeasibility_witness(rng, eps):
    pi = preprocess(random_window(rng, 10))
    z_hat = infeasibility_witness(pi, eps)
    assert np.abs(z_hat - pi.z).max() == pytest.approx(eps / 2, rel=1e-12)
    assert not in_preprocessed_image(z_hat, pi.mask)
    assert unpadded_mean(z_hat, pi.mask) == pytest.approx(eps / 20, abs=1e-12)


def test_witness_rejects_zero_eps(rng):
    with pytest.raises(ValueError):
        infeasibility_witness(preprocess(random_window(rng, 10)), 0.0)


@given(st.integers(2, 200), st.sampled_from([0.01, 0.1, 1.0]), st.integers(0, 10**6))
def test_witness_property(W, eps, seed):
    pi = preprocess(random_window(np.random.default_rng(seed), W))
    z_hat = infeasibility_witness(pi, eps)
    assert np.abs(z_hat - pi.z).max() < eps
    assert abs(unpadded_mean(z_hat, pi.mask)) >= eps / (2 * W) - 1e-12
    assert not in_preprocessed_image(z_hat, pi.mask)


def test_budget_validation():
    with pytest.raises(ValueError):
        StructuredBudget((-0.1, 0.1), (0.0, 0.0))
    b = StructuredBudget.from_dict(BUDGET.to_dict())
    assert b == BUDGET
    assert BUDGET.scaled(2).eps_com == (0.2, 0.2)
