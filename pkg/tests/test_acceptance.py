"""End-to-end acceptance checks, one test per criterion.

The terminal summary prints a PASS/FAIL line for each criterion (see conftest).
"""

import json
import time

import numpy as np
import pytest

from blmrobust import autodiff as ad
from blmrobust.attack import ALL_KINDS, AttackConfigKind, PgdConfig, WrappedObjective, evaluate_dataset, run_config
from blmrobust.data import CHANNELING, demo_trace
from blmrobust.pipeline import classify, classify_batch, preprocess
from blmrobust.sequence import (
    classification_sequence,
    is_extendable_under_attack,
    maximal_adv_sequence_under_attack,
    seed_sequence,
    sequence_attack,
    smoothness,
)
from blmrobust.threat import (
    StructuredBudget,
    admissibility_check,
    assemble_delta,
    in_preprocessed_image,
    infeasibility_witness,
)
from blmrobust.training import accuracy, finetune_adversarial

from conftest import BUDGET, FINETUNE, random_window
from oracles import grid_admissible, unpadded_mean

W = 128
CFG = PgdConfig(steps=40, seed=0)
ZERO = StructuredBudget.from_pair(0.0, 0.0)
SCALES = (0.5, 1.0, 2.0)


def report_numbers(report):
    return json.dumps(report.to_dict(False), sort_keys=True)


# ---------------------------------------------------------------------------
# shared runs (criterion 10 repeats them)

def run_table2(params, dataset):
    return evaluate_dataset(ALL_KINDS, params, dataset.test.windows, dataset.test.labels, BUDGET, CFG)


def run_table3(clean_params, adv_params, dataset):
    xs, ys = dataset.test.windows, dataset.test.labels
    kinds = [AttackConfigKind.BASELINE]
    out = {s: evaluate_dataset(kinds, clean_params, xs, ys, BUDGET.scaled(s), CFG) for s in SCALES}
    out["adv"] = evaluate_dataset(kinds, adv_params, xs, ys, BUDGET, CFG)
    return out


def run_fig5(params):
    return sequence_attack(params, demo_trace().values, 200, 215, BUDGET, CFG, W=W)


@pytest.fixture(scope="module")
def table2(clean_model, dataset):
    t = time.perf_counter()
    rep = run_table2(clean_model, dataset)
    return rep, time.perf_counter() - t


@pytest.fixture(scope="module")
def table3(clean_model, adv_run, dataset):
    return run_table3(clean_model, adv_run[0], dataset)


@pytest.fixture(scope="module")
def fig5(clean_model):
    return run_fig5(clean_model)


# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(clean_model, dataset):
    rng = np.random.default_rng(0)
    idx = rng.choice(len(dataset.test), size=50, replace=False)
    start = time.perf_counter()
    worst, checked, scale = 0.0, 0, []
    for i in idx:
        x0 = dataset.test.windows[i][None]
        # loss of a wrong class keeps the gradient away from softmax saturation
        wrong = (classify_batch(clean_model, x0)[1] + 1) % 3
        obj = WrappedObjective(AttackConfigKind.BASELINE, clean_model, x0, wrong, BUDGET)
        u = rng.uniform(-1, 1, size=(1,) + obj.shape)
        bind = obj._bindings(u, [0])
        scale.append(np.abs(ad.backward_grad(obj.graph, bind, {"u"})["u"]).max())
        entries = rng.choice(u.size, size=16, replace=False)
        rep = ad.finite_diff_report(obj.graph, bind, "u", h=1e-4, entries=entries, skip_kinks=True)
        worst = max(worst, rep.max_rel_error)
        checked += rep.n_checked
    elapsed = time.perf_counter() - start
    print(f"criterion 1: max rel error {worst:.2e} over {checked} entries "
          f"(median max |grad| {np.median(scale):.2e}), {elapsed:.1f}s")
    assert checked >= 600 and min(scale) > 1e-3
    assert worst < 1e-3
    assert elapsed < 60


def test_criterion_2_affine_invariance(clean_model, dataset):
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(100):
        x = dataset.test.windows[rng.integers(len(dataset.test))]
        a, b = rng.uniform(0.1, 10), rng.uniform(-5, 5)
        p0, l0 = classify_batch(clean_model, x[None])
        p1, l1 = classify_batch(clean_model, (a * x + b)[None])
        assert l0[0] == l1[0]
        worst = max(worst, float(np.abs(p0 - p1).max()))
    print(f"criterion 2: max probability difference {worst:.1e}")
    assert worst <= 1e-9


def test_criterion_3_infeasibility_witness():
    rng = np.random.default_rng(2)
    failures = 0
    for _ in range(100):
        Wn = int(rng.integers(2, 200))
        pi = preprocess(random_window(rng, Wn))
        for eps in (0.01, 0.1, 1.0):
            z_hat = infeasibility_witness(pi, eps)
            inside = np.abs(z_hat - pi.z).max() <= eps
            off_image = abs(unpadded_mean(z_hat, pi.mask)) >= eps / (2 * Wn) - 1e-12
            failures += not (inside and off_image and not in_preprocessed_image(z_hat, pi.mask))
    assert failures == 0


def test_criterion_4_admissibility_oracle():
    rng = np.random.default_rng(3)
    disagreements = 0
    for k in range(1000):
        Wn = int(rng.integers(1, 5))
        com = rng.uniform(0.02, 0.2, size=2)
        ind = rng.uniform(0.0, 0.05, size=2)
        b = StructuredBudget(tuple(com), tuple(ind))
        d = assemble_delta(rng.uniform(-1, 1, size=(Wn, 3)), b) * rng.uniform(0, 1.6)
        if k % 2:
            d += rng.normal(scale=0.01, size=d.shape)
        interval = admissibility_check(d, None, b, scale=np.ones(2), slack=0.0).feasible
        # the grid steps by 0.01 in s, i.e. 0.01 * eps_com in signal units
        if grid_admissible(d, com, ind) and not interval:
            disagreements += 1
        if interval and not grid_admissible(d, com, ind, widen=0.01):
            disagreements += 1
    assert disagreements == 0


def test_criterion_5_table2_pattern(table2):
    rep, elapsed = table2
    assert 250 <= rep["Baseline"].n_samples <= 350
    lines = [f"{k.value}: {rep[k].ra_tool:.3f} -> {rep[k].ra_pipe:.3f}" for k in ALL_KINDS]
    print("criterion 5: " + "; ".join(lines) + f" ({elapsed:.0f}s)")
    assert rep["Baseline"].ra_tool == rep["Baseline"].ra_pipe
    gaps = {}
    for kind in (AttackConfigKind.NO_NORMALIZATION, AttackConfigKind.NO_PADDING,
                 AttackConfigKind.NAIVE_RAW):
        gaps[kind] = rep[kind].ra_pipe - rep[kind].ra_tool
        assert gaps[kind] >= 0
    assert gaps[AttackConfigKind.NAIVE_RAW] == max(gaps.values())
    assert gaps[AttackConfigKind.NAIVE_RAW] > max(gaps[AttackConfigKind.NO_NORMALIZATION],
                                                  gaps[AttackConfigKind.NO_PADDING])
    assert elapsed < 15 * 60


def test_criterion_6_table3_pattern(table3, clean_model, adv_run, dataset):
    ra = [table3[s]["Baseline"].ra_pipe for s in SCALES]
    adv = table3["adv"]["Baseline"].ra_pipe
    xs, ys = dataset.test.windows, dataset.test.labels
    acc_clean, acc_adv = accuracy(clean_model, xs, ys), accuracy(adv_run[0], xs, ys)
    print(f"criterion 6: RA_pipe by scale {[round(r, 3) for r in ra]}; "
          f"fine-tuned {ra[1]:.3f} -> {adv:.3f}; clean acc {acc_clean:.3f} -> {acc_adv:.3f}")
    assert ra[0] >= ra[1] >= ra[2]
    assert adv - ra[1] >= 0.02
    assert abs(acc_adv - acc_clean) <= 0.02


def test_criterion_7_zero_budget(clean_model, dataset):
    rep = evaluate_dataset(ALL_KINDS, clean_model, dataset.test.windows, dataset.test.labels,
                           ZERO, PgdConfig(steps=3, seed=0))
    for kind in ALL_KINDS:
        assert rep[kind].ra_tool == 1.0 and rep[kind].ra_pipe == 1.0
    values = demo_trace().values
    res = sequence_attack(clean_model, values, 200, 215, ZERO, CFG, W=W)
    assert res.n_flips == 0
    assert res.perturbed.tobytes() == values.tobytes()


def test_criterion_8_sequence_attack(clean_model, fig5):
    values = demo_trace().values
    seq = fig5.sequence
    assert len(seq) == 16 and np.all(seq.clean_labels == CHANNELING)
    flipped = int(np.sum(seq.labels != CHANNELING))
    clean = classification_sequence(clean_model, values, W)
    pert = classification_sequence(clean_model, fig5.perturbed, W)
    touched = np.flatnonzero(np.any(fig5.perturbed != values, axis=1))
    lo, hi = touched.min(), touched.max()
    # windows [j, j + W) disjoint from the support [lo, hi]
    disjoint = np.array([j + W - 1 < lo or j > hi for j in range(len(clean))])
    rep = smoothness(pert, 0.5)
    print(f"criterion 8: {flipped}/16 flipped, support [{lo}, {hi}], max step {rep.max_step:.3f}")
    assert flipped >= 8
    np.testing.assert_array_equal(pert.labels[disjoint], clean.labels[disjoint])
    assert rep.steps.shape == (len(pert) - 1,)
    assert np.all(rep.steps >= 0)


def _seeds(params, values, count, stride=4):
    out = []
    for o in range(172, values.shape[0] - W, stride):
        if len(out) == count:
            break
        if classify(params, values[o:o + W]).predicted_label != CHANNELING:
            continue
        r = run_config(AttackConfigKind.BASELINE, params, values[o:o + W], BUDGET, CFG)
        if r.pipeline_success:
            out.append(seed_sequence(params, values, o, r.reconstructed_delta, BUDGET, W))
    return out


def _reverify(params, values, seq, ext):
    j = seq.end + 1 if ext.direction == "forward" else seq.start - 1
    x = values[j:j + W].copy()
    for k in range(W):
        t = j + k
        if t == ext.index:
            x[k] += ext.sample_delta
        elif seq.offset <= t < seq.offset + seq.delta.shape[0]:
            x[k] += seq.delta[t - seq.offset]
    return classify(params, x).predicted_label != classify(params, values[j:j + W]).predicted_label


def test_criterion_9_extendability(clean_model):
    values = demo_trace().values
    seeds = _seeds(clean_model, values, 10)
    assert len(seeds) == 10
    agree, methods = 0, []
    for seq in seeds:
        for direction in ("forward", "backward"):
            grid = is_extendable_under_attack(clean_model, values, seq, BUDGET, direction, CFG,
                                              grid_resolution=41, use_pgd=False)
            both = is_extendable_under_attack(clean_model, values, seq, BUDGET, direction, CFG,
                                              grid_resolution=21, use_pgd=True)
            agree += grid.extendable == both.extendable
            methods.append(both.method)
            for ext in (grid, both):
                if ext.extendable:
                    assert _reverify(clean_model, values, seq, ext)
    # persistence: some seed grows into a sequence of at least three windows
    longest, attempts = 0, 0
    for seq in _seeds(clean_model, values, 50, stride=2):
        attempts += 1
        found = maximal_adv_sequence_under_attack(clean_model, values, seq, BUDGET, CFG, max_length=3)
        assert found.consistent() and np.all(found.adversarial)
        longest = max(longest, len(found))
        if longest >= 3:
            break
    print(f"criterion 9: {agree}/20 verdicts agree (methods {sorted(set(methods))}); "
          f"length {longest} after {attempts} attempts")
    assert agree == 20
    assert longest >= 3 and attempts <= 50


def test_criterion_10_determinism(clean_model, adv_run, dataset, table2, table3, fig5):
    assert report_numbers(run_table2(clean_model, dataset)) == report_numbers(table2[0])
    adv_again, log_again = finetune_adversarial(clean_model, dataset, FINETUNE)
    assert adv_again.fingerprint() == adv_run[0].fingerprint()
    assert log_again.to_dict() == adv_run[1].to_dict()
    again = run_table3(clean_model, adv_again, dataset)
    for key in table3:
        assert report_numbers(again[key]) == report_numbers(table3[key])
    seq = run_fig5(clean_model)
    assert seq.perturbed.tobytes() == fig5.perturbed.tobytes()
    assert seq.sequence.probs.tobytes() == fig5.sequence.probs.tobytes()
