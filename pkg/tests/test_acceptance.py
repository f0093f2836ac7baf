"""Acceptance gate: one test per primary criterion, each reported in the summary."""
import csv
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from specbound import analytics
from specbound.cli import random_prompts
from specbound.engine import (
    EngineConfig,
    PrefillCache,
    RoundTrace,
    Session,
    Trigger,
    assert_equivalence,
    prefill,
)
from specbound.exit_policy import ActConfig, anneal_temperature, should_exit, top1_confidence
from specbound.model import ToyModelSpec, baseline_decode, build_model, final_logits, full_forward
from specbound.sampling import Greedy, Temperature, softmax
from specbound.training import build_corpus, head_loss_and_grad, normalized_features

SNAPSHOT = Path(__file__).parent / "snapshots" / "sweep_d_max.csv"

GRID = {
    "anneal_alpha": [0.0, 0.2, 1.0],
    "threshold": [0.3, 0.55, 0.8, 0.99],
    "d_max": [1, 4, 11],
    "w_max": [1, 4, 8],
}


@pytest.mark.criterion("losslessness: 200 prompts x 108 configs, zero mismatches, < 60 s")
def test_losslessness_grid(trained_model, criterion):
    model = trained_model
    prompts = random_prompts(200, 2024, model.vocab_size)
    n_new = 16
    start = time.perf_counter()
    baselines = [baseline_decode(model, p, n_new, Greedy()).tokens for p in prompts]
    prefills = PrefillCache(model)
    mismatches = 0
    configs = 0
    for alpha, tau, d_max, w_max in itertools.product(*GRID.values()):
        cfg = EngineConfig(act=ActConfig(alpha, tau, model.num_layers), d_max=d_max, w_max=w_max,
                           max_new_tokens=n_new)
        mismatches += assert_equivalence(model, prompts, cfg, baselines, prefills).mismatch_count
        configs += 1
    elapsed = time.perf_counter() - start
    criterion.check(configs == 108 and mismatches == 0 and elapsed < 60.0,
                    f"{configs} configs, {mismatches} mismatches, {elapsed:.1f} s")


@pytest.mark.criterion("expected accepted tokens: Monte Carlo within 3 SE, closed form = finite sum")
def test_expected_accepted_agreement(criterion):
    start = time.perf_counter()
    worst = 0.0
    for i, (a, w) in enumerate(itertools.product(np.round(np.arange(0.1, 1.0, 0.1), 1), range(1, 9))):
        mean, se = analytics.monte_carlo_accepted(float(a), w, 100_000, seed=i)
        worst = max(worst, abs(mean - analytics.expected_accepted(float(a), w)) / se)
    sum_err = 0.0
    for a, w in itertools.product(np.linspace(0.0, 0.999, 500), range(1, 33)):
        sum_err = max(sum_err, abs(analytics.expected_accepted(a, w) - analytics.expected_accepted_sum(a, w)))
    elapsed = time.perf_counter() - start
    criterion.check(worst < 3.0 and sum_err < 1e-12 and elapsed < 30.0,
                    f"max |z| = {worst:.2f}, max sum error {sum_err:.1e}, {elapsed:.1f} s")


def _full_width_trace(w, d_max, L):
    return RoundTrace(drafts=[], trigger=Trigger.WIDTH_BOUND, align_target_layer=d_max,
                      accepted_count=w, bonus_token=None, layer_units_draft=w * d_max,
                      layer_units_verify=w * (L - d_max), verify_layers=L - d_max,
                      committed_tokens=[0] * w)


@pytest.mark.criterion("speedup formula: replay within 1e-9, identity to 1e-12 on 1000 draws")
def test_speedup_formula_agreement(criterion):
    rng = np.random.default_rng(11)
    replay_err = 0.0
    for _ in range(200):
        L = int(rng.integers(2, 65))
        d_max = int(rng.integers(1, L))
        w = int(rng.integers(1, 17))
        t_ar = float(rng.uniform(0.1, 5.0))
        traces = [_full_width_trace(w, d_max, L) for _ in range(int(rng.integers(1, 20)))]
        cm = analytics.CostModel(t_ar=t_ar, L=L, include_bonus=False)
        sd = analytics.replay_cost(traces, cm).speedup
        ref = analytics.speedup(analytics.SpeedupParams(L, d_max, w, 1.0, t_ar))
        replay_err = max(replay_err, abs(sd - ref))
    ident_err = 0.0
    for _ in range(1000):
        L = int(rng.integers(2, 129))
        p = analytics.SpeedupParams(L=L, d_max=int(rng.integers(1, L)), w=int(rng.integers(1, 33)),
                                    accept_rate=float(rng.uniform(0, 1)), t_ar=float(rng.uniform(0.01, 10)))
        lhs = analytics.speedup(p)
        rhs = analytics.expected_accepted(p.accept_rate, p.w) / analytics.round_time(p) * p.t_ar
        ident_err = max(ident_err, abs(lhs - rhs) / max(1.0, abs(lhs)))
    criterion.check(replay_err < 1e-9 and ident_err < 1e-12,
                    f"replay error {replay_err:.1e}, identity error {ident_err:.1e}")


@pytest.mark.criterion("monotonicity: analytic SD strictly increasing in a for 50 triples")
def test_speedup_monotone_in_acceptance(criterion):
    rng = np.random.default_rng(5)
    grid = np.linspace(0.0, 0.999, 2000)
    failures = 0
    for _ in range(50):
        L = int(rng.integers(2, 129))
        d_max, w = int(rng.integers(1, L)), int(rng.integers(1, 33))
        sd = np.array([analytics.speedup(analytics.SpeedupParams(L, d_max, w, a)) for a in grid])
        limit = analytics.speedup(analytics.SpeedupParams(L, d_max, w, 1.0))
        failures += not (np.all(np.diff(sd) > 0) and limit > sd[-1])
    criterion.check(failures == 0, f"{failures} of 50 triples not strictly increasing")


@pytest.mark.criterion("exit policy: argmax invariance, flattening, T_L = 1, exit implication")
def test_act_properties(criterion):
    rng = np.random.default_rng(3)
    argmax_bad = flatten_bad = implication_bad = 0
    temps = np.linspace(1.0, 3.0, 9)
    for _ in range(10_000):
        z = rng.normal(scale=rng.uniform(0.1, 10.0), size=int(rng.integers(2, 65)))
        tokens, probs = zip(*(top1_confidence(z, t) for t in temps))
        argmax_bad += any(t != int(np.argmax(z)) for t in tokens)
        flatten_bad += bool(np.any(np.diff(probs) > 0))
    boundary_ok = all(anneal_temperature(L, L, a) == 1.0
                      for L in range(1, 200) for a in (0.0, 0.2, 1.0, 7.3, 1e6))
    for _ in range(10_000):
        L = int(rng.integers(2, 64))
        layer = int(rng.integers(1, L))
        a1, a2 = np.sort(rng.uniform(0, 3, size=2))
        tau = float(rng.uniform(0.01, 0.99))
        z = rng.normal(scale=rng.uniform(0.1, 10.0), size=32)
        hi = should_exit(z, layer, ActConfig(float(a2), tau, L))
        lo = should_exit(z, layer, ActConfig(float(a1), tau, L))
        implication_bad += hi.exited and not lo.exited
    criterion.check(argmax_bad == 0 and flatten_bad == 0 and boundary_ok and implication_bad == 0,
                    f"argmax {argmax_bad}, flattening {flatten_bad}, boundary {boundary_ok}, "
                    f"implication {implication_bad} violations")


@pytest.mark.criterion("cache coherence: 100 sequences match the full forward exactly")
def test_cache_coherence(trained_model, criterion):
    model = trained_model
    prompts = random_prompts(100, 77, model.vocab_size)
    configs = list(itertools.product(*GRID.values()))
    bad_positions = missing = checked = 0
    for i, prompt in enumerate(prompts):
        alpha, tau, d_max, w_max = configs[(7 * i) % len(configs)]
        cfg = EngineConfig(act=ActConfig(alpha, tau, model.num_layers), d_max=d_max, w_max=w_max,
                           max_new_tokens=24)
        session = prefill(model, prompt, cfg, debug=True)
        session.emit_first()
        session.run()
        states, _ = full_forward(model, session.tokens)
        # The final token is still pending and has no states yet.
        expected = set(range(len(session.tokens) - 1))
        missing += len(expected - set(session.state_log))
        for pos, logged in session.state_log.items():
            checked += 1
            bad_positions += not np.array_equal(logged, states[pos])
    criterion.check(bad_positions == 0 and missing == 0,
                    f"{checked} positions checked, {bad_positions} differ, {missing} missing")


@pytest.mark.criterion("gradient check: 100 probes, relative error < 1e-4")
def test_gradient_check(default_model, criterion):
    model = default_model
    corpus = build_corpus(model, 2, 16, rng_seed=4)
    y = np.concatenate(corpus.labels)
    rng = np.random.default_rng(8)
    # Central differences: a step near the cube root of machine epsilon
    # balances truncation against rounding error.
    eps = 1e-5
    worst = 0.0
    for _ in range(100):
        layer = int(rng.integers(1, model.num_layers))
        x = normalized_features(corpus, layer, model.spec.head_gain)
        w = model.exit_heads[layer - 1] + rng.normal(scale=0.1, size=model.exit_heads[0].shape)
        i, j = int(rng.integers(w.shape[0])), int(rng.integers(w.shape[1]))
        _, grad = head_loss_and_grad(w, x, y)
        wp, wm = w.copy(), w.copy()
        wp[i, j] += eps
        wm[i, j] -= eps
        numeric = (head_loss_and_grad(wp, x, y)[0] - head_loss_and_grad(wm, x, y)[0]) / (2 * eps)
        worst = max(worst, abs(grad[i, j] - numeric) / max(abs(grad[i, j]), abs(numeric), 1e-8))
    criterion.check(worst < 1e-4, f"max relative error {worst:.2e}")


@pytest.mark.criterion("distribution preservation: TV < 0.02 at 5 contexts, 1e5 draws, < 120 s")
def test_distribution_preservation(criterion):
    spec = ToyModelSpec(num_layers=6, hidden_dim=16, vocab_size=16, max_context=64, seed=3, head_gain=3.0)
    model = build_model(spec).with_head_mode("oracle")
    rng = np.random.default_rng(0)
    draws = 100_000
    start = time.perf_counter()
    tvs, triggers = [], set()
    for c in range(5):
        context = [int(t) for t in rng.integers(2, spec.vocab_size, size=6)]
        cfg = EngineConfig(act=ActConfig(0.2, 0.45, spec.num_layers), d_max=3, w_max=4,
                           strategy=Temperature(1.0), max_new_tokens=1, rng_seed=c, eos_id=None)
        states, _ = full_forward(model, context)
        target = softmax(final_logits(model, states[-1, -1]), 1.0)
        session = Session(model, cfg)
        session.prefill_pending(context)
        counts = np.zeros(spec.vocab_size)
        for _ in range(draws):
            session.rewind(len(context))
            trace = session.run_round()
            triggers.add(trace.trigger)
            counts[session.tokens[len(context)]] += 1
        tvs.append(0.5 * np.abs(counts / draws - target).sum())
    elapsed = time.perf_counter() - start
    criterion.check(max(tvs) < 0.02 and elapsed < 120.0,
                    f"max TV {max(tvs):.4f}, triggers {sorted(t.value for t in triggers)}, {elapsed:.1f} s")


def _run_d_max_sweep(model):
    prompts = random_prompts(100, 7, model.vocab_size)
    return analytics.sweep(model, prompts, EngineConfig(max_new_tokens=32), "d_max", range(1, 12))


@pytest.mark.criterion("sweep shape: interior SD maximum over d_max, CR nondecreasing")
def test_sweep_shape(trained_model, criterion):
    result = _run_d_max_sweep(trained_model)
    sd, cr = result.empirical_sd, result.empirical_cr
    best = result.values[int(np.argmax(sd))]
    interior = result.values[0] < best < result.values[-1]
    cr_ok = bool(np.all(np.diff(cr) >= 0))
    with SNAPSHOT.open() as fh:
        snap = list(csv.DictReader(fh))
    snap_sd = np.array([float(r["empirical_sd"]) for r in snap])
    snap_cr = np.array([float(r["empirical_cr"]) for r in snap])
    matches = bool(np.allclose(sd, snap_sd, rtol=1e-9, atol=0) and np.allclose(cr, snap_cr, rtol=1e-9, atol=0))
    criterion.check(interior and cr_ok and matches,
                    f"SD peaks at d_max={best}, CR nondecreasing {cr_ok}, snapshot match {matches}")


@pytest.mark.criterion("break-even reporting: percentages sum to 100, SD < 1 prompts flagged")
def test_break_even_report(trained_model, criterion):
    model = trained_model
    cfg = EngineConfig(max_new_tokens=32)
    groups = analytics.decode_prompts(model, random_prompts(100, 31, model.vocab_size), cfg)
    hist = analytics.speedup_distribution(groups, analytics.CostModel.for_config(cfg), num_buckets=10)
    total = float(hist.percentages.sum())
    flagged = hist.below_break_even
    expected = [i for i, g in enumerate(groups)
                if analytics.replay_cost(g, analytics.CostModel.for_config(cfg)).speedup < 1.0]
    report = hist.report()
    reported = "below break-even (SD < 1): " + (f"{len(flagged)} prompt(s)" if flagged else "none")
    criterion.check(math.isclose(total, 100.0, abs_tol=1e-9) and flagged == expected and reported in report,
                    f"sum {total:.6f}%, min SD {hist.min:.3f}, {len(flagged)} prompt(s) below 1")
