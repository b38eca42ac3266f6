"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line."""

import itertools
import math
import time

import mpmath
import numpy as np
import pytest

from gradsan.accountant import PrivacyLedger, amplify, query, to_dp_from_curve
from gradsan.autodiff import NetworkSpec, Tape, grad_of_grad_norm, init_params, penalty_value
from gradsan.autodiff.network import apply, param_leaves
from gradsan.central import Evaluator, TrainConfig, build_sites, template_pair, train, train_reference, warm_start
from gradsan.data import make_glyphs, make_ring, ring_centers
from gradsan.federated import (
    HEADER_BYTES,
    bug_scenario,
    check_conservation,
    make_clients,
    server_train,
)
from gradsan.gan import upstream_norms

from helpers import base, central_diff, oracle_amplify, param_diff, record, rel_err, sensitivity_search

ACTIVATIONS = ("linear", "tanh", "softplus", "sigmoid")


def random_network(rng, output_dim=None):
    hidden = tuple(int(w) for w in rng.integers(1, 7, size=int(rng.integers(0, 3))))
    return NetworkSpec.mlp(int(rng.integers(1, 5)), output_dim or int(rng.integers(1, 4)), hidden,
                           activation=str(rng.choice(ACTIVATIONS)), output=str(rng.choice(ACTIVATIONS)),
                           cond_dim=int(rng.integers(0, 3)))


def first_order_error(spec, rng):
    params = init_params(spec, rng)
    x = rng.normal(size=(3, spec.input_dim))
    cond = rng.normal(size=(3, spec.cond_dim)) if spec.cond_dim else None
    cot = rng.normal(size=(3, spec.output_dim))

    def f(p, xv):
        return float(np.sum(apply(spec, p, xv, cond).value * cot))

    tape = Tape()
    leaves = param_leaves(tape, params)
    xin = tape.leaf(x, "input")
    out = apply(spec, leaves, xin, cond)
    grads = tape.gradient(out, [*leaves.values(), xin], cotangent=cot)
    auto = {**dict(zip(leaves, grads[:-1])), "input": grads[-1]}
    fd = {**param_diff(lambda p: f(p, x), params), "input": central_diff(lambda xv: f(params, xv), x)}
    return rel_err(auto, fd)


def second_order_error(spec, rng):
    params = init_params(spec, rng)
    point = rng.normal(size=(3, spec.input_dim))
    cond = rng.normal(size=(3, spec.cond_dim)) if spec.cond_dim else None
    auto = grad_of_grad_norm(spec, params, point, cond)

    def pen(p):
        tape = Tape()
        return float(penalty_value(spec, param_leaves(tape, p), tape.leaf(point), cond).value)

    return rel_err(auto, param_diff(pen, params))


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst1 = worst2 = 0.0
    for _ in range(200):
        worst1 = max(worst1, first_order_error(random_network(rng), rng))
        critic = random_network(rng, output_dim=1)
        worst2 = max(worst2, second_order_error(critic, rng))
    elapsed = time.perf_counter() - t0
    ok = worst1 <= 1e-5 and worst2 <= 1e-4 and elapsed <= 60
    record(1, ok, f"200 networks, worst first-order rel err {worst1:.2e} (<=1e-5), "
                  f"worst penalty-gradient rel err {worst2:.2e} (<=1e-4), {elapsed:.1f}s (<=60s)")
    assert ok


def test_criterion_2_sensitivity_bound():
    worst = sensitivity_search(10_000, seed=7, C=1.0)
    ok = worst <= 2.0 + 1e-9
    record(2, ok, f"10^4 single-sample-differing batch pairs, max clipped distance {worst:.12f} (<= 2C = 2)")
    assert ok


def test_criterion_3_identity_sanitizer_equivalence():
    cfg = TrainConfig(gamma=1.0, sigma=0.0, clip_bound=math.inf, non_private=True, steps=500, warm_steps=10,
                      lr_d=0.01, lr_g=1e-3, seed=11, metrics_every=0)
    ds = make_ring(seed=3)
    steps_a, steps_b = [], []
    a = train(ds, cfg, callback=lambda s, p: steps_a.append(p.gen_params["W0"].tobytes()))
    b = train_reference(ds, cfg, callback=lambda s, p: steps_b.append(p.gen_params["W0"].tobytes()))
    diverge = next((i + 1 for i, (x, y) in enumerate(zip(steps_a, steps_b)) if x != y), None)
    ok = len(steps_a) == len(steps_b) == 500 and diverge is None and a.checkpoint.to_bytes() == b.to_bytes()
    record(3, ok, "500-step sanitized (sigma=0, C=inf, K=1) vs reference WGAN-GP trajectory: "
                  + ("bit-identical at every step" if ok else f"first divergence at step {diverge}"))
    assert ok


def test_criterion_4_accountant_oracle():
    worst = mpmath.mpf(0)
    for gamma, (B, sigma) in itertools.product((1e-3, 1e-2, 0.1), ((1, 10.0), (32, 50.0), (32, 1.07))):
        f = base(B, sigma)
        for lam in range(2, 33):
            expect = oracle_amplify(gamma, f, lam)
            worst = max(worst, abs(mpmath.mpf(amplify(gamma, f, lam)) - expect) / expect)
    led_a, led_b = PrivacyLedger(0.1, 32, 1.07), PrivacyLedger(0.1, 32, 1.07)
    for _ in range(1000):
        led_a.accumulate(1, record=False)
    led_b.accumulate(1000, record=False)
    additive = (led_a.eps_at_order.tobytes() == led_b.eps_at_order.tobytes()
                and np.array_equal(led_a.eps_at_order, 1000 * led_a.per_step))
    eps, lam = to_dp_from_curve([101], [1.0], 1e-5)
    ok = worst <= 1e-10 and additive and abs(eps - 1.11513) <= 1e-5 and lam == 101
    record(4, ok, f"amplify vs 60-digit oracle worst rel err {float(worst):.2e} (<=1e-10); "
                  f"composition additive={additive}; to_dp(1 at order 101, 1e-5)={eps:.6f} (1.11513 +/- 1e-5)")
    assert ok


def test_criterion_5_accountant_monotonicity():
    Ts, Bs, gs, ss, ds = (10, 100, 1000), (1, 8, 32), (1e-3, 1e-2, 0.1), (0.8, 1.07, 2.0), (1e-7, 1e-5, 1e-3)
    eps = lambda T, B, g, s, d: query(s, g, B, T, d)[0]
    bad = []
    for T, B, g in itertools.product(Ts, Bs, gs):
        if not np.all(np.diff([eps(T, B, g, s, 1e-5) for s in ss]) <= 0):
            bad.append(("sigma", T, B, g))
        if not np.all(np.diff([eps(T, B, g, 1.07, d) for d in ds]) <= 0):
            bad.append(("delta", T, B, g))
    for (a, b), s in itertools.product(itertools.product(range(3), range(3)), ss):
        if not np.all(np.diff([eps(T, Bs[a], gs[b], s, 1e-5) for T in Ts]) >= 0):
            bad.append(("T", a, b, s))
        if not np.all(np.diff([eps(Ts[a], B, gs[b], s, 1e-5) for B in Bs]) >= 0):
            bad.append(("B", a, b, s))
        if not np.all(np.diff([eps(Ts[a], Bs[b], g, s, 1e-5) for g in gs]) >= 0):
            bad.append(("gamma", a, b, s))
    ok = not bad
    record(5, ok, "epsilon non-decreasing in T, B, gamma and non-increasing in sigma, delta over 3x3x3 grids"
                  + ("" if ok else f"; violations {bad[:3]}"))
    assert ok


def _warm_norms(lambda_gp):
    cfg = TrainConfig(lambda_gp=lambda_gp, lr_d=0.01, lr_g=1e-3, gamma=0.1, warm_steps=200, seed=0)
    tp = template_pair(2, 8, cfg)
    site = build_sites(make_ring(seed=1), cfg, tp)[0]
    disc, gen = warm_start(site, cfg, tp)
    return upstream_norms(tp.with_gen(gen).with_disc(disc), 256, np.random.default_rng(5))


def test_criterion_6_norm_concentration():
    gp, free = _warm_norms(10.0), _warm_norms(0.0)
    ratio = free.std() / gp.std()
    ok = 0.5 <= gp.mean() <= 1.5 and ratio >= 3
    record(6, ok, f"after warm-start: mean upstream norm {gp.mean():.3f} (in [0.5, 1.5]), std {gp.std():.3f} "
                  f"with penalty vs {free.std():.3f} without (ratio {ratio:.1f} >= 3)")
    assert ok


RING_STD = 0.2
CAPTURE = 3 * RING_STD
UTILITY = dict(steps=10_000, lr_d=0.01, lr_g=2e-3, lr_g_final=1e-4, metrics_every=1000, seed=0)


def _utility_run(**kw):
    ds = make_ring(8, 250, 2.0, RING_STD, seed=1)
    ev = Evaluator(ring_centers(8, 2.0), CAPTURE, make_ring(8, 250, 2.0, RING_STD, seed=2).points, n_samples=1000)
    t0 = time.perf_counter()
    res = train(ds, TrainConfig(**UTILITY, **kw), evaluator=ev)
    return res.metrics[-1], time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_desk_utility():
    plain, t_plain = _utility_run(gamma=1.0, sigma=0.0, clip_bound=math.inf, non_private=True, warm_steps=0)
    priv, t_priv = _utility_run(gamma=0.1, sigma=0.5, batch_size=32, warm_steps=200)
    ok_plain = plain["mode_coverage"] >= 7 and plain["high_quality"] >= 0.7 and t_plain <= 300
    ok_priv = priv["mode_coverage"] >= 5 and t_priv <= 300
    ok = ok_plain and ok_priv
    record(7, ok, f"ring std {RING_STD}, capture radius {CAPTURE:.1f}, {UTILITY['steps']} steps: non-private "
                  f"{plain['mode_coverage']}/8 modes, high-quality {plain['high_quality']:.2f} in {t_plain:.0f}s "
                  f"(>=7/8, >=0.7, <=300s); sanitized sigma=0.5 K=10 B=32 {priv['mode_coverage']}/8 modes in "
                  f"{t_priv:.0f}s (>=5/8, <=300s; eps {priv['eps_at_delta']:.4g})")
    assert ok


def test_criterion_8_federated_consistency():
    ds = make_ring(seed=2)
    cfg = TrainConfig(gamma=1.0, sigma=0.0, clip_bound=math.inf, non_private=True, steps=300, warm_steps=20,
                      lr_d=0.01, lr_g=1e-3, seed=5, metrics_every=0)
    fed = server_train(make_clients(ds, cfg), cfg)
    cen = train(ds, cfg)
    identical = fed.checkpoint.to_bytes() == cen.checkpoint.to_bytes()
    pcfg = TrainConfig(gamma=0.1, sigma=1.07, batch_size=32, steps=200, warm_steps=0, seed=5, metrics_every=0)
    fled = server_train(make_clients(ds, pcfg), pcfg).ledger
    cled = train(ds, pcfg).ledger
    same_ledger = (fled.eps_at_order.tobytes() == cled.eps_at_order.tobytes()
                   and fled.to_dp() == cled.to_dp() and fled.gamma == cled.gamma == 0.1)
    ok = identical and same_ledger
    record(8, ok, f"K=1 sigma=0 federated vs centralized 300 steps bit-identical={identical}; "
                  f"ledgers equal at (gamma=0.1, sigma=1.07, B=32, T=200)={same_ledger} (eps {fled.to_dp()[0]:.6g})")
    assert ok


def test_criterion_9_communication_accounting():
    cfg = TrainConfig(gamma=0.1, sigma=1.07, batch_size=32, steps=50, warm_steps=0, seed=1, metrics_every=0)
    clients = make_clients(make_ring(seed=1), cfg)
    res = server_train(clients, cfg)
    check_conservation(clients, res.wire)
    B, d = 32, 2
    up = [r["up_bytes"] for r in res.wire.per_step()]
    exact = all(u == B * d * 8 + HEADER_BYTES for u in up) and len(up) == 50
    widths = [d + 8, *cfg.disc_hidden, 1]
    n_disc = sum((a + 1) * b for a, b in zip(widths, widths[1:]))
    measured = (up[0] - HEADER_BYTES) / (8 * n_disc)
    analytic = (B * d) / n_disc
    ok = exact and measured == analytic
    record(9, ok, f"payload bytes per step {up[0]} == B*d*8 + {HEADER_BYTES} = {B * d * 8 + HEADER_BYTES} on all "
                  f"{len(up)} steps: {exact}; payload/critic-gradient ratio {measured:.6f} == "
                  f"{B * d}/{n_disc} = {analytic:.6f}")
    assert ok


BUG = dict(steps=3000, warm_steps=200, lr_d=0.01, lr_g=5e-3, sigma=1.07, gen_output="sigmoid", metrics_every=0,
           seed=0)


@pytest.mark.slow
def test_criterion_10_bug_scenario():
    ds = make_glyphs(10, 2000, 0.05, seed=1)
    cfg = TrainConfig(**BUG)
    flipped = bug_scenario(ds, 10, 1.0, cfg)
    null = bug_scenario(ds, 10, 0.0, cfg)
    opposite = (flipped.suspected_mean - 0.5) * (flipped.clean_mean - 0.5) < 0
    ok = opposite and null.p_value >= 0.01
    record(10, ok, f"flip 1 after {BUG['steps']} federated steps: suspected {flipped.suspected_mean:.3f} vs clean "
                   f"{flipped.clean_mean:.3f} (opposite sides of 0.5: {opposite}); flip 0: Welch p={null.p_value:.3f} "
                   f"(>= 0.01)")
    assert ok
