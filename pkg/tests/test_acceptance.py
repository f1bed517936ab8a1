"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The summary lines appear at the end of the pytest run (see conftest.py).
"""

import math
import os
import time
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tprl import data as D
from tprl import evaluation as E
from tprl import model as M
from tprl import numkit as nk
from tprl import ppo as P
from tprl.numkit import Node
from tprl.rewards import r_cls, r_inv

from test_numkit import OPS
from test_rewards import loop_r_cls, loop_r_inv, random_batch


# -- 1. gradients ---------------------------------------------------------------------------


def test_criterion_1_gradients(record):
    t0 = time.perf_counter()
    worst = 0.0
    for op in sorted(OPS):
        for shape in [(2, 3), (4, 5), (3, 1)]:
            rng = np.random.default_rng(zlib.crc32(f"acc{op}{shape}".encode()))
            x = rng.normal(size=shape)
            if op in ("relu", "clip", "minimum"):
                x = np.where(np.abs(x) < 0.05, 0.3, x)
                x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.8, x)
                if op == "minimum":
                    w = np.random.default_rng(9).normal(size=shape)
                    x = np.where(np.abs(x - w) < 0.05, w + 0.3, x)
            w_out = rng.normal(size=OPS[op](Node(x)).shape)
            worst = max(worst, nk.check_gradient(lambda v: nk.sum_all(nk.mul(OPS[op](v), w_out)), x))
    configs = [dict(l=6, d=3, d_model=8, n_heads=2, d_ff=12, s=3, k=2),
               dict(l=5, d=2, d_model=6, n_heads=1, d_ff=4, s=2, k=3),
               dict(l=4, d=2, d_model=4, n_heads=2, d_ff=6, s=4, k=1, n_layers_enc=2, n_layers_dec=2)]
    for i, c in enumerate(configs):
        net = M.init_policy(M.ModelConfig(**c), nk.make_rng(i))
        rng = np.random.default_rng(100 + i)
        x = rng.normal(size=(2, c["l"], c["d"]))
        tokens = M.rollout_stochastic(net, x, nk.make_rng(i)).tokens
        for name in net.params:
            def f(pn, name=name):
                p = {k: nk.const(v) for k, v in net.params.items()}
                p[name] = pn
                return nk.sum_all(M.log_prob_graph(net, p, x, tokens))
            worst = max(worst, nk.check_gradient(f, net.params[name]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed <= 60
    record(1, ok, f"max rel. err {worst:.2e} (<= 1e-4), {elapsed:.1f} s (<= 60 s)")
    assert ok


# -- 2. reward oracles ----------------------------------------------------------------------


def test_criterion_2_reward_oracles(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        b = random_batch(rng)
        worst = max(worst, abs(r_cls(b) - loop_r_cls(b.features, b.labels)) / max(1, abs(r_cls(b))),
                    abs(r_inv(b) - loop_r_inv(b.features, b.labels, b.users)) / max(1, abs(r_inv(b))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed <= 10
    record(2, ok, f"max deviation {worst:.1e} (<= 1e-12), {elapsed:.1f} s (<= 10 s)")
    assert ok


# -- 3. surrogate identities ----------------------------------------------------------------


def test_criterion_3_surrogate_identities(record):
    rng = np.random.default_rng(3)
    ws = D.WindowSet(rng.normal(size=(24, 10, 2)), np.repeat([1, 2, 3], 8), np.tile(np.repeat([1, 2], 4), 3),
                     [f"w{i}" for i in range(24)])
    net = M.init_policy(M.ModelConfig(l=10, d=2, d_model=8, d_ff=8, s=2, k=2), nk.make_rng(3))
    cfg = P.PpoConfig(classes_per_batch=2, users_per_class=2, windows_per_cell=2)
    buf = P.collect_rollouts(net, P.StratifiedSampler(ws), cfg, nk.make_rng(4))
    adv = rng.normal(size=buf.old_logprob.shape)
    loss, stats = P.ppo_loss(net, buf, adv, 0.2)
    p = net.nodes()
    ratio = np.exp(M.log_prob_graph(net, p, buf.x, buf.episode.tokens).value[..., 0] - buf.old_logprob)
    cases = [P.surrogate_terms(Node([[1.0]]), np.array([[0.37]]), 0.2).value.item() == 0.37,
             P.surrogate_terms(Node([[2.0]]), np.array([[1.0]]), 0.2).value.item() == 1.2,
             P.surrogate_terms(Node([[0.5]]), np.array([[-1.0]]), 0.2).value.item() == -0.8]
    ok = bool(np.all(ratio == 1.0)) and loss.value.item() == -adv.mean() and all(cases)
    record(3, ok, f"ratios==1: {bool(np.all(ratio == 1.0))}, loss==-mean(A): "
                  f"{loss.value.item() == -adv.mean()}, clip cases: {cases}")
    assert ok


# -- 4. causality ----------------------------------------------------------------------------

_causality_failures = []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.data())
def _causality_property(seed, s, draw):
    j = draw.draw(st.integers(0, s - 1))
    net = M.init_policy(M.ModelConfig(l=5, d=2, d_model=8, d_ff=8, s=s, k=3), nk.make_rng(seed % 97))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 2))
    tokens = rng.normal(size=(s, 3))
    p = {k: nk.const(v) for k, v in net.params.items()}
    h = M.encode_graph(net, p, x)
    mu, ls = M.decode_graph(net, p, h, tokens)
    bumped = tokens.copy()
    bumped[j] += rng.normal(size=3) * 10
    mu2, ls2 = M.decode_graph(net, p, h, bumped)
    same = np.array_equal(mu.value[:j + 1], mu2.value[:j + 1]) and np.array_equal(ls.value[:j + 1], ls2.value[:j + 1])
    if not same:
        _causality_failures.append((seed, s, j))
    assert same


def test_criterion_4_causality(record):
    try:
        _causality_property()
        ok = True
    except AssertionError:
        ok = False
    record(4, ok, f"token-j perturbation left outputs 1..j bit-identical over 60 random prefixes; "
                  f"failures: {_causality_failures[:3]}")
    assert ok


# -- 5. protocol fidelity ---------------------------------------------------------------------


def test_criterion_5_protocol(record):
    def starts(T, l, step):
        out, s = [], 0
        while s + l <= T:
            out.append(s)
            s += step
        return out

    count_ok = all(D.window_count(T, 75, 37) == len(starts(T, 75, 37)) for T in range(1, 301))
    recs = [D.SensorRecording(f"r{T}", 1, 1, 25.0, np.zeros((T, 1))) for T in range(1, 301)]
    slide_ok = all(len(D.slide_windows(r, 3.0, 0.5)) == len(starts(r.samples.shape[0], 75, 37)) for r in recs)

    normed = D.zscore_per_user(D.synth_generate(D.SynthSpec()))
    worst_mean = worst_var = 0.0
    for u in {r.user for r in normed}:
        pooled = np.concatenate([r.samples for r in normed if r.user == u])
        worst_mean = max(worst_mean, np.abs(pooled.mean(axis=0)).max())
        worst_var = max(worst_var, np.abs(pooled.var(axis=0) - 1).max())
    z_ok = worst_mean <= 1e-9 and worst_var <= 1e-9

    ws = D.prepare_windows(D.synth_generate(D.SynthSpec(duration=10.0)))
    guard_clean, guard_trips = True, True
    for plan in D.build_logo_splits({"A": [1], "B": [2], "C": [3], "D": [4]}):
        src, tgt = ws.users(plan.source_users), ws.users(plan.target_users)
        try:
            E.assert_no_leakage(src.ids, tgt.ids)
        except E.LeakageError:
            guard_clean = False
        try:
            E.assert_no_leakage(src.ids + tgt.ids[:1], tgt.ids)
            guard_trips = False
        except E.LeakageError:
            pass
    ok = count_ok and slide_ok and z_ok and guard_clean and guard_trips
    record(5, ok, f"window counts {count_ok and slide_ok}, z-score |mean| {worst_mean:.1e} |var-1| {worst_var:.1e}, "
                  f"guard clean {guard_clean}, guard trips on corruption {guard_trips}")
    assert ok


# -- 6 and 7. end-to-end synthetic run -----------------------------------------------------------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def synthetic_runs():
    """Full method vs. ablation, default synthetic spec, LOGO over 4 plans, 3 seeds."""
    spec = D.SynthSpec()
    ws = D.prepare_windows(D.synth_generate(spec))
    plans = D.build_logo_splits({chr(65 + i): [i + 1] for i in range(spec.num_users)})
    model_cfg = M.ModelConfig(l=ws.x.shape[1], d=ws.x.shape[2])
    t0 = time.perf_counter()
    runs = {}
    for w_inv in (0.5, 0.0):
        cfg = P.PpoConfig(w_cls=5.0, w_inv=w_inv)
        for seed in SEEDS:
            for i, plan in enumerate(plans):
                res, _, _ = E.run_split(plan, ws, model_cfg, cfg, seed=E.plan_seed(seed, i))
                runs[(w_inv, seed, plan.name)] = res
    return runs, time.perf_counter() - t0


def test_criterion_6_synthetic_generalisation(record, synthetic_runs):
    runs, elapsed = synthetic_runs
    full = np.mean([r.accuracy for (w, _, _), r in runs.items() if w == 0.5])
    ablation = np.mean([r.accuracy for (w, _, _), r in runs.items() if w == 0.0])
    gap = 100 * (full - ablation)
    ok = gap >= 5.0 and elapsed <= 600
    record(6, ok, f"full {100 * full:.2f}% vs ablation {100 * ablation:.2f}%: gap {gap:+.2f} pp (>= 5), "
                  f"{elapsed:.0f} s (<= 600 s)")
    assert ok


def test_criterion_7_training_signal(record, synthetic_runs):
    runs, _ = synthetic_runs
    ups = []
    for seed in SEEDS:
        curves = [r.trainlog.column("j") for (w, s, _), r in runs.items() if w == 0.5 and s == seed]
        j = np.mean(curves, axis=0)
        n = max(1, math.ceil(len(j) / 10))
        ups.append(bool(j[-n:].mean() > j[:n].mean()))
    ok = sum(ups) >= 2
    record(7, ok, f"final-10% J above first-10% J for seeds {list(SEEDS)}: {ups} (need >= 2)")
    assert ok


# -- 8. metric arithmetic -------------------------------------------------------------------------


def test_criterion_8_metric_fidelity(record):
    dsads = E.aggregate([87.77, 85.48, 91.96, 87.93])
    pamap = E.aggregate([69.01, 79.29, 74.14])
    got = (E.round_report(dsads.mean_accuracy), E.round_report(pamap.mean_accuracy))
    ok = got == (88.29, 74.15)
    record(8, ok, f"table means {got} == (88.29, 74.15)")
    assert ok


# -- 9. real data, reported not gated -----------------------------------------------------------

REAL = {"dsads": os.environ.get("TPRL_DSADS_ROOT"), "pamap2": os.environ.get("TPRL_PAMAP2_ROOT")}


def test_criterion_9_real_data(record):
    present = {k: v for k, v in REAL.items() if v}
    if not present:
        record(9, None, "no real datasets (set TPRL_DSADS_ROOT / TPRL_PAMAP2_ROOT); absolute published "
                        "accuracies are not reproduced at desk scale")
        pytest.skip("real datasets not present")
    lines, ok = [], True
    for kind, root in present.items():
        if kind == "dsads":
            recs, groups = D.ingest_dsads(root), D.DSADS_GROUPS
        else:
            recs, groups = D.ingest_pamap2(root), D.PAMAP2_GROUPS
        ws = D.prepare_windows(recs)
        plan = D.build_logo_splits(groups)[0]
        res, _, _ = E.run_split(plan, ws, M.ModelConfig(l=ws.x.shape[1], d=ws.x.shape[2]), P.PpoConfig(), seed=0)
        source, target = ws.users(plan.source_users), ws.users(plan.target_users)
        # baseline: always predict the most frequent source class
        majority = np.mean(target.y == np.bincount(source.y).argmax())
        ok &= res.accuracy > majority
        lines.append(f"{kind} {plan.name}: {100 * res.accuracy:.2f}% vs majority {100 * majority:.2f}%")
    record(9, ok, "; ".join(lines))
    assert ok
