"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary table is
printed at the end of the session.
"""

import math
import time

import numpy as np
import pytest

from varco import codec
from varco import graph as gr
from varco import model as mdl
from varco import runtime as rt
from varco import scheduler as sch
from varco.cli import main as cli_main
from varco.experiment import BENCHMARK, TOY_FIXED, arm_config, plateau, run_sweep, toy_plateau
from varco.harness import build_cluster, scheduler_for

SEEDS = range(5)


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    sw = run_sweep(SEEDS, log=None)
    sw.elapsed = time.perf_counter() - t0
    return sw


# 1 -------------------------------------------------------------------------------


def _central_run(g, gso, params, epochs, eta):
    losses = []
    for _ in range(epochs):
        logits, tape = mdl.model_forward(g.features, gso, params, "relu")
        loss, d = mdl.cross_entropy_loss(logits, g.labels, g.train_mask)
        losses.append(loss)
        params = mdl.sgd_step(params, mdl.model_backward(tape, d, gso, params), eta)
    return np.array(losses), params


def test_c1_oracle_equivalence_at_ratio_one(record_criterion):
    t0 = time.perf_counter()
    g = gr.synth_sbm(300, 3, 0.05, 0.01, 16, 1.0, 0)
    gso = gr.build_gso(g, "mean-neighbor")
    init = mdl.init_params([16, 32, 32, 3], 2, 0)
    eta, epochs = 0.05, 20
    ref_loss, ref_params = _central_run(g, gso, init, epochs, eta)
    worst_loss = worst_param = 0.0
    for Q in (2, 4):
        cl = rt.Cluster(g, gr.partition_random(g, Q, Q), init, gso)
        spec = sch.fixed(1, epochs)
        losses = np.array([rt.varco_epoch(cl, spec, t, eta).train_loss for t in range(epochs)])
        worst_loss = max(worst_loss, float(np.max(np.abs(losses - ref_loss) / np.abs(ref_loss))))
        worst_param = max(worst_param, float(np.max(np.abs(cl.params.flat() - ref_params.flat()))))
    elapsed = time.perf_counter() - t0
    ok = worst_loss <= 1e-6 and worst_param <= 1e-6 and elapsed < 10
    record_criterion(1, ok, f"max rel loss diff {worst_loss:.2e}, max param diff {worst_param:.2e}, {elapsed:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------------


def _fd_check(seed, rho):
    rng = np.random.default_rng(seed)
    g = gr.synth_sbm(6, 2, 0.7, 0.3, 3, 1.0, seed)
    gso = gr.build_gso(g, "symmetric-normalized" if seed % 2 else "mean-neighbor")
    params = mdl.init_params([3, 4, 2], 3, seed)
    X = rng.standard_normal((6, 3))
    mask = np.ones(6, bool)

    def loss_of(p):
        logits, _ = mdl.model_forward(X, gso, p, rho)
        return mdl.cross_entropy_loss(logits, g.labels, mask)[0]

    logits, tape = mdl.model_forward(X, gso, params, rho)
    _, d = mdl.cross_entropy_loss(logits, g.labels, mask)
    analytic = mdl.model_backward(tape, d, gso, params).flat()
    flat = params.flat()
    h = 1e-5
    numeric = np.zeros_like(flat)
    for i in range(len(flat)):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric[i] = (loss_of(_unflat(params, plus)) - loss_of(_unflat(params, minus))) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _unflat(like, flat):
    layers, pos = [], 0
    for layer in like.layers:
        taps = []
        for H in layer:
            taps.append(flat[pos:pos + H.size].reshape(H.shape))
            pos += H.size
        layers.append(taps)
    return mdl.ModelParams(layers)


def test_c2_gradient_finite_differences(record_criterion):
    t0 = time.perf_counter()
    worst = max(_fd_check(seed, rho) for seed in range(4) for rho in ("tanh", "relu", "identity"))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 5
    record_criterion(2, ok, f"max relative error {worst:.2e} over 12 instances, {elapsed:.1f}s")
    assert ok


# 3 -------------------------------------------------------------------------------


def test_c3_codec_error_law(record_criterion):
    t0 = time.perf_counter()
    n, trials = 256, 10_000
    rng = np.random.default_rng(0)
    worst = 0.0
    for ratio in (2, 4, 8, 128):
        x = rng.standard_normal(n)
        x /= np.linalg.norm(x)
        kept = codec.kept_count(n, ratio)
        idx = codec.row_indices(codec.DEFAULT_MASTER_KEY, ratio, 0, 0, 0, 1, np.arange(trials), n, kept)
        err = np.mean(1.0 - (x[idx] ** 2).sum(axis=1))
        expected = 1.0 - kept / n
        worst = max(worst, abs(err - expected) / expected)
    # spot-check the batch path against full compress/decompress round trips
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    direct = np.mean([np.sum((codec.decompress(codec.compress(x, 8, codec.KeyContext(0, 0, 0, 1, i))) - x) ** 2)
                      for i in range(200)])
    lossless = all(
        np.array_equal(codec.decompress(codec.compress(v, 1, codec.KeyContext(1, 0, 0, 1, i))), v)
        for i, v in enumerate(rng.standard_normal((50, n)))
    )
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and lossless and abs(direct - (1 - 32 / n)) < 0.1 and elapsed < 5
    record_criterion(3, ok, f"max relative deviation {worst:.2%}, r=1 bitwise lossless={lossless}, {elapsed:.1f}s")
    assert ok


# 4 -------------------------------------------------------------------------------


def test_c4_scheduler_contract(record_criterion):
    t0 = time.perf_counter()
    K = 300
    problems = []
    for a in range(2, 8):
        spec = sch.SchedulerSpec("clamped-linear", c_max=128, c_min=1, slope=a, horizon=K)
        rs = [sch.ratio_at(spec, t) for t in range(K + 1)]
        t_star = math.ceil(K / a)
        if rs[0] != 128 or any(x < y for x, y in zip(rs, rs[1:])):
            problems.append(f"a={a} not nonincreasing from 128")
        if rs[t_star] != 1 or rs[t_star - 1] <= 1 or any(r != 1 for r in rs[t_star:]):
            problems.append(f"a={a} floor not reached exactly at {t_star}")
    for kind in sch.KINDS:
        if not sch.validate_monotone(sch.SchedulerSpec(kind=kind, horizon=K)).ok:
            problems.append(f"{kind} fails validate_monotone")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 1
    record_criterion(4, ok, ("; ".join(problems) or "slopes 2..7 and all kinds ok") + f", {elapsed:.2f}s")
    assert ok


# 5 -------------------------------------------------------------------------------


def test_c5_arm_ordering(sweep, record_criterion):
    acc = {a: sweep.final_acc(a) for a in ("none", "fixed4", "fixed2", "full", "varco")}
    s1 = int(np.sum(acc["none"] <= acc["fixed4"]))
    s2 = int(np.sum(acc["fixed4"] <= acc["varco"]))
    s3 = int(np.sum(acc["varco"] >= acc["full"] - 0.02))
    m = {a: float(v.mean()) for a, v in acc.items()}
    means_ok = m["none"] <= m["fixed4"] <= m["varco"] and m["varco"] >= m["full"] - 0.02
    ok = means_ok and min(s1, s2, s3) >= 4 and sweep.elapsed < 15 * 60
    detail = (f"means none={m['none']:.3f} fixed4={m['fixed4']:.3f} varco={m['varco']:.3f} full={m['full']:.3f}; "
              f"sign tests {s1}/5 {s2}/5 {s3}/5; sweep {sweep.elapsed:.0f}s")
    record_criterion(5, ok, detail)
    assert ok


# 6 -------------------------------------------------------------------------------


def test_c6_budget_dominance(sweep, record_criterion):
    compare = ["varco", "fixed2", "full"]
    frac = {}
    per_seed = {}
    for other in ("fixed2", "full"):
        wins = sweep.budget_wins("varco", other, compare)
        frac[other] = float(wins.mean())
        per_seed[other] = np.round(wins.mean(axis=1), 2).tolist()
    ok = all(f >= 0.9 for f in frac.values())
    detail = (f"varco >= fixed2 at {frac['fixed2']:.1%}, >= full at {frac['full']:.1%} of seed x budget points "
              f"(per seed fixed2 {per_seed['fixed2']}, full {per_seed['full']})")
    record_criterion(6, ok, detail)
    assert ok


# 7 -------------------------------------------------------------------------------


def _closed_form(partition, dims, K, ratio):
    boundary = sum(len(h) for h in partition.halo_in)
    return (K - 1) * boundary * sum(min(max(math.floor(F / ratio + 0.5), 1), F) for F in dims[:-1])


def test_c7_ledger_exactness(sweep, record_criterion):
    mismatches, checked = 0, 0
    for s in sweep.seeds:
        for arm, recs in sweep.runs[s].items():
            cfg = arm_config(arm, s)
            cl = build_cluster(cfg)
            spec = scheduler_for(cfg)
            for rec in recs:
                expect = 0 if arm == "none" else _closed_form(cl.partition, cl.params.dims, cl.params.K,
                                                             sch.ratio_at(spec, rec.epoch))
                checked += 1
                if rec.fwd_floats != expect or rec.bwd_floats != expect or rec.ratio != sch.ratio_at(spec, rec.epoch):
                    mismatches += 1
    ok = mismatches == 0 and checked > 0
    record_criterion(7, ok, f"{checked} epoch records checked, {mismatches} mismatches")
    assert ok


# 8 -------------------------------------------------------------------------------


def test_c8_random_partition_cross_fraction(record_criterion):
    g = gr.synth_sbm(2000, 1, 0.01, 0.01, 4, 1.0, 0)
    parts = []
    ok = True
    for Q in (4, 16):
        frac = gr.cross_edge_stats(gr.partition_random(g, Q, 0))["cross_fraction"]
        expect = (Q - 1) / Q
        ok &= abs(frac - expect) <= 0.02 * expect
        parts.append(f"Q={Q}: {frac:.4f} vs {expect:.4f}")
    record_criterion(8, ok, "; ".join(parts))
    assert ok


# 9 -------------------------------------------------------------------------------


def test_c9_plateau_and_annealed_floor(record_criterion):
    t0 = time.perf_counter()
    monotone = undercut = 0
    lines = []
    for s in SEEDS:
        tr = toy_plateau(s)
        pl = [plateau(tr[f"r={r:g}"]) for r in TOY_FIXED]
        vmin = float(tr["varco"].min())
        monotone += pl[0] <= pl[1] <= pl[2]
        undercut += vmin < min(pl[1:])
        lines.append(f"[{pl[0]:.1e} {pl[1]:.1e} {pl[2]:.1e} | {vmin:.1e}]")
    elapsed = time.perf_counter() - t0
    ok = monotone >= 4 and undercut >= 4 and elapsed < 60
    record_criterion(9, ok, f"plateau nondecreasing {monotone}/5, varco floor below compressed plateaus "
                            f"{undercut}/5, {elapsed:.0f}s; per seed [r=1 r=4 r=8 | varco min] " + " ".join(lines))
    assert ok


# 10 ------------------------------------------------------------------------------


def test_c10_determinism(tmp_path, record_criterion):
    base = ["--quiet"] + [x for item in BENCHMARK + ["optim.epochs=40"] for x in ("--set", item)]
    same = {}
    for mode in ("sequential", "threaded"):
        outs = []
        for run in ("a", "b"):
            d = tmp_path / f"{mode}-{run}"
            assert cli_main(["train", "--out", str(d), "--set", f"runtime.mode={mode}"] + base) == 0
            outs.append((d / "metrics.csv").read_bytes())
        same[mode] = outs[0] == outs[1]
        same[mode + "_vs_seq"] = outs[0]
    cross = same["sequential_vs_seq"] == same["threaded_vs_seq"]
    ok = same["sequential"] and same["threaded"]
    record_criterion(10, ok, f"sequential identical={same['sequential']}, threaded identical={same['threaded']}, "
                             f"threaded == sequential: {cross}")
    assert ok
