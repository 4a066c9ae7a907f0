"""End-to-end acceptance criteria, one test each.

Every test prints a PASS/FAIL line (also collected in the terminal summary)
before asserting.  The training criteria drive the installed CLI on the
default synthetic spec with the ``desk`` preset; they take several minutes.

    pytest tests/test_acceptance.py -v -s
"""

import json
import time

import numpy as np
import pytest

from emtm import cli
from emtm import data as D
from emtm.distill import build_shared_models
from emtm.kau import KAU
from emtm.metrics import evaluate, count_cost
from emtm.numerics import Node, ParameterStore, backward, numeric_grad, relative_error
from emtm.trainer import Checkpoint, TrainConfig, build_bundle, forward_losses, infer, load_bundle
from emtm.unify import (ClipGrid, Map2D, ProposalList, RegressionPair, SpanLogits, unify_2dmap,
                        unify_proposals, unify_regression, unify_span)

import oracles
from helpers import tiny_arrays, tiny_config, tiny_dataset

pytestmark = pytest.mark.acceptance

SEEDS = "1,2,3"


def run_cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"emtm {' '.join(map(str, argv))} exited {code}"


def summary(out):
    return json.loads((out / "summary.json").read_text())


# ---------------------------------------------------------------------------
# 1. unification oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_1_unification_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {"span": 0.0, "map2d": 0.0, "regression": 0.0, "proposals": 0.0}
    valid = True

    def gap(p, ref):
        nonlocal valid
        try:
            p.validate(1e-9)
        except Exception:
            valid = False
        return max(np.abs(p.p_start - np.array(ref[0])).max(), np.abs(p.p_end - np.array(ref[1])).max())

    for _ in range(200):
        n = int(rng.choice([5, 16, 32]))
        dur = float(rng.uniform(5, 120))
        sigma = float(rng.uniform(0.3, 4.0))
        grid = ClipGrid(n, dur)
        a, b = rng.normal(scale=4, size=n), rng.normal(scale=4, size=n)
        worst["span"] = max(worst["span"], gap(unify_span(SpanLogits(a, b)), oracles.span(a, b)))
        S = rng.normal(scale=4, size=(n, n))
        worst["map2d"] = max(worst["map2d"], gap(unify_2dmap(Map2D(S)), oracles.map2d(S.tolist())))
        ts, te = np.sort(rng.uniform(0, dur, 2))
        ref = oracles.regression(ts, te, dur, n, sigma)
        worst["regression"] = max(worst["regression"],
                                  gap(unify_regression(RegressionPair(ts, te), grid, sigma), ref))
        k = int(rng.integers(1, 8))
        se = np.sort(rng.uniform(0, dur, (k, 2)), axis=1)
        cands = np.column_stack([se, rng.uniform(0.05, 3, k)])
        ref = oracles.proposals(cands.tolist(), dur, n, sigma)
        worst["proposals"] = max(worst["proposals"],
                                 gap(unify_proposals(ProposalList(cands), grid, sigma), ref))
    elapsed = time.perf_counter() - t0
    ok = valid and max(worst.values()) <= 1e-12 and elapsed < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.2f}s"
    assert verdict(1, "unification matches brute-force oracles (tol 1e-12, < 5 s)", ok, detail)


# ---------------------------------------------------------------------------
# 2. gradient integrity
# ---------------------------------------------------------------------------


def test_criterion_2_full_network_gradients(verdict):
    t0 = time.perf_counter()
    cfg = tiny_config(d=8, n=6, m_max=4, dropout=0.0)
    # one offline teacher plus the twin: b = 2
    bundle = build_bundle(cfg, TrainConfig(teachers=(0,)), 3)
    batch = tiny_arrays(tiny_dataset(n=6, train=3))
    # move the zero-initialized KAU head off its symmetric starting point
    fc = bundle.store["kau.fc.w"]
    fc.value[...] = np.random.default_rng(0).normal(scale=0.3, size=fc.shape)
    br, frozen = forward_losses(bundle, batch)
    active = all(br.parts[k].value > 0 for k in ("l_st", "l_tc", "l_ens", "l_dis"))

    def loss():
        return forward_losses(bundle, batch, frozen=frozen)[0].node

    bundle.store.zero_grad()
    backward(loss())
    errors, zero_grad = {}, {}
    for name in bundle.store.names():
        node = bundle.store[name]
        analytic = node.grad.copy()
        numeric = numeric_grad(loss, node)
        if name.endswith("attn.bk"):
            # softmax is shift invariant, so the key bias has an exactly zero gradient
            zero_grad[name] = max(np.abs(analytic).max(), np.abs(numeric).max())
            continue
        errors[name] = relative_error(analytic, numeric)
    errs = np.array(list(errors.values()))
    frac = float(np.mean(errs <= 1e-4))
    elapsed = time.perf_counter() - t0
    ok = (active and bundle.kau.b == 2 and frac >= 0.95 and errs.max() <= 1e-3
          and all(v < 1e-8 for v in zero_grad.values()) and elapsed < 120)
    worst = max(errors, key=errors.get)
    detail = (f"{len(errors)} tensors, {100 * frac:.1f}% <= 1e-4, max {errs.max():.1e} ({worst}), "
              f"{elapsed:.1f}s")
    assert verdict(2, "finite-difference check of all four loss terms", ok, detail)


# ---------------------------------------------------------------------------
# 3. KAU contracts
# ---------------------------------------------------------------------------


def test_criterion_3_kau_contracts(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    att_err, bound_viol, single_err = 0.0, 0.0, 0.0
    for trial in range(100):
        b, n, d = int(rng.integers(1, 6)), int(rng.integers(2, 17)), int(rng.choice([4, 8]))
        B, m = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        cfg = tiny_config(d=d, n=n, heads=2)
        store = ParameterStore(trial)
        kau = KAU(cfg, store, b)
        store["kau.fc.w"].value[...] = rng.normal(scale=2.0, size=store["kau.fc.w"].shape)
        bank = rng.dirichlet(np.ones(n), size=(B, b, 2))
        mask = np.ones((B, m), dtype=bool)
        out = kau.forward(Node(rng.normal(size=(B, n, d))), Node(rng.normal(size=(B, m, d))), bank, mask)
        att_err = max(att_err, np.abs(out.attention.value.sum(axis=1) - 1).max())
        raw = out.unnormalized.value
        bound_viol = max(bound_viol, (bank.min(axis=1) - raw).max(), (raw - bank.max(axis=1)).max())
        if b == 1:
            single_err = max(single_err, np.abs(out.ensemble.value - bank[:, 0]).max())
    # make sure b = 1 is exercised regardless of the draws
    cfg = tiny_config()
    kau = KAU(cfg, ParameterStore(0), 1)
    bank = rng.dirichlet(np.ones(cfg.n), size=(2, 1, 2))
    out = kau.forward(Node(rng.normal(size=(2, cfg.n, cfg.d))), Node(rng.normal(size=(2, 3, cfg.d))), bank)
    single_err = max(single_err, np.abs(out.ensemble.value - bank[:, 0]).max())
    elapsed = time.perf_counter() - t0
    ok = att_err <= 1e-6 and bound_viol <= 1e-12 and single_err <= 1e-9 and elapsed < 10
    detail = (f"attention sum err {att_err:.1e}, bound violation {max(bound_viol, 0):.1e}, "
              f"b=1 err {single_err:.1e}, {elapsed:.2f}s")
    assert verdict(3, "KAU attention, convexity and single-teacher identity", ok, detail)


# ---------------------------------------------------------------------------
# 4. shared-encoder aliasing
# ---------------------------------------------------------------------------


def _grads(bundle, node):
    bundle.store.zero_grad()
    backward(node)
    return {n: bundle.store[n].grad.copy() for n in bundle.store.names()}


def test_criterion_4_shared_encoder_aliasing(verdict):
    t0 = time.perf_counter()
    checks = {}
    cfg = tiny_config()
    student, teacher, manifest = build_shared_models(cfg)
    store = student.store
    checks["manifest"] = bool(manifest) and set(manifest) == set(teacher.encoder_names())
    rng = np.random.default_rng(0)
    v, q = rng.normal(size=(1, 6, 5)), rng.normal(size=(1, 4, 4))
    store["teacher.pos"].value[...] = store["student.pos"].value
    enc = lambda m: m.project_and_encode(v, q).v_enc.value  # noqa: E731
    before = enc(student)
    store[manifest[0]].value[...] += 0.5
    checks["shared mutation"] = (np.abs(enc(student) - before).max() > 1e-6
                                 and np.array_equal(enc(student), enc(teacher)))
    s0, t0_ = student.distribution(v, q), teacher.distribution(v, q)
    store["student.pred.start.w"].value[...] += 1.0
    checks["private mutation"] = (np.abs(student.distribution(v, q) - s0).max() > 1e-6
                                  and np.array_equal(teacher.distribution(v, q), t0_))

    bundle = build_bundle(cfg, TrainConfig(), 3)
    br, _ = forward_losses(bundle, tiny_arrays(tiny_dataset()))
    g = {k: _grads(bundle, br.parts[k]) for k in ("l_st", "l_tc", "l_ens", "l_dis")}
    kau = bundle.kau.param_names()
    shared = [n for n in bundle.shared_names if not n.endswith("attn.bk")]
    checks["shared encoder gets l_st and l_tc"] = all(
        np.any(g["l_st"][n]) and np.any(g["l_tc"][n]) for n in shared)
    checks["kau only from l_ens"] = (any(np.any(g["l_ens"][n]) for n in kau) and all(
        not np.any(g[t][n]) for t in ("l_st", "l_tc", "l_dis") for n in kau))
    checks["l_ens stops at the kau"] = all(not np.any(g["l_ens"][n]) for n in bundle.store.names()
                                           if n not in kau)
    checks["l_dis reaches only the student"] = (
        any(np.any(g["l_dis"][n]) for n in bundle.student.private_names())
        and all(not np.any(g["l_dis"][n]) for n in bundle.teacher.private_names()))
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 10
    detail = (f"failed: {', '.join(failed)}" if failed else f"{len(checks)} checks") + f", {elapsed:.2f}s"
    assert verdict(4, "shared weights alias, private weights isolate, gradient routing", ok, detail)


# ---------------------------------------------------------------------------
# 5 and 6. ablation runs on the default synthetic spec
# ---------------------------------------------------------------------------


RUNS = {
    "full": [],
    "none": ["--no-shared-encoder", "--no-label-distillation"],
    "teachers=1": ["--teachers", "0"],
    "teachers=2": ["--teachers", "0,1"],
}


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    results, times = {}, {}
    t0 = time.perf_counter()
    run_cli("synth", "--out", root / "data")
    times["synth"] = time.perf_counter() - t0
    for name, flags in RUNS.items():
        t0 = time.perf_counter()
        run_cli("train", root / "data", "--out", root / name, "--preset", "desk", "--seeds", SEEDS, *flags)
        times[name] = time.perf_counter() - t0
        results[name] = summary(root / name)
    return results, times


def test_criterion_5_distillation_helps(ablation_runs, verdict):
    res, times = ablation_runs
    full, none = res["full"]["miou"]["mean"], res["none"]["miou"]["mean"]
    r07 = res["full"]["r1@0.7"]["mean"]
    elapsed = times["synth"] + times["full"] + times["none"]
    ok = full >= none and r07 >= 80 and elapsed < 15 * 60
    detail = (f"mIoU full {full:.2f} vs w/o SE-LD {none:.2f}, full R1@0.7 {r07:.2f}, "
              f"seeds {res['full']['miou']['values']} / {res['none']['miou']['values']}, {elapsed:.0f}s")
    assert verdict(5, "full EMTM >= EMTM w/o SE-LD, R1@0.7 >= 80", ok, detail)


def test_criterion_6_teacher_count_trend(ablation_runs, verdict):
    res, times = ablation_runs
    points = [res[k]["miou"]["mean"] for k in ("teachers=1", "teachers=2", "full")]
    drops = [a - b for a, b in zip(points, points[1:]) if b < a]
    elapsed = sum(times.values())
    ok = len(drops) <= 1 and all(d <= 0.5 for d in drops) and elapsed < 15 * 60
    detail = (" -> ".join(f"{p:.2f}" for p in points)
              + f", inversions {[round(d, 3) for d in drops]}, all runs {elapsed:.0f}s")
    assert verdict(6, "mIoU non-decreasing 1 -> 3 teachers (one inversion <= 0.5 allowed)", ok, detail)


# ---------------------------------------------------------------------------
# 7. dimension sweep
# ---------------------------------------------------------------------------


def test_criterion_7_dimension_sweep(tmp_path, verdict):
    t0 = time.perf_counter()
    run_cli("synth", "--out", tmp_path / "data")
    out = tmp_path / "profile"
    run_cli("profile", "--data", tmp_path / "data", "--out", out, "--sweep-d", "32,64,128",
            "--preset", "desk", "--epochs", "6", "--seeds", SEEDS)
    lines = (out / "profile.csv").read_text().splitlines()
    rows = [dict(zip(lines[0].split(","), r.split(","))) for r in lines[1:]]
    flops = [int(r["flops"]) for r in rows]
    params = [int(r["params"]) for r in rows]
    miou = {int(r["d"]): float(r["miou"]) for r in rows}
    elapsed = time.perf_counter() - t0
    ok = (all(b > a for a, b in zip(flops, flops[1:])) and all(b > a for a, b in zip(params, params[1:]))
          and miou[32] <= miou[128] and elapsed < 20 * 60)
    detail = (f"flops {flops}, params {params}, mIoU " + ", ".join(f"d={k}: {v:.2f}" for k, v in miou.items())
              + f", {elapsed:.0f}s")
    assert verdict(7, "cost grows with d, quality at d=32 <= d=128", ok, detail)


# ---------------------------------------------------------------------------
# 8. metric correctness
# ---------------------------------------------------------------------------


def test_criterion_8_metrics(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    preds, labels = [], []
    for _ in range(50):
        dur = rng.uniform(10, 60)
        preds.append(tuple(np.sort(rng.uniform(0, dur, 2))))
        labels.append(tuple(np.sort(rng.uniform(0, dur, 2))))
    # include exact threshold hits: IoU of exactly 0.5 must not count at 0.5
    preds.append((0.0, 10.0))
    labels.append((0.0, 5.0))
    rep = evaluate(preds, labels)
    r1, miou = oracles.recount(preds, labels)
    exact = rep.r1 == r1 and rep.miou == pytest.approx(miou, abs=1e-12)
    monotone = rep.r1[0.3] >= rep.r1[0.5] >= rep.r1[0.7]
    sumacc = rep.sumacc == rep.r1[0.5] + rep.r1[0.7]
    elapsed = time.perf_counter() - t0
    ok = exact and monotone and sumacc and elapsed < 1
    detail = f"R1 {rep.r1}, mIoU {rep.miou:.4f}, sumACC {rep.sumacc}, {elapsed * 1e3:.1f} ms"
    assert verdict(8, "evaluate matches per-sample recount", ok, detail)


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path, verdict):
    t0 = time.perf_counter()
    digests = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        run_cli("synth", "--out", root / "data", "--seed", "5")
        run_cli("train", root / "data", "--out", root / "run", "--preset", "desk", "--epochs", "2",
                "--dropout", "0.1", "--seeds", "1")
        run_cli("eval", root / "run" / "seed1" / "checkpoint.emtm", root / "data",
                "--out", root / "eval.json")
        files = [p for p in sorted((root / "run").rglob("*")) if p.is_file() and p.name != "run_manifest.json"]
        digests.append({str(p.relative_to(root)): cli.file_digest(p) for p in files}
                       | {"data": cli.path_digest(root / "data"),
                          "eval": cli.file_digest(root / "eval.json")})
    replay = cli.replay(tmp_path / "a" / "run" / "run_manifest.json")
    elapsed = time.perf_counter() - t0
    ok = digests[0] == digests[1] and not replay
    diff = [k for k in digests[0] if digests[0][k] != digests[1].get(k)]
    detail = f"{len(digests[0])} artifacts compared, differing {diff}, replay changed {replay}, {elapsed:.0f}s"
    assert verdict(9, "identical runs give bit-identical checkpoints and reports", ok, detail)


# ---------------------------------------------------------------------------
# 10. inference-path purity
# ---------------------------------------------------------------------------


def test_criterion_10_inference_purity(tmp_path, verdict):
    t0 = time.perf_counter()
    cfg = tiny_config()
    cost = count_cost(cfg, "inference")
    train_cost = count_cost(cfg, "training", b=4)
    leaked = [k for k in cost.breakdown if k.startswith(("kau", "teacher."))]
    ds = tiny_dataset()
    tcfg = TrainConfig(epochs=1, batch_size=4)
    bundle = build_bundle(cfg, tcfg, 3)
    from emtm.trainer import train
    ckpt, _ = train(bundle, tiny_arrays(ds), tiny_arrays(ds, None, "val"), tcfg)
    ckpt.save(tmp_path / "c.emtm")
    loaded = load_bundle(Checkpoint.load(tmp_path / "c.emtm"))
    loaded.store.track_access()
    for s in ds["test"]:
        infer(loaded, s)
    touched = loaded.store.stop_tracking()
    bad = sorted(n for n in touched if n.startswith(("kau.", "teacher.")))
    elapsed = time.perf_counter() - t0
    ok = (not leaked and not bad and "kau" in train_cost.breakdown and bool(touched)
          and elapsed < 5)
    detail = (f"inference terms {len(cost.breakdown)} (kau/teacher {leaked}), "
              f"{len(touched)} params touched (kau/teacher {bad}), {elapsed:.2f}s")
    assert verdict(10, "inference uses the student alone", ok, detail)
