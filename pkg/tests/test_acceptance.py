"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines also appear in
the end-of-session summary.
"""

import importlib.util
import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ForcedMasks, brute_force_front, enumerate_objective, mp_central_gradient, mp_surrogate

from bream.acquisition import episode_rng, rollout, run_episode
from bream.cli import main
from bream.data import Dataset, SplitSpec, load_csv, make_costs, split_thirds, standardize, write_csv
from bream.evaluation import ParetoPoint, interpolate_accuracy, pareto_front, sweep
from bream.model import init_params
from bream.training import TrainConfig, rollout_gradients, train

REPO = Path(__file__).resolve().parents[1]
RESULTS = {}


@pytest.fixture()
def report(capsys, request):
    def emit(ok, detail):
        name = request.node.name.replace("test_", "").split("_")[0].upper()
        line = f"ACCEPTANCE {name} {'PASS' if ok else 'FAIL'}: {detail}"
        RESULTS[name] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def flat_rows(grads):
    return np.concatenate([g.reshape(g.shape[0], -1) for g in grads.values()], axis=1)


def separable(ell, seed, n=10):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(ell, n))
    return Dataset(X, (X[:, 0] + X[:, 1] > 0).astype(int), 2)


# 1 -------------------------------------------------------------------------


def test_c1_gradient_matches_finite_differences(report):
    worst, slowest = 0.0, 0.0
    for cell in ("gru", "rnn"):
        t0 = time.perf_counter()
        P = init_params(3, 2, 4, 2, cell, seed=0)
        rng = np.random.default_rng(1)
        P = P.replace(dict(P.arrays, policy_b=rng.normal(size=(2, 3)), theta_b=rng.normal(size=2)))
        x = rng.normal(size=3)
        c = np.array([0.4, 1.0, 1.7])
        masks = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
        cfg = TrainConfig(lam=0.3, T=2, p=4, cell_type=cell, baseline_enabled=True)
        grads, stats = rollout_gradients(P, x, 1, c, cfg, ForcedMasks(masks), baseline=0.25)
        g = flat_rows(grads)[0]
        w = stats["weights"][0]
        fd = mp_central_gradient(P.flat(), lambda f: mp_surrogate(f, (cell, 3, 2, 4, 2), x, 1, c, masks, 0.3, w), dps=30, h="1e-12")
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-300)
        worst = max(worst, float(rel.max()))
        slowest = max(slowest, time.perf_counter() - t0)
    report(worst < 1e-6 and slowest < 1.0,
           f"max relative error {worst:.2e} (< 1e-6) on a GRU and an RNN model, slowest check {slowest:.2f}s (< 1s)")


# 2 -------------------------------------------------------------------------

DIMS2 = ("gru", 2, 2, 3, 2)


def _unbiasedness(lam, cost_to_go, rollouts=100_000, seed=0):
    P = init_params(2, 2, 3, 2, "gru", seed=0, scale=1.0)
    rng = np.random.default_rng(100)
    P = P.replace(dict(P.arrays, policy_b=rng.normal(scale=0.5, size=(2, 2)), b_h=rng.normal(scale=0.3, size=3)))
    x, y, c = np.array([0.7, -1.1]), 1, np.array([1.0, 0.6])
    oracle = mp_central_gradient(P.flat(), lambda f: enumerate_objective(f, DIMS2, x, y, c, lam), h="1e-15", dps=40)
    cfg = TrainConfig(lam=lam, T=2, p=3, M=rollouts, cost_to_go=cost_to_go)
    grads, _ = rollout_gradients(P, x, y, c, cfg, np.random.default_rng(seed))
    G = flat_rows(grads)
    mean = G.mean(axis=0)
    se = G.std(axis=0, ddof=1) / np.sqrt(rollouts)
    live = se > 0
    z = np.abs(mean - oracle)[live] / se[live]
    # coordinates with zero spread (step-1 policy weights see z_1 = 0) must match exactly
    dead_err = float(np.abs(mean - oracle)[~live].max(initial=0.0))
    return float(z.max()), int(np.sum(z > 3)), dead_err, P.n_params


def test_c2_estimator_unbiased_by_enumeration(report):
    t0 = time.perf_counter()
    z0, k0, d0, npar = _unbiasedness(0.0, False)
    z1, k1, d1, _ = _unbiasedness(0.5, True)
    elapsed = time.perf_counter() - t0
    ok = k0 == 0 and k1 == 0 and d0 < 1e-9 and d1 < 1e-9 and elapsed < 60
    report(
        ok,
        f"{npar} coordinates, 1e5 rollouts; plain estimator lambda=0: max |z| {z0:.2f}; "
        f"cost-to-go estimator lambda=0.5: max |z| {z1:.2f} (all < 3); {elapsed:.1f}s (< 60s)",
    )


def test_c2_info_plain_estimator_with_cost(capsys):
    # Not a pass/fail line: documents the known bias of the plain estimator when lambda > 0.
    z, k, _, npar = _unbiasedness(0.5, False)
    with capsys.disabled():
        print(f"\nINFO C2 plain estimator at lambda=0.5: max |z| {z:.2f}, {k} of {npar} coordinates beyond 3 SE "
              f"(missing step-1 / step-2 cost coupling; use cost_to_go=true)")
    assert z > 3


# 3 -------------------------------------------------------------------------


def test_c3_cost_pressure_limit(report):
    tr, va = separable(300, 0), separable(300, 1)
    _, hist = train(tr, va, np.ones(10), TrainConfig(lam=1e3, epochs=20))
    frac = hist[-1]["valid_mean_cost"] / 10.0
    report(frac < 0.05, f"lambda=1e3: final-epoch mean evaluation cost {frac:.4%} of total (< 5%)")


# 4 -------------------------------------------------------------------------


def test_c4_adaptive_selection_on_synthetic(report):
    t0 = time.perf_counter()
    tr, va, te = split_thirds(separable(1500, 0), SplitSpec(seed=0))
    tr, (va, te), _ = standardize(tr, [va, te])
    base = TrainConfig(T=2, p=10, epochs=60, batch_size=16, learning_rate=0.01, optimizer="adam", baseline_enabled=True)
    front, curve, _ = sweep(tr, va, te, np.ones(10), [base.replace(lam=lam) for lam in (0.0, 0.01, 0.03, 0.1)])
    good = [q for q in curve if q.accuracy >= 0.95 and q.mean_cost <= 4.0]
    pts = ", ".join(f"{q.model_id}: acc {q.accuracy:.3f} cost {q.mean_cost:.2f}" for q in curve)
    report(bool(good), f"test points of the validation front [{pts}]; need acc >= 0.95 at cost <= 4 "
                       f"({time.perf_counter() - t0:.0f}s)")


# 5 -------------------------------------------------------------------------


def redundant(ell, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=ell)
    X = np.column_stack([s, s, rng.normal(size=ell), rng.normal(size=ell)])
    return Dataset(X, (s > 0).astype(int), 2)


def test_c5_cost_sensitivity(report):
    c = np.array([0.1, 1.0, 0.5, 0.5])
    tr, va, te = redundant(600, 0), redundant(400, 1), redundant(400, 2)
    cfg = TrainConfig(T=2, p=8, epochs=60, batch_size=16, learning_rate=0.01, optimizer="adam", baseline_enabled=True)

    def rollout_on(P, d):
        U = np.stack([episode_rng(0, 2, k).random((2, 4)) for k in range(len(d))])
        return rollout(P, d.features, U)

    # tune lambda on validation: pick the one where exactly one of the two copies is most often acquired
    best = None
    for lam in (0.003, 0.01, 0.03, 0.1):
        P, _ = train(tr, va, c, cfg.replace(lam=lam))
        ab = rollout_on(P, va)["masks"].max(axis=1)
        one = float(np.mean(ab[:, 0] + ab[:, 1] == 1))
        if best is None or one > best[0]:
            best = (one, lam, P)
    one, lam, P = best
    pr = rollout_on(P, te)["probs"]
    cheap, dear = float(pr[:, :, 0].mean()), float(pr[:, :, 1].mean())
    report(cheap > dear, f"lambda={lam} (exactly one copy on {one:.0%} of validation episodes): mean acquisition "
                         f"probability cheap {cheap:.3f} > expensive {dear:.3f}")


# 6 -------------------------------------------------------------------------


def _pendigits(tmp_path):
    spec = importlib.util.spec_from_file_location("export_pendigits", REPO / "scripts" / "export_pendigits.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    path = tmp_path / "pendigits.csv"
    mod.export(path, rows=2460, seed=0)
    return load_csv(path, "class")


def test_c6_pendigits_reproduction(report, tmp_path):
    if importlib.util.find_spec("keel_ds") is None:
        report(False, "pendigits unavailable: install keel-ds (pip install keel-ds) to run this criterion")
    t0 = time.perf_counter()
    d = _pendigits(tmp_path)
    assert (len(d), d.n, d.n_classes) == (2460, 16, 10)
    tr, va, te = split_thirds(d, SplitSpec(seed=0))
    tr, (va, te), _ = standardize(tr, [va, te])
    base = TrainConfig(T=3, p=20, epochs=150, batch_size=16, learning_rate=0.005, optimizer="adam", baseline_enabled=True)
    grid = [base.replace(lam=lam) for lam in (0.01, 0.02, 0.03, 0.05)]
    front, curve, _ = sweep(tr, va, te, make_costs("uniform", 16), grid, out_dir=tmp_path / "sweep")
    acc = interpolate_accuracy(curve, 0.5, normalized=True)
    pts = ", ".join(f"{q.normalized_cost:.3f}/{q.accuracy:.3f}" for q in curve)
    report(acc >= 0.90, f"test curve (cost fraction/accuracy) [{pts}]; interpolated accuracy at 50% = {acc:.3f} "
                        f"(>= 0.90); {time.perf_counter() - t0:.0f}s")


# 7 -------------------------------------------------------------------------


def test_c7_pareto_matches_brute_force(report):
    rng = np.random.default_rng(0)
    mismatches = 0
    for trial in range(1000):
        m = int(rng.integers(1, 200))
        if trial % 2:
            # coarse grid: many exact ties and shared coordinates
            cost = rng.integers(0, 8, m) / 4
            acc = rng.integers(0, 8, m) / 8
        else:
            cost = rng.random(m) * 10
            acc = rng.random(m)
        ids = rng.permutation(m)
        pts = [ParetoPoint(float(cst), float(a), f"m{i:03d}") for cst, a, i in zip(cost, acc, ids)]
        mismatches += pareto_front(pts) != brute_force_front(pts)
    report(mismatches == 0, f"{mismatches} mismatches against the O(n^2) dominance oracle on 1000 random point sets")


# 8 -------------------------------------------------------------------------


def _csvs(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*.csv"))}


def test_c8_determinism(report, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(150, 6))
    write_csv(Dataset(X, (X[:, 1] > X[:, 4]).astype(int), 2), tmp_path / "d.csv", label_name="y")
    (tmp_path / "cfg.json").write_text(json.dumps({"lambda": 0.05, "T": 2, "p": 5, "M": 2, "epochs": 3, "batch_size": 8,
                                                   "baseline_enabled": True}))
    (tmp_path / "grid.json").write_text(json.dumps({"base": {"T": 2, "p": 5, "epochs": 3, "batch_size": 8},
                                                    "grid": {"lambda": [0.0, 0.05, 0.5]}}))
    runs = {
        "train": ["train", "--data", "d.csv", "--label", "y", "--config", "cfg.json", "--seed", "4"],
        "sweep": ["sweep", "--data", "d.csv", "--label", "y", "--grid", "grid.json", "--seed", "4", "--eval-samples", "2"],
    }
    checked, bad = 0, []
    for name, argv in runs.items():
        assert main(argv + ["--out", f"{name}0"]) == 0
        if name == "train":
            assert main(["eval", "--data", "d.csv", "--label", "y", "--params", "train0/params.npz", "--split", "test",
                         "--seed", "4", "--out", "eval0"]) == 0
        for tag, extra in (("1", []), ("t", ["--threads", "4"])):
            assert main(["rerun", "--manifest", f"{name}0/manifest.json", "--out", f"{name}{tag}"] + extra) == 0
            checked += 1
            if _csvs(f"{name}0") != _csvs(f"{name}{tag}"):
                bad.append(f"{name}{tag}")
    for tag, extra in (("1", []), ("t", ["--threads", "4"])):
        assert main(["rerun", "--manifest", "eval0/manifest.json", "--out", f"eval{tag}"] + extra) == 0
        checked += 1
        if _csvs("eval0") != _csvs(f"eval{tag}"):
            bad.append(f"eval{tag}")
    n_files = len(_csvs("sweep0")) + len(_csvs("train0")) + len(_csvs("eval0"))
    report(not bad, f"{checked} manifest reruns (single- and 4-thread) of train/sweep/eval over {n_files} CSV files; "
                    f"differing: {bad or 'none'}")


# 9 -------------------------------------------------------------------------


def test_c9_trace_invariants(report):
    seen = []

    @settings(max_examples=300, deadline=None, database=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        n=st.integers(1, 8),
        p=st.integers(1, 6),
        T=st.integers(1, 5),
        Y=st.integers(2, 4),
        cell=st.sampled_from(["rnn", "gru"]),
        scale=st.floats(0.05, 5.0),
        eps=st.sampled_from([1e-6, 1e-4, 0.1]),
        shared=st.booleans(),
    )
    def prop(seed, n, p, T, Y, cell, scale, eps, shared):
        rng = np.random.default_rng(seed)
        P = init_params(n, Y, p, T, cell, seed=seed % 1000, scale=scale, shared_policy=shared)
        P = P.replace(dict(P.arrays, policy_b=rng.normal(scale=4.0, size=P["policy_b"].shape)))
        c = rng.uniform(0.0, 3.0, size=n)
        tr = run_episode(P, rng.normal(scale=3.0, size=n), c, rng, eps=eps)
        assert tr.masks.shape == (T, n) and tr.probs.shape == (T, n) and tr.reps.shape == (T + 1, p)
        assert not tr.reps[0].any()
        assert tr.eval_cost == float(tr.abar @ c)
        assert tr.surrogate_cost >= tr.eval_cost
        assert np.all(tr.probs >= eps) and np.all(tr.probs <= 1 - eps)
        seen.append(1)

    try:
        prop()
    except AssertionError as e:
        report(False, f"property violated after {len(seen)} episodes: {e}")
    report(True, f"{len(seen)} random model/input episodes: eval_cost = abar.c, surrogate >= eval, "
                 f"probs in [eps, 1-eps], T masks and T+1 representations")
