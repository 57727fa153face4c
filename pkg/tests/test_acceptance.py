"""Acceptance criteria 1-10.

Each criterion records a PASS/FAIL line in ``REPORT``; conftest prints the
lines at the end of the session. Competition runs (criteria 5-7) share one
module-scoped fixture on the bundled preset, seeds 0-4.
"""

import csv
import json
import math
import time
from contextlib import contextmanager
from fractions import Fraction
from importlib import resources

import numpy as np
import pytest

from mlb_lab import balancer as bal
from mlb_lab import cli
from mlb_lab.metrics import ece
from mlb_lab.runner import load_preset, sweep, train, train_unimodal

REPORT = {}
SEEDS = (0, 1, 2, 3, 4)


def _record(n, ok, text):
    prev = REPORT.get(n)
    if prev is not None and prev.startswith("FAIL"):
        return
    REPORT[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {text}"


@contextmanager
def criterion(n, title):
    note = {"msg": ""}
    try:
        yield note
    except BaseException as e:
        _record(n, False, f"{title} | {note['msg']} | {type(e).__name__}: {str(e).splitlines()[0][:120]}")
        raise
    _record(n, True, f"{title} | {note['msg']}")


# ---------------------------------------------------------------------------
# 1-2: gradient oracles


def test_criterion_1_gradcheck(tmp_path, capsys):
    with criterion(1, "finite-difference gradcheck, 4 fusions x heads on/off x 3 seeds") as note:
        t = time.perf_counter()
        code = cli.main(["gradcheck", "--out", str(tmp_path)])
        dt = time.perf_counter() - t
        capsys.readouterr()
        rep = json.loads((tmp_path / "gradcheck.json").read_text())
        cases = rep["cases"]
        worst = max(max(c["errors"].values()) for c in cases)
        note["msg"] = f"{len(cases)} cases, max rel err {worst:.2e}, {dt:.1f}s"
        assert {c["fusion"] for c in cases} == {"late_linear", "mid_mlp", "film", "gated"}
        assert {c["heads"] for c in cases} == {True, False}
        assert {c["seed"] for c in cases} == {0, 1, 2}
        assert code == 0 and worst < 1e-5
        assert dt < 60


def test_criterion_2_closed_form_diag(tmp_path, capsys):
    with criterion(2, "backprop vs closed-form fusion gradients, 100 instances") as note:
        t = time.perf_counter()
        code = cli.main(["diag", "--out", str(tmp_path)])
        dt = time.perf_counter() - t
        capsys.readouterr()
        rep = json.loads((tmp_path / "diag.json").read_text())
        note["msg"] = f"max residual {rep['max_residual']:.2e}, {dt:.2f}s"
        assert rep["instances"] == 100
        assert code == 0 and rep["max_residual"] < 1e-10
        assert dt < 10


# ---------------------------------------------------------------------------
# 3-4: coefficient law

# one rounding of 1 + x can move k by half an ulp of 1 beyond the exact value
ROUND_SLACK = 2.0 ** -52


def _coefficient_samples(n=100_000, seed=20):
    rng = np.random.default_rng(seed)
    r = 10.0 * (1.0 - rng.random(n))          # (0, 10]
    alpha = 3.0 * (1.0 - rng.random(n))       # (0, 3]
    beta_max = rng.uniform(1.0, 10.0, n)      # [1, 10]
    return r, alpha, beta_max


def test_criterion_3_coefficient_law():
    with criterion(3, "coefficient law on 1e5 random (r, alpha, beta_max)") as note:
        t = time.perf_counter()
        r, alpha, beta_max = _coefficient_samples()
        k = np.empty_like(r)
        k_one = np.empty_like(r)
        k_hi = np.empty_like(r)
        r2 = r + (10.0 - r) * np.random.default_rng(21).random(r.size)  # r <= r2 <= 10
        for i in range(r.size):
            k[i] = bal.coefficient(r[i], alpha[i], beta_max[i])
            k_one[i] = bal.coefficient(1.0, alpha[i], beta_max[i])
            k_hi[i] = bal.coefficient(r2[i], alpha[i], beta_max[i])
        dt = time.perf_counter() - t
        beta_i = np.where(r > 1.0, beta_max, 2.0)
        branch_bound = (beta_i - 1.0) * alpha * np.abs(r - 1.0) + ROUND_SLACK
        note["msg"] = f"{dt:.2f}s; Lipschitz checked with the branch beta (beta_max above r=1, 2 below)"
        assert np.all(k_one == 1.0)
        assert np.all(1.0 - np.tanh(alpha) <= k)
        assert np.all(k < beta_max)
        assert np.all(k <= k_hi)
        assert np.all(np.abs(k - 1.0) <= branch_bound)
        assert dt < 5


@pytest.mark.xfail(strict=True, reason="literal bound uses beta_max on the r<1 branch, where beta is fixed "
                                       "at 2; it cannot hold for beta_max < 2 together with criterion 4")
def test_criterion_3_literal_lipschitz_bound():
    r, alpha, beta_max = _coefficient_samples()
    k = np.array([bal.coefficient(*x) for x in zip(r, alpha, beta_max)])
    bad = np.abs(k - 1.0) > (beta_max - 1.0) * alpha * np.abs(r - 1.0) + ROUND_SLACK
    outside = int(np.sum(bad & ~((r < 1.0) & (beta_max < 2.0))))
    _record(3, False, f"literal |k-1| <= (beta_max-1)*alpha*|r-1| violated in {int(bad.sum())}/{r.size} "
                      f"samples, {outside} outside the r<1, beta_max<2 region; every other property holds")
    assert outside == 0
    assert not bad.any()


def test_criterion_4_spot_values_and_saturation(tmp_path, capsys):
    with criterion(4, "spot values and saturation on the plotdata grid") as note:
        k2 = bal.coefficient(2.0, 1.0, 10.0)
        k05 = bal.coefficient(0.5, 1.0, 10.0)
        # independent evaluation from the exponential form of tanh
        assert abs(k2 - (1 + 9 * (math.e ** 2 - 1) / (math.e ** 2 + 1))) < 1e-12
        assert abs(k2 - 7.8543) <= 1e-4 and abs(k05 - 0.5379) <= 1e-4
        cfg = load_preset(epochs=1, seed=0)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(cfg.to_json())
        run = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(run)]) == 0
        assert cli.main(["plotdata", str(run)]) == 0
        capsys.readouterr()
        with open(run / "coef_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        r = np.array([float(x["r"]) for x in rows])
        worst = 0.0
        for col in rows[0]:
            if col == "r":
                continue
            beta = float(col.split("_beta")[1])
            k = np.array([float(x[col]) for x in rows])
            above = r > 1
            gap_to_max = beta - k[above]
            assert np.all(np.diff(k) >= 0) and np.all(k < beta)
            # distance to beta_max shrinks along the grid and is small by r = 10
            assert np.all(np.diff(gap_to_max) <= 0)
            worst = max(worst, gap_to_max[-1] / (beta - 1))
        note["msg"] = f"k(2)={k2:.4f}, k(0.5)={k05:.4f}, max (beta-k)/(beta-1) at r=10 is {worst:.1e}"
        assert worst < 0.01


# ---------------------------------------------------------------------------
# 5-7: competition reproduction


@pytest.fixture(scope="module")
def competition():
    t = time.perf_counter()
    plan = {
        "joint_mid": ("joint", "mid_mlp"),
        "mlb_mid": ("mlb", "mid_mlp"),
        "multi_mid": ("multi_loss", "mid_mlp"),
        "joint_late": ("joint", "late_linear"),
        "multi_late": ("multi_loss", "late_linear"),
    }
    rows = []
    for seed in SEEDS:
        base = load_preset(seed=seed)
        ds = base.datasets()
        row = {"ceil_v": train_unimodal(base, 0, ds), "ceil_a": train_unimodal(base, 1, ds)}
        for name, (method, fusion) in plan.items():
            cfg = load_preset(seed=seed, balancer={"method": method}, model={"fusion": fusion})
            row[name] = train(cfg, ds).summary["test"]
        rows.append(row)
    return rows, time.perf_counter() - t


def _col(rows, name, key=None):
    return np.array([r[name] if key is None else r[name][key] for r in rows])


def test_criterion_5_competition(competition):
    rows, dt = competition
    with criterion(5, "suppression, MLB recovery and MLB > joint on the gap-3 preset, 5 seeds") as note:
        ceil_v, ceil_a = _col(rows, "ceil_v"), _col(rows, "ceil_a")
        assert ceil_v.mean() < ceil_a.mean()  # v is the weak modality
        gap = ceil_v - _col(rows, "joint_mid", "acc_v")
        gained = _col(rows, "mlb_mid", "acc_v") - _col(rows, "joint_mid", "acc_v")
        recovery = gained.mean() / gap.mean()
        d_mm = _col(rows, "mlb_mid", "acc_mm") - _col(rows, "joint_mid", "acc_mm")
        note["msg"] = (f"ceilings v {ceil_v.mean():.3f} a {ceil_a.mean():.3f}; joint probe gap "
                       f"{gap.mean():.3f} (per seed {np.round(gap, 3).tolist()}); recovery {recovery:.2f}; "
                       f"MLB-joint {d_mm.mean():+.3f}; {dt:.0f}s")
        assert gap.mean() >= 0.10
        assert recovery >= 0.5
        assert d_mm.mean() >= 0.02
        assert dt < 600


def test_criterion_6_mlp_suppresses_more(competition):
    rows, _ = competition
    with criterion(6, "weak-modality gap, mid_mlp vs late_linear under joint training") as note:
        ceil_v = _col(rows, "ceil_v")
        mid = ceil_v - _col(rows, "joint_mid", "acc_v")
        late = ceil_v - _col(rows, "joint_late", "acc_v")
        wins = int(np.sum(mid > late))
        note["msg"] = f"mid > late in {wins}/5 seeds (mean gaps {mid.mean():.3f} vs {late.mean():.3f})"
        assert wins >= 4


def test_criterion_7_multi_loss_beats_joint(competition):
    rows, _ = competition
    with criterion(7, "seed-mean multimodal accuracy, multi_loss >= joint") as note:
        m = _col(rows, "multi_mid", "acc_mm").mean()
        j = _col(rows, "joint_mid", "acc_mm").mean()
        ml = _col(rows, "multi_late", "acc_mm").mean()
        jl = _col(rows, "joint_late", "acc_mm").mean()
        note["msg"] = f"mid_mlp {m:.3f} vs {j:.3f}; late_linear {ml:.3f} vs {jl:.3f}"
        assert m >= j and ml >= jl


# ---------------------------------------------------------------------------
# 8-10


def _ece_by_scanning(probs, labels, bins):
    n = len(labels)
    gaps = [Fraction(0)] * bins
    for p, y in zip(probs.tolist(), labels.tolist()):
        conf = max(p)
        b = 0
        while b < bins - 1 and conf > (b + 1) / bins:
            b += 1
        gaps[b] += int(p.index(conf) == y) - Fraction(conf)
    return float(sum(abs(g) for g in gaps) / n)


def test_criterion_8_ece_oracle():
    with criterion(8, "ECE equals brute-force binning on 1e4 random prediction sets") as note:
        rng = np.random.default_rng(8)
        mismatches = 0
        for i in range(10_000):
            n = int(rng.integers(1, 30))
            C = int(rng.integers(2, 6))
            bins = int(rng.integers(1, 16))
            if i % 5 == 0:
                # confidences placed on bin edges
                conf = rng.integers(1, bins + 1, n) / bins
                conf = np.maximum(conf, 1.0 / C)
                p = np.empty((n, C))
                p[:] = ((1 - conf) / (C - 1))[:, None]
                p[np.arange(n), rng.integers(0, C, n)] = conf
            else:
                p = rng.dirichlet(np.full(C, rng.uniform(0.2, 3.0)), size=n)
            y = rng.integers(0, C, n)
            mismatches += ece(p, y, bins) != _ece_by_scanning(p, y, bins)
        hand = ece(np.array([[0.9, 0.1], [0.9, 0.1]]), [0, 1])
        note["msg"] = f"{mismatches} mismatches; hand case {hand!r}"
        assert mismatches == 0
        assert abs(hand - 0.4) < 1e-15


def test_criterion_9_determinism(tmp_path, capsys):
    with criterion(9, "bit-identical epochs.csv and zero std over a repeated seed") as note:
        cfg = resources.files("mlb_lab") / "presets" / "competition.json"
        for d in ("a", "b"):
            assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "11"]) == 0
        capsys.readouterr()
        same = (tmp_path / "a/epochs.csv").read_bytes() == (tmp_path / "b/epochs.csv").read_bytes()
        agg = sweep(load_preset(epochs=10), [5, 5], jobs=2)
        stds = {k: m["std"] for k, m in agg["metrics"].items()}
        note["msg"] = f"epochs.csv identical: {same}; sweep std {stds}"
        assert same
        assert all(s == 0.0 for s in stds.values())


def test_criterion_10_baseline_sanity():
    with criterion(10, "MLB with k=1 matches multi_loss bitwise; OGM hand values") as note:
        base = load_preset(seed=1, balancer={"method": "multi_loss"})
        ds = base.datasets()
        a = train(base, ds)
        # beta_max 1 and a vanishing alpha round every coefficient to exactly 1
        b = train(load_preset(seed=1, balancer={"method": "mlb", "beta_max": 1.0, "alpha": 1e-300}), ds)
        assert all(t["k_v"] == 1.0 and t["k_a"] == 1.0 for t in b.trace)
        assert a.records == b.records and a.summary["test"] == b.summary["test"]
        for name, p in a.model.params.items():
            assert np.array_equal(b.model.params[name], p), name
        k = bal.ogm_coefficients([1.4, 0.7], 0.5)
        expect = 2 / (math.e ** 2 + 1)  # 1 - tanh(0.5 * 2) in exponential form
        note["msg"] = f"{len(a.records)} epoch records identical; OGM k = {np.round(k, 4).tolist()}"
        assert abs(k[0] - 0.2384) <= 1e-4 and k[1] == 1.0
        assert abs(k[0] - expect) < 1e-15
