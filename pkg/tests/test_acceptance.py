"""Acceptance gate: one pass/fail line per criterion.

Run with pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from aclab import analytics as an  # noqa: E402
from aclab.cli import run  # noqa: E402
from aclab.experiments import (LemmaTrialSpec, McConfig, estimate_expected_cost,  # noqa: E402
                               estimate_lemma_bkpl, estimate_lemma_nhl, estimate_sup_crossing,
                               make_b_grid, regret_sweep)
from aclab.sde_engine import ProblemDynamics  # noqa: E402
from aclab.strategy_kit import StrategySpec, make_constant_gain, make_optimal_known  # noqa: E402

from automaton_cases import CASES, drive  # noqa: E402

T, Q0 = 1.0, 1.0
CELLS = [(0.0, 0.0), (1.0, 1.0), (-5.0, 2.0), (3.0, -2.0)]
N_COST = 100_000
DT_COST = 5e-4
REL_TOL = 0.01


def _agrees(est, target):
    return abs(est.mean - target) <= max(4 * est.stderr, REL_TOL * abs(target))


def _cost_line(label, est, target):
    return f"{label}: {est.mean:.6g} +- {est.stderr:.2g} vs {target:.6g}"


# 1 ------------------------------------------------------------------------

def test_criterion_1(report):
    ok, parts = True, []
    for a, b in CELLS:
        dyn = ProblemDynamics(a, b, Q0, T)
        est = estimate_expected_cost(dyn, make_optimal_known(b, a, T),
                                     McConfig(N_COST, dt_base=DT_COST, cost_rule="left"))
        target = an.ecost_opt(a, b, T, Q0)
        ok &= _agrees(est, target)
        parts.append(_cost_line(f"opt(a={a:g},b={b:g})", est, target))
    report(1, ok, "; ".join(parts))
    assert ok


# 2 ------------------------------------------------------------------------

def left_rule_mean(alpha, a, b, n):
    """Expected left-rectangle cost of CG(alpha) on an n-step grid, from exact second moments."""
    c = a - b * alpha
    h = T / n
    t = np.arange(n) * h
    x = 2 * c * t
    g = np.where(x == 0, 1.0, np.expm1(x) / np.where(x == 0, 1.0, x))
    second = Q0 * Q0 * np.exp(x) + t * g
    return (1 + alpha * alpha) * h * float(np.sum(second))


def test_criterion_2(report):
    ok, parts = True, []
    n = int(round(T / DT_COST))
    for alpha in (0.0, 1.0, -1.0):
        for a, b in CELLS:
            target = an.ecost_simple_feedback(an.GainSchedule.const(alpha, T), a, b, T, Q0)
            dyn = ProblemDynamics(a, b, Q0, T)
            coarse = estimate_expected_cost(dyn, make_constant_gain(alpha),
                                            McConfig(N_COST, dt_base=DT_COST))
            fine = estimate_expected_cost(dyn, make_constant_gain(alpha),
                                          McConfig(N_COST, dt_base=DT_COST / 2))
            bias_coarse = abs(left_rule_mean(alpha, a, b, n) - target)
            bias_fine = abs(left_rule_mean(alpha, a, b, 2 * n) - target)
            cell_ok = (_agrees(coarse, target) and _agrees(fine, target)
                       and bias_fine < bias_coarse)
            ok &= cell_ok
            parts.append(f"cg({alpha:g}) a={a:g} b={b:g}: {coarse.mean:.5g}/{fine.mean:.5g} "
                         f"vs {target:.5g}, grid bias {bias_coarse:.2g}->{bias_fine:.2g}"
                         + ("" if cell_ok else " MISMATCH"))
    report(2, ok, "; ".join(parts))
    assert ok


# 3 ------------------------------------------------------------------------

def test_criterion_3(report):
    ok, parts = True, []
    for alpha, t, M in [(0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (-2.0, 0.5, 0.5)]:
        p = estimate_sup_crossing(alpha, t, M, 100_000, 1e-4)
        target = an.reflection_sup_prob(alpha, t, M)
        cell_ok = abs(p.value - target) <= 4 * p.stderr + 0.005
        ok &= cell_ok
        parts.append(f"(alpha={alpha:g},t={t:g},M={M:g}): {p.value:.4f} vs {target:.4f}")
    report(3, ok, "; ".join(parts))
    assert ok


# 4 ------------------------------------------------------------------------

def test_criterion_4(report):
    alpha = 50.0
    ladder = [alpha * math.exp(k) for k in (-10, -2, 0, 2, 4)]
    mc = McConfig(n_paths=20_000)
    results = [estimate_lemma_bkpl(LemmaTrialSpec("bkpl-A", Q0=1.0, alpha=alpha, beta=b, mc=mc))
               for b in ladder]
    stay = [r[0] for r in results]
    monotone = all(q.value <= p.value + 4 * math.hypot(p.stderr, q.stderr)
                   for p, q in zip(stay, stay[1:]))
    top = stay[-1].value < 0.01
    exit_small = results[0][1].value < 0.05
    ok = monotone and top and exit_small
    report(4, ok, f"p_stay ladder {[round(p.value, 4) for p in stay]} (monotone={monotone}), "
                  f"p_stay(alpha e^4)={stay[-1].value:.4f} <0.01, "
                  f"p_exit(alpha e^-10)={results[0][1].value:.4f} <0.05")
    assert ok


# 5 ------------------------------------------------------------------------

def test_criterion_5(report):
    mc = McConfig(n_paths=20_000)
    cases = [("nhl-Ai", 50.0), ("nhl-Aii", 50.0), ("nhl-Bi", -50.0), ("nhl-Biii", -50.0)]
    ok, parts = True, []
    for lemma, alpha in cases:
        p = estimate_lemma_nhl(LemmaTrialSpec(lemma, Q0=1.0, alpha=alpha, eta=0.5, T_hat=1.0, mc=mc))
        ok &= p.value < 0.01
        parts.append(f"{lemma}={p.value:.4f}")
    control = estimate_lemma_nhl(LemmaTrialSpec("nhl-Ai", Q0=1.0, alpha=0.01, eta=0.5,
                                                T_hat=1.0, mc=mc))
    ok &= control.value > 0.5
    parts.append(f"vacuous control={control.value:.4f} (>0.5)")
    report(5, ok, ", ".join(parts))
    assert ok


# 6 ------------------------------------------------------------------------

SWEEP_A = [-30.0, -10.0, 0.0, 5.0, 15.0]
BASELINE_IDS = ("cg(0)", "cg(1)", "cg(-1)")


def test_criterion_6(report):
    b_grid = make_b_grid(-3, 3, 13)
    strategies = [StrategySpec("br"), StrategySpec("cg", alpha=0.0),
                  StrategySpec("cg", alpha=1.0), StrategySpec("cg", alpha=-1.0)]
    rows = regret_sweep(SWEEP_A, b_grid, strategies,
                        McConfig(n_paths=20_000, cost_rule="expected"), T, Q0)
    br = [r for r in rows if r.strategy == "br"]
    finite = all(math.isfinite(r.mreg) for r in br)
    floor = all(r.mreg >= 1 - 4 * r.mreg_stderr for r in br)
    dominance, parts = True, []
    for a in SWEEP_A:
        br_a = [r for r in br if r.a == a]
        worst = max(br_a, key=lambda r: r.mreg)
        line = f"a={a:g}: BR max {worst.mreg:.4g} at b={worst.b:g}"
        if a in (5.0, 15.0):
            best = [min(r.mreg for r in rows if r.a == a and r.b == b and r.strategy in BASELINE_IDS)
                    for b in b_grid]
            base = max(best)
            cell = worst.mreg <= 0.1 * base
            dominance &= cell
            line += f" vs baseline max-min {base:.4g} ({'ok' if cell else 'exceeds one tenth'})"
        parts.append(line)
    ok = finite and floor and dominance
    report(6, ok, f"(i) finite={finite}, (ii) dominance={dominance}, (iii) >=1-4se={floor}; "
                  + "; ".join(parts))
    assert ok


# 7 ------------------------------------------------------------------------

def test_criterion_7(report):
    bad = []
    for name, (bp, obs, expected) in CASES.items():
        tags, _ = drive(bp, obs)
        if tags != expected:
            bad.append(f"{name}: {tags}")
    ok = not bad
    report(7, ok, f"{len(CASES) - len(bad)}/{len(CASES)} edge sequences match"
                  + ("" if ok else "; " + "; ".join(bad)))
    assert ok


# 8 ------------------------------------------------------------------------

DETERMINISM_CONFIGS = {
    "simulate": {"command": "simulate", "dynamics": {"a": 15, "b": -2},
                 "strategy": {"kind": "br"}, "mc": {"n_paths": 2, "seed": 7}},
    "sweep": {"command": "sweep", "dynamics": {"a_list": [-30, 15], "b_grid": {
        "log_min": -1, "log_max": 1, "points": 2}}, "strategies": [{"kind": "br"},
                                                                  {"kind": "opt"}],
              "mc": {"n_paths": 5000, "dt_base": 0.005}},
    "baselines": {"command": "baselines", "dynamics": {"a": 5, "b_grid": {"values": [0, 3]}},
                  "mc": {"n_paths": 5000, "dt_base": 0.005, "antithetic": True}},
    "verify-lemma": {"command": "verify-lemma", "mc": {"n_paths": 5000},
                     "lemmas": [{"lemma": "bkpl-A", "alpha": 50, "beta_ladder": [0, 50]},
                                {"lemma": "nhl-C", "alpha": 5, "eta": 0.5}]},
}


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


def test_criterion_8(report):
    ok, parts = True, []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name, cfg in DETERMINISM_CONFIGS.items():
            path = tmp / f"{name}.json"
            path.write_text(json.dumps(cfg))
            snaps = []
            for tag, threads in (("t1a", 1), ("t1b", 1), ("t3a", 3), ("t3b", 3)):
                out = tmp / name / tag
                status = run(path, out, threads=threads, seed=11)
                snaps.append(_snapshot(out) if status == 0 else None)
            same = snaps[0] is not None and all(s == snaps[0] for s in snaps)
            ok &= same
            parts.append(f"{name}: {len(snaps[0] or {})} files "
                         + ("identical" if same else "DIFFER"))
    report(8, ok, "; ".join(parts))
    assert ok


if __name__ == "__main__":
    from conftest import format_line

    def plain_report(number, ok, detail):
        print(format_line(number, ok, detail), flush=True)

    failed = 0
    for number in range(1, 9):
        try:
            globals()[f"test_criterion_{number}"](plain_report)
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
