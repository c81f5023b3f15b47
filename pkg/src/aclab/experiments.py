"""Monte Carlo cost estimates, regret sweeps and hitting-probability experiments."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analytics
from .errors import DomainError, HypothesisError
from .noise import iter_blocks
from .sde_engine import ProblemDynamics, SimGrid, run_paths
from .strategy_kit import StrategySpec, default_tau

CHUNK = 4096
LEMMA_IDS = ("bkpl-A", "bkpl-B", "nhl-Ai", "nhl-Aii", "nhl-Bi", "nhl-Biii", "nhl-C")


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo settings.

    ``dt_base`` defaults to T/2000 and ``dt_testing`` to tau/64 for BR, so the
    grid is resolved per cell. With ``antithetic`` set, paths 2k and 2k+1 share
    stream k with opposite signs.
    """

    n_paths: int = 100_000
    seed: int = 42
    dt_base: float | None = None
    dt_testing: float | None = None
    cost_rule: str = "left"
    antithetic: bool = False
    workers: int = 1

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise DomainError(f"n_paths must be an integer >= 2, got {self.n_paths}")
        if self.antithetic and self.n_paths % 2:
            raise DomainError("antithetic sampling needs an even n_paths")
        if self.workers < 1:
            raise DomainError(f"workers must be >= 1, got {self.workers}")

    def grid(self, T: float, blueprint=None) -> SimGrid:
        return SimGrid.default(T, blueprint, self.dt_base, self.dt_testing, self.cost_rule)


@dataclass(frozen=True)
class CostEstimate:
    """Mean cost with its standard error.

    ``n``, ``total`` and ``total_sq`` are the sufficient statistics of the
    independent samples: single paths, or antithetic pair means.
    """

    mean: float
    stderr: float
    n: int
    total: float
    total_sq: float
    flags: tuple = ()

    @classmethod
    def from_samples(cls, samples: np.ndarray, flags=()) -> "CostEstimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        if n < 2:
            raise DomainError("a cost estimate needs at least 2 samples")
        if not np.all(np.isfinite(samples)):
            return cls(math.inf, math.inf, n, math.inf, math.inf, tuple(flags) + ("overflow",))
        total = float(np.sum(samples))
        # huge finite costs may square to inf; the stderr is then reported as inf
        with np.errstate(over="ignore"):
            total_sq = float(np.sum(samples * samples))
        return cls.from_sums(n, total, total_sq, flags)

    @classmethod
    def from_sums(cls, n: int, total: float, total_sq: float, flags=()) -> "CostEstimate":
        mean = total / n
        var = max(total_sq - total * mean, 0.0) / (n - 1)
        return cls(mean, math.sqrt(var / n), n, total, total_sq, tuple(flags))


@dataclass(frozen=True)
class RegretRow:
    a: float
    b: float
    strategy: str
    cost: CostEstimate
    ecost_opt: float
    mreg: float
    mreg_stderr: float
    flags: tuple = ()


@dataclass(frozen=True)
class Probability:
    value: float
    stderr: float
    n: int

    @classmethod
    def from_count(cls, hits: int, n: int) -> "Probability":
        p = hits / n
        return cls(p, math.sqrt(p * (1.0 - p) / n), n)


def _path_layout(mc: McConfig):
    idx = np.arange(mc.n_paths, dtype=np.int64)
    if mc.antithetic:
        return idx // 2, np.where(idx % 2 == 0, 1.0, -1.0)
    return idx, None


def simulate_costs(dyn: ProblemDynamics, blueprint, mc: McConfig,
                   noise_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-path costs and overflow flags in path order, computed chunk by chunk."""
    grid = mc.grid(dyn.T, blueprint)
    keys, signs = _path_layout(mc)
    bounds = list(range(0, mc.n_paths, CHUNK)) + [mc.n_paths]
    spans = list(zip(bounds[:-1], bounds[1:]))

    def work(span):
        lo, hi = span
        batch = run_paths(dyn, blueprint, grid, mc.seed, keys[lo:hi],
                          None if signs is None else signs[lo:hi], noise_scale)
        return batch.costs, batch.overflow

    if mc.workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(mc.workers) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def estimate_expected_cost(dyn: ProblemDynamics, blueprint, mc: McConfig) -> CostEstimate:
    costs, overflow = simulate_costs(dyn, blueprint, mc)
    if mc.antithetic:
        costs = 0.5 * (costs[0::2] + costs[1::2])
    return CostEstimate.from_samples(costs, ("overflow",) if overflow.any() else ())


def make_b_grid(log_min: float, log_max: float, points: int, include_zero: bool = True,
                signs: tuple = (1, -1)) -> list[float]:
    """Magnitudes 10^log_min .. 10^log_max, mirrored over ``signs``, plus optional 0."""
    if points < 1:
        raise DomainError("points must be >= 1")
    mags = np.logspace(log_min, log_max, points) if points > 1 else np.array([10.0 ** log_min])
    out = [0.0] if include_zero else []
    for m in mags:
        for s in signs:
            out.append(float(s * m))
    return out


def regret_sweep(a_list, b_grid, strategies, mc: McConfig, T: float = 1.0, q0: float = 1.0,
                 log=None) -> list[RegretRow]:
    """One row per (a, b, strategy), in that nesting order.

    Every cell reuses the same seed and path keys, so strategies and b values
    at fixed a are compared on common random numbers.
    """
    specs = [s if isinstance(s, StrategySpec) else StrategySpec(**s) for s in strategies]
    rows = []
    for a in a_list:
        for b in b_grid:
            opt = analytics.ecost_opt(a, b, T, q0)
            if not opt > 0:
                raise DomainError(f"ecost_opt({a}, {b}) = {opt} is not positive")
            dyn = ProblemDynamics(float(a), float(b), float(q0), float(T))
            for spec in specs:
                bp = spec.build(a, b, T, q0)
                est = estimate_expected_cost(dyn, bp, mc)
                flags = est.flags
                mreg = est.mean / opt
                rows.append(RegretRow(float(a), float(b), spec.id, est, opt, mreg,
                                      est.stderr / opt, flags))
                if log is not None:
                    log(f"a={a:g} b={b:g} {spec.id}: mreg={mreg:.6g} +- {est.stderr / opt:.3g}")
    return rows


def worst_case_regret(rows) -> list[tuple[str, float, float]]:
    """(strategy, max mreg, argmax b) per strategy, in first-seen order."""
    rows = list(rows)
    if not rows:
        raise DomainError("worst_case_regret needs at least one row")
    best: dict[str, tuple[float, float]] = {}
    for r in rows:
        cur = best.get(r.strategy)
        if cur is None or r.mreg > cur[0] or (math.isnan(cur[0]) and not math.isnan(r.mreg)):
            best[r.strategy] = (r.mreg, r.b)
    return [(sid, m, b) for sid, (m, b) in best.items()]


# ---------------------------------------------------------------------------
# hitting-time experiments

@dataclass(frozen=True)
class LemmaTrialSpec:
    lemma: str
    Q0: float = 1.0
    alpha: float = 1.0
    beta: float = 0.0
    tau: float | None = None
    eta: float | None = None
    T_hat: float = 1.0
    mc: McConfig = field(default_factory=lambda: McConfig(n_paths=20_000))
    steps: int | None = None

    def __post_init__(self):
        if self.lemma not in LEMMA_IDS:
            raise DomainError(f"unknown lemma id {self.lemma!r}; expected one of {LEMMA_IDS}")

    def params_json(self) -> str:
        doc = {"Q0": self.Q0, "alpha": self.alpha}
        if self.lemma.startswith("bkpl"):
            doc.update(beta=self.beta, tau=self.resolved_tau())
        else:
            if self.eta is not None:
                doc["eta"] = self.eta
            doc["T_hat"] = self.T_hat
        return json.dumps(doc, sort_keys=True)

    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        return tau_rule(self.alpha, self.T_hat)


def tau_rule(alpha: float, T: float = 1.0) -> float:
    """The BR Testing duration for drift ``alpha`` on horizon ``T``."""
    return default_tau(alpha, int(math.floor(alpha * T)))


def estimate_lemma_bkpl(spec: LemmaTrialSpec) -> tuple[Probability, Probability]:
    """(p_stay, p_exit) for dq = (alpha q + beta Q0 (alpha tau)^(-1/2))dt + dW, q(0) = Q0.

    The path exits when |q - Q0| >= |Q0| (alpha tau)^(1/2) at an interior grid
    time of [0, tau]; otherwise it stays for the whole window.
    """
    alpha, Q0, beta = spec.alpha, spec.Q0, spec.beta
    for name, v in (("alpha", alpha), ("Q0", Q0), ("beta", beta), ("T_hat", spec.T_hat)):
        if not math.isfinite(v):
            raise DomainError(f"{name} must be finite")
    if not alpha > 0:
        raise HypothesisError(f"bkpl needs alpha > 0, got {alpha}")
    if Q0 == 0:
        raise HypothesisError("bkpl needs Q0 != 0")
    tau = spec.resolved_tau()
    limit = tau_rule(alpha, spec.T_hat)
    if not 0 < tau <= limit * (1 + 1e-12):
        raise HypothesisError(f"tau={tau} exceeds the tau rule {limit} for alpha={alpha}")
    steps = spec.steps or 512
    s = math.sqrt(alpha * tau)
    drive = beta * Q0 / s
    band = abs(Q0) * s
    dt = tau / steps
    x = alpha * dt
    growth = math.exp(x)
    shift = drive * dt * math.expm1(x) / x
    sd = math.sqrt(dt * math.expm1(2 * x) / (2 * x))

    keys, signs = _path_layout(spec.mc)
    exits = 0
    for lo in range(0, keys.size, CHUNK):
        k = keys[lo:lo + CHUNK]
        q = np.full(k.size, float(Q0))
        out = np.zeros(k.size, dtype=bool)
        step = 0
        for z in iter_blocks(spec.mc.seed, k, steps, signs=None if signs is None else signs[lo:lo + CHUNK]):
            for j in range(z.shape[1]):
                q = growth * q + shift + sd * z[:, j]
                step += 1
                if step < steps:
                    out |= np.abs(q - Q0) >= band
        exits += int(out.sum())
    n = keys.size
    return Probability.from_count(n - exits, n), Probability.from_count(exits, n)


def _nhl_setup(spec: LemmaTrialSpec):
    alpha, Q0, eta, T_hat = spec.alpha, spec.Q0, spec.eta, spec.T_hat
    case = spec.lemma[4:]
    if not (math.isfinite(alpha) and math.isfinite(Q0)):
        raise DomainError("alpha and Q0 must be finite")
    if Q0 == 0:
        raise HypothesisError("nhl needs Q0 != 0")
    if not (T_hat > 0 and math.isfinite(T_hat)):
        raise HypothesisError(f"T_hat must be finite and > 0, got {T_hat}")
    if case in ("Ai", "Aii") and not alpha > 0:
        raise HypothesisError(f"case {case} needs alpha > 0, got {alpha}")
    if case in ("Bi", "Biii") and not alpha < 0:
        raise HypothesisError(f"case {case} needs alpha < 0, got {alpha}")
    if case == "C" and alpha == 0:
        raise HypothesisError("case C needs alpha != 0")
    if case in ("Ai", "Bi", "C"):
        if eta is None or not 0 < eta < 1.0 / math.log(2.0):
            raise HypothesisError(f"eta must lie in (0, 1/ln 2), got {eta}")
    if case in ("Ai", "Bi"):
        window = min(1.0 / (eta * abs(alpha)), T_hat)
    elif case == "C":
        window = min(eta / abs(alpha), T_hat)
    else:
        window = T_hat
    return case, window


def estimate_lemma_nhl(spec: LemmaTrialSpec) -> Probability:
    """Frequency of the case's event for dq = alpha q dt + dW, q(0) = Q0.

    Every observation window is capped at T_hat; events are checked at the
    grid points of a window/steps grid (1024 steps by default).
    """
    case, window = _nhl_setup(spec)
    Q0, alpha = spec.Q0, spec.alpha
    steps = spec.steps or 1024
    dt = window / steps
    x = alpha * dt
    growth = math.exp(x)
    sd = math.sqrt(dt * math.expm1(2 * x) / (2 * x))

    keys, signs = _path_layout(spec.mc)
    hits = 0
    for lo in range(0, keys.size, CHUNK):
        k = keys[lo:lo + CHUNK]
        q = np.full(k.size, float(Q0))
        if case in ("Ai", "Bi"):
            flag = np.ones(k.size, dtype=bool)  # the "for all t" event survives
        else:
            flag = np.zeros(k.size, dtype=bool)
        for z in iter_blocks(spec.mc.seed, k, steps, signs=None if signs is None else signs[lo:lo + CHUNK]):
            for j in range(z.shape[1]):
                q = growth * q + sd * z[:, j]
                if case == "Ai":
                    flag &= q < 2.0 * Q0
                elif case == "Aii":
                    flag |= q <= 0.5 * Q0
                elif case == "Bi":
                    flag &= q > 0.5 * Q0
                elif case == "Biii":
                    flag |= np.abs(q) >= 2.0 * abs(Q0)
                else:
                    flag |= (q >= 2.0 * Q0) | (q <= 0.5 * Q0)
        hits += int(flag.sum())
    return Probability.from_count(hits, keys.size)


def estimate_sup_crossing(alpha: float, t: float, M: float, n_paths: int, dt: float,
                          seed: int = 42) -> Probability:
    """Frequency of sup_{s <= t} X(s) >= M on a dt grid, X(s) = int_0^s exp(-alpha r) dW(r)."""
    if not (t > 0 and dt > 0 and M > 0):
        raise DomainError("need t > 0, dt > 0, M > 0")
    steps = int(round(t / dt))
    if steps < 1 or abs(steps * dt - t) > 1e-9 * t:
        raise DomainError(f"t={t} is not a multiple of dt={dt}")
    grid = np.arange(steps) * dt
    y = -2.0 * alpha * dt
    g = math.expm1(y) / y if y != 0 else 1.0
    sd_all = np.sqrt(np.exp(-2.0 * alpha * grid) * dt * g)
    hits = 0
    for lo in range(0, n_paths, CHUNK):
        k = np.arange(lo, min(lo + CHUNK, n_paths), dtype=np.int64)
        level = np.zeros(k.size)
        top = np.full(k.size, -np.inf)
        done = 0
        for z in iter_blocks(seed, k, steps):
            m = z.shape[1]
            path = level[:, None] + np.cumsum(z * sd_all[done:done + m], axis=1)
            top = np.maximum(top, path.max(axis=1))
            level = path[:, -1]
            done += m
        hits += int((top >= M).sum())
    return Probability.from_count(hits, n_paths)


def run_lemma(spec: LemmaTrialSpec) -> Probability:
    """The headline probability of a trial: p_stay for bkpl-A, p_exit for bkpl-B."""
    if spec.lemma == "bkpl-A":
        return estimate_lemma_bkpl(spec)[0]
    if spec.lemma == "bkpl-B":
        return estimate_lemma_bkpl(spec)[1]
    return estimate_lemma_nhl(spec)
