"""Exact-transition simulation of the controlled scalar OU process dq = (aq + bu)dt + dW.

Controllers hand back an affine law u = offset - gain*q for the coming step.
The offset is held constant and the gain acts in closed loop, so a step of
length h is an exact OU transition with rate ``a - b*gain`` and additive drift
``b*offset``. Threshold events are detected at grid points only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, GridError, NumericOverflow, SchemaError, StrategyError
from .noise import NoiseSource, StreamBank

WATCH_UP = 1
WATCH_DOWN = 2
COST_RULES = ("left", "expected")


@dataclass(frozen=True)
class ProblemDynamics:
    a: float
    b: float
    q0: float
    T: float

    def __post_init__(self):
        for name in ("a", "b", "q0", "T"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"ProblemDynamics.{name} must be finite")
        if self.T <= 0:
            raise DomainError(f"T must be > 0, got {self.T}")


@dataclass(frozen=True)
class SimGrid:
    """Step sizes for one simulation.

    ``dt_testing`` is used while the controller asks for a fine grid (BR
    Testing Subepochs). ``rate_cap`` bounds |rate|*dt while the controller
    watches a threshold the closed-loop drift is moving toward.
    """

    dt_base: float
    dt_testing: float
    t_end: float
    cost_rule: str = "left"
    rate_cap: float = 0.05

    def __post_init__(self):
        if not (0 < self.dt_testing <= self.dt_base <= self.t_end):
            raise GridError(f"need 0 < dt_testing <= dt_base <= T, got "
                            f"{self.dt_testing}, {self.dt_base}, {self.t_end}")
        if self.cost_rule not in COST_RULES:
            raise GridError(f"cost_rule must be one of {COST_RULES}, got {self.cost_rule!r}")
        if not self.rate_cap > 0:
            raise GridError("rate_cap must be > 0")

    @classmethod
    def default(cls, T: float, blueprint=None, dt_base: float | None = None,
                dt_testing: float | None = None, cost_rule: str = "left") -> "SimGrid":
        base = T / 2000.0 if dt_base is None else float(dt_base)
        if dt_testing is None:
            tau = getattr(blueprint, "testing_duration", None)
            dt_testing = min(base, tau / 64.0) if tau else base
        return cls(base, float(dt_testing), float(T), cost_rule)


class Event(NamedTuple):
    t: float
    tag: str
    q: float
    m: int = 0


@dataclass
class TrajectoryLog:
    """One simulated path.

    ``controls[i]``, ``alphas[i]``, ``drives[i]``, ``offsets[i]`` and ``gains[i]``
    describe the law held on [times[i], times[i+1]).
    """

    times: np.ndarray
    positions: np.ndarray
    controls: np.ndarray
    cost: float
    events: list = field(default_factory=list)
    cost_rule: str = "left"
    alphas: np.ndarray | None = None
    drives: np.ndarray | None = None
    offsets: np.ndarray | None = None
    gains: np.ndarray | None = None
    noise_var: float = 1.0
    overflow: bool = False


# ---------------------------------------------------------------------------
# exact OU transition

def _g1(x):
    """expm1(x)/x with the x -> 0 limit."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    with np.errstate(over="ignore", invalid="ignore"):
        np.divide(np.expm1(x), x, out=out, where=x != 0.0)
    return out


def _series(x, coeffs):
    acc = np.full_like(x, coeffs[-1])
    for c in reversed(coeffs[:-1]):
        acc *= x
        acc += c
    return acc


_SERIES_CUT = 0.1
_G2 = [1.0 / math.factorial(k + 2) for k in range(10)]
_G3 = [(2.0 ** (k + 1) - 1.0) / math.factorial(k + 2) for k in range(10)]
_G4 = [(2.0 ** (k + 2) - 2.0) / math.factorial(k + 3) for k in range(10)]


def _piecewise(x, coeffs, direct):
    """Taylor series near 0, ``direct`` elsewhere (where it does not cancel)."""
    x = np.asarray(x, dtype=float)
    shape = x.shape
    x = x.reshape(-1)
    small = np.abs(x) < _SERIES_CUT
    if small.all():
        return _series(x, coeffs).reshape(shape)
    out = np.empty_like(x)
    out[small] = _series(x[small], coeffs)
    big = ~small
    with np.errstate(over="ignore", invalid="ignore"):
        out[big] = direct(x[big])
    return out.reshape(shape)


def _g2(x):
    """(e^x - 1 - x)/x^2."""
    return _piecewise(x, _G2, lambda y: (np.expm1(y) - y) / (y * y))


def _g3(x):
    """(g1(2x) - g1(x))/x."""
    return _piecewise(x, _G3, lambda y: (_g1(2.0 * y) - _g1(y)) / y)


def _g4(x):
    """(g1(2x) - 2 g1(x) + 1)/x^2."""
    return _piecewise(x, _G4, lambda y: (_g1(2.0 * y) - 2.0 * _g1(y) + 1.0) / (y * y))


def ou_moments(q, alpha, drive, dt):
    """Vectorized transition moments; overflow yields inf instead of raising."""
    x = np.asarray(alpha, dtype=float) * dt
    with np.errstate(over="ignore", invalid="ignore"):
        mean = np.exp(x) * q + drive * dt * _g1(x)
        var = dt * _g1(2.0 * x)
    return mean, var


def ou_step_moments(q: float, alpha: float, drive: float, dt: float) -> tuple[float, float]:
    """Mean and variance of q(t+dt) given q(t)=q for dq = (alpha q + drive)dt + dW."""
    for name, v in (("q", q), ("alpha", alpha), ("drive", drive), ("dt", dt)):
        if not math.isfinite(v):
            raise DomainError(f"{name} must be finite, got {v!r}")
    if dt < 0:
        raise DomainError(f"dt must be >= 0, got {dt}")
    mean, var = ou_moments(q, alpha, drive, dt)
    mean, var = float(mean), float(var)
    if not (math.isfinite(mean) and math.isfinite(var)):
        raise NumericOverflow(f"OU transition overflows: alpha*dt = {alpha * dt:.6g}")
    return mean, var


def ou_exact_step(q: float, alpha: float, drive: float, dt: float, z: float) -> float:
    if not math.isfinite(z):
        raise DomainError(f"z must be finite, got {z!r}")
    mean, var = ou_step_moments(q, alpha, drive, dt)
    return mean + math.sqrt(var) * z


def expected_step_cost(q, alpha, drive, offset, gain, h, noise_var=1.0):
    """E[int_0^h (q(s)^2 + u(s)^2) ds | q(0) = q] for u = offset - gain*q(s).

    The state follows the exact OU law with rate ``alpha`` and drift ``drive``
    over the step, so the result has no time-discretization bias.
    """
    q, alpha, drive, offset, gain, h = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (q, alpha, drive, offset, gain, h)))
    x = alpha * h
    with np.errstate(over="ignore", invalid="ignore"):
        w = 1.0 + gain * gain
        out = w * (q * q * h * _g1(2.0 * x) + noise_var * h * h * _g2(2.0 * x))
        affine = (offset != 0.0) | (drive != 0.0)
        if affine.any():
            # terms that vanish for pure feedback laws
            i = np.flatnonzero(affine.reshape(-1))
            qa, xa, da, ca, ga, ha = (v.reshape(-1)[i] for v in (q, x, drive, offset, gain, h))
            int_m = qa * ha * _g1(xa) + da * ha * ha * _g2(xa)
            extra = ((1.0 + ga * ga) * (2.0 * qa * da * ha * ha * _g3(xa)
                                        + da * da * ha * ha * ha * _g4(xa))
                     - 2.0 * ca * ga * int_m + ca * ca * ha)
            out = out.reshape(-1).copy()
            out[i] += extra
            out = out.reshape(q.shape)
    return out


def left_step_cost(q, u, h):
    return (q * q + u * u) * h


# ---------------------------------------------------------------------------
# path simulation

@dataclass
class PathBatch:
    costs: np.ndarray
    overflow: np.ndarray
    steps: np.ndarray
    logs: list | None = None


def _check_dyn_grid(dyn: ProblemDynamics, grid: SimGrid):
    if abs(grid.t_end - dyn.T) > 1e-12 * dyn.T:
        raise GridError(f"grid horizon {grid.t_end} differs from T={dyn.T}")


def run_paths(dyn: ProblemDynamics, blueprint, grid: SimGrid, seed: int, keys,
              signs=None, noise_scale: float = 1.0, start: int = 0,
              record: bool = False) -> PathBatch:
    """Simulate the paths whose noise streams are ``keys`` (optionally sign-flipped).

    Every path carries its own clock; an iteration advances each unfinished path
    by one step of its own size, drawing exactly one Gaussian from its stream.
    """
    _check_dyn_grid(dyn, grid)
    keys = np.asarray(keys, dtype=np.int64)
    n = keys.size
    a, b, T = dyn.a, dyn.b, dyn.T
    tiny = 1e-12 * T
    cap_floor = 1e-15 * T
    noise_var = float(noise_scale) ** 2
    expected = grid.cost_rule == "expected"

    ctrl = blueprint.controller(dyn, n)
    if getattr(ctrl, "synchronous", False) and not record:
        return _run_lockstep(dyn, ctrl, grid, seed, keys, signs, noise_scale, start)
    bank = StreamBank(seed, keys, signs, noise_scale, start)
    t = np.zeros(n)
    q = np.full(n, float(dyn.q0))
    cost = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    overflow = np.zeros(n, dtype=bool)

    if record:
        snaps = []
        events = [[ctrl.event(i, 0.0, float(dyn.q0))] for i in range(n)]

    while active.any():
        dec = ctrl.decide(t, q)
        offset, gain = dec.offset, dec.gain
        bad = active & ~(np.isfinite(offset) & np.isfinite(gain))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise StrategyError(
                f"controller returned a non-finite law at t={t[i]!r}, q={q[i]!r} "
                f"(seed={seed}, path={int(keys[i])}); state: {ctrl.dump(i)}")
        alpha = a - b * gain
        drive = b * offset

        h = np.where(dec.fine, grid.dt_testing, grid.dt_base)
        watch = dec.watch
        toward = (((watch & WATCH_UP) != 0) & (alpha > 0)) | (((watch & WATCH_DOWN) != 0) & (alpha < 0))
        if toward.any():
            with np.errstate(divide="ignore"):
                cap = np.where(toward, grid.rate_cap / np.abs(alpha), np.inf)
            h = np.minimum(h, np.maximum(cap, cap_floor))
        pushed = np.isfinite(dec.reach) & (drive != 0.0)
        if pushed.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                cap = np.where(pushed, grid.rate_cap * dec.reach / np.abs(drive), np.inf)
            h = np.minimum(h, np.maximum(cap, cap_floor))
        limit = np.minimum(dec.next_deadline, T)
        t_new = t + h
        t_new = np.where(t_new >= limit - tiny, limit, t_new)
        t_new = np.where(t_new >= T - tiny, T, t_new)
        t_new = np.where(active, t_new, t)
        h = t_new - t
        if (active & (h <= 0.0)).any():
            i = int(np.flatnonzero(active & (h <= 0.0))[0])
            raise GridError(f"step underflow at t={t[i]!r} (seed={seed}, path={int(keys[i])}); "
                            f"deadline spacing below {tiny:.3g}")

        z = bank.take(active)
        mean, var = ou_moments(q, alpha, drive, h)
        with np.errstate(invalid="ignore", over="ignore"):
            q_new = mean + np.sqrt(var * noise_var) * z
            u = offset - gain * q
            if expected:
                c = expected_step_cost(q, alpha, drive, offset, gain, h, noise_var)
            else:
                c = left_step_cost(q, u, h)
        if record:
            snaps.append((active.copy(), t.copy(), q.copy(), u, alpha, drive, offset.copy(),
                          gain.copy()))

        cost = np.where(active, cost + c, cost)
        q = np.where(active, q_new, q)
        steps += active
        ovf = active & ~(np.isfinite(q) & np.isfinite(cost))
        if ovf.any():
            overflow |= ovf
            cost = np.where(ovf, np.inf, cost)
            t_new = np.where(ovf, T, t_new)
        t = t_new
        moved = active & ~ovf & (t < T)
        changed = ctrl.advance(t, q, moved)
        if record and changed.any():
            for i in np.flatnonzero(changed):
                events[i].append(ctrl.event(int(i), float(t[i]), float(q[i])))
        active = moved

    logs = None
    if record:
        logs = []
        mask = np.array([s[0] for s in snaps])
        cols = [np.array([s[k] for s in snaps]) for k in range(1, 8)]
        for i in range(n):
            sel = mask[:, i]
            ts, qs, us, als, drs, offs, gns = (c[sel, i] for c in cols)
            times = np.append(ts, t[i])
            positions = np.append(qs, q[i])
            logs.append(TrajectoryLog(times, positions, us, float(cost[i]), events[i],
                                      grid.cost_rule, als, drs, offs, gns, noise_var,
                                      bool(overflow[i])))
    return PathBatch(cost, overflow, steps, logs)


def _run_lockstep(dyn, ctrl, grid, seed, keys, signs, noise_scale, start):
    """Fast path for feedback laws with no events: one shared time grid.

    Draws the same streams as the general loop; per-step coefficients are
    scalars here, so the two agree to rounding rather than bit for bit.
    """
    n = keys.size
    a, b, T = dyn.a, dyn.b, dyn.T
    tiny = 1e-12 * T
    noise_var = float(noise_scale) ** 2
    expected = grid.cost_rule == "expected"
    bank = StreamBank(seed, keys, signs, noise_scale, start, block=1)
    gens = bank._gens
    block = 1024
    zbuf = None
    zpos = block

    q = np.full(n, float(dyn.q0))
    cost = np.zeros(n)
    overflow = np.zeros(n, dtype=bool)
    t = 0.0
    steps = 0
    while t < T:
        gain = ctrl.gain_now(t)
        if not math.isfinite(gain):
            raise StrategyError(f"controller returned a non-finite gain at t={t!r} "
                                f"(seed={seed}, path={int(keys[0])})")
        t_new = t + grid.dt_base
        if t_new >= T - tiny:
            t_new = T
        h = t_new - t
        x = (a - b * gain) * h
        with np.errstate(over="ignore", invalid="ignore"):
            growth = math.exp(x) if x < 709.0 else math.inf
            sd = math.sqrt(h * float(_g1(2.0 * x)) * noise_var)
            w = 1.0 + gain * gain
            if expected:
                quad = w * h * float(_g1(2.0 * x))
                const = w * noise_var * h * h * float(_g2(2.0 * x))
            else:
                quad, const = w * h, 0.0
            cost += quad * (q * q) + const
            if gens is None:
                q = growth * q
            else:
                if zpos >= block:
                    zbuf = np.stack([g.standard_normal(block) for g in gens]).T.copy()
                    if bank._signed:
                        zbuf *= bank.signs
                    zpos = 0
                q = growth * q + sd * zbuf[zpos]
                zpos += 1
        steps += 1
        t = t_new
        if not (np.isfinite(q).all() and np.isfinite(cost).all()):
            bad = ~(np.isfinite(q) & np.isfinite(cost))
            overflow |= bad
            q[bad] = 0.0
            cost[bad] = 0.0
    cost[overflow] = np.inf
    return PathBatch(cost, overflow, np.full(n, steps, dtype=np.int64), None)


def simulate_controlled_path(dyn: ProblemDynamics, blueprint, grid: SimGrid,
                             noise: NoiseSource) -> TrajectoryLog:
    batch = run_paths(dyn, blueprint, grid, noise.seed, [noise.path_index],
                      signs=[-1.0 if noise.mirror else 1.0], noise_scale=noise.scale,
                      start=noise.step_counter, record=True)
    return batch.logs[0]


def accumulate_cost(log: TrajectoryLog) -> float:
    """Recompute the path cost from the log; matches ``log.cost`` bit for bit."""
    times = np.asarray(log.times, dtype=float)
    positions = np.asarray(log.positions, dtype=float)
    controls = np.asarray(log.controls, dtype=float)
    n = times.size
    if n < 1 or positions.size != n or controls.size != n - 1:
        raise SchemaError(f"ragged log: {times.size} times, {positions.size} positions, "
                          f"{controls.size} controls")
    h = times[1:] - times[:-1]
    q = positions[:-1]
    if log.cost_rule == "left":
        with np.errstate(over="ignore", invalid="ignore"):
            parts = left_step_cost(q, controls, h)
    elif log.cost_rule == "expected":
        extra = [log.alphas, log.drives, log.offsets, log.gains]
        if any(e is None or np.asarray(e).size != n - 1 for e in extra):
            raise SchemaError("expected-rule log needs per-step alphas, drives, offsets, gains")
        als, drs, offs, gns = (np.asarray(e, dtype=float) for e in extra)
        parts = expected_step_cost(q, als, drs, offs, gns, h, log.noise_var)
    else:
        raise SchemaError(f"unknown cost rule {log.cost_rule!r}")
    total = 0.0
    for p in parts:
        total += p
    if log.overflow:
        return math.inf
    return float(total)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(log: TrajectoryLog, path) -> None:
    """Dump a log as ``t,q,u,event`` rows; the final row has no held control."""
    tags = {}
    for ev in log.events:
        tags.setdefault(ev.t, []).append(ev.tag)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "q", "u", "event"])
        for i, (ti, qi) in enumerate(zip(log.times, log.positions)):
            u = _fmt(log.controls[i]) if i < len(log.controls) else ""
            w.writerow([_fmt(ti), _fmt(qi), u, ";".join(tags.get(float(ti), []))])
