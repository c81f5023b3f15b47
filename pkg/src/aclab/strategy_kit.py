"""Policies for the scalar control problem and the BR epoch automaton.

Controllers never see the control gain b. A controller is created per batch of
paths, answers ``decide(t, q)`` with an affine law ``u = offset - gain*q`` for
each path, and updates its per-path state in ``advance(t, q, mask)`` after
each grid step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .analytics import _kappa_array
from .errors import DomainError, HypothesisError, StrategyError

LARGE_A = "large_a"
BOUNDED_A = "bounded_a"
NEGATIVE_A = "negative_a"

WATCH_UP = 1
WATCH_DOWN = 2


class Phase(IntEnum):
    EP0_TEST = 0
    EP0_CONTROL = 1
    EPNU_TEST = 2
    CONTROL_II = 3
    CONTROL_III = 4
    APATHY = 5
    B0 = 6
    B1 = 7
    B2 = 8
    N0 = 9
    N1_CONTROL = 10
    N1_APATHY = 11
    N2 = 12


_REGIME_PHASES = {
    LARGE_A: {Phase.EP0_TEST, Phase.EP0_CONTROL, Phase.EPNU_TEST, Phase.CONTROL_II,
              Phase.CONTROL_III, Phase.APATHY},
    BOUNDED_A: {Phase.B0, Phase.B1, Phase.B2},
    NEGATIVE_A: {Phase.N0, Phase.N1_CONTROL, Phase.N1_APATHY, Phase.N2},
}


def _fmt_num(x: float) -> str:
    return format(float(x), ".17g")


def _require_finite(**values):
    for name, v in values.items():
        if v is None or not math.isfinite(v):
            raise DomainError(f"{name} must be finite, got {v!r}")


@dataclass
class ControlDecision:
    """Law for the coming step, one entry per path.

    ``fine`` selects the testing grid; ``watch`` flags threshold directions the
    engine should approach with rate-capped steps; ``reach`` is a position
    scale that bounds how far the additive drift may carry q in one step.
    """

    u: np.ndarray
    offset: np.ndarray
    gain: np.ndarray
    next_deadline: np.ndarray
    fine: np.ndarray
    watch: np.ndarray
    reach: np.ndarray


def _plain_decision(n, offset, gain, u, T):
    return ControlDecision(u, offset, gain, np.full(n, T), np.zeros(n, dtype=bool),
                           np.zeros(n, dtype=np.int8), np.full(n, np.inf))


# ---------------------------------------------------------------------------
# simple feedback strategies

class _FeedbackController:
    # every path shares one time grid, so the engine may step them in lockstep
    synchronous = True

    def __init__(self, gain_fn, n, T, tag):
        self._gain_fn = gain_fn
        self.n = n
        self.T = T
        self.tag = tag
        self._zeros = np.zeros(n)
        self._dead = np.full(n, T)
        self._fine = np.zeros(n, dtype=bool)
        self._watch = np.zeros(n, dtype=np.int8)
        self._reach = np.full(n, np.inf)

    def decide(self, t, q):
        gain = self._gain_fn(t)
        return ControlDecision(-gain * q, self._zeros, gain, self._dead, self._fine,
                               self._watch, self._reach)

    def gain_now(self, t: float) -> float:
        return float(np.asarray(self._gain_fn(np.full(1, t)))[0])

    def advance(self, t, q, mask):
        return np.zeros(self.n, dtype=bool)

    def event(self, i, t, q):
        from .sde_engine import Event
        return Event(t, self.tag, q, 0)

    def dump(self, i):
        return {"strategy": self.tag}


@dataclass(frozen=True)
class ConstantGain:
    alpha: float
    kind: str = field(default="cg", init=False)

    def __post_init__(self):
        _require_finite(alpha=self.alpha)

    @property
    def id(self) -> str:
        return f"cg({_fmt_num(self.alpha)})"

    testing_duration = None

    def control(self, t: float, q: float) -> float:
        return -self.alpha * q

    def controller(self, dyn, n: int):
        gain = np.full(n, float(self.alpha))
        return _FeedbackController(lambda t: gain, n, dyn.T, self.id)

    def to_json(self) -> dict:
        return {"kind": "cg", "alpha": self.alpha}


@dataclass(frozen=True)
class OptimalKnownB:
    """Feedback u = -beta*kappa(T - t, beta; a)*q, optimal when the true gain is beta."""

    beta: float
    a: float
    T: float
    kind: str = field(default="opt", init=False)

    def __post_init__(self):
        _require_finite(beta=self.beta, a=self.a, T=self.T)
        if self.T <= 0:
            raise DomainError(f"T must be > 0, got {self.T}")

    @property
    def id(self) -> str:
        return f"opt({_fmt_num(self.beta)})"

    testing_duration = None

    def gain_at(self, t):
        rem = np.maximum(self.T - np.asarray(t, dtype=float), 0.0)
        return self.beta * _kappa_array(rem, abs(self.beta), self.a)

    def control(self, t: float, q: float) -> float:
        return float(-self.gain_at(t) * q)

    def controller(self, dyn, n: int):
        if dyn.a != self.a or dyn.T != self.T:
            raise DomainError(f"opt blueprint built for (a={self.a}, T={self.T}) "
                              f"used on (a={dyn.a}, T={dyn.T})")
        return _FeedbackController(self.gain_at, n, dyn.T, self.id)

    def to_json(self) -> dict:
        return {"kind": "opt", "beta": self.beta, "a": self.a, "T": self.T}


def make_constant_gain(alpha: float) -> ConstantGain:
    return ConstantGain(float(alpha))


def make_optimal_known(beta: float, a: float, T: float) -> OptimalKnownB:
    return OptimalKnownB(float(beta), float(a), float(T))


# ---------------------------------------------------------------------------
# BR

@dataclass(frozen=True)
class BRParams:
    A: float
    K: float
    tau: float | None
    nu_star: int
    a: float
    T: float
    q0: float

    @property
    def regime(self) -> str:
        return regime_of(self.a, self.A)

    @property
    def ep0_deadline(self) -> float:
        return 1.0 / (10.0 * abs(self.a))


def regime_of(a: float, A: float) -> str:
    if a > A:
        return LARGE_A
    if a < -A:
        return NEGATIVE_A
    return BOUNDED_A


def default_A(T: float) -> float:
    return max(2.0, 1.0 / (5.0 * T))


def default_tau(a: float, nu_star: int) -> float:
    # (1 + s)^nu < 11/10 is the binding bound; s = sqrt(a*tau) = ln(11/10)/(nu + 1)
    return math.log(11.0 / 10.0) ** 2 / (a * (nu_star + 1) ** 2)


def tau_is_admissible(a: float, tau: float, nu_star: int) -> bool:
    s = math.sqrt(a * tau)
    return (tau > 0 and tau < 1.0 / a and (1.0 + s) ** nu_star < 1.1
            and (1.0 - s) ** nu_star > 0.9)


@dataclass
class BRState:
    """Automaton state of one BR path, in the caller's (unmirrored) coordinates.

    ``direction`` is +1 when the Epoch-0 / N1 control pushes away from zero
    (u = +K q) and -1 otherwise. ``m`` counts Control-II passages so far.
    """

    phase: Phase
    nu: int = 0
    t_entry: float = 0.0
    q_entry: float = 0.0
    direction: int = 0
    m: int = 0
    deadline: float = math.inf


@dataclass(frozen=True)
class BR:
    params: BRParams
    kind: str = field(default="br", init=False)

    @property
    def id(self) -> str:
        return "br"

    @property
    def mirrored(self) -> bool:
        return self.params.q0 < 0

    @property
    def testing_duration(self):
        return self.params.tau if self.params.regime == LARGE_A else None

    def controller(self, dyn, n: int):
        p = self.params
        if dyn.a != p.a or dyn.T != p.T or dyn.q0 != p.q0:
            raise DomainError(f"BR blueprint built for (a={p.a}, T={p.T}, q0={p.q0}) "
                              f"used on (a={dyn.a}, T={dyn.T}, q0={dyn.q0})")
        return BRController(p, n)

    def initial_state(self) -> BRState:
        return BRController(self.params, 1).export(0)

    def to_json(self) -> dict:
        p = self.params
        return {"kind": "br", "A": p.A, "K": p.K, "tau": p.tau, "nu_star": p.nu_star,
                "a": p.a, "T": p.T, "q0": p.q0}


def make_br(a: float, T: float, q0: float, A: float | None = None, K: float = 1000.0,
            tau: float | None = None) -> BR:
    _require_finite(a=a, T=T, q0=q0, K=K)
    if T <= 0:
        raise DomainError(f"T must be > 0, got {T}")
    if abs(q0) < 1.0:
        raise HypothesisError(f"BR needs |q0| >= 1, got q0={q0}")
    if A is None:
        A = default_A(T)
    _require_finite(A=A)
    if not (A >= 2.0 and A > 1.0 / (5.0 * T)):
        raise DomainError(f"A must satisfy A >= 2 and A > 1/(5T), got A={A}")
    if K < 1000.0:
        raise DomainError(f"K must be >= 1000, got {K}")
    regime = regime_of(a, A)
    nu_star = 0
    if regime == LARGE_A:
        nu_star = int(math.floor(a * T))
        if tau is None:
            tau = default_tau(a, nu_star)
        _require_finite(tau=tau)
        if not tau_is_admissible(a, tau, nu_star):
            raise DomainError(f"tau={tau} violates the distortion bounds for a={a}, nu*={nu_star}")
    else:
        tau = None
    return BR(BRParams(float(A), float(K), None if tau is None else float(tau), nu_star,
                       float(a), float(T), float(q0)))


class BRController:
    """Vectorized BR automaton over n paths.

    State is kept in canonical coordinates q_c = sign(q0)*q, in which q0 > 0.
    Feedback gains are invariant under the mirror; the constant Testing control
    flips sign with it.
    """

    def __init__(self, params: BRParams, n: int):
        p = params
        self.p = p
        self.n = n
        self.regime = p.regime
        self.sign = -1.0 if p.q0 < 0 else 1.0
        self.q0c = abs(p.q0)
        self.T = p.T
        self.phase = np.zeros(n, dtype=np.int8)
        self.nu = np.zeros(n, dtype=np.int64)
        self.t_entry = np.zeros(n)
        self.q_entry = np.full(n, self.q0c)
        self.direction = np.zeros(n, dtype=np.int8)
        self.m = np.zeros(n, dtype=np.int64)
        self.deadline = np.full(n, p.T)
        # per-path law, refreshed only at transitions
        self.offset_c = np.zeros(n)
        self.gain = np.zeros(n)
        self.fine = np.zeros(n, dtype=bool)
        self.watch = np.zeros(n, dtype=np.int8)
        self.reach = np.full(n, np.inf)
        if self.regime == LARGE_A:
            self.sqrt_at = math.sqrt(p.a * p.tau)
            start = Phase.EP0_TEST
        elif self.regime == BOUNDED_A:
            start = Phase.B0
        else:
            start = Phase.N0
        all_idx = np.arange(n)
        self._enter(all_idx, start, np.zeros(n), np.full(n, self.q0c))

    # -- law ---------------------------------------------------------------

    def _enter(self, idx, phase, t, qc, direction=None):
        """Move paths ``idx`` into ``phase`` at times ``t`` and positions ``qc``."""
        if idx.size == 0:
            return
        p = self.p
        self.phase[idx] = phase
        self.t_entry[idx] = t
        self.q_entry[idx] = qc
        if direction is not None:
            self.direction[idx] = direction
        self.offset_c[idx] = 0.0
        self.fine[idx] = False
        self.reach[idx] = np.inf
        self.deadline[idx] = p.T
        K = p.K
        if phase == Phase.EP0_TEST or phase == Phase.N0:
            self.gain[idx] = 1.0
            self.watch[idx] = WATCH_UP | WATCH_DOWN
            self.deadline[idx] = min(p.ep0_deadline, p.T)
        elif phase == Phase.EP0_CONTROL or phase == Phase.N1_CONTROL:
            self.gain[idx] = -K * self.direction[idx]
            self.watch[idx] = WATCH_UP
        elif phase == Phase.EPNU_TEST:
            scale = np.exp(self.nu[idx].astype(float))
            self.gain[idx] = 0.0
            self.offset_c[idx] = scale * qc / self.sqrt_at
            self.fine[idx] = True
            self.watch[idx] = 0
            self.reach[idx] = np.abs(qc) * self.sqrt_at
            self.deadline[idx] = np.minimum(p.T, t + p.tau)
        elif phase == Phase.CONTROL_II:
            self.gain[idx] = -K * np.exp(self.nu[idx].astype(float))
            self.watch[idx] = WATCH_UP
        elif phase == Phase.CONTROL_III:
            self.gain[idx] = K * np.exp(self.nu[idx].astype(float))
            self.watch[idx] = WATCH_UP
        elif phase == Phase.B0:
            self.gain[idx] = 1.0
            self.watch[idx] = WATCH_UP
        elif phase == Phase.B1:
            self.gain[idx] = -1.0
            self.watch[idx] = WATCH_UP
        else:  # APATHY, B2, N1_APATHY, N2
            self.gain[idx] = 0.0
            self.watch[idx] = 0

    def _enter_epoch(self, idx, nu_next, t, qc):
        """Epoch nu_next Testing, or Apathy past nu*."""
        if idx.size == 0:
            return
        over = nu_next > self.p.nu_star
        self._enter(idx[over], Phase.APATHY, t[over], qc[over])
        go = idx[~over]
        self.nu[go] = nu_next[~over]
        self._enter(go, Phase.EPNU_TEST, t[~over], qc[~over])

    def decide(self, t, q):
        offset = self.sign * self.offset_c
        u = offset - self.gain * q
        return ControlDecision(u, offset, self.gain, self.deadline, self.fine, self.watch,
                               self.reach)

    # -- transitions -------------------------------------------------------

    def advance(self, t, q, mask):
        """Apply at most one transition per path selected by ``mask``; return which moved."""
        changed = np.zeros(self.n, dtype=bool)
        if not mask.any():
            return changed
        qc = self.sign * q
        aq = np.abs(qc)
        ph = self.phase
        qe = self.q_entry
        timed_out = t >= self.deadline

        def pick(cond):
            sel = np.flatnonzero(cond & mask & ~changed)
            changed[sel] = True
            return sel

        if self.regime == LARGE_A:
            in_test0 = ph == Phase.EP0_TEST
            sel = pick(in_test0 & timed_out)
            self._enter_epoch(sel, np.ones(sel.size, dtype=np.int64), t[sel], qc[sel])
            sel = pick(in_test0 & (qc >= 2.0 * self.q0c))
            self._enter(sel, Phase.EP0_CONTROL, t[sel], qc[sel], 1)
            sel = pick(in_test0 & (qc <= 0.5 * self.q0c))
            self._enter(sel, Phase.EP0_CONTROL, t[sel], qc[sel], -1)

            sel = pick((ph == Phase.EP0_CONTROL) & (aq >= 2.0 * np.abs(qe)))
            self._enter_epoch(sel, np.ones(sel.size, dtype=np.int64), t[sel], qc[sel])

            in_test = ph == Phase.EPNU_TEST
            sel = pick(in_test & timed_out)
            self._enter_epoch(sel, self.nu[sel] + 1, t[sel], qc[sel])
            sel = pick(in_test & (np.abs(qc - qe) > np.abs(qe) * self.sqrt_at))
            self.m[sel] += 1
            self._enter(sel, Phase.CONTROL_II, t[sel], qc[sel])

            sel = pick((ph == Phase.CONTROL_II) & (aq >= 2.0 * np.abs(qe)))
            self._enter(sel, Phase.CONTROL_III, t[sel], qc[sel])
            sel = pick((ph == Phase.CONTROL_III) & (aq >= 2.0 * np.abs(qe)))
            self._enter_epoch(sel, self.nu[sel] + 1, t[sel], qc[sel])
        elif self.regime == BOUNDED_A:
            sel = pick((ph == Phase.B0) & (aq >= 2.0 * self.q0c))
            self._enter(sel, Phase.B1, t[sel], qc[sel])
            sel = pick((ph == Phase.B1) & (aq >= 4.0 * self.q0c))
            self._enter(sel, Phase.B2, t[sel], qc[sel])
        else:
            in_n0 = ph == Phase.N0
            sel = pick(in_n0 & timed_out)
            self._enter(sel, Phase.N1_APATHY, t[sel], qc[sel])
            sel = pick(in_n0 & (qc >= 2.0 * self.q0c))
            self._enter(sel, Phase.N1_CONTROL, t[sel], qc[sel], 1)
            sel = pick(in_n0 & (qc <= 0.5 * self.q0c))
            self._enter(sel, Phase.N1_CONTROL, t[sel], qc[sel], -1)
            sel = pick((ph == Phase.N1_CONTROL) & (aq >= 4.0 * self.q0c))
            self._enter(sel, Phase.N2, t[sel], qc[sel])
        return changed

    # -- inspection --------------------------------------------------------

    def tag(self, i: int) -> str:
        ph = Phase(int(self.phase[i]))
        nu = int(self.nu[i])
        d = "+" if self.direction[i] > 0 else "-"
        return {
            Phase.EP0_TEST: "ep0.test",
            Phase.EP0_CONTROL: f"ep0.control{d}",
            Phase.EPNU_TEST: f"ep{nu}.test",
            Phase.CONTROL_II: f"ep{nu}.control2",
            Phase.CONTROL_III: f"ep{nu}.control3",
            Phase.APATHY: "apathy",
            Phase.B0: "b0",
            Phase.B1: "b1",
            Phase.B2: "b2",
            Phase.N0: "n0",
            Phase.N1_CONTROL: f"n1.control{d}",
            Phase.N1_APATHY: "n1.apathy",
            Phase.N2: "n2",
        }[ph]

    def event(self, i: int, t: float, q: float):
        from .sde_engine import Event
        return Event(t, self.tag(i), q, int(self.m[i]))

    def export(self, i: int) -> BRState:
        return BRState(Phase(int(self.phase[i])), int(self.nu[i]), float(self.t_entry[i]),
                       float(self.sign * self.q_entry[i]), int(self.direction[i]),
                       int(self.m[i]), float(self.deadline[i]))

    def load(self, i: int, state: BRState):
        phase = Phase(state.phase)
        if phase not in _REGIME_PHASES[self.regime]:
            raise StrategyError(f"state {phase.name} is not a {self.regime} state")
        if phase in (Phase.EPNU_TEST, Phase.CONTROL_II, Phase.CONTROL_III):
            if not 1 <= state.nu <= self.p.nu_star:
                raise StrategyError(f"nu={state.nu} outside [1, {self.p.nu_star}]")
        if phase in (Phase.EP0_CONTROL, Phase.N1_CONTROL) and state.direction not in (1, -1):
            raise StrategyError(f"{phase.name} needs direction +-1, got {state.direction}")
        idx = np.array([i])
        self.nu[i] = state.nu
        self.m[i] = state.m
        self._enter(idx, phase, np.array([state.t_entry]),
                    np.array([self.sign * state.q_entry]),
                    state.direction if state.direction else None)
        if phase not in (Phase.EPNU_TEST, Phase.EP0_TEST, Phase.N0):
            self.deadline[i] = self.T
        elif math.isfinite(state.deadline):
            self.deadline[i] = state.deadline

    def dump(self, i: int) -> dict:
        s = self.export(i)
        return {"phase": s.phase.name, "nu": s.nu, "t_entry": s.t_entry, "q_entry": s.q_entry,
                "direction": s.direction, "m": s.m, "deadline": s.deadline}


def _scalar_controller(params: BRParams, state: BRState) -> BRController:
    ctrl = BRController(params, 1)
    ctrl.load(0, state)
    return ctrl


def br_control(params: BRParams, state: BRState, t: float, q: float) -> ControlDecision:
    """Control law of ``state`` at (t, q); fields are scalars."""
    if t > params.T:
        raise StrategyError(f"t={t} beyond horizon {params.T}")
    ctrl = _scalar_controller(params, state)
    d = ctrl.decide(np.array([float(t)]), np.array([float(q)]))
    return ControlDecision(float(d.u[0]), float(d.offset[0]), float(d.gain[0]),
                           float(d.next_deadline[0]), bool(d.fine[0]), int(d.watch[0]),
                           float(d.reach[0]))


def state_tag(params: BRParams, state: BRState) -> str:
    """Event tag of ``state``, as recorded in trajectory logs."""
    return _scalar_controller(params, state).tag(0)


def br_transition(params: BRParams, state: BRState, t: float, q: float) -> BRState:
    """Successor of ``state`` after observing q at grid time t (the state itself if nothing fires)."""
    ctrl = _scalar_controller(params, state)
    changed = ctrl.advance(np.array([float(t)]), np.array([float(q)]), np.array([True]))
    return ctrl.export(0) if changed[0] else replace(state)


# ---------------------------------------------------------------------------
# templates and serialization

@dataclass(frozen=True)
class StrategySpec:
    """Strategy template resolved per (a, b, T, q0) cell.

    ``opt`` with ``beta=None`` is the oracle sigma_opt(b) built from the true b.
    ``br`` overrides (A, K, tau) are optional.
    """

    kind: str
    alpha: float | None = None
    beta: float | None = None
    A: float | None = None
    K: float | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in ("cg", "opt", "br"):
            raise DomainError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "cg":
            _require_finite(alpha=self.alpha)

    @property
    def id(self) -> str:
        if self.kind == "cg":
            return f"cg({_fmt_num(self.alpha)})"
        if self.kind == "opt":
            return "opt(b)" if self.beta is None else f"opt({_fmt_num(self.beta)})"
        return "br"

    def build(self, a: float, b: float, T: float, q0: float):
        if self.kind == "cg":
            return make_constant_gain(self.alpha)
        if self.kind == "opt":
            return make_optimal_known(b if self.beta is None else self.beta, a, T)
        return make_br(a, T, q0, A=self.A, K=1000.0 if self.K is None else self.K, tau=self.tau)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        for name in ("alpha", "beta", "A", "K", "tau"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


def blueprint_from_json(doc: dict):
    kind = doc.get("kind")
    if kind == "cg":
        return make_constant_gain(doc["alpha"])
    if kind == "opt":
        return make_optimal_known(doc["beta"], doc["a"], doc["T"])
    if kind == "br":
        bp = make_br(doc["a"], doc["T"], doc["q0"], A=doc.get("A"), K=doc.get("K", 1000.0),
                     tau=doc.get("tau"))
        if "nu_star" in doc and doc["nu_star"] != bp.params.nu_star:
            raise DomainError(f"nu_star={doc['nu_star']} inconsistent with a*T")
        return bp
    raise DomainError(f"unknown strategy kind {kind!r}")
