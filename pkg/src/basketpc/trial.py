"""Sequential basket trial with interim futility and efficacy stopping.

Every arm enrolls up to its first-interim target, then the trial alternates
between an interim analysis and a batch of new patients spread over the
arms that are still open.  Arms close for futility, for efficacy, or when
they reach their maximum size.  The final analysis uses all accrued data
and applies the cutoff to every arm.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .inference import HyperPrior, InferenceError, ModelData, fit
from .numerics import DomainError

__all__ = [
    "ArmStatus",
    "TrialDesign",
    "TrialState",
    "TrialOutcome",
    "TrialFailure",
    "first_interim_target",
    "allocate",
    "enroll",
    "interim_analysis",
    "final_analysis",
    "run_trial",
    "tail_probs",
]


class ArmStatus(str, enum.Enum):
    OPEN = "open"
    FUTILITY = "closed_futility"
    EFFICACY = "closed_efficacy"
    MAX_N = "closed_max_n"


class TrialFailure(InferenceError):
    """A replicate aborted because one of its posterior fits failed.

    ``analysis`` is the 1-based interim index, or ``"final"``.
    """

    def __init__(self, analysis, cause):
        self.analysis = analysis
        self.cause = cause
        super().__init__(f"analysis {analysis}: {cause}")


def _ceil(x: float) -> int:
    # products like 0.4 * 20 land a few ulps above the integer
    return math.ceil(round(x, 9))


@dataclass(frozen=True)
class TrialDesign:
    """Design constants of the sequential trial.

    ``N`` may be a single maximum size shared by all arms.  ``zeta`` may be
    left as None while the cutoff is still being calibrated; outcomes then
    carry tail probabilities but no decisions.
    """

    J: int
    N: tuple
    q0: float
    q1: float
    omega: float
    k: float
    hp: HyperPrior
    zeta: Optional[float] = None
    fut_thresh: float = 0.05
    eff_thresh: float = 0.90

    def __post_init__(self):
        J = int(self.J)
        if J < 1:
            raise DomainError("J must be at least 1")
        N = self.N
        N = (int(N),) * J if np.isscalar(N) else tuple(int(v) for v in N)
        if len(N) != J:
            raise DomainError(f"N must have {J} entries, got {len(N)}")
        if any(v < 1 for v in N):
            raise DomainError("maximum sizes must be positive")
        if not 0.0 < self.q0 < self.q1 < 1.0:
            raise DomainError(f"need 0 < q0 < q1 < 1, got q0={self.q0}, q1={self.q1}")
        for name in ("omega", "k", "fut_thresh", "eff_thresh"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DomainError(f"{name} must lie in (0, 1), got {v}")
        if self.fut_thresh >= self.eff_thresh:
            raise DomainError("futility threshold must be below the efficacy threshold")
        if self.zeta is not None and not 0.0 < self.zeta <= 1.0:
            raise DomainError(f"zeta must lie in (0, 1], got {self.zeta}")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "N", N)

    @property
    def q_bar(self) -> float:
        return 0.5 * (self.q0 + self.q1)

    def with_zeta(self, zeta: Optional[float]) -> "TrialDesign":
        return replace(self, zeta=zeta)


@dataclass(frozen=True)
class TrialState:
    enrolled: tuple
    responders: tuple
    status: tuple
    analyses_done: int = 0
    n1_total: Optional[int] = None

    @classmethod
    def empty(cls, J: int) -> "TrialState":
        return cls((0,) * J, (0,) * J, (ArmStatus.OPEN,) * J)

    @property
    def open_arms(self) -> list:
        return [j for j, s in enumerate(self.status) if s is ArmStatus.OPEN]

    def data(self) -> ModelData:
        return ModelData(self.responders, self.enrolled)


@dataclass(frozen=True)
class TrialOutcome:
    effective: Optional[tuple]
    total_enrolled: int
    per_arm_enrolled: tuple
    per_arm_responders: tuple
    stop_reasons: tuple
    final_tail_probs: tuple
    n_analyses: int

    def decisions(self, zeta: float) -> tuple:
        """The final rule re-applied with another cutoff."""
        return tuple(p > zeta for p in self.final_tail_probs)


def first_interim_target(design: TrialDesign) -> tuple:
    """Per-arm enrollment before the first interim look, ceil(omega * N_j)."""
    return tuple(_ceil(design.omega * n) for n in design.N)


# ---------------------------------------------------------------------------
# posterior tail probabilities with a permutation-canonical cache


@functools.lru_cache(maxsize=200_000)
def _tail_sorted(hp: HyperPrior, y: tuple, n: tuple, t: float) -> tuple:
    res = fit(ModelData(y, n), hp, (t,))
    return tuple(float(p) for p in res.probs[:, 0])


def tail_probs(hp: HyperPrior, y: Sequence[int], n: Sequence[int], t: float) -> np.ndarray:
    """Pr(p_j > t | y) for every arm.

    The model is exchangeable in the arms, so the data are sorted before
    fitting and the result is permuted back.  Identical datasets seen in
    any arm order share one cached fit and give bit-identical answers.
    """
    pairs = sorted((int(b), int(a), j) for j, (a, b) in enumerate(zip(y, n)))
    ys = tuple(p[1] for p in pairs)
    ns = tuple(p[0] for p in pairs)
    probs = _tail_sorted(hp, ys, ns, float(t))
    out = np.empty(len(pairs))
    for (_, _, j), p in zip(pairs, probs):
        out[j] = p
    return out


# ---------------------------------------------------------------------------
# state transitions


def allocate(state: TrialState, design: TrialDesign, batch_total: int) -> tuple:
    """Split ``batch_total`` new patients over the open arms.

    Equal shares with the remainder going one each to the lowest-indexed
    arms, every arm capped by its headroom.  Patients an arm cannot absorb
    are offered again to the open arms that still have room; whatever no
    arm can take is dropped.
    """
    if batch_total < 0:
        raise DomainError("batch_total must be non-negative")
    alloc = [0] * design.J
    room = {
        j: design.N[j] - state.enrolled[j]
        for j in state.open_arms
        if design.N[j] > state.enrolled[j]
    }
    left = int(batch_total)
    while left > 0 and room:
        arms = sorted(room)
        share, extra = divmod(left, len(arms))
        given = 0
        for i, j in enumerate(arms):
            take = min(share + (1 if i < extra else 0), room[j])
            alloc[j] += take
            room[j] -= take
            given += take
        left -= given
        room = {j: r for j, r in room.items() if r > 0}
        if given == 0:
            break
    return tuple(alloc)


def _add_patients(state, alloc, rng, p_true):
    enrolled = list(state.enrolled)
    responders = list(state.responders)
    for j, m in enumerate(alloc):
        if m > 0:
            responders[j] += int(rng.binomial(m, p_true[j]))
            enrolled[j] += m
    return replace(state, enrolled=tuple(enrolled), responders=tuple(responders))


def _close_full(state, design):
    status = tuple(
        ArmStatus.MAX_N if s is ArmStatus.OPEN and e >= n else s
        for s, e, n in zip(state.status, state.enrolled, design.N)
    )
    return replace(state, status=status)


def enroll(
    state: TrialState,
    design: TrialDesign,
    batch_total: int,
    rng: np.random.Generator,
    p_true: Sequence[float],
) -> TrialState:
    """Enroll a batch over the open arms; each patient responds with probability p_true[j]."""
    alloc = allocate(state, design, batch_total)
    return _add_patients(state, alloc, rng, p_true)


def interim_analysis(state: TrialState, design: TrialDesign) -> TrialState:
    """Close open arms whose tail probability at q_bar crosses a threshold.

    The fit uses every arm's data, closed arms included.
    """
    if not state.open_arms:
        raise DomainError("interim analysis needs at least one open arm")
    index = state.analyses_done + 1
    try:
        probs = tail_probs(design.hp, state.responders, state.enrolled, design.q_bar)
    except (InferenceError, ArithmeticError, ValueError) as exc:
        raise TrialFailure(index, exc) from exc
    status = list(state.status)
    for j in state.open_arms:
        if probs[j] < design.fut_thresh:
            status[j] = ArmStatus.FUTILITY
        elif probs[j] > design.eff_thresh:
            status[j] = ArmStatus.EFFICACY
    return replace(state, status=tuple(status), analyses_done=index)


def final_analysis(state: TrialState, design: TrialDesign) -> TrialOutcome:
    try:
        probs = tail_probs(design.hp, state.responders, state.enrolled, design.q0)
    except (InferenceError, ArithmeticError, ValueError) as exc:
        raise TrialFailure("final", exc) from exc
    probs = tuple(float(p) for p in probs)
    effective = None if design.zeta is None else tuple(p > design.zeta for p in probs)
    return TrialOutcome(
        effective=effective,
        total_enrolled=int(sum(state.enrolled)),
        per_arm_enrolled=state.enrolled,
        per_arm_responders=state.responders,
        stop_reasons=tuple(s.value for s in state.status),
        final_tail_probs=probs,
        n_analyses=state.analyses_done,
    )


def run_trial(design: TrialDesign, p_true: Sequence[float], rng) -> TrialOutcome:
    """Simulate one trial.

    ``rng`` is a numpy Generator or anything ``np.random.default_rng``
    accepts.  Raises TrialFailure if a posterior fit breaks down.
    """
    p_true = tuple(float(p) for p in p_true)
    if len(p_true) != design.J:
        raise DomainError(f"scenario has {len(p_true)} rates for {design.J} arms")
    if not all(0.0 <= p <= 1.0 for p in p_true):
        raise DomainError("true rates must lie in [0, 1]")
    rng = np.random.default_rng(rng)

    state = _add_patients(TrialState.empty(design.J), first_interim_target(design), rng, p_true)
    n1 = sum(state.enrolled)
    state = _close_full(replace(state, n1_total=n1), design)
    step = _ceil(design.k * n1)
    while state.open_arms:
        state = interim_analysis(state, design)
        if not state.open_arms:
            break
        state = _close_full(enroll(state, design, step, rng, p_true), design)
    return final_analysis(state, design)
