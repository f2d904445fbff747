"""Monte Carlo replication, cutoff calibration and operating characteristics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .inference import HyperPrior
from .numerics import DomainError
from .priors import PriorSpec, preset
from .trial import TrialDesign, TrialFailure, TrialOutcome, run_trial

__all__ = [
    "Scenario",
    "SCENARIOS",
    "ReplicateFailure",
    "SimulationBatch",
    "FailureBudgetExceeded",
    "OperatingCharacteristics",
    "StudyResult",
    "replicate_rng",
    "derive_seed",
    "simulate_batch",
    "find_cutoff",
    "operating_chars",
    "standard_design",
    "standard_study",
    "study_csv",
    "study_json",
]

log = logging.getLogger(__name__)

FAILURE_BUDGET = 0.05
CSV_COLUMNS = ("prior", "scenario", "arm", "rejection_prob", "mc_se", "label", "ess", "nsim", "seed")
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Scenario:
    name: str
    p_true: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.p_true)
        if not p:
            raise DomainError("a scenario needs at least one arm")
        for v in p:
            if not 0.0 < v < 1.0:
                raise DomainError(f"true rates must lie in (0, 1), got {v}")
        object.__setattr__(self, "p_true", p)

    @property
    def J(self) -> int:
        return len(self.p_true)

    def is_null(self, q0: float) -> bool:
        return all(p <= q0 for p in self.p_true)


_N0, _A1 = 0.20, 0.35
SCENARIOS = {
    "scenario1": Scenario("scenario1", (_N0, _N0, _N0, _N0)),
    "scenario2": Scenario("scenario2", (_N0, _N0, _N0, _A1)),
    "scenario3": Scenario("scenario3", (_A1, _N0, _N0, _A1)),
    "scenario4": Scenario("scenario4", (_A1, _A1, _N0, _A1)),
    "scenario5": Scenario("scenario5", (_A1, _A1, _A1, _A1)),
}


# ---------------------------------------------------------------------------
# seeding


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    """Generator for replicate ``index``, a pure function of (master_seed, index)."""
    ss = np.random.SeedSequence([int(master_seed) & _SEED_MASK, int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed: int, *tags: int) -> int:
    """A 64-bit seed for a sub-study, derived from the master seed and integer tags."""
    ss = np.random.SeedSequence([int(master_seed) & _SEED_MASK, *map(int, tags)])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class ReplicateFailure:
    index: int
    analysis: str
    message: str


class FailureBudgetExceeded(RuntimeError):
    def __init__(self, failures: int, nsim: int, first: Optional[ReplicateFailure] = None):
        self.failures = failures
        self.nsim = nsim
        msg = f"{failures} of {nsim} replicates failed (budget {FAILURE_BUDGET:.0%})"
        if first is not None:
            msg += f"; first failure at replicate {first.index}: {first.message}"
        super().__init__(msg)


@dataclass
class SimulationBatch:
    """Outcomes of ``nsim`` replicates in index order; failed replicates are listed separately."""

    design: TrialDesign
    scenario: Scenario
    nsim: int
    master_seed: int
    outcomes: list
    indices: list
    failures: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.outcomes)

    def __iter__(self):
        return iter(self.outcomes)

    def tail_probs(self) -> np.ndarray:
        """Final Pr(p_j > q0 | y), one row per successful replicate."""
        if not self.outcomes:
            return np.empty((0, self.design.J))
        return np.array([o.final_tail_probs for o in self.outcomes])


def _one(design, p_true, master_seed, i):
    try:
        return run_trial(design, p_true, replicate_rng(master_seed, i))
    except TrialFailure as exc:
        return ReplicateFailure(i, str(exc.analysis), str(exc.cause))


def simulate_batch(
    design: TrialDesign,
    scenario: Scenario,
    nsim: int,
    master_seed: int,
    *,
    threads: int = 1,
    max_failure_rate: float = FAILURE_BUDGET,
    first_index: int = 0,
) -> SimulationBatch:
    """Run ``nsim`` independent trials.

    Replicate i draws from ``replicate_rng(master_seed, i)``, so the result
    does not depend on ``threads`` or on execution order.  ``first_index``
    offsets the replicate indices, which lets a long run be split into
    chunks.  Raises FailureBudgetExceeded when more than
    ``max_failure_rate`` of the replicates fail.
    """
    nsim = int(nsim)
    if nsim < 1:
        raise DomainError("nsim must be at least 1")
    if scenario.J != design.J:
        raise DomainError(f"scenario {scenario.name} has {scenario.J} arms, design has {design.J}")
    p_true = scenario.p_true
    idx = range(int(first_index), int(first_index) + nsim)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(lambda i: _one(design, p_true, master_seed, i), idx))
    else:
        results = [_one(design, p_true, master_seed, i) for i in idx]

    outcomes, indices, failures = [], [], []
    for i, r in zip(idx, results):
        if isinstance(r, ReplicateFailure):
            failures.append(r)
        else:
            outcomes.append(r)
            indices.append(i)
    if len(failures) > max_failure_rate * nsim:
        raise FailureBudgetExceeded(len(failures), nsim, failures[0])
    if failures:
        log.warning("%s: %d of %d replicates failed", scenario.name, len(failures), nsim)
    return SimulationBatch(design, scenario, nsim, int(master_seed), outcomes, indices, failures)


# ---------------------------------------------------------------------------
# calibration and operating characteristics


def find_cutoff(null_tail_probs, alpha: float) -> float:
    """Cutoff zeta giving a pooled type-I error of about ``alpha``.

    zeta is the smallest pooled tail probability x with F(x) >= 1 - alpha,
    F being the empirical distribution over every (replicate, arm) pair,
    rounded to three decimals.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    x = np.sort(np.asarray(null_tail_probs, dtype=float).ravel())
    if x.size == 0:
        raise DomainError("no tail probabilities to calibrate on")
    if not np.all(np.isfinite(x)):
        raise DomainError("tail probabilities must be finite")
    rank = math.ceil(round(x.size * (1.0 - alpha), 9))
    q = float(x[max(rank, 1) - 1])
    return round(q, 3)


@dataclass(frozen=True)
class OperatingCharacteristics:
    scenario: str
    zeta: float
    rejection_prob: tuple
    mc_se: tuple
    labels: tuple
    ess: float
    n_replicates: int
    failures: int = 0


def operating_chars(
    outcomes: Union[SimulationBatch, Sequence[TrialOutcome]],
    design: TrialDesign,
    scenario: Scenario,
    zeta: Optional[float] = None,
) -> OperatingCharacteristics:
    """Per-arm rejection probabilities, their Monte Carlo errors and the ESS.

    ``zeta`` defaults to the design's cutoff.  Arms with a true rate at or
    below q0 are labelled ``typeI``, the others ``power``.
    """
    failures = len(outcomes.failures) if isinstance(outcomes, SimulationBatch) else 0
    outs = list(outcomes)
    if not outs:
        raise DomainError("no outcomes to summarise")
    if zeta is None:
        zeta = design.zeta
    if zeta is None:
        raise DomainError("a cutoff zeta is required")
    if not 0.0 < zeta <= 1.0:
        raise DomainError(f"zeta must lie in (0, 1], got {zeta}")
    P = np.array([o.final_tail_probs for o in outs])
    m = P.shape[0]
    r = (P > zeta).mean(axis=0)
    se = np.sqrt(r * (1.0 - r) / m)
    ess = float(np.mean([o.total_enrolled for o in outs]))
    labels = tuple("typeI" if p <= design.q0 else "power" for p in scenario.p_true)
    return OperatingCharacteristics(
        scenario=scenario.name,
        zeta=float(zeta),
        rejection_prob=tuple(float(v) for v in r),
        mc_se=tuple(float(v) for v in se),
        labels=labels,
        ess=ess,
        n_replicates=m,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# the full calibrate-then-evaluate pipeline


def standard_design(prior: PriorSpec, N: int = 37, **overrides) -> TrialDesign:
    """Four arms, q0 = 0.20, q1 = 0.35, omega = 0.4, k = 0.5, thresholds 0.05 / 0.90."""
    kw = dict(J=4, N=N, q0=0.20, q1=0.35, omega=0.4, k=0.5, hp=HyperPrior(prior))
    kw.update(overrides)
    return TrialDesign(**kw)


@dataclass
class PriorStudy:
    prior: str
    zeta: Optional[float]
    calibration_seed: int
    calibration_failures: int = 0
    ocs: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    excluded: Optional[str] = None


@dataclass
class StudyResult:
    N: int
    nsim: int
    master_seed: int
    alpha: float
    priors: list

    def cell(self, prior: str, scenario: str) -> OperatingCharacteristics:
        for p in self.priors:
            if p.prior == prior:
                for oc in p.ocs:
                    if oc.scenario == scenario:
                        return oc
        raise KeyError((prior, scenario))

    def cutoff(self, prior: str) -> Optional[float]:
        for p in self.priors:
            if p.prior == prior:
                return p.zeta
        raise KeyError(prior)


def _named_priors(priors) -> list:
    if isinstance(priors, Mapping):
        items = list(priors.items())
    else:
        items = [(p, preset(p)) if isinstance(p, str) else (p.describe(), p) for p in priors]
    if not items:
        raise DomainError("need at least one prior")
    return items


def standard_study(
    priors: Union[Iterable, Mapping[str, PriorSpec]],
    N: int,
    nsim: int,
    master_seed: int,
    *,
    alpha: float = 0.1,
    scenarios: Optional[Sequence[Scenario]] = None,
    threads: int = 1,
    design_overrides: Optional[dict] = None,
) -> StudyResult:
    """Calibrate zeta on the all-null scenario, then evaluate every scenario.

    Calibration and each evaluated scenario get their own seed derived from
    ``master_seed``.  The seeds are shared across priors, so priors are
    compared on common random numbers.  A prior whose calibration or
    evaluation fails is kept in the result with ``excluded`` set.
    """
    scenarios = list(SCENARIOS.values()) if scenarios is None else list(scenarios)
    null = scenarios[0]
    overrides = dict(design_overrides or {})
    cal_seed = derive_seed(master_seed, 0)
    eval_seeds = {s.name: derive_seed(master_seed, i + 1) for i, s in enumerate(scenarios)}
    out = []
    for name, prior in _named_priors(priors):
        design = standard_design(prior, N, **overrides)
        if not null.is_null(design.q0):
            raise DomainError(f"calibration scenario {null.name} is not all-null")
        study = PriorStudy(name, None, cal_seed, seeds=dict(eval_seeds))
        try:
            batch = simulate_batch(design, null, nsim, cal_seed, threads=threads)
            study.calibration_failures = len(batch.failures)
            study.zeta = find_cutoff(batch.tail_probs(), alpha)
            design = design.with_zeta(study.zeta)
            log.info("%s: zeta = %.3f", name, study.zeta)
            for sc in scenarios:
                b = simulate_batch(design, sc, nsim, eval_seeds[sc.name], threads=threads)
                study.ocs.append(operating_chars(b, design, sc))
        except (FailureBudgetExceeded, ArithmeticError, DomainError) as exc:
            study.excluded = f"{type(exc).__name__}: {exc}"
            study.ocs = []
            log.warning("%s excluded: %s", name, study.excluded)
        out.append(study)
    return StudyResult(int(N), int(nsim), int(master_seed), float(alpha), out)


# ---------------------------------------------------------------------------
# reports


def ocs_rows(prior: str, oc: OperatingCharacteristics, nsim: int, seed: int) -> list:
    rows = []
    for j, (r, se, lab) in enumerate(zip(oc.rejection_prob, oc.mc_se, oc.labels)):
        rows.append({
            "prior": prior,
            "scenario": oc.scenario,
            "arm": j + 1,
            "rejection_prob": f"{r:.3f}",
            "mc_se": f"{se:.3f}",
            "label": lab,
            "ess": f"{oc.ess:.1f}",
            "nsim": nsim,
            "seed": seed,
        })
    return rows


def write_rows(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def study_csv(result: StudyResult) -> str:
    rows = []
    for p in result.priors:
        for oc in p.ocs:
            rows.extend(ocs_rows(p.prior, oc, result.nsim, p.seeds[oc.scenario]))
    buf = io.StringIO()
    write_rows(rows, buf)
    return buf.getvalue()


def study_json(result: StudyResult, config: Optional[dict] = None) -> str:
    doc = {
        "config": config,
        "N": result.N,
        "nsim": result.nsim,
        "master_seed": result.master_seed,
        "alpha": result.alpha,
        "priors": [],
    }
    for p in result.priors:
        entry = {
            "prior": p.prior,
            "zeta": p.zeta,
            "calibration_seed": p.calibration_seed,
            "calibration_failures": p.calibration_failures,
            "excluded": p.excluded,
            "scenarios": [],
        }
        for oc in p.ocs:
            d = asdict(oc)
            d["rejection_prob"] = [round(v, 3) for v in oc.rejection_prob]
            d["mc_se"] = [round(v, 3) for v in oc.mc_se]
            d["ess"] = round(oc.ess, 1)
            d["seed"] = p.seeds[oc.scenario]
            entry["scenarios"].append(d)
        doc["priors"].append(entry)
    return json.dumps(doc, indent=2)
