"""Command-line front end: simulate, calibrate, ocs, scale-prior, standard-study.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import yaml

from .inference import HyperPrior
from .numerics import DomainError
from .priors import DerivationError, epc_from_halft, implied_or_density, implied_or_mass, lambda_from_sd, prior_from_config
from .simulation import (
    SCENARIOS,
    FailureBudgetExceeded,
    OperatingCharacteristics,
    Scenario,
    find_cutoff,
    ocs_rows,
    operating_chars,
    simulate_batch,
    standard_study,
    study_csv,
    study_json,
    write_rows,
)
from .trial import TrialDesign, TrialOutcome

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
ARCHIVE_CHUNK = 50

log = logging.getLogger("basketpc")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the field."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StudyConfig:
    p_true: object = None
    nsim: int = 1000
    arms: int = 4
    N: object = 37
    p_null: float = 0.20
    p_target: float = 0.35
    ia1_fraction: float = 0.4
    step: float = 0.5
    futility_threshold: float = 0.05
    efficacy_threshold: float = 0.90
    prior: str = "HT"
    parameters: Optional[list] = None
    zeta: Optional[float] = None
    master_seed: int = 2024
    threads: int = 1

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in fields(cls)}


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> StudyConfig:
    """Read a YAML or JSON config file and apply flag overrides; unknown keys are rejected."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(raw) - StudyConfig.keys())
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return StudyConfig(**raw)


def _field(name, fn):
    try:
        return fn()
    except (TypeError, ValueError, KeyError, DomainError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def resolve(cfg: StudyConfig):
    """Validate a config and build the design and scenario it describes."""
    if cfg.p_true is None:
        raise ConfigError("p_true: required (a list of rates or a scenario name such as 'scenario1')")
    if isinstance(cfg.p_true, str):
        scenario = _field("p_true", lambda: SCENARIOS[cfg.p_true.lower()])
    else:
        scenario = _field("p_true", lambda: Scenario("custom", tuple(float(p) for p in cfg.p_true)))
    nsim = _field("nsim", lambda: int(cfg.nsim))
    if nsim < 1:
        raise ConfigError("nsim: must be at least 1")
    arms = _field("arms", lambda: int(cfg.arms))
    if scenario.J != arms:
        raise ConfigError(f"p_true: has {scenario.J} rates but arms = {arms}")
    threads = _field("threads", lambda: int(cfg.threads))
    if threads < 1:
        raise ConfigError("threads: must be at least 1")
    seed = _field("master_seed", lambda: int(cfg.master_seed))
    cfg.nsim, cfg.arms, cfg.threads, cfg.master_seed = nsim, arms, threads, seed
    prior = _field("prior", lambda: prior_from_config(str(cfg.prior), cfg.parameters))
    N = cfg.N if np.isscalar(cfg.N) else tuple(cfg.N)
    checks = [
        ("p_null", cfg.p_null), ("p_target", cfg.p_target), ("ia1_fraction", cfg.ia1_fraction),
        ("step", cfg.step), ("futility_threshold", cfg.futility_threshold),
        ("efficacy_threshold", cfg.efficacy_threshold),
    ]
    for name, v in checks:
        v = _field(name, lambda: float(v))
        if not 0.0 < v < 1.0:
            raise ConfigError(f"{name}: must lie in (0, 1), got {v}")
    if not cfg.p_null < cfg.p_target:
        raise ConfigError("p_target: must exceed p_null")
    if cfg.zeta is not None and not 0.0 < float(cfg.zeta) <= 1.0:
        raise ConfigError(f"zeta: must lie in (0, 1], got {cfg.zeta}")
    design = _field("N", lambda: TrialDesign(
        J=arms, N=N, q0=float(cfg.p_null), q1=float(cfg.p_target),
        omega=float(cfg.ia1_fraction), k=float(cfg.step), hp=HyperPrior(prior),
        zeta=None if cfg.zeta is None else float(cfg.zeta),
        fut_thresh=float(cfg.futility_threshold), eff_thresh=float(cfg.efficacy_threshold),
    ))
    return design, scenario


# ---------------------------------------------------------------------------
# archives


def _outcome_record(i: int, o: TrialOutcome) -> dict:
    return {
        "type": "replicate",
        "index": i,
        "enrolled": list(o.per_arm_enrolled),
        "responders": list(o.per_arm_responders),
        "final_tail_probs": list(o.final_tail_probs),
        "stop_reasons": list(o.stop_reasons),
        "total_enrolled": o.total_enrolled,
        "n_analyses": o.n_analyses,
    }


def read_archive(path: str):
    """Header record and the list of outcomes stored in a JSONL archive."""
    header, outcomes, failures = None, [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # a run killed mid-write leaves a truncated last line
                log.warning("%s:%d: skipping unreadable record", path, lineno)
                continue
            kind = rec.get("type")
            if kind == "header":
                header = rec
            elif kind == "replicate":
                outcomes.append(TrialOutcome(
                    effective=None,
                    total_enrolled=int(rec["total_enrolled"]),
                    per_arm_enrolled=tuple(rec["enrolled"]),
                    per_arm_responders=tuple(rec["responders"]),
                    stop_reasons=tuple(rec["stop_reasons"]),
                    final_tail_probs=tuple(rec["final_tail_probs"]),
                    n_analyses=int(rec.get("n_analyses", 0)),
                ))
            elif kind == "failure":
                failures += 1
    if header is None:
        raise ConfigError(f"{path}: not a simulation archive (no header record)")
    return header, outcomes, failures


def _archive_design(header):
    cfg = load_config(None, header["config"])
    return cfg, *resolve(cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args))
    design, scenario = resolve(cfg)
    seed = int(cfg.master_seed)
    out = args.out or f"sim_{cfg.prior}_{scenario.name}_N{design.N[0]}.jsonl"
    n_fail, done, enrolled = 0, 0, []
    with open(out, "w", encoding="utf-8") as fh:
        header = {"type": "header", "config": asdict(cfg), "scenario": scenario.name,
                  "p_true": list(scenario.p_true), "prior": design.hp.sigma_prior.describe()}
        fh.write(json.dumps(header) + "\n")
        while done < cfg.nsim:
            m = min(ARCHIVE_CHUNK, cfg.nsim - done)
            batch = simulate_batch(design, scenario, m, seed, threads=cfg.threads,
                                   max_failure_rate=1.0, first_index=done)
            for i, o in zip(batch.indices, batch.outcomes):
                fh.write(json.dumps(_outcome_record(i, o)) + "\n")
                enrolled.append(o.total_enrolled)
            for f in batch.failures:
                fh.write(json.dumps({"type": "failure", **asdict(f)}) + "\n")
            fh.flush()
            n_fail += len(batch.failures)
            done += m
    print(f"simulated {cfg.nsim} trials of {scenario.name} under {cfg.prior}: "
          f"{n_fail} failed, mean enrolled {np.mean(enrolled) if enrolled else float('nan'):.1f}; "
          f"archive {out}")
    if n_fail > 0.05 * cfg.nsim:
        raise FailureBudgetExceeded(n_fail, cfg.nsim)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    header, outcomes, _ = read_archive(args.archive)
    cfg, design, scenario = _archive_design(header)
    if not scenario.is_null(design.q0):
        raise ConfigError(f"{args.archive}: scenario {list(scenario.p_true)} is not all-null "
                          f"(some rate exceeds p_null = {design.q0}); refusing to calibrate")
    if not outcomes:
        raise ConfigError(f"{args.archive}: archive holds no replicates")
    P = np.array([o.final_tail_probs for o in outcomes])
    zeta = find_cutoff(P, args.alpha)
    print(f"{zeta:.3f}")
    record = {"zeta": zeta, "alpha": args.alpha, "nsim": len(outcomes),
              "seed": cfg.master_seed, "archive": os.path.abspath(args.archive),
              "config": asdict(cfg)}
    out = args.out or os.path.splitext(args.archive)[0] + ".cutoff.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2)
    return EXIT_OK


def cmd_ocs(args) -> int:
    zeta = args.zeta
    if zeta is None and args.cutoff:
        with open(args.cutoff, encoding="utf-8") as fh:
            zeta = json.load(fh)["zeta"]
    if zeta is None:
        raise ConfigError("zeta: pass --zeta or --cutoff")
    if not 0.0 < zeta <= 1.0:
        raise ConfigError(f"zeta: must lie in (0, 1], got {zeta}")
    header, outcomes, failures = read_archive(args.archive)
    cfg, design, scenario = _archive_design(header)
    if not outcomes:
        raise ConfigError(f"{args.archive}: archive holds no replicates")
    oc = operating_chars(outcomes, design, scenario, zeta)
    oc = OperatingCharacteristics(**{**asdict(oc), "failures": failures})
    rows = ocs_rows(cfg.prior, oc, len(outcomes), int(cfg.master_seed))
    if args.format == "csv":
        if args.out:
            with open(args.out, "w", encoding="utf-8", newline="") as fh:
                write_rows(rows, fh)
        else:
            write_rows(rows, sys.stdout)
    else:
        doc = {"config": asdict(cfg), "zeta": zeta, "archive": os.path.abspath(args.archive),
               "operating_characteristics": asdict(oc)}
        text = json.dumps(doc, indent=2)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        else:
            print(text)
    return EXIT_OK


def _positive(name, v):
    if not (v > 0 and math.isfinite(v)):
        raise ConfigError(f"{name}: must be positive, got {v}")
    return v


def cmd_scale_prior(args) -> int:
    if args.scale == "from-sd":
        print(f"{lambda_from_sd(_positive('sd', args.sd)):.4f}")
    elif args.scale == "epc":
        d = epc_from_halft(_positive("gamma", args.gamma), _positive("nu", args.nu))
        print(f"lambda0 {d.lambda0:.6f}  x* {d.x_star:.6g}  lambda {d.lam:.6f}")
    else:
        if (args.lam is None) == (args.sd is None):
            raise ConfigError("implied-or: give exactly one of --lam or --sd")
        lam = _positive("lam", args.lam) if args.lam is not None else lambda_from_sd(_positive("sd", args.sd))
        lo, hi = _positive("lo", args.lo), _positive("hi", args.hi)
        if not lo < hi or args.num < 2:
            raise ConfigError("grid: need lo < hi and num >= 2")
        r = np.linspace(lo, hi, args.num)
        dens = implied_or_density(lam, r)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("odds_ratio,density\n")
            for a, b in zip(r, dens):
                fh.write(f"{a:.6g},{b:.8g}\n")
        print(f"lambda {lam:.4f}; Pr(0.8 < OR < 1.2) = {implied_or_mass(lam, 0.8, 1.2):.4f}; "
              f"density written to {args.out}")
    return EXIT_OK


def cmd_standard_study(args) -> int:
    priors = [p.strip() for p in args.priors.split(",") if p.strip()]
    if not priors:
        raise ConfigError("priors: need at least one prior name")
    for p in priors:
        _field("priors", lambda: prior_from_config(p))
    if args.N < 1 or args.nsim < 1 or args.threads < 1:
        raise ConfigError("N, nsim and threads must be positive")
    result = standard_study(priors, args.N, args.nsim, args.seed, alpha=args.alpha, threads=args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.join(args.out_dir, f"study_N{args.N}")
    with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(study_csv(result))
    config = {"priors": priors, "N": args.N, "nsim": args.nsim, "master_seed": args.seed,
              "alpha": args.alpha, "threads": args.threads}
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        fh.write(study_json(result, config) + "\n")
    for p in result.priors:
        status = f"zeta {p.zeta:.3f}" if p.excluded is None else f"excluded ({p.excluded})"
        print(f"{p.prior}: {status}")
    print(f"wrote {stem}.csv and {stem}.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _flag_overrides(args) -> dict:
    out = {}
    for key in ("nsim", "prior", "zeta", "threads"):
        out[key] = getattr(args, key, None)
    out["master_seed"] = getattr(args, "seed", None)
    out["N"] = getattr(args, "N", None)
    if getattr(args, "p_true", None) is not None:
        v = args.p_true
        out["p_true"] = v if v.lower().startswith("scenario") else [float(x) for x in v.split(",")]
    if getattr(args, "parameters", None) is not None:
        out["parameters"] = [float(x) for x in args.parameters.split(",")]
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="basketpc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate trials and write a JSONL archive")
    s.add_argument("config", nargs="?", help="YAML or JSON config file")
    s.add_argument("--out", help="archive path")
    s.add_argument("--nsim", type=int)
    s.add_argument("--N", type=int)
    s.add_argument("--p-true", dest="p_true", help="comma-separated rates or scenario1..scenario5")
    s.add_argument("--prior")
    s.add_argument("--parameters", help="comma-separated prior parameters")
    s.add_argument("--zeta", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="cutoff zeta from an all-null archive")
    c.add_argument("archive")
    c.add_argument("--alpha", type=float, default=0.1)
    c.add_argument("--out", help="calibration record path")
    c.set_defaults(func=cmd_calibrate)

    o = sub.add_parser("ocs", help="operating characteristics of an archive")
    o.add_argument("archive")
    o.add_argument("--zeta", type=float)
    o.add_argument("--cutoff", help="calibration record written by 'calibrate'")
    o.add_argument("--format", choices=("csv", "json"), default="json")
    o.add_argument("--out")
    o.set_defaults(func=cmd_ocs)

    p = sub.add_parser("scale-prior", help="PC prior scaling calculators")
    psub = p.add_subparsers(dest="scale", required=True)
    a = psub.add_parser("from-sd", help="rate lambda from a guess of the marginal sd of theta")
    a.add_argument("sd", type=float)
    b = psub.add_parser("epc", help="equivalent PC prior of a half-t(gamma, nu)")
    b.add_argument("gamma", type=float)
    b.add_argument("nu", type=float)
    i = psub.add_parser("implied-or", help="implied prior density of the odds ratio")
    i.add_argument("--lam", type=float)
    i.add_argument("--sd", type=float)
    i.add_argument("--lo", type=float, default=0.05)
    i.add_argument("--hi", type=float, default=5.0)
    i.add_argument("--num", type=int, default=400)
    i.add_argument("--out", default="implied_or.csv")
    p.set_defaults(func=cmd_scale_prior)

    t = sub.add_parser("standard-study", help="calibrate and evaluate the five standard scenarios")
    t.add_argument("--priors", default="HT,PC1,PC5,PC10,EPC")
    t.add_argument("--N", type=int, default=37)
    t.add_argument("--nsim", type=int, default=1000)
    t.add_argument("--seed", type=int, default=2024)
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--out-dir", default=".")
    t.set_defaults(func=cmd_standard_study)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FailureBudgetExceeded, DerivationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except yaml.YAMLError as exc:
        print(f"error: config is not valid YAML/JSON: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
