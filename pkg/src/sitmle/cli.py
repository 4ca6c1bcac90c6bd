"""Command-line interface: ``estimate``, ``msm`` and ``simulate``.

Exit codes: 0 success, 1 estimation failure, 2 configuration or parse error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .data import OutcomeScale, SampleError, Schema, load_sample, parse_kn
from .estimators import (EstimatorOptions, aipw_from_fits, contrast_from_fits, fit_nuisance,
                         tmle_from_fits)
from .glm import FormulaError, GlmError, parse_formula
from .interventions import AllControl, AllTreat, parse_intervention
from .msm import GroupEffect, MsmError, fit_msm, load_effects
from .simulation import CSV_COLUMNS, SimulationError, run_cells, table_grid

log = logging.getLogger("sitmle")

EXIT_OK, EXIT_ESTIMATION, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Configuration problem detected after argument parsing."""


def _load_config(args, command: str) -> RunConfig:
    try:
        if getattr(args, "config", None):
            text = Path(args.config).read_text(encoding="utf-8")
            cfg = RunConfig.from_ini(text, command)
        else:
            cfg = RunConfig(command=command)
        flags = {k: v for k, v in vars(args).items()
                 if k not in ("config", "func", "command", "verbose", "table1")}
        return cfg.override(**flags)
    except (ConfigError, OSError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _write_json(payload: dict, path: str | None) -> None:
    text = json.dumps(payload, indent=2, default=float)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _header(cfg: RunConfig) -> dict:
    return {"version": __version__, "config": cfg.to_dict()}


# ---------------------------------------------------------------------------
# estimate

def _options(cfg: RunConfig) -> EstimatorOptions:
    scale = cfg.outcome_scale
    if scale and scale != "auto":
        lo, hi = (float(x) for x in scale.split(","))
        scale = OutcomeScale(lo, hi)
    return EstimatorOptions(truncation=tuple(cfg.truncation), ci_level=cfg.ci_level,
                            outcome_scale=scale or "auto")


def cmd_estimate(cfg: RunConfig) -> int:
    if not cfg.data:
        raise UsageError("estimate needs --data")
    try:
        q_spec = parse_formula(cfg.q_formula, "outcome")
        g_spec = parse_formula(cfg.g_formula, "propensity")
        kn = parse_kn(cfg.kn)
        options = _options(cfg)
        arms = [parse_intervention(t) for t in cfg.interventions]
        contrasts = [(parse_intervention(a), parse_intervention(b)) for a, b in cfg.contrasts]
    except (FormulaError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    covariates = cfg.covariates or tuple(sorted(
        (q_spec.variables | g_spec.variables) - {cfg.exposure}))
    schema = Schema(covariates, cfg.exposure, cfg.outcome, cfg.group)
    try:
        samples = load_sample(cfg.data, schema)
    except (SampleError, OSError) as exc:
        raise UsageError(str(exc)) from None

    groups, errors, effects = [], [], []
    for s in samples:
        rec: dict = {"group_id": s.group_id, "n": s.n}
        try:
            q_spec.check(s)
            g_spec.check(s)
            fits = fit_nuisance(s, kn, q_spec, g_spec, options)
            rec["a_bar"] = fits.summary.a_bar
            rec["k_value"] = fits.summary.k_value
            if cfg.direct_effect:
                de = contrast_from_fits(fits, AllTreat(), AllControl(), options, cfg.method)
                rec["direct_effect"] = de.to_dict()
                mods = {"k": fits.summary.k_value, "a_bar": fits.summary.a_bar}
                mods.update({m: float(np.mean(s.column(m))) for m in cfg.msm_modifiers})
                effects.append(GroupEffect(str(s.group_id), de.estimate, de.se**2, mods))
            single = tmle_from_fits if cfg.method == "tmle" else aipw_from_fits
            rec["estimates"] = [single(fits, arm, options).to_dict() for arm in arms]
            rec["contrasts"] = [contrast_from_fits(fits, a, b, options, cfg.method).to_dict()
                                for a, b in contrasts]
            for c in rec["contrasts"]:
                if not all(comp["is_aers"] for comp in c["components"]):
                    c["warning"] = "a rule does not preserve the observed exposure proportion"
        except (FormulaError,) as exc:
            raise UsageError(str(exc)) from None
        except (SampleError, GlmError, ValueError, ArithmeticError, RuntimeError,
                np.linalg.LinAlgError) as exc:
            errors.append({"group_id": s.group_id, "error": str(exc)})
            log.error("group %r failed: %s", s.group_id, exc)
            continue
        groups.append(rec)

    payload = _header(cfg) | {"groups": groups, "errors": errors}
    if cfg.msm_formula and effects:
        try:
            payload["msm"] = fit_msm(effects, cfg.msm_formula, "invvar").to_dict(cfg.ci_level)
        except MsmError as exc:
            errors.append({"group_id": None, "error": f"msm: {exc}"})
    _write_json(payload, cfg.output)
    return EXIT_ESTIMATION if errors else EXIT_OK


# ---------------------------------------------------------------------------
# msm

def cmd_msm(cfg: RunConfig) -> int:
    if not cfg.effects:
        raise UsageError("msm needs --effects")
    try:
        effects = load_effects(cfg.effects)
        fit = fit_msm(effects, cfg.formula, cfg.weights)
    except (MsmError, OSError) as exc:
        raise UsageError(str(exc)) from None
    _write_json(_header(cfg) | {"fit": fit.to_dict(cfg.ci_level)}, cfg.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(cfg: RunConfig, table1: bool = False) -> int:
    try:
        if table1:
            cells = table_grid(estimands=cfg.estimands, replicates=cfg.replicates, seed=cfg.seed)
        else:
            cells = table_grid(cfg.estimands, cfg.regimes, cfg.ns, cfg.betas,
                               cfg.replicates, cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        results = run_cells(cells, cfg.workers)
    except SimulationError as exc:
        log.error("%s", exc)
        return EXIT_ESTIMATION
    out = open(cfg.output, "w", newline="", encoding="utf-8") if cfg.output else sys.stdout
    try:
        out.write(f"# sitmle {__version__} simulate\n")
        for line in cfg.to_ini().splitlines():
            if line.strip():
                out.write(f"# {line}\n")
        writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v)
                             for k, v in r.row().items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sitmle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate effects per group from a CSV")
    e.add_argument("--data")
    e.add_argument("--config")
    e.add_argument("--output")
    e.add_argument("--q-formula", dest="q_formula")
    e.add_argument("--g-formula", dest="g_formula")
    e.add_argument("--group")
    e.add_argument("--interventions", help="';'-separated intervention rules")
    e.add_argument("--contrasts", help="';'-separated '<rule> vs <rule>' pairs")
    e.add_argument("--kn")
    e.add_argument("--method", choices=("tmle", "aipw"))
    e.add_argument("--ci-level", dest="ci_level")
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("msm", help="project group effects onto a working MSM")
    m.add_argument("--effects")
    m.add_argument("--config")
    m.add_argument("--formula")
    m.add_argument("--weights", choices=("invvar", "uniform"))
    m.add_argument("--output")
    m.set_defaults(func=cmd_msm)

    s = sub.add_parser("simulate", help="Monte Carlo bias / MSE / coverage table")
    s.add_argument("--config")
    s.add_argument("--table1", action="store_true",
                   help="full 3 regimes x 3 n x 3 beta grid for each estimand")
    s.add_argument("--regimes")
    s.add_argument("--ns")
    s.add_argument("--betas")
    s.add_argument("--estimands")
    s.add_argument("--replicates")
    s.add_argument("--seed")
    s.add_argument("--workers")
    s.add_argument("--output")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args, args.command)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.table1)
        return args.func(cfg)
    except UsageError as exc:
        print(f"sitmle {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
