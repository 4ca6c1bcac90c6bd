"""Monte Carlo study of the estimators under linear-in-proportion interference.

Data generating process, per replicate::

    W_i ~ N(0, 1),  P(A_i = 1 | W_i) = expit(W_i),  Y0_i ~ N(0, 1),
    Y_i = Y0_i + A_i W_i (1 - beta * A_bar)

Targets are data-adaptive: they condition on the realised W and A_bar, so the
truth is recomputed for every replicate.

Randomness is keyed by (seed, replicate index, attempt) through a counter-based
Philox generator, so serial and parallel runs produce identical draws. Normal
variates are obtained by inverting the normal CDF (``scipy.special.ndtri``) at
53-bit uniforms strictly inside (0, 1).
"""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import groupby

import numpy as np
from scipy import special

from .data import Sample
from .estimators import (EstimatorOptions, contrast_from_fits, fit_nuisance, tmle_from_fits)
from .glm import Link, ModelSpec, Role
from .interventions import AllControl, AllTreat, CompleteRandomization, RankTopS, rank_top_s

MAX_REDRAWS = 1000
FAILURE_CAP = 0.01
WORKERS_ENV = "SITMLE_WORKERS"


class SimulationError(RuntimeError):
    pass


class Regime(enum.Enum):
    CORRECT_BOTH = "correct_both"
    MIS_Q = "mis_q"
    MIS_G = "mis_g"


class Estimand(enum.Enum):
    DIRECT = "direct"
    OERS = "oers"
    COMPLETE_RAND = "complete_rand"


@dataclass(frozen=True)
class SimConfig:
    n: int
    beta: float
    regime: Regime = Regime.CORRECT_BOTH
    estimand: Estimand = Estimand.DIRECT
    replicates: int = 5000
    seed: int = 20240101
    ci_level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "estimand", Estimand(self.estimand))
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def key(self):
        return (self.regime.value, self.n, self.beta, self.estimand.value)


@dataclass(frozen=True)
class SimCellResult:
    config: SimConfig
    bias: float
    mse: float
    coverage: float
    mc_se_of_coverage: float
    truth_mean: float
    truth_sd: float
    replicate_failures: int
    redraws: int = 0
    mean_se: float = float("nan")

    def row(self) -> dict:
        c = self.config
        return {"regime": c.regime.value, "n": c.n, "beta": c.beta,
                "estimand": c.estimand.value, "replicates": c.replicates,
                "bias": self.bias, "mse": self.mse, "coverage": self.coverage,
                "mc_se": self.mc_se_of_coverage, "truth_mean": self.truth_mean,
                "truth_sd": self.truth_sd, "failures": self.replicate_failures}


CSV_COLUMNS = ["regime", "n", "beta", "estimand", "replicates", "bias", "mse", "coverage",
               "mc_se", "truth_mean", "truth_sd", "failures"]


# ---------------------------------------------------------------------------
# random streams and data

def replicate_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, index, attempt])
    return np.random.Generator(np.random.Philox(ss))


def _uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    return (rng.integers(0, 2**53, size=n, dtype=np.int64) + 0.5) / 2.0**53


def _normal(rng: np.random.Generator, n: int) -> np.ndarray:
    return special.ndtri(_uniform(rng, n))


@dataclass(frozen=True, eq=False)
class SimDraw:
    sample: Sample
    y0: np.ndarray
    redraws: int = 0


def draw_exposure(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A_i ~ Bernoulli(expit(W_i))."""
    return (_uniform(rng, len(w)) < special.expit(w)).astype(np.int64)


def draw_sample(n: int, beta: float, rng: np.random.Generator) -> tuple[Sample, np.ndarray] | None:
    """One draw from the data generating process; None if nobody or everybody is exposed."""
    w = _normal(rng, n)
    a = draw_exposure(w, rng)
    y0 = _normal(rng, n)
    s = int(a.sum())
    if s == 0 or s == n:
        return None
    a_bar = s / n
    y = y0 + a * w * (1.0 - beta * a_bar)
    return Sample(w[:, None], a, y, ("w",)), y0


def generate_sample(n: int, beta: float, seed: int, index: int = 0) -> SimDraw:
    """Replicate ``index`` of the stream ``seed``; degenerate draws are redrawn."""
    for attempt in range(MAX_REDRAWS):
        out = draw_sample(n, beta, replicate_rng(seed, index, attempt))
        if out is not None:
            return SimDraw(out[0], out[1], attempt)
    raise SimulationError(f"could not draw a non-degenerate sample of size {n}")


# ---------------------------------------------------------------------------
# true data-adaptive parameters (E[Y0 | W] = 0 under this design)

def _a_bar(sample: Sample) -> float:
    return int(sample.exposure.sum()) / sample.n


def true_direct_effect(sample: Sample, beta: float) -> float:
    return (1.0 - beta * _a_bar(sample)) * float(np.mean(sample.covariates[:, 0]))


def true_oers_overall(sample: Sample, beta: float) -> float:
    w = sample.covariates[:, 0]
    top = rank_top_s(w, int(sample.exposure.sum()), "desc")
    return (1.0 - beta * _a_bar(sample)) * float(np.sum(w * top)) / sample.n


def true_complete_rand_overall(sample: Sample, beta: float) -> float:
    a_bar = _a_bar(sample)
    return (1.0 - beta * a_bar) * a_bar * float(np.mean(sample.covariates[:, 0]))


TRUTH = {Estimand.DIRECT: true_direct_effect, Estimand.OERS: true_oers_overall,
         Estimand.COMPLETE_RAND: true_complete_rand_overall}


def regime_specs(regime: Regime | str) -> tuple[ModelSpec, ModelSpec]:
    """Outcome and propensity working models for a specification regime.

    The outcome model is a logistic regression of the [0, 1]-scaled outcome.
    """
    regime = Regime(regime)
    q_terms = ((), ("w",), ("a",), ("w", "a"))
    if regime is Regime.MIS_Q:
        q_terms = q_terms[:3]
    g_link = Link.PROBIT if regime is Regime.MIS_G else Link.LOGIT
    q_spec = ModelSpec(q_terms, Link.LOGIT, Role.OUTCOME, "y")
    g_spec = ModelSpec(((), ("w",)), g_link, Role.PROPENSITY, "a")
    return q_spec, g_spec


# ---------------------------------------------------------------------------
# replicate and cell runners

def _estimate(fits, estimand: Estimand, options: EstimatorOptions):
    """(psi, se, lower, upper) for one estimand."""
    if estimand is Estimand.DIRECT:
        r = contrast_from_fits(fits, AllTreat(), AllControl(), options)
        return r.estimate, r.se, r.ci[0], r.ci[1]
    spec = RankTopS("w", "desc") if estimand is Estimand.OERS else CompleteRandomization()
    r = tmle_from_fits(fits, spec, options)
    return r.psi, r.se_conditional, r.ci[0], r.ci[1]


def run_replicate(n: int, beta: float, regime: Regime, estimands, seed: int, index: int,
                  ci_level: float = 0.95) -> tuple[np.ndarray, int]:
    """Returns a (len(estimands), 5) array of psi, se, lower, upper, truth and the redraw count.

    Rows of a failed estimation are NaN except for the truth.
    """
    draw = generate_sample(n, beta, seed, index)
    q_spec, g_spec = regime_specs(regime)
    options = EstimatorOptions(ci_level=ci_level)
    out = np.full((len(estimands), 5), np.nan)
    try:
        fits = fit_nuisance(draw.sample, None, q_spec, g_spec, options)
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError):
        fits = None
    for k, est in enumerate(estimands):
        out[k, 4] = TRUTH[est](draw.sample, beta)
        if fits is None:
            continue
        try:
            out[k, :4] = _estimate(fits, est, options)
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError):
            pass
    return out, draw.redraws


def _run_chunk(args):
    n, beta, regime, estimands, seed, ci_level, start, stop = args
    res = np.empty((stop - start, len(estimands), 5))
    redraws = 0
    for i in range(start, stop):
        res[i - start], r = run_replicate(n, beta, regime, estimands, seed, i, ci_level)
        redraws += r
    return start, res, redraws


def summarize(psi, truth, lower, upper) -> dict:
    """Bias, MSE and CI coverage over the non-failed replicates."""
    psi, truth = np.asarray(psi, float), np.asarray(truth, float)
    ok = np.isfinite(psi)
    err = psi[ok] - truth[ok]
    hit = (np.asarray(lower)[ok] <= truth[ok]) & (truth[ok] <= np.asarray(upper)[ok])
    r = int(ok.sum())
    cp = float(np.mean(hit)) if r else float("nan")
    return {
        "bias": float(np.mean(err)) if r else float("nan"),
        "mse": float(np.mean(err**2)) if r else float("nan"),
        "coverage": cp,
        "mc_se_of_coverage": math.sqrt(cp * (1 - cp) / r) if r else float("nan"),
        "truth_mean": float(np.mean(truth)),
        "truth_sd": float(np.std(truth, ddof=1)) if len(truth) > 1 else 0.0,
        "replicate_failures": int(len(psi) - r),
    }


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _group_key(c: SimConfig):
    return (c.regime.value, c.n, c.beta, c.replicates, c.seed, c.ci_level)


def run_cells(configs, workers: int | None = None, chunk: int = 250) -> list[SimCellResult]:
    """Run several cells; cells differing only in estimand share samples and fits.

    Results come back in the order of ``configs``. The output does not depend on
    ``workers`` or ``chunk``.
    """
    configs = list(configs)
    workers = default_workers() if workers is None else workers
    results: dict[SimConfig, SimCellResult] = {}
    ordered = sorted(configs, key=_group_key)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for key, grp in groupby(ordered, key=_group_key):
            grp = list(dict.fromkeys(grp))
            estimands = tuple(dict.fromkeys(c.estimand for c in grp))
            c0 = grp[0]
            reps = c0.replicates
            tasks = [(c0.n, c0.beta, c0.regime, estimands, c0.seed, c0.ci_level, s,
                      min(s + chunk, reps)) for s in range(0, reps, chunk)]
            mapped = pool.map(_run_chunk, tasks) if pool else map(_run_chunk, tasks)
            table = np.empty((reps, len(estimands), 5))
            redraws = 0
            for start, res, r in mapped:
                table[start:start + len(res)] = res
                redraws += r
            for k, est in enumerate(estimands):
                t = table[:, k]
                stats = summarize(t[:, 0], t[:, 4], t[:, 2], t[:, 3])
                if stats["replicate_failures"] > FAILURE_CAP * reps:
                    raise SimulationError(
                        f"{stats['replicate_failures']} of {reps} replicates failed in cell "
                        f"{key} / {est.value}")
                cfg = SimConfig(c0.n, c0.beta, c0.regime, est, reps, c0.seed, c0.ci_level)
                results[cfg] = SimCellResult(cfg, redraws=redraws,
                                             mean_se=float(np.nanmean(t[:, 1])), **stats)
    finally:
        if pool:
            pool.shutdown()
    return [results[c] for c in configs]


def run_cell(config: SimConfig, workers: int | None = None) -> SimCellResult:
    return run_cells([config], workers)[0]


def table_grid(estimands=(Estimand.DIRECT, Estimand.OERS), regimes=tuple(Regime),
               ns=(50, 500, 5000), betas=(0.0, 1.0, 10.0), replicates: int = 5000,
               seed: int = 20240101) -> list[SimConfig]:
    """The regime x n x beta grid, sorted by cell key."""
    cells = [SimConfig(n, float(b), Regime(r), Estimand(e), replicates, seed)
             for r in regimes for n in ns for b in betas for e in estimands]
    return sorted(cells, key=lambda c: (c.estimand.value, c.regime.value, c.n, c.beta))


def target_summary(n: int, beta: float, replicates: int, seed: int = 20240101) -> dict:
    """Mean and SD of the data-adaptive targets across replicates (no estimation)."""
    truths = {e: np.empty(replicates) for e in Estimand}
    for i in range(replicates):
        s = generate_sample(n, beta, seed, i).sample
        for e in Estimand:
            truths[e][i] = TRUTH[e](s, beta)
    return {e.value: (float(v.mean()), float(v.std(ddof=1))) for e, v in truths.items()}
