"""Hypothetical exposure rules and their individual-level marginal probabilities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import ExposureSummary, Sample


@dataclass(frozen=True)
class AllTreat:
    def __str__(self):
        return "all_treat"


@dataclass(frozen=True)
class AllControl:
    def __str__(self):
        return "all_control"


@dataclass(frozen=True)
class CompleteRandomization:
    """Expose exactly S_n subjects chosen uniformly at random."""

    def __str__(self):
        return "complete_randomization"


@dataclass(frozen=True)
class RankTopS:
    """Expose the S_n subjects with the highest (or lowest) score.

    ``score`` is a covariate name or a callable mapping the sample to one
    score per subject. Ties go to the lower row index.
    """

    score: str | Callable[[Sample], np.ndarray]
    direction: str = "desc"

    def __post_init__(self):
        if self.direction not in ("asc", "desc"):
            raise ValueError(f"direction must be 'asc' or 'desc', got {self.direction!r}")

    def scores(self, sample: Sample) -> np.ndarray:
        if callable(self.score):
            s = np.asarray(self.score(sample), dtype=float)
        else:
            s = sample.column(self.score)
        if s.shape != (sample.n,):
            raise ValueError(f"score has shape {s.shape}, expected ({sample.n},)")
        return s

    def __str__(self):
        name = getattr(self.score, "__name__", None) if callable(self.score) else self.score
        return f"rank_top_s:score={name},direction={self.direction}"


@dataclass(frozen=True)
class Bernoulli:
    """Expose each subject independently with probability p."""

    p: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"Bernoulli p must lie in (0, 1), got {self.p}")

    def __str__(self):
        return f"bernoulli:p={self.p!r}"


@dataclass(frozen=True, eq=False)
class ExplicitMarginals:
    probabilities: np.ndarray
    label: str = "explicit"

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=float)
        if p.ndim != 1 or np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ValueError("explicit marginals must be a vector of probabilities in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    def __str__(self):
        return self.label


InterventionSpec = (AllTreat | AllControl | CompleteRandomization | RankTopS | Bernoulli
                    | ExplicitMarginals)

# interventions whose marginal for subject i depends on nothing but W_i
INDIVIDUAL_LEVEL = (AllTreat, AllControl, Bernoulli)


@dataclass(frozen=True, eq=False)
class MarginalIntervention:
    probs_treat: np.ndarray
    is_ers: bool
    is_aers: bool
    individual_level: bool
    label: str = ""

    def probs(self, a: int) -> np.ndarray:
        """g*(a | W_i) for a in {0, 1}."""
        return self.probs_treat if a == 1 else 1.0 - self.probs_treat


def rank_top_s(scores: np.ndarray, s_n: int, direction: str = "desc") -> np.ndarray:
    """0/1 vector marking the s_n top-ranked scores; ties to the lower index."""
    n = len(scores)
    key = -scores if direction == "desc" else scores
    order = np.lexsort((np.arange(n), key))
    out = np.zeros(n)
    out[order[:s_n]] = 1.0
    return out


def check_aers(marginals: MarginalIntervention | np.ndarray, summary: ExposureSummary,
               tol: float = 1e-12) -> bool:
    """Do the marginal exposure probabilities average to the observed proportion?"""
    p = marginals.probs_treat if isinstance(marginals, MarginalIntervention) else marginals
    return bool(abs(float(np.mean(p)) - summary.a_bar) <= tol)


def check_ers(spec: InterventionSpec, summary: ExposureSummary) -> bool:
    """Does the rule reallocate exactly the observed number of exposures?"""
    if isinstance(spec, (CompleteRandomization, RankTopS)):
        return True
    if isinstance(spec, ExplicitMarginals):
        p = spec.probabilities
        return bool(np.all((p == 0) | (p == 1)) and int(p.sum()) == summary.s_n)
    return False


def marginalize(spec: InterventionSpec, sample: Sample, summary: ExposureSummary
                ) -> MarginalIntervention:
    """g*(1 | W_i) for every subject, with ERS / AERS classification."""
    n = sample.n
    if summary.n != n:
        raise ValueError(f"summary is for n={summary.n}, sample has n={n}")
    if isinstance(spec, AllTreat):
        p = np.ones(n)
    elif isinstance(spec, AllControl):
        p = np.zeros(n)
    elif isinstance(spec, CompleteRandomization):
        # by symmetry every subject has the same chance s_n / n
        p = np.full(n, summary.a_bar)
    elif isinstance(spec, RankTopS):
        p = rank_top_s(spec.scores(sample), summary.s_n, spec.direction)
    elif isinstance(spec, Bernoulli):
        p = np.full(n, spec.p)
    elif isinstance(spec, ExplicitMarginals):
        if len(spec.probabilities) != n:
            raise ValueError(f"explicit marginals have length {len(spec.probabilities)}, "
                             f"sample has n={n}")
        p = np.array(spec.probabilities)
    else:
        raise TypeError(f"unknown intervention {spec!r}")
    p.setflags(write=False)
    is_ers = check_ers(spec, summary)
    is_aers = is_ers or check_aers(p, summary)
    return MarginalIntervention(p, is_ers, is_aers, isinstance(spec, INDIVIDUAL_LEVEL), str(spec))


def parse_intervention(text: str) -> InterventionSpec:
    """Parse the config-file form of an intervention.

    ``all_treat``, ``all_control``, ``complete_randomization``,
    ``rank_top_s:score=<column>,direction=desc``, ``bernoulli:p=<x>`` or
    ``file:<path>`` (one probability per line).
    """
    text = text.strip()
    name, _, rest = text.partition(":")
    simple = {"all_treat": AllTreat, "all_control": AllControl,
              "complete_randomization": CompleteRandomization}
    if name in simple and not rest:
        return simple[name]()
    if name == "file":
        probs = np.loadtxt(rest, dtype=float, ndmin=1)
        return ExplicitMarginals(probs, label=text)
    kw = {}
    for part in filter(None, rest.split(",")):
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"bad intervention option {part!r} in {text!r}")
        kw[key.strip()] = value.strip()
    if name == "rank_top_s" and "score" in kw:
        return RankTopS(kw["score"], kw.get("direction", "desc"))
    if name == "bernoulli" and "p" in kw:
        return Bernoulli(float(kw["p"]))
    raise ValueError(f"unknown intervention {text!r}")


def sample_joint(spec: InterventionSpec, sample: Sample, summary: ExposureSummary,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw one exposure vector from the joint rule (test and teaching use only)."""
    n = sample.n
    if isinstance(spec, CompleteRandomization):
        a = np.zeros(n)
        a[rng.choice(n, size=summary.s_n, replace=False)] = 1.0
        return a
    p = marginalize(spec, sample, summary).probs_treat
    return (rng.random(n) < p).astype(float)
