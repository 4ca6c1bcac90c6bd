"""TMLE and A-IPW estimators of the mean outcome under an exposure rule.

Both estimators condition on the observed covariates and on the observed
proportion exposed. Given that conditioning, the usual single-group TMLE for a
stochastic or dynamic intervention applies unchanged, provided the rule is
expressed through its individual-level marginals g*(a | W_i).

Everything is computed on the [0, 1] outcome scale and mapped back at the end.
Standard errors come from the influence curve H_i (Y_i - Q*(A_i, W_i)), which
gives the conditional variance; the population variance adds the spread of
the per-subject projections sum_a Q*(W_i, a) g*(a | W_i).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .data import (ExposureSummary, KnSpec, OutcomeScale, Sample, exposure_summary,
                   scale_outcome)
from .glm import GlmFit, ModelSpec, Role, fit_glm, predict
from .interventions import (AllControl, AllTreat, InterventionSpec, MarginalIntervention,
                            marginalize)

log = logging.getLogger(__name__)

DEFAULT_TRUNCATION = (0.005, 0.995)
Q_BOUND = 1e-6
FLUCTUATION_MAX_ITER = 100


class FluctuationError(RuntimeError):
    pass


class InterventionWarning(UserWarning):
    """An overall-effect contrast uses a rule that is not an AERS."""


@dataclass(frozen=True)
class EstimatorOptions:
    truncation: tuple[float, float] = DEFAULT_TRUNCATION
    ci_level: float = 0.95
    # "auto": binary outcomes use (0, 1), others the observed min/max
    outcome_scale: OutcomeScale | str = "auto"
    q_bound: float = Q_BOUND

    def __post_init__(self):
        lo, hi = self.truncation
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"bad truncation bounds {self.truncation}")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError(f"ci_level must lie in (0, 1), got {self.ci_level}")


# ---------------------------------------------------------------------------
# building blocks

def wald_ci(psi: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if se < 0:
        raise ValueError(f"negative standard error {se}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    z = float(special.ndtri(1.0 - (1.0 - level) / 2.0))
    return psi - z * se, psi + z * se


def _clamp_g(g_obs: np.ndarray, truncation) -> np.ndarray:
    lo, hi = truncation
    return np.clip(g_obs, lo, hi)


def clever_covariate(marginals: MarginalIntervention, g_fit: GlmFit | np.ndarray,
                     sample: Sample, truncation=DEFAULT_TRUNCATION, exposure=None) -> np.ndarray:
    """H_i = g*(A_i | W_i) / g_n(A_i | W_i), with g_n truncated to ``truncation``.

    ``g_fit`` may be a fitted propensity model or the vector g_n(1 | W_i).
    ``exposure`` overrides the observed A (a scalar gives the counterfactual H).
    """
    if isinstance(g_fit, GlmFit):
        if g_fit.spec.role is not Role.PROPENSITY:
            raise ValueError("clever covariate needs a propensity model")
        g1 = predict(g_fit, sample.covariates, names=sample.covariate_names)
    else:
        g1 = np.asarray(g_fit, dtype=float)
    a = sample.exposure if exposure is None else np.broadcast_to(exposure, (sample.n,))
    g_star = np.where(a == 1, marginals.probs_treat, 1.0 - marginals.probs_treat)
    g_obs = np.where(a == 1, g1, 1.0 - g1)
    return g_star / _clamp_g(g_obs, truncation)


def _bound(q, eps=Q_BOUND):
    return np.clip(q, eps, 1.0 - eps)


def _offset_loss(eps, offset, h, y):
    eta = offset + eps * h
    # -[y log p + (1-y) log(1-p)] with p = expit(eta)
    return float(np.sum(y * np.logaddexp(0, -eta) + (1 - y) * np.logaddexp(0, eta)))


def fluctuate(q_init, clever, y_scaled, q_bound: float = Q_BOUND) -> tuple[float, np.ndarray]:
    """One-dimensional logistic fluctuation of the initial outcome fit.

    Minimises the quasi-Bernoulli loss of ``y_scaled`` along
    logit Q(eps) = logit Q + eps * H by Newton's method with step halving.
    Returns eps and the updated predictions at the observed rows.
    """
    h = np.asarray(clever, dtype=float)
    y = np.asarray(y_scaled, dtype=float)
    offset = special.logit(_bound(np.asarray(q_init, dtype=float), q_bound))
    if not np.any(h):
        return 0.0, special.expit(offset)
    eps = 0.0
    loss = _offset_loss(eps, offset, h, y)
    trace = []
    for _ in range(FLUCTUATION_MAX_ITER):
        p = special.expit(offset + eps * h)
        score = float(np.sum(h * (y - p)))
        info = float(np.sum(h * h * p * (1 - p)))
        if abs(score) < 1e-11 or info <= 0.0:
            return eps, p
        step = score / info
        for _ in range(60):
            new_loss = _offset_loss(eps + step, offset, h, y)
            if new_loss <= loss + 1e-13 * (1 + abs(loss)):
                break
            step /= 2
        trace.append((eps, step, score))
        eps += step
        loss = new_loss
        if abs(step) < 1e-15 * max(1.0, abs(eps)):
            p = special.expit(offset + eps * h)
            return eps, p
    raise FluctuationError(f"fluctuation did not converge in {FLUCTUATION_MAX_ITER} "
                           f"iterations; last (eps, step, score) = {trace[-1]}")


def plugin_mean(q0, q1, probs_treat) -> float:
    """n^-1 sum_i sum_a Q(W_i, a) g*(a | W_i)."""
    return float(np.mean(q1 * probs_treat + q0 * (1.0 - probs_treat)))


def variance_conditional(q_star_observed, clever, y_scaled, scale: OutcomeScale | None = None
                         ) -> float:
    """sigma^2_Y: mean squared influence curve H (y - Q*), on the original scale."""
    ic = np.asarray(clever) * (np.asarray(y_scaled) - np.asarray(q_star_observed))
    width = 1.0 if scale is None else scale.width
    return float(np.mean(ic**2)) * width**2


def variance_population(q0_star, q1_star, marginals: MarginalIntervention, psi_scaled: float,
                        scale: OutcomeScale | None = None) -> float:
    """sigma^2_W: spread of the per-subject projections around psi, original scale.

    Only meaningful when the rule for subject i depends on W_i alone.
    """
    if not marginals.individual_level:
        raise ValueError(f"population variance needs an individual-level intervention; "
                         f"{marginals.label!r} depends on other subjects")
    p = marginals.probs_treat
    proj = q1_star * p + q0_star * (1.0 - p)
    width = 1.0 if scale is None else scale.width
    return float(np.mean((proj - psi_scaled) ** 2)) * width**2


# ---------------------------------------------------------------------------
# results

@dataclass(frozen=True)
class WeightDiagnostics:
    min: float
    max: float
    mean: float
    truncated_rows: int

    def to_dict(self):
        return {"min": self.min, "max": self.max, "mean": self.mean,
                "truncated_rows": self.truncated_rows}


@dataclass(frozen=True)
class EstimateResult:
    psi: float
    se_conditional: float
    se_population: float | None
    ci: tuple[float, float]
    epsilon: float
    weight_diag: WeightDiagnostics
    n: int
    a_bar: float
    k_value: float
    intervention: str
    is_ers: bool
    is_aers: bool
    method: str = "tmle"
    ci_level: float = 0.95
    outcome_scale: tuple[float, float] = (0.0, 1.0)
    within_bounds: bool = True
    group_id: str | None = None

    def to_dict(self) -> dict:
        out = {
            "psi": self.psi,
            "se_conditional": self.se_conditional,
            "ci": list(self.ci),
            "epsilon": self.epsilon,
            "weights": self.weight_diag.to_dict(),
            "n": self.n,
            "a_bar": self.a_bar,
            "k_value": self.k_value,
            "intervention": self.intervention,
            "is_ers": self.is_ers,
            "is_aers": self.is_aers,
            "method": self.method,
            "ci_level": self.ci_level,
            "outcome_scale": list(self.outcome_scale),
            "within_bounds": self.within_bounds,
        }
        if self.se_population is not None:
            out["se_population"] = self.se_population
        if self.group_id is not None:
            out["group_id"] = self.group_id
        return out


@dataclass(frozen=True)
class ContrastResult:
    estimate: float
    se: float
    ci: tuple[float, float]
    components: tuple[EstimateResult, EstimateResult]
    se_population: float | None = None
    label: str = ""

    def to_dict(self) -> dict:
        out = {"contrast": self.label, "estimate": self.estimate, "se": self.se,
               "ci": list(self.ci),
               "components": [c.to_dict() for c in self.components]}
        if self.se_population is not None:
            out["se_population"] = self.se_population
        return out


# ---------------------------------------------------------------------------
# nuisance fits shared between arms

@dataclass(frozen=True, eq=False)
class NuisanceFits:
    sample: Sample
    summary: ExposureSummary
    scale: OutcomeScale
    y: np.ndarray          # scaled outcome
    q_fit: GlmFit
    g_fit: GlmFit
    q_obs: np.ndarray      # initial Q at the observed exposure (scaled, unbounded)
    q0: np.ndarray
    q1: np.ndarray
    g1: np.ndarray         # g_n(1 | W_i), untruncated


def _resolve_scale(sample: Sample, scale):
    if isinstance(scale, str) and scale == "auto":
        y = sample.outcome
        if np.all((y == 0) | (y == 1)):
            return OutcomeScale(0.0, 1.0)
    return scale


def fit_nuisance(sample: Sample, kn: KnSpec | None, q_spec: ModelSpec, g_spec: ModelSpec,
                 options: EstimatorOptions | None = None) -> NuisanceFits:
    """Scale the outcome and fit the outcome regression and propensity score once."""
    options = options or EstimatorOptions()
    summary = exposure_summary(sample, kn)
    if q_spec.role is not Role.OUTCOME or g_spec.role is not Role.PROPENSITY:
        raise ValueError("q_spec must have the outcome role and g_spec the propensity role")
    scaled, scale = scale_outcome(sample, _resolve_scale(sample, options.outcome_scale))
    q_fit = fit_glm(scaled, q_spec)
    g_fit = fit_glm(scaled, g_spec)
    for fit in (q_fit, g_fit):
        if not fit.converged:
            log.warning("%s did not converge in %d iterations", fit.spec, fit.iterations)
    w, names = sample.covariates, sample.covariate_names
    q0 = predict(q_fit, w, 0, names)
    q1 = predict(q_fit, w, 1, names)
    q_obs = np.where(sample.exposure == 1, q1, q0)
    g1 = predict(g_fit, w, names=names)
    return NuisanceFits(sample, summary, scale, scaled.outcome, q_fit, g_fit,
                        q_obs, q0, q1, g1)


@dataclass(frozen=True, eq=False)
class ArmDetail:
    """Per-intervention intermediate quantities, all on the scaled outcome."""

    result: EstimateResult
    psi_scaled: float
    ic: np.ndarray    # H_i (y_i - Q(A_i, W_i)), the conditional influence curve
    proj: np.ndarray  # sum_a Q(W_i, a) g*(a | W_i)
    marginals: MarginalIntervention
    q0: np.ndarray    # Q(W_i, 0) used in the projection (targeted for TMLE)
    q1: np.ndarray
    clever: np.ndarray


def _weights(fits: NuisanceFits, marginals, truncation):
    a = fits.sample.exposure
    lo, hi = truncation
    g_obs = np.where(a == 1, fits.g1, 1.0 - fits.g1)
    truncated = int(np.sum((g_obs < lo) | (g_obs > hi)))
    h = clever_covariate(marginals, fits.g1, fits.sample, truncation)
    h0 = clever_covariate(marginals, fits.g1, fits.sample, truncation, exposure=0)
    h1 = clever_covariate(marginals, fits.g1, fits.sample, truncation, exposure=1)
    diag = WeightDiagnostics(float(h.min()), float(h.max()), float(h.mean()), truncated)
    return h, h0, h1, diag


def _finish(fits: NuisanceFits, marginals, psi_scaled, ic, proj, eps, diag, method,
            options: EstimatorOptions, q0, q1, h) -> ArmDetail:
    scale = fits.scale
    n = fits.sample.n
    var_y = float(np.mean(ic**2)) * scale.width**2
    se_c = float(np.sqrt(var_y / n))
    se_p = None
    if marginals.individual_level:
        var_w = float(np.mean((proj - psi_scaled) ** 2)) * scale.width**2
        se_p = float(np.sqrt((var_y + var_w) / n))
    psi = float(scale.unscale(psi_scaled))
    y = fits.sample.outcome
    s = fits.summary
    res = EstimateResult(
        psi=psi, se_conditional=se_c, se_population=se_p,
        ci=wald_ci(psi, se_c, options.ci_level), epsilon=float(eps), weight_diag=diag,
        n=n, a_bar=s.a_bar, k_value=s.k_value, intervention=marginals.label,
        is_ers=marginals.is_ers, is_aers=marginals.is_aers, method=method,
        ci_level=options.ci_level, outcome_scale=(scale.lower, scale.upper),
        within_bounds=bool(y.min() <= psi <= y.max()), group_id=fits.sample.group_id,
    )
    return ArmDetail(res, psi_scaled, ic, proj, marginals, q0, q1, h)


def _tmle_arm(fits: NuisanceFits, spec: InterventionSpec | MarginalIntervention,
              options: EstimatorOptions) -> ArmDetail:
    marginals = (spec if isinstance(spec, MarginalIntervention)
                 else marginalize(spec, fits.sample, fits.summary))
    h, h0, h1, diag = _weights(fits, marginals, options.truncation)
    eps, q_star_obs = fluctuate(fits.q_obs, h, fits.y, options.q_bound)
    lb = options.q_bound
    q0_star = special.expit(special.logit(_bound(fits.q0, lb)) + eps * h0)
    q1_star = special.expit(special.logit(_bound(fits.q1, lb)) + eps * h1)
    p = marginals.probs_treat
    proj = q1_star * p + q0_star * (1.0 - p)
    psi_scaled = float(np.mean(proj))
    ic = h * (fits.y - q_star_obs)
    return _finish(fits, marginals, psi_scaled, ic, proj, eps, diag, "tmle", options,
                   q0_star, q1_star, h)


def _aipw_arm(fits: NuisanceFits, spec, options: EstimatorOptions, q_override=None
              ) -> ArmDetail:
    marginals = (spec if isinstance(spec, MarginalIntervention)
                 else marginalize(spec, fits.sample, fits.summary))
    h, _, _, diag = _weights(fits, marginals, options.truncation)
    if q_override is None:
        q0, q1, q_obs = fits.q0, fits.q1, fits.q_obs
    else:
        q0, q1 = q_override
        q_obs = np.where(fits.sample.exposure == 1, q1, q0)
    p = marginals.probs_treat
    proj = q1 * p + q0 * (1.0 - p)
    ic = h * (fits.y - q_obs)
    psi_scaled = float(np.mean(ic + proj))
    return _finish(fits, marginals, psi_scaled, ic, proj, 0.0, diag, "aipw", options,
                   q0, q1, h)


# ---------------------------------------------------------------------------
# public estimators

def tmle(sample: Sample, kn: KnSpec | None, spec: InterventionSpec, q_spec: ModelSpec,
         g_spec: ModelSpec, options: EstimatorOptions | None = None) -> EstimateResult:
    """Targeted estimate of the mean outcome when exposures follow ``spec``."""
    options = options or EstimatorOptions()
    fits = fit_nuisance(sample, kn, q_spec, g_spec, options)
    return _tmle_arm(fits, spec, options).result


def tmle_from_fits(fits: NuisanceFits, spec, options: EstimatorOptions | None = None
                   ) -> EstimateResult:
    return _tmle_arm(fits, spec, options or EstimatorOptions()).result


def aipw(sample: Sample, kn: KnSpec | None, spec: InterventionSpec, q_spec: ModelSpec,
         g_spec: ModelSpec, options: EstimatorOptions | None = None) -> EstimateResult:
    """Augmented IPW estimate; may leave the outcome range (see ``within_bounds``)."""
    options = options or EstimatorOptions()
    fits = fit_nuisance(sample, kn, q_spec, g_spec, options)
    return _aipw_arm(fits, spec, options).result


def aipw_from_fits(fits: NuisanceFits, spec, options: EstimatorOptions | None = None,
                   q_override: tuple[np.ndarray, np.ndarray] | None = None) -> EstimateResult:
    """A-IPW from shared fits; ``q_override`` replaces (Q(W, 0), Q(W, 1)) on the scaled outcome."""
    return _aipw_arm(fits, spec, options or EstimatorOptions(), q_override).result


_ARM = {"tmle": _tmle_arm, "aipw": _aipw_arm}


def target(fits: NuisanceFits, spec, options: EstimatorOptions | None = None,
           method: str = "tmle") -> ArmDetail:
    """Estimate for one rule, keeping the intermediate vectors."""
    return _ARM[method](fits, spec, options or EstimatorOptions())


def contrast_from_fits(fits: NuisanceFits, spec_a, spec_b,
                       options: EstimatorOptions | None = None, method: str = "tmle"
                       ) -> ContrastResult:
    """psi(spec_a) - psi(spec_b) from shared nuisance fits.

    Each arm is targeted separately; the standard error uses the per-subject
    difference of the two arms' influence curves since both use the same data.
    """
    options = options or EstimatorOptions()
    arm = _ARM[method]
    a, b = arm(fits, spec_a, options), arm(fits, spec_b, options)
    width = fits.scale.width
    n = fits.sample.n
    estimate = a.result.psi - b.result.psi
    var_y = float(np.mean((a.ic - b.ic) ** 2)) * width**2
    se = float(np.sqrt(var_y / n))
    se_p = None
    if a.marginals.individual_level and b.marginals.individual_level:
        d = (a.proj - b.proj) - (a.psi_scaled - b.psi_scaled)
        se_p = float(np.sqrt((var_y + float(np.mean(d**2)) * width**2) / n))
    label = f"{a.marginals.label} - {b.marginals.label}"
    return ContrastResult(estimate, se, wald_ci(estimate, se, options.ci_level),
                          (a.result, b.result), se_p, label)


def direct_effect(sample: Sample, kn: KnSpec | None, q_spec: ModelSpec, g_spec: ModelSpec,
                  options: EstimatorOptions | None = None, method: str = "tmle"
                  ) -> ContrastResult:
    """Effect of own exposure with the proportion exposed held at its observed value."""
    options = options or EstimatorOptions()
    fits = fit_nuisance(sample, kn, q_spec, g_spec, options)
    return contrast_from_fits(fits, AllTreat(), AllControl(), options, method)


def overall_effect_contrast(sample: Sample, kn: KnSpec | None, spec_a: InterventionSpec,
                            spec_b: InterventionSpec, q_spec: ModelSpec, g_spec: ModelSpec,
                            options: EstimatorOptions | None = None, method: str = "tmle"
                            ) -> ContrastResult:
    """Contrast two exposure rules; both should reallocate the observed exposure share."""
    options = options or EstimatorOptions()
    fits = fit_nuisance(sample, kn, q_spec, g_spec, options)
    for spec in (spec_a, spec_b):
        m = (spec if isinstance(spec, MarginalIntervention)
             else marginalize(spec, sample, fits.summary))
        if not m.is_aers:
            warnings.warn(f"{m.label} does not preserve the observed exposure proportion; "
                          f"the contrast is not an overall effect", InterventionWarning,
                          stacklevel=2)
    return contrast_from_fits(fits, spec_a, spec_b, options, method)
