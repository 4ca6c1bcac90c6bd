"""Small GLM engine for the outcome regression and the propensity score.

Fits are maximum likelihood via iteratively reweighted least squares. For the
logit and identity links this is Newton's method; for probit the working
weights come from the observed information of the Bernoulli likelihood, so it
is Newton's method as well.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass

import numpy as np
from scipy import special

from .data import Sample

MAX_ITER = 100
TOL = 1e-10
WEIGHT_FLOOR = 1e-10
SEPARATION_ETA = 30.0
SEPARATION_FIT = 1e-6


class Link(enum.Enum):
    LOGIT = "logit"
    PROBIT = "probit"
    IDENTITY = "identity"

    def inverse(self, eta):
        if self is Link.LOGIT:
            return special.expit(eta)
        if self is Link.PROBIT:
            return special.ndtr(eta)
        return np.asarray(eta, dtype=float)

    def __call__(self, mu):
        if self is Link.LOGIT:
            return special.logit(mu)
        if self is Link.PROBIT:
            return special.ndtri(mu)
        return np.asarray(mu, dtype=float)


class Role(enum.Enum):
    OUTCOME = "outcome"
    PROPENSITY = "propensity"


class GlmError(ValueError):
    pass


class FormulaError(ValueError):
    pass


Term = tuple[str, ...]  # () is the intercept; ("w", "a") an interaction


def term_label(term: Term) -> str:
    return ":".join(term) if term else "1"


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[Term, ...]
    link: Link = Link.LOGIT
    role: Role = Role.OUTCOME
    response: str = "y"

    def __post_init__(self):
        if not self.terms:
            raise FormulaError("model needs at least one term")
        if len(set(self.terms)) != len(self.terms):
            raise FormulaError(f"duplicate terms in {self}")

    @property
    def variables(self) -> set[str]:
        return {v for t in self.terms for v in t}

    @property
    def has_intercept(self) -> bool:
        return () in self.terms

    @property
    def labels(self) -> list[str]:
        return [term_label(t) for t in self.terms]

    def __str__(self):
        rhs = " + ".join(self.labels)
        return f"{self.response} ~ {rhs} [{self.link.value}]"

    def check(self, sample: Sample) -> None:
        """Validate the spec against a sample's column names."""
        known = set(sample.covariate_names) | {sample.exposure_name}
        unknown = sorted(self.variables - known)
        if unknown:
            raise FormulaError(f"{self}: unknown variable(s) {unknown}")
        if self.role is Role.PROPENSITY and sample.exposure_name in self.variables:
            raise FormulaError(f"{self}: propensity model may not use the exposure")


_TERM_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*(:[A-Za-z_][A-Za-z0-9_.]*)*$")


def parse_formula(text: str, role: Role | str = Role.OUTCOME) -> ModelSpec:
    """Parse ``"y ~ 1 + w1 + a + w1:a"`` or ``"a ~ 1 + w1 [probit]"``.

    The link defaults to logit. ``0`` or ``-1`` drops the intercept; without
    either an intercept is added.
    """
    role = Role(role)
    link = Link.LOGIT
    body = text.strip()
    m = re.search(r"\[\s*(\w+)\s*\]\s*$", body)
    if m:
        try:
            link = Link(m.group(1).lower())
        except ValueError:
            raise FormulaError(f"unknown link {m.group(1)!r} in formula {text!r}") from None
        body = body[: m.start()].strip()
    if body.count("~") != 1:
        raise FormulaError(f"formula {text!r} must contain exactly one '~'")
    lhs, rhs = (s.strip() for s in body.split("~"))
    if not rhs:
        raise FormulaError(f"formula {text!r} has an empty right-hand side")
    if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.]*", lhs):
        raise FormulaError(f"bad response {lhs!r} in formula {text!r}")
    intercept = True
    terms: list[Term] = []
    for raw in re.split(r"\s*\+\s*", re.sub(r"-\s*1\b", "+ -1", rhs)):
        tok = raw.replace(" ", "")
        if tok in ("", "+"):
            continue
        if tok == "1":
            continue
        if tok in ("0", "-1"):
            intercept = False
            continue
        if not _TERM_RE.match(tok):
            raise FormulaError(f"bad term {tok!r} in formula {text!r}")
        parts = tuple(tok.split(":"))
        if len(parts) > 2:
            raise FormulaError(f"only pairwise interactions are supported: {tok!r} in {text!r}")
        terms.append(parts)
    if not intercept and not terms:
        raise FormulaError(f"formula {text!r} has no terms")
    all_terms = ([()] if intercept else []) + terms
    return ModelSpec(tuple(all_terms), link, role, lhs)


def design_matrix(spec: ModelSpec, columns, n: int) -> np.ndarray:
    """Evaluate the spec's terms; ``columns`` maps variable name -> vector."""
    cols = []
    for term in spec.terms:
        col = np.ones(n)
        for v in term:
            try:
                col = col * np.asarray(columns[v], dtype=float)
            except KeyError:
                raise FormulaError(f"{spec}: variable {v!r} not available") from None
        cols.append(col)
    return np.column_stack(cols)


def sample_columns(sample: Sample, exposure=None) -> dict[str, np.ndarray]:
    cols = {name: sample.covariates[:, j] for j, name in enumerate(sample.covariate_names)}
    a = sample.exposure if exposure is None else exposure
    cols[sample.exposure_name] = np.broadcast_to(np.asarray(a, dtype=float), (sample.n,))
    return cols


@dataclass(frozen=True, eq=False)
class GlmFit:
    spec: ModelSpec
    coefficients: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    covariate_names: tuple[str, ...] = ()
    exposure_name: str = "a"

    def summary(self) -> dict[str, float]:
        return dict(zip(self.spec.labels, map(float, self.coefficients)))


def _collinear_columns(x: np.ndarray, labels: list[str]) -> list[str]:
    bad, kept = [], []
    for j in range(x.shape[1]):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial) < len(kept) + 1:
            bad.append(labels[j])
        else:
            kept.append(j)
    return bad


def _deviance(link: Link, y, mu, eta) -> float:
    if link is Link.IDENTITY:
        return float(np.sum((y - mu) ** 2))
    if link is Link.PROBIT:
        log_p, log_q = special.log_ndtr(eta), special.log_ndtr(-eta)
    else:
        log_p, log_q = -np.logaddexp(0, -eta), -np.logaddexp(0, eta)
    ll = y * log_p + (1 - y) * log_q
    sat = special.xlogy(y, y) + special.xlogy(1 - y, 1 - y)
    return float(2 * np.sum(sat - ll))


def _working(link: Link, y, eta):
    """Score contribution and (observed) information weight per row, on the eta scale."""
    if link is Link.LOGIT:
        mu = special.expit(eta)
        return y - mu, mu * (1 - mu)
    # probit: d/deta log Phi(eta) = phi/Phi, computed in log space
    log_phi = -0.5 * eta**2 - 0.5 * np.log(2 * np.pi)
    lam1 = np.exp(log_phi - special.log_ndtr(eta))
    lam0 = np.exp(log_phi - special.log_ndtr(-eta))
    score = y * lam1 - (1 - y) * lam0
    info = y * lam1 * (eta + lam1) + (1 - y) * lam0 * (lam0 - eta)
    return score, info


def _wls(x, w, z):
    sw = np.sqrt(w)
    q, r = np.linalg.qr(x * sw[:, None])
    return np.linalg.solve(r, q.T @ (sw * z))


def fit_arrays(x: np.ndarray, y: np.ndarray, spec: ModelSpec) -> GlmFit:
    """Fit on a prepared design matrix; see ``fit_glm``."""
    labels = spec.labels
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise GlmError(f"{spec}: design is rank deficient; collinear column(s) "
                       f"{_collinear_columns(x, labels)}")
    link = spec.link
    if link is Link.IDENTITY:
        beta = _wls(x, np.ones(len(y)), y)
        mu = x @ beta
        return GlmFit(spec, beta, True, 1, _deviance(link, y, mu, mu))
    if np.any((y < 0) | (y > 1)):
        raise GlmError(f"{spec}: response must lie in [0, 1] for a {link.value} link")

    if x.shape[1] == 1 and np.all(x == x[0, 0]) and 0 < np.mean(y) < 1:
        # constant column only: the MLE is link(mean) in closed form
        beta = np.array([float(link(np.mean(y))) / x[0, 0]])
        eta = x @ beta
        return GlmFit(spec, beta, True, 0, _deviance(link, y, link.inverse(eta), eta))

    beta = np.zeros(x.shape[1])
    eta = x @ beta
    dev = _deviance(link, y, link.inverse(eta), eta)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        score, info = _working(link, y, eta)
        if np.all(np.abs(eta) > SEPARATION_ETA):
            raise GlmError(f"{spec}: separation detected (all |linear predictor| > "
                           f"{SEPARATION_ETA:g})")
        if np.max(np.abs(x.T @ score)) < TOL:
            converged = True
            break
        info = np.maximum(info, WEIGHT_FLOOR)
        step = _wls(x, info, score / info)
        # step halving on deviance increase
        for _ in range(40):
            new_beta = beta + step
            new_eta = x @ new_beta
            new_dev = _deviance(link, y, link.inverse(new_eta), new_eta)
            if np.isfinite(new_dev) and new_dev <= dev + 1e-12 * (1 + abs(dev)):
                break
            step = step / 2
        change = np.max(np.abs(new_beta - beta))
        improving = new_dev < dev - 1e-12 * (1 + abs(dev))
        beta, eta, dev = new_beta, new_eta, new_dev
        if np.all(np.abs(eta) > SEPARATION_ETA) and improving:
            raise GlmError(f"{spec}: separation detected (all |linear predictor| > "
                           f"{SEPARATION_ETA:g} and likelihood still improving)")
        if change < TOL:
            converged = True
            break
    binary = np.all((y == 0) | (y == 1))
    if binary and np.max(np.abs(y - link.inverse(eta))) < SEPARATION_FIT:
        raise GlmError(f"{spec}: separation detected (fitted probabilities reproduce the "
                       f"response to within {SEPARATION_FIT:g})")
    if binary and not converged and np.max(np.abs(eta)) > SEPARATION_ETA:
        raise GlmError(f"{spec}: separation detected (no convergence, max |linear predictor| "
                       f"> {SEPARATION_ETA:g})")
    return GlmFit(spec, beta, converged, it, dev)


def fit_glm(sample: Sample, spec: ModelSpec, response=None) -> GlmFit:
    """Maximum-likelihood fit of ``spec`` on ``sample``.

    The response defaults to the sample outcome for outcome models and the
    exposure for propensity models. Outcome models with logit or probit link
    expect a response already scaled to [0, 1] (quasi-binomial fit).
    """
    spec.check(sample)
    if response is None:
        response = sample.exposure if spec.role is Role.PROPENSITY else sample.outcome
    y = np.asarray(response, dtype=float)
    x = design_matrix(spec, sample_columns(sample), sample.n)
    fit = fit_arrays(x, y, spec)
    return GlmFit(fit.spec, fit.coefficients, fit.converged, fit.iterations, fit.deviance,
                  sample.covariate_names, sample.exposure_name)


def predict(fit: GlmFit, covariates, exposure=None, names=None) -> np.ndarray:
    """Mean-scale predictions at the given covariates (and exposure level).

    ``exposure`` may be a scalar (0 or 1 for counterfactual predictions) or a
    vector. ``names`` defaults to the covariate names the model was fitted on.
    """
    w = np.asarray(covariates, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    names = tuple(names) if names is not None else fit.covariate_names
    if len(names) != w.shape[1]:
        raise FormulaError(f"{fit.spec}: got {w.shape[1]} covariate columns for names {names}")
    missing = (fit.spec.variables - {fit.exposure_name}) - set(names)
    if missing:
        raise FormulaError(f"{fit.spec}: covariate(s) {sorted(missing)} not supplied")
    cols = {name: w[:, j] for j, name in enumerate(names)}
    if fit.exposure_name in fit.spec.variables:
        if exposure is None:
            raise FormulaError(f"{fit.spec}: exposure required for prediction")
        cols[fit.exposure_name] = np.broadcast_to(np.asarray(exposure, dtype=float), (w.shape[0],))
    x = design_matrix(fit.spec, cols, w.shape[0])
    return fit.spec.link.inverse(x @ fit.coefficients)
