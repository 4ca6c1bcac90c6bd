"""Working marginal structural model across groups.

Per-group estimates psi_j are projected onto m(V_j; beta) = X_j beta by
weighted least squares. With inverse-variance weights the covariance of
beta-hat is (X' W X)^-1; for other weights the sandwich
B X' W V W X B, B = (X' W X)^-1, is used, which reduces to the former when
W = V^-1.
"""
from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

CAVEAT = ("Coefficients have a causal reading only if the group-level effect is "
          "independent of the exposure proportion given the other modifiers in the model.")


class MsmError(ValueError):
    pass


class Weighting(enum.Enum):
    INVERSE_VARIANCE = "invvar"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class GroupEffect:
    group_id: str
    psi_hat: float
    variance: float
    modifiers: dict[str, float] = field(default_factory=dict)


def parse_msm_formula(formula: str | list[str]) -> list[tuple[str, ...]]:
    """``"1 + k + G + G:k"`` (or a list of term strings) -> term tuples, intercept first."""
    if isinstance(formula, str):
        body = formula.split("~", 1)[-1]
        tokens = [t.replace(" ", "") for t in body.split("+")]
    else:
        tokens = [t.replace(" ", "") for t in formula]
    terms: list[tuple[str, ...]] = []
    intercept = True
    for tok in tokens:
        if tok in ("", "1"):
            continue
        if tok in ("0", "-1"):
            intercept = False
            continue
        if not re.fullmatch(r"[A-Za-z_][\w.]*(:[A-Za-z_][\w.]*)*", tok):
            raise MsmError(f"bad MSM term {tok!r}")
        terms.append(tuple(tok.split(":")))
    if len(set(terms)) != len(terms):
        raise MsmError(f"duplicate terms in {formula!r}")
    out = ([()] if intercept else []) + terms
    if not out:
        raise MsmError(f"MSM formula {formula!r} has no terms")
    return out


def build_design(effects: list[GroupEffect], formula) -> np.ndarray:
    """J x p design matrix, intercept column first."""
    terms = parse_msm_formula(formula)
    x = np.ones((len(effects), len(terms)))
    for j, eff in enumerate(effects):
        for c, term in enumerate(terms):
            for v in term:
                if v not in eff.modifiers:
                    raise MsmError(f"group {eff.group_id!r} has no modifier {v!r}")
                x[j, c] *= eff.modifiers[v]
    return x


@dataclass(frozen=True, eq=False)
class MsmFit:
    beta: np.ndarray
    covariance: np.ndarray
    terms: list[str]
    weights_used: np.ndarray
    weighting: Weighting
    caveat: str = CAVEAT

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def wald(self, level: float = 0.95) -> list[dict]:
        z_crit = float(special.ndtri(1 - (1 - level) / 2))
        rows = []
        for name, b, s in zip(self.terms, self.beta, self.se):
            z = b / s if s > 0 else float("nan")
            rows.append({"term": name, "estimate": float(b), "se": float(s), "z": float(z),
                         "p": float(2 * special.ndtr(-abs(z))) if s > 0 else float("nan"),
                         "ci": [float(b - z_crit * s), float(b + z_crit * s)]})
        return rows

    def predict(self, effects: list[GroupEffect]) -> np.ndarray:
        return build_design(effects, self.terms) @ self.beta

    def to_dict(self, level: float = 0.95) -> dict:
        return {"weighting": self.weighting.value, "coefficients": self.wald(level),
                "covariance": self.covariance.tolist(),
                "weights": self.weights_used.tolist(), "caveat": self.caveat}


def fit_msm(effects: list[GroupEffect], formula,
            weighting: Weighting | str = Weighting.INVERSE_VARIANCE) -> MsmFit:
    """Closed-form weighted least squares projection of the group effects."""
    weighting = Weighting(weighting)
    terms = parse_msm_formula(formula)
    labels = [":".join(t) if t else "1" for t in terms]
    x = build_design(effects, formula)
    psi = np.array([e.psi_hat for e in effects], dtype=float)
    var = np.array([e.variance for e in effects], dtype=float)
    j, p = x.shape
    if j < p:
        raise MsmError(f"{j} groups cannot identify {p} MSM coefficients")
    if weighting is Weighting.INVERSE_VARIANCE:
        if np.any(~(var > 0)):
            bad = [e.group_id for e, v in zip(effects, var) if not v > 0]
            raise MsmError(f"inverse-variance weights need positive variances; groups {bad}")
        w = 1.0 / var
    else:
        w = np.ones(j)
    xtwx = (x.T * w) @ x
    if np.linalg.matrix_rank(xtwx) < p:
        raise MsmError(f"singular MSM design for terms {labels}")
    bread = np.linalg.inv(xtwx)
    # QR on the root-weighted design avoids squaring the condition number
    sw = np.sqrt(w)
    q, r = np.linalg.qr(x * sw[:, None])
    beta = np.linalg.solve(r, q.T @ (sw * psi))
    meat = (x.T * (w * w * var)) @ x
    cov = bread @ meat @ bread
    cov = (cov + cov.T) / 2
    return MsmFit(beta, cov, labels, w, weighting)


def load_effects(path: str | Path, group: str = "group_id", psi: str = "psi_hat",
                 variance: str = "variance") -> list[GroupEffect]:
    """Read a CSV of group effects; every other column becomes a modifier."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (group, psi, variance):
            if col not in header:
                raise MsmError(f"missing column {col!r} in {path}")
        out = []
        for i, rec in enumerate(reader, start=1):
            try:
                mods = {k: float(v) for k, v in rec.items() if k not in (group, psi, variance)}
                out.append(GroupEffect(rec[group], float(rec[psi]), float(rec[variance]), mods))
            except ValueError as exc:
                raise MsmError(f"non-numeric value at row {i} of {path}: {exc}") from None
    return out
