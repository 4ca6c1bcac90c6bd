"""Observed-data containers, exposure summaries, outcome scaling and CSV I/O."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class SampleError(ValueError):
    """Raised for invalid observed data (bad CSV cells, non-binary exposure, ...)."""


def _frozen(x, dtype) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Sample:
    """One group's observed data (W, A, Y).

    ``covariates`` is n x d, ``exposure`` holds 0/1 integers and ``outcome``
    finite reals. Arrays are copied and made read-only on construction.
    """

    covariates: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple[str, ...] = ()
    exposure_name: str = "a"
    outcome_name: str = "y"
    group_id: str | None = None

    def __post_init__(self):
        w = np.asarray(self.covariates, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if w.ndim != 2:
            raise SampleError("covariates must be a 2-d array")
        a_raw = np.asarray(self.exposure)
        y = np.asarray(self.outcome, dtype=float)
        n = w.shape[0]
        if a_raw.shape != (n,) or y.shape != (n,):
            raise SampleError(
                f"dimension mismatch: covariates have {n} rows, exposure "
                f"{a_raw.shape}, outcome {y.shape}"
            )
        if n < 1:
            raise SampleError("sample is empty")
        bad = np.flatnonzero((a_raw != 0) & (a_raw != 1))
        if bad.size:
            raise SampleError(f"exposure not binary at row {bad[0] + 1}")
        bad = np.flatnonzero(~np.isfinite(y))
        if bad.size:
            raise SampleError(f"outcome not finite at row {bad[0] + 1}")
        bad = np.argwhere(~np.isfinite(w))
        if bad.size:
            raise SampleError(f"covariate not finite at row {bad[0, 0] + 1}")
        names = tuple(self.covariate_names) or tuple(f"w{j + 1}" for j in range(w.shape[1]))
        if len(names) != w.shape[1]:
            raise SampleError(f"{len(names)} covariate names for {w.shape[1]} columns")
        if len(set(names)) != len(names) or self.exposure_name in names:
            raise SampleError("covariate/exposure names must be distinct")
        object.__setattr__(self, "covariates", _frozen(w, float))
        object.__setattr__(self, "exposure", _frozen(a_raw, np.int64))
        object.__setattr__(self, "outcome", _frozen(y, float))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def column(self, name: str) -> np.ndarray:
        """Return a covariate column, or the exposure, by name."""
        if name == self.exposure_name:
            return self.exposure.astype(float)
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"no covariate named {name!r}") from None

    def with_outcome(self, outcome) -> "Sample":
        return Sample(self.covariates, self.exposure, outcome, self.covariate_names,
                      self.exposure_name, self.outcome_name, self.group_id)

    def take(self, index) -> "Sample":
        """Rows in the given order (used for permutation checks and subsetting)."""
        index = np.asarray(index)
        return Sample(self.covariates[index], self.exposure[index], self.outcome[index],
                      self.covariate_names, self.exposure_name, self.outcome_name,
                      self.group_id)


# ---------------------------------------------------------------------------
# k_n summary functions

@dataclass(frozen=True)
class Identity:
    """k_n(a_bar) = a_bar."""

    def __call__(self, a_bar: float, n: int) -> float:
        return a_bar

    def __str__(self):
        return "identity"


@dataclass(frozen=True)
class Count:
    """k_n(a_bar) = n * a_bar, the number exposed."""

    def __call__(self, a_bar: float, n: int) -> float:
        return float(round(n * a_bar))

    def __str__(self):
        return "count"


@dataclass(frozen=True)
class Affine:
    """Maps a cohort proportion onto a wider proportion, e.g. clinic-wide coverage."""

    slope: float
    intercept: float = 0.0

    def __call__(self, a_bar: float, n: int) -> float:
        k = self.intercept + self.slope * a_bar
        if not 0.0 <= k <= 1.0:
            raise SampleError(f"affine k_n maps a_bar={a_bar} to {k}, outside [0, 1]")
        return k

    def __str__(self):
        return f"affine:slope={self.slope!r},intercept={self.intercept!r}"


KnSpec = Identity | Count | Affine


def parse_kn(text: str) -> KnSpec:
    """Parse ``identity``, ``count`` or ``affine:slope=<x>,intercept=<y>``."""
    text = text.strip()
    if text == "identity":
        return Identity()
    if text == "count":
        return Count()
    if text.startswith("affine"):
        _, _, rest = text.partition(":")
        kw = dict(part.split("=", 1) for part in rest.split(",") if part)
        try:
            return Affine(float(kw["slope"]), float(kw.get("intercept", 0.0)))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad affine k_n spec {text!r}") from exc
    raise ValueError(f"unknown k_n spec {text!r}")


@dataclass(frozen=True)
class ExposureSummary:
    a_bar: float
    s_n: int
    n: int
    k_value: float


def exposure_summary(sample: Sample, kn: KnSpec | None = None) -> ExposureSummary:
    """Proportion and count exposed, plus k_n of the proportion.

    Degenerate groups (nobody or everybody exposed) are rejected, since no
    reallocation of the observed exposure count can then be contrasted.
    """
    kn = Identity() if kn is None else kn
    n = sample.n
    if n < 2:
        raise SampleError(f"group {sample.group_id!r} has n={n} < 2")
    s_n = int(sample.exposure.sum())
    if s_n == 0 or s_n == n:
        raise SampleError(
            f"degenerate exposure proportion {s_n}/{n} in group {sample.group_id!r}"
        )
    a_bar = s_n / n
    return ExposureSummary(a_bar=a_bar, s_n=s_n, n=n, k_value=float(kn(a_bar, n)))


# ---------------------------------------------------------------------------
# outcome scaling

@dataclass(frozen=True)
class OutcomeScale:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"outcome scale needs lower < upper, got {self.lower}, {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def scale(self, y):
        return (np.asarray(y, dtype=float) - self.lower) / self.width

    def unscale(self, y):
        return self.lower + self.width * np.asarray(y, dtype=float)


def scale_outcome(sample: Sample, scale: OutcomeScale | str | None = "auto"
                  ) -> tuple[Sample, OutcomeScale]:
    """Map the outcome onto [0, 1].

    ``"auto"`` uses the observed min and max; an explicit OutcomeScale must
    contain every observed value.
    """
    y = sample.outcome
    if scale is None or scale == "auto":
        lo, hi = float(y.min()), float(y.max())
        if lo == hi:
            raise SampleError("outcome is constant; cannot auto-scale")
        scale = OutcomeScale(lo, hi)
    elif not isinstance(scale, OutcomeScale):
        raise ValueError(f"unrecognised outcome scale {scale!r}")
    bad = np.flatnonzero((y < scale.lower) | (y > scale.upper))
    if bad.size:
        raise SampleError(
            f"outcome {y[bad[0]]} at row {bad[0] + 1} outside bounds "
            f"[{scale.lower}, {scale.upper}]"
        )
    y_scaled = np.clip(scale.scale(y), 0.0, 1.0)
    return sample.with_outcome(y_scaled), scale


# ---------------------------------------------------------------------------
# CSV ingestion

@dataclass(frozen=True)
class Schema:
    """Column names to read from a CSV file."""

    covariates: tuple[str, ...]
    exposure: str = "a"
    outcome: str = "y"
    group: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


def _number(cell: str, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise SampleError(f"non-numeric value {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(value):
        raise SampleError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return value


def _exposure(cell: str, row: int, col: str) -> int:
    try:
        value = int(cell.strip())
    except ValueError:
        # "1.0" style cells are accepted if integral
        value_f = _number(cell, row, col)
        if value_f not in (0.0, 1.0):
            raise SampleError(f"exposure not binary at row {row}") from None
        return int(value_f)
    if value not in (0, 1):
        raise SampleError(f"exposure not binary at row {row}")
    return value


def load_sample(path: str | Path, schema: Schema) -> list[Sample]:
    """Read a CSV into one Sample per group, groups in order of first appearance.

    Row numbers in error messages count data rows from 1 (the header is not
    counted). Without a group column a single Sample is returned, which must
    have at least two rows; per-group size checks happen at estimation time.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = list(schema.covariates) + [schema.exposure, schema.outcome]
        if schema.group:
            needed.append(schema.group)
        missing = [c for c in needed if c not in header]
        if missing:
            raise SampleError(f"missing column(s) {missing} in {path}")
        rows: dict[str | None, list[tuple[list[float], int, float]]] = {}
        for i, rec in enumerate(reader, start=1):
            w = [_number(rec[c], i, c) for c in schema.covariates]
            a = _exposure(rec[schema.exposure], i, schema.exposure)
            y = _number(rec[schema.outcome], i, schema.outcome)
            key = rec[schema.group] if schema.group else None
            rows.setdefault(key, []).append((w, a, y))
    if not rows:
        raise SampleError(f"no data rows in {path}")
    samples = []
    for key, recs in rows.items():
        w = np.array([r[0] for r in recs], dtype=float).reshape(len(recs), len(schema.covariates))
        samples.append(Sample(w, [r[1] for r in recs], [r[2] for r in recs],
                              schema.covariates, schema.exposure, schema.outcome, key))
    if schema.group is None and samples[0].n < 2:
        raise SampleError(f"sample has n={samples[0].n} < 2")
    return samples


def write_sample(samples: Sample | Sequence[Sample], path: str | Path,
                 group_column: str | None = None) -> Schema:
    """Write samples to CSV so that ``load_sample`` reproduces them exactly."""
    if isinstance(samples, Sample):
        samples = [samples]
    first = samples[0]
    if len(samples) > 1 and group_column is None:
        group_column = "group"
    header = list(first.covariate_names) + [first.exposure_name, first.outcome_name]
    if group_column:
        header.append(group_column)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in samples:
            for i in range(s.n):
                row = [repr(float(v)) for v in s.covariates[i]]
                row += [str(int(s.exposure[i])), repr(float(s.outcome[i]))]
                if group_column:
                    row.append("" if s.group_id is None else str(s.group_id))
                writer.writerow(row)
    return Schema(first.covariate_names, first.exposure_name, first.outcome_name, group_column)
