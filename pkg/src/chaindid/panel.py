"""Immutable long-format panel data model, CSV ingestion and structural validation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SCHEMA = {
    "unit": "unit",
    "period": "period",
    "y": "y",
    "cohort": "cohort",
    "x": [],
    "z": [],
    "sampled": None,
}

NEVER_TREATED = 0


class PanelError(ValueError):
    """Raised on unusable input (parse errors, contradictory rows)."""


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # "error" or "warning"
    code: str
    message: str
    unit: str | None = None
    period: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...]
    cohort_counts: dict[int, int]
    pair_counts: dict[tuple[int, int], int]

    @property
    def errors(self) -> tuple[ValidationIssue, ...]:
        return tuple(i for i in self.issues if i.severity == "error")

    @property
    def warnings(self) -> tuple[ValidationIssue, ...]:
        return tuple(i for i in self.issues if i.severity == "warning")

    @property
    def ok(self) -> bool:
        return len(self.errors) == 0

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "issues": [
                {
                    "severity": i.severity,
                    "code": i.code,
                    "message": i.message,
                    "unit": i.unit,
                    "period": i.period,
                }
                for i in self.issues
            ],
            "cohort_counts": {str(k): v for k, v in sorted(self.cohort_counts.items())},
            "pair_counts": {
                f"{a},{b}": v for (a, b), v in sorted(self.pair_counts.items())
            },
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class PanelDataset:
    """Long-format panel with explicit missingness.

    Outcomes are stored as an n x T matrix with NaN in unsampled cells, a
    boolean sampled mask, an integer first-treatment period per unit
    (0 = never treated) and optional time-invariant covariates x plus
    time-varying sampling covariates z. Periods are internally 1..T; the
    original period labels are kept for round-tripping.
    """

    def __init__(
        self,
        units,
        y: np.ndarray,
        sampled: np.ndarray,
        cohort: np.ndarray,
        covariates: np.ndarray | None = None,
        sampling_covariates: np.ndarray | None = None,
        period_offset: int = 0,
        covariate_names: tuple[str, ...] | None = None,
        sampling_covariate_names: tuple[str, ...] | None = None,
    ):
        y = np.asarray(y, dtype=float)
        if y.ndim != 2:
            raise PanelError("outcome matrix must be 2-dimensional")
        n, T = y.shape
        units = tuple(str(u) for u in units)
        if len(units) != n:
            raise PanelError("units length does not match outcome rows")
        if len(set(units)) != n:
            raise PanelError("duplicate unit identifiers")
        sampled = np.asarray(sampled, dtype=bool)
        if sampled.shape != (n, T):
            raise PanelError("sampled mask shape mismatch")
        cohort = np.asarray(cohort, dtype=np.int64)
        if cohort.shape != (n,):
            raise PanelError("cohort vector shape mismatch")
        if covariates is None:
            covariates = np.empty((n, 0), dtype=float)
        covariates = np.asarray(covariates, dtype=float)
        if covariates.shape[0] != n:
            raise PanelError("covariate matrix row mismatch")
        if not np.all(np.isfinite(covariates)):
            raise PanelError("covariates must be finite for all units")
        if sampling_covariates is not None:
            sampling_covariates = np.asarray(sampling_covariates, dtype=float)
            if sampling_covariates.shape[:2] != (n, T):
                raise PanelError("sampling covariate array shape mismatch")

        bad = (cohort != NEVER_TREATED) & (cohort < 2)
        if np.any(bad):
            u = units[int(np.where(bad)[0][0])]
            raise PanelError(
                f"unit {u}: first-treatment period must be >= 2 (period 1 is "
                "pre-treatment for everyone)"
            )
        if np.any((cohort > T)):
            u = units[int(np.where(cohort > T)[0][0])]
            raise PanelError(f"unit {u}: first-treatment period beyond horizon T={T}")

        self.units = units
        self.y = _readonly(np.where(sampled, y, np.nan))
        self.sampled = _readonly(sampled)
        self.cohort = _readonly(cohort)
        self.covariates = _readonly(covariates)
        self.sampling_covariates = (
            None if sampling_covariates is None else _readonly(sampling_covariates)
        )
        self.period_offset = int(period_offset)
        self.covariate_names = tuple(covariate_names or tuple(f"x{j + 1}" for j in range(covariates.shape[1])))
        self.sampling_covariate_names = tuple(
            sampling_covariate_names
            or tuple(
                f"z{j + 1}"
                for j in range(
                    0 if sampling_covariates is None else sampling_covariates.shape[2]
                )
            )
        )
        self._unit_index = {u: i for i, u in enumerate(units)}

    # basic geometry -----------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.units)

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def periods(self) -> np.ndarray:
        return np.arange(1, self.T + 1)

    def original_period(self, t: int) -> int:
        return t + self.period_offset

    def cohorts(self) -> np.ndarray:
        """Sorted treated cohorts present in the data."""
        c = np.unique(self.cohort)
        return c[c != NEVER_TREATED]

    # masks ---------------------------------------------------------------
    def single_period_mask(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise ValueError(f"period {t} outside 1..{self.T}")
        return self.sampled[:, t - 1]

    def observation_mask(self, t: int, k: int = 1) -> np.ndarray:
        """Indicator of units sampled at both t-k and t."""
        if k < 1 or not (1 <= t - k < t <= self.T):
            raise ValueError(f"lag k={k} out of range for t={t}, T={self.T}")
        return self.sampled[:, t - 1] & self.sampled[:, t - k - 1]

    def never_treated(self) -> np.ndarray:
        return self.cohort == NEVER_TREATED

    def not_yet_treated(self, t: int) -> np.ndarray:
        """Units untreated at period t: never treated or first treated after t."""
        return (self.cohort == NEVER_TREATED) | (self.cohort > t)

    def group(self, g: int) -> np.ndarray:
        return self.cohort == g

    def obs_counts(self) -> np.ndarray:
        return self.sampled.sum(axis=1)

    # validation ----------------------------------------------------------
    def validate(self) -> ValidationReport:
        issues: list[ValidationIssue] = []
        cohorts = self.cohorts()
        cohort_counts = {int(g): int(np.sum(self.cohort == g)) for g in cohorts}
        cohort_counts[NEVER_TREATED] = int(np.sum(self.never_treated()))

        if cohort_counts[NEVER_TREATED] == 0:
            issues.append(
                ValidationIssue(
                    "warning",
                    "NO_NEVER_TREATED",
                    "no never-treated units; only not-yet-treated controls are available",
                )
            )
        if len(cohorts) == 0:
            issues.append(
                ValidationIssue(
                    "error", "NO_TREATED_COHORT", "no treated cohort present"
                )
            )

        pair_counts: dict[tuple[int, int], int] = {}
        never = self.never_treated()
        for t in range(2, self.T + 1):
            pair = self.observation_mask(t, 1)
            pair_counts[(t - 1, t)] = int(pair.sum())
            needed = [g for g in cohorts if g <= t]
            if not needed:
                continue
            if not np.any(pair & never):
                issues.append(
                    ValidationIssue(
                        "error",
                        f"MISSING_CONTROL_PAIR({t - 1},{t})",
                        f"no never-treated unit observed at both {t - 1} and {t}",
                        period=t,
                    )
                )
            for g in needed:
                if not np.any(pair & (self.cohort == g)):
                    issues.append(
                        ValidationIssue(
                            "error",
                            f"MISSING_TREATED_PAIR(g={g};{t - 1},{t})",
                            f"no cohort-{g} unit observed at both {t - 1} and {t}",
                            period=t,
                        )
                    )

        single = self.obs_counts() < 2
        for i in np.where(single)[0]:
            issues.append(
                ValidationIssue(
                    "warning",
                    "SINGLE_OBSERVATION",
                    f"unit {self.units[i]} observed fewer than 2 periods; it "
                    "contributes to no estimator",
                    unit=self.units[i],
                )
            )
        return ValidationReport(tuple(issues), cohort_counts, pair_counts)

    # serialization -------------------------------------------------------
    def to_csv(self, path_or_buf) -> None:
        """Write the canonical long CSV (only sampled rows unless covariates
        require carrying unsampled rows via an explicit sampled flag)."""
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            f = open(path_or_buf, "w", newline="", encoding="utf-8")
            close = True
        else:
            f = path_or_buf
        try:
            w = csv.writer(f)
            header = ["unit", "period", "y", "cohort"]
            header += list(self.covariate_names)
            header += list(self.sampling_covariate_names)
            w.writerow(header)
            for i, u in enumerate(self.units):
                for t in range(1, self.T + 1):
                    if not self.sampled[i, t - 1]:
                        continue
                    row = [
                        u,
                        self.original_period(t),
                        _fmt(self.y[i, t - 1]),
                        (
                            0
                            if self.cohort[i] == NEVER_TREATED
                            else self.original_period(int(self.cohort[i]))
                        ),
                    ]
                    row += [_fmt(v) for v in self.covariates[i]]
                    if self.sampling_covariates is not None:
                        row += [_fmt(v) for v in self.sampling_covariates[i, t - 1]]
                    w.writerow(row)
        finally:
            if close:
                f.close()

    def equals(self, other: "PanelDataset") -> bool:
        if self.units != other.units or self.T != other.T:
            return False
        if not np.array_equal(self.sampled, other.sampled):
            return False
        if not np.array_equal(self.cohort, other.cohort):
            return False
        if not np.array_equal(self.y, other.y, equal_nan=True):
            return False
        if not np.array_equal(self.covariates, other.covariates):
            return False
        a, b = self.sampling_covariates, other.sampling_covariates
        if (a is None) != (b is None):
            return False
        if a is not None and not np.array_equal(a, b, equal_nan=True):
            return False
        return True


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    return format(float(v), ".17g")


def _parse_schema(schema) -> dict:
    out = dict(DEFAULT_SCHEMA)
    if schema is None:
        return out
    if isinstance(schema, (str, bytes)):
        with open(schema, "r", encoding="utf-8") as f:
            schema = json.load(f)
    for k, v in schema.items():
        if k not in out:
            raise PanelError(f"unknown schema key {k!r}")
        out[k] = v
    return out


def load_panel(source, schema=None) -> PanelDataset:
    """Read a header-bearing delimited table into a PanelDataset.

    source may be a path, a text stream, or a CSV string. schema maps the
    required roles (unit, period, y, cohort) and optional covariate column
    lists to the table's column names; a path to a JSON mapping file is
    also accepted. Without a schema, every column beyond the required roles
    is read as a time-invariant covariate; time-varying sampling covariates
    must be named explicitly under "z".
    """
    sch = _parse_schema(schema)
    close = False
    if isinstance(source, str) and "\n" in source:
        f = io.StringIO(source)
    elif isinstance(source, (str, bytes)):
        f = open(source, "r", newline="", encoding="utf-8")
        close = True
    else:
        f = source
    try:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError("empty input: no header row") from None
        header = [h.strip() for h in header]
        col = {name: j for j, name in enumerate(header)}
        for role in ("unit", "period", "y", "cohort"):
            if sch[role] not in col:
                raise PanelError(f"missing required column {sch[role]!r} for {role}")
        xcols = list(sch["x"])
        zcols = list(sch["z"])
        for c in xcols + zcols:
            if c not in col:
                raise PanelError(f"missing covariate column {c!r}")
        if not xcols and not zcols:
            # columns beyond the required roles default to unit covariates
            assigned = {sch["unit"], sch["period"], sch["y"], sch["cohort"],
                        sch["sampled"]}
            xcols = [c for c in header if c not in assigned]
        scol = sch["sampled"]
        if scol is not None and scol not in col:
            raise PanelError(f"missing sampled column {scol!r}")

        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(v.strip() == "" for v in raw):
                continue
            try:
                unit = raw[col[sch["unit"]]].strip()
                period = _parse_int(raw[col[sch["period"]]], "period", lineno)
                ystr = raw[col[sch["y"]]].strip()
                yval = np.nan if ystr == "" else _parse_float(ystr, "outcome", lineno)
                cstr = raw[col[sch["cohort"]]].strip()
                coh = 0 if cstr in ("", "0") else _parse_int(cstr, "cohort", lineno)
                xs = [_parse_float(raw[col[c]], c, lineno) for c in xcols]
                zs = [
                    np.nan
                    if raw[col[c]].strip() == ""
                    else _parse_float(raw[col[c]], c, lineno)
                    for c in zcols
                ]
                samp = True
                if scol is not None:
                    samp = _parse_int(raw[col[scol]], "sampled", lineno) != 0
            except IndexError:
                raise PanelError(f"line {lineno}: truncated row") from None
            rows.append((unit, period, yval, coh, xs, zs, samp))
    finally:
        if close:
            f.close()

    if not rows:
        raise PanelError("no data rows")

    periods = sorted({r[1] for r in rows})
    lo, hi = periods[0], periods[-1]
    T = hi - lo + 1
    offset = lo - 1

    units: list[str] = []
    unit_ix: dict[str, int] = {}
    for r in rows:
        if r[0] not in unit_ix:
            unit_ix[r[0]] = len(units)
            units.append(r[0])
    n = len(units)
    k = len(xcols)
    m = len(zcols)

    y = np.full((n, T), np.nan)
    sampled = np.zeros((n, T), dtype=bool)
    seen = np.zeros((n, T), dtype=bool)
    cohort = np.full(n, -1, dtype=np.int64)
    X = np.full((n, k), np.nan)
    Z = np.full((n, T, m), np.nan) if m else None

    for unit, period, yval, coh, xs, zs, samp in rows:
        i = unit_ix[unit]
        t = period - offset
        if seen[i, t - 1]:
            raise PanelError(f"duplicate row for unit {unit}, period {period}")
        seen[i, t - 1] = True
        coh_internal = 0 if coh == 0 else coh - offset
        if coh != 0 and not (1 <= coh_internal <= T):
            raise PanelError(
                f"unit {unit}: cohort {coh} outside the panel's period range"
            )
        if cohort[i] == -1:
            cohort[i] = coh_internal
        elif cohort[i] != coh_internal:
            raise PanelError(f"conflicting cohort values for unit {unit}")
        if samp and not np.isnan(yval):
            y[i, t - 1] = yval
            sampled[i, t - 1] = True
        if k:
            if np.all(np.isnan(X[i])):
                X[i] = xs
            elif not np.allclose(X[i], xs, equal_nan=True):
                raise PanelError(f"conflicting covariate values for unit {unit}")
        if m:
            Z[i, t - 1] = zs

    return PanelDataset(
        units,
        y,
        sampled,
        cohort,
        covariates=X if k else None,
        sampling_covariates=Z,
        period_offset=offset,
        covariate_names=tuple(xcols) if k else None,
        sampling_covariate_names=tuple(zcols) if m else None,
    )


def _parse_int(s: str, what: str, lineno: int) -> int:
    try:
        return int(s.strip())
    except ValueError:
        raise PanelError(f"line {lineno}: non-integer {what} {s.strip()!r}") from None


def _parse_float(s: str, what: str, lineno: int) -> float:
    try:
        v = float(s.strip())
    except ValueError:
        raise PanelError(f"line {lineno}: non-numeric {what} {s.strip()!r}") from None
    if not np.isfinite(v):
        raise PanelError(f"line {lineno}: non-finite {what}")
    return v
