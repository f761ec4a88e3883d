"""Case-control data preparation.

Ingests tabular records, applies listwise deletion, builds design matrices
with optional pairwise interactions, standardizes covariates, and computes
the sampling-correction quantities (theta1 and the log offset) implied by
a contaminated case-control design.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    """Raised for malformed inputs or schema violations."""


@dataclass(frozen=True)
class Schema:
    """Column mapping for delimited input files."""

    label: str
    covariates: tuple[str, ...]
    small_area: str | None = None
    large_area: str | None = None

    def mapped_columns(self) -> list[str]:
        cols = [self.label, *self.covariates]
        if self.small_area:
            cols.append(self.small_area)
        if self.large_area:
            cols.append(self.large_area)
        return cols


@dataclass(frozen=True)
class RawRecord:
    """One observation: a binary label, named covariates, and area ids."""

    y: int
    covariates: dict[str, float]
    small_area: str | None = None
    large_area: str | None = None


@dataclass(frozen=True)
class LoadResult:
    records: list[RawRecord]
    n_dropped: int
    n_total: int


def load_dataset(path, schema: Schema, delimiter: str = ",") -> LoadResult:
    """Read a delimited file with a header row into RawRecords.

    Rows with any missing mapped field (empty or "NA") are dropped and
    counted; surviving rows are never altered (listwise deletion).

    Raises
    ------
    DataError
        If a schema column is absent or a label value is not binary.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"unreadable file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for col in schema.mapped_columns():
            if col not in header:
                raise DataError(f"schema column {col!r} absent from {path}")
        records: list[RawRecord] = []
        n_dropped = 0
        n_total = 0
        for row in reader:
            n_total += 1
            values = {c: (row.get(c) or "").strip() for c in schema.mapped_columns()}
            if any(v in MISSING_TOKENS for v in values.values()):
                n_dropped += 1
                continue
            y_raw = values[schema.label]
            try:
                y_float = float(y_raw)
            except ValueError:
                raise DataError(f"non-binary label value {y_raw!r}") from None
            if y_float not in (0.0, 1.0):
                raise DataError(f"non-binary label value {y_raw!r}")
            try:
                covs = {c: float(values[c]) for c in schema.covariates}
            except ValueError as exc:
                raise DataError(f"non-numeric covariate value: {exc}") from None
            records.append(
                RawRecord(
                    y=int(y_float),
                    covariates=covs,
                    small_area=values.get(schema.small_area) if schema.small_area else None,
                    large_area=values.get(schema.large_area) if schema.large_area else None,
                )
            )
    return LoadResult(records=records, n_dropped=n_dropped, n_total=n_total)


INTERCEPT = "intercept"


@dataclass(frozen=True)
class DesignMatrix:
    """n x p numeric design with a leading constant column."""

    X: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise DataError("design shape does not match column names")
        if not np.all(np.isfinite(X)):
            raise DataError("design matrix contains non-finite entries")
        if self.columns[0] != INTERCEPT or not np.all(X[:, 0] == 1.0):
            raise DataError("first column must be the constant intercept")
        if len(set(self.columns)) != len(self.columns):
            raise DataError("duplicate column names")
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _term_values(term: str, record: RawRecord) -> float:
    # "a:b" interactions are products of the raw parent values
    product = 1.0
    for part in term.split(":"):
        if part not in record.covariates:
            raise DataError(f"unknown formula term {part!r}")
        product *= record.covariates[part]
    return product


def build_design(records: list[RawRecord], formula: list[str]) -> DesignMatrix:
    """Expand main-effect and pairwise-interaction terms into a matrix.

    The intercept column comes first; interaction columns ("a:b") are
    elementwise products of the raw parent columns, formed before any
    standardization.
    """
    if len(set(formula)) != len(formula):
        raise DataError("duplicate formula terms")
    columns = (INTERCEPT, *formula)
    X = np.ones((len(records), len(columns)))
    for j, term in enumerate(formula, start=1):
        X[:, j] = [_term_values(term, r) for r in records]
    return DesignMatrix(X=X, columns=columns)


@dataclass(frozen=True)
class StandardizationInfo:
    """Per-column mean and sd used for (and inverted from) standardization.

    The constant column is exempt: its mean is defined as 0 and its sd as 1
    so that applying then inverting the transform is the identity.
    """

    mean: np.ndarray
    sd: np.ndarray
    columns: tuple[str, ...]

    def apply_row(self, raw_row: np.ndarray) -> np.ndarray:
        return (np.asarray(raw_row, dtype=float) - self.mean) / self.sd


def standardize(design: DesignMatrix) -> tuple[DesignMatrix, StandardizationInfo]:
    """Center and scale every non-constant column to mean 0, sd 1.

    The sd uses the n-1 denominator. Zero-variance non-constant columns are
    rejected by name.
    """
    X = design.X.copy()
    mean = np.zeros(design.p)
    sd = np.ones(design.p)
    for j in range(1, design.p):
        mu = float(X[:, j].mean())
        s = float(X[:, j].std(ddof=1)) if design.n > 1 else 0.0
        if s <= 0.0:
            raise DataError(f"zero-variance column {design.columns[j]!r}")
        mean[j], sd[j] = mu, s
        X[:, j] = (X[:, j] - mu) / s
    info = StandardizationInfo(mean=mean, sd=sd, columns=design.columns)
    return DesignMatrix(X=X, columns=design.columns), info


def unstandardize_coefficients(beta_std, info: StandardizationInfo) -> np.ndarray:
    """Map coefficients on the standardized scale back to the raw scale.

    slope_orig[k] = slope_std[k] / sd[k];
    intercept_orig = intercept_std - sum_k slope_std[k] * mean[k] / sd[k].
    Works on a single vector (p,) or a stack of draws (S, p).
    """
    beta_std = np.asarray(beta_std, dtype=float)
    if beta_std.shape[-1] != info.mean.size:
        raise DataError("coefficient dimension does not match standardization info")
    out = beta_std / info.sd
    out[..., 0] = beta_std[..., 0] - (beta_std[..., 1:] * info.mean[1:] / info.sd[1:]).sum(axis=-1)
    return out


@dataclass(frozen=True)
class SamplingCorrection:
    """Contaminated case-control correction for one sampling stratum.

    theta1 = n1 / (n1 + pi * n_u) is the probability that a true case is
    labeled; theta0 is identically 0 (a true control can never carry a case
    label); log_offset = log(n1 / (pi * n_u) + 1) is the log relative risk
    of being sampled, added to the linear predictor.
    """

    n1: float
    n_u: float
    pi: float
    theta1: float
    log_offset: float
    theta0: float = 0.0


def sampling_correction(n1: float, n_u: float, pi: float) -> SamplingCorrection:
    if not (n1 >= 1 and n_u >= 1):
        raise DataError("need n1 >= 1 and n_u >= 1")
    if not (0.0 < pi <= 1.0):
        raise DataError(f"prevalence pi={pi} outside (0, 1]")
    theta1 = n1 / (n1 + pi * n_u)
    log_offset = math.log(n1 / (pi * n_u) + 1.0)
    return SamplingCorrection(n1=float(n1), n_u=float(n_u), pi=float(pi),
                              theta1=theta1, log_offset=log_offset)


@dataclass(frozen=True)
class CaseControlData:
    """Model-ready data: labels, standardized design, area indices, corrections.

    ``log_offset`` and ``theta1`` are per-large-area arrays of length J
    (bird's-eye mode gives each large area its own correction; worm's-eye
    mode broadcasts a single one).
    """

    y: np.ndarray
    design: DesignMatrix
    std_info: StandardizationInfo
    small_area_id: np.ndarray
    large_area_id: np.ndarray
    log_offset: np.ndarray
    theta1: np.ndarray
    small_area_names: tuple[str, ...] = field(default=())
    large_area_names: tuple[str, ...] = field(default=())
    corrections: tuple[SamplingCorrection, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        sa = np.asarray(self.small_area_id, dtype=np.int64)
        la = np.asarray(self.large_area_id, dtype=np.int64)
        if not (y.size == sa.size == la.size == self.design.n):
            raise DataError("label, design and area-index lengths disagree")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0/1")
        if y.size and (sa.min() < 0 or sa.max() >= self.n_small_areas):
            raise DataError("small-area index out of range")
        if y.size and (la.min() < 0 or la.max() >= self.n_large_areas):
            raise DataError("large-area index out of range")
        lo = np.asarray(self.log_offset, dtype=float)
        th = np.asarray(self.theta1, dtype=float)
        if lo.size != th.size:
            raise DataError("offset/theta1 lengths disagree")
        if y.size and lo.size <= la.max():
            raise DataError("every observed large area needs a correction")
        if np.any((th <= 0) | (th > 1)):
            raise DataError("theta1 must lie in (0, 1]")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "small_area_id", sa)
        object.__setattr__(self, "large_area_id", la)
        object.__setattr__(self, "log_offset", lo)
        object.__setattr__(self, "theta1", th)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def n_small_areas(self) -> int:
        if self.small_area_names:
            return len(self.small_area_names)
        return int(self.small_area_id.max()) + 1 if self.small_area_id.size else 0

    @property
    def n_large_areas(self) -> int:
        return int(self.log_offset.size)


def assemble(records: list[RawRecord], formula: list[str],
             small_area_names: list[str],
             corrections: dict[str, SamplingCorrection] | SamplingCorrection,
             large_area_names: list[str] | None = None) -> CaseControlData:
    """Build CaseControlData from raw records.

    ``small_area_names`` fixes the small-area index order (it must match the
    adjacency graph). Per-large-area corrections are passed as a dict keyed
    by large-area name; a single SamplingCorrection is broadcast to every
    large area (worm's-eye mode).
    """
    sa_index = {name: i for i, name in enumerate(small_area_names)}
    for r in records:
        if r.small_area not in sa_index:
            raise DataError(f"unknown small area {r.small_area!r}")
    small_idx = np.array([sa_index[r.small_area] for r in records], dtype=np.int64)

    design = build_design(records, formula)
    design_std, info = standardize(design)

    if large_area_names is None:
        seen: list[str] = []
        for r in records:
            la = r.large_area if r.large_area is not None else "all"
            if la not in seen:
                seen.append(la)
        large_area_names = seen
    la_index = {name: i for i, name in enumerate(large_area_names)}
    large_idx = np.array(
        [la_index[r.large_area if r.large_area is not None else "all"] for r in records],
        dtype=np.int64,
    )

    J = len(large_area_names)
    if isinstance(corrections, SamplingCorrection):
        corr_list = [corrections] * J
    else:
        observed = set(np.unique(large_idx))
        corr_list = []
        for j, name in enumerate(large_area_names):
            if name in corrections:
                corr_list.append(corrections[name])
            elif j in observed:
                raise DataError(f"no sampling correction for large area {name!r}")
            else:
                corr_list.append(SamplingCorrection(1, 1, 1.0, 1.0, 0.0))
    return CaseControlData(
        y=np.array([r.y for r in records], dtype=np.int64),
        design=design_std,
        std_info=info,
        small_area_id=small_idx,
        large_area_id=large_idx,
        log_offset=np.array([c.log_offset for c in corr_list]),
        theta1=np.array([c.theta1 for c in corr_list]),
        small_area_names=tuple(small_area_names),
        large_area_names=tuple(large_area_names),
        corrections=tuple(corr_list),
    )


def from_arrays(y, X_raw, columns, small_area_id, large_area_id,
                log_offset, theta1,
                small_area_names=None, large_area_names=None) -> CaseControlData:
    """CaseControlData from numpy arrays (simulation and testing path).

    ``X_raw`` includes the leading constant column on the raw scale;
    standardization is applied here.
    """
    design = DesignMatrix(X=np.asarray(X_raw, dtype=float), columns=tuple(columns))
    design_std, info = standardize(design)
    log_offset = np.atleast_1d(np.asarray(log_offset, dtype=float))
    theta1 = np.atleast_1d(np.asarray(theta1, dtype=float))
    L = int(np.max(small_area_id)) + 1 if len(small_area_id) else 0
    names_s = tuple(small_area_names) if small_area_names else tuple(str(i) for i in range(L))
    names_l = tuple(large_area_names) if large_area_names else tuple(str(i) for i in range(log_offset.size))
    return CaseControlData(
        y=y, design=design_std, std_info=info,
        small_area_id=small_area_id, large_area_id=large_area_id,
        log_offset=log_offset, theta1=theta1,
        small_area_names=names_s, large_area_names=names_l,
    )
