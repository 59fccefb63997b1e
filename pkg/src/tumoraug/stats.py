"""Model ranking and paired t-tests over per-region scores."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptySelectionError, LengthMismatchError
from .volume import Region


@dataclass
class ScoreMatrix:
    models: list[str]
    regions: list[str]
    values: np.ndarray  # (n_models, n_regions); NaN marks a missing cell

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.models), len(self.regions)):
            raise ValueError(f"score matrix is {self.values.shape}, labels give "
                             f"({len(self.models)}, {len(self.regions)})")

    def row(self, model: str) -> np.ndarray:
        return self.values[self.models.index(model)]


@dataclass
class RankTable:
    models: list[str]
    regions: list[str]
    ranks: np.ndarray        # int, 1 = best
    average: np.ndarray      # per model

    def as_rows(self) -> list[dict]:
        rows = []
        for i, model in enumerate(self.models):
            row = {"model": model}
            row.update({r: int(self.ranks[i, j]) for j, r in enumerate(self.regions)})
            row["avg_rank"] = round(float(self.average[i]), 4)
            rows.append(row)
        return rows


def competition_ranks(scores: Sequence[float]) -> np.ndarray:
    """Descending "1224" ranking: tied scores share the smallest rank."""
    s = np.asarray(scores, dtype=float)
    return 1 + (s[None, :] > s[:, None]).sum(axis=1)


def rank_models(scores: ScoreMatrix) -> RankTable:
    if not scores.models or not scores.regions:
        raise ValueError("need at least one model and one region")
    if np.isnan(scores.values).any():
        raise ValueError("score matrix has missing cells")
    ranks = np.column_stack([competition_ranks(col) for col in scores.values.T])
    return RankTable(list(scores.models), list(scores.regions), ranks, ranks.mean(axis=1))


# ---------------------------------------------------------------------------
# Student t via the regularized incomplete beta function
# ---------------------------------------------------------------------------

_EPS = 1e-15
_TINY = 1e-300


def _betacf(a: float, b: float, x: float, max_iter: int = 500) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 < df:
        # small |t|: x = df/(df+t^2) rounds towards 1, so use the complement
        return 1.0 - betainc(0.5, df / 2.0, t2 / (df + t2))
    return betainc(df / 2.0, 0.5, df / (df + t2))


@dataclass
class TTestResult:
    t_statistic: float
    p_value: float
    df: int

    def as_dict(self) -> dict:
        return asdict(self)


def paired_t(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    When all differences are equal the variance is zero; the statistic is
    then reported as 0 (p = 1) for a zero mean and as +/-inf (p = 0) otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatchError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise LengthMismatchError("paired t-test needs at least two pairs")
    d = a - b
    df = n - 1
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / df
    # differences that agree to rounding error count as identical
    if var <= (1e-12 * max(1.0, abs(mean))) ** 2:
        if abs(mean) <= 1e-15:
            return TTestResult(0.0, 1.0, df)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df)
    t = mean / math.sqrt(var / n)
    return TTestResult(t, t_sf_two_sided(t, df), df)


# ---------------------------------------------------------------------------
# per-case aggregation
# ---------------------------------------------------------------------------

def aggregate_scores(per_case: Iterable, metric: str, region: Region | str) -> tuple[float, float]:
    """Mean and sample SD of ``metric`` over the cases that report ``region``.

    A single reporting case gives an SD of 0.
    """
    region = Region(region)
    values = [v for v in (c.get(region, metric) for c in per_case) if v is not None]
    if not values:
        raise EmptySelectionError(f"no case reports region {region.value}")
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------

def read_score_matrix(path) -> ScoreMatrix:
    """Header row = regions (first cell names the row-label column)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    regions = header[1:]
    if not regions:
        raise ValueError(f"{path}: no score columns")
    models, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        models.append(row[0].strip())
        try:
            values.append([float(x) if x.strip() else math.nan for x in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return ScoreMatrix(models, regions, np.array(values))


def write_rank_table(table: RankTable, path, fmt: str = "csv") -> None:
    rows = table.as_rows()
    with open(path, "w", newline="") as fh:
        if fmt == "json":
            json.dump(rows, fh, indent=2)
            fh.write("\n")
        else:
            writer = csv.DictWriter(fh, fieldnames=["model", *table.regions, "avg_rank"])
            writer.writeheader()
            writer.writerows(rows)


def paired_columns(a: ScoreMatrix, b: ScoreMatrix, row_a: str | None = None,
                   row_b: str | None = None) -> tuple[list[str], list[float], list[float]]:
    """Pick one row from each matrix and pair the values by column name."""
    ra = a.row(row_a) if row_a else a.values[0]
    rb = b.row(row_b) if row_b else b.values[0]
    missing = [r for r in a.regions if r not in b.regions]
    if missing:
        raise LengthMismatchError(f"columns {missing} missing from second table")
    cols, xs, ys = [], [], []
    for j, region in enumerate(a.regions):
        x, y = ra[j], rb[b.regions.index(region)]
        if math.isnan(x) or math.isnan(y):
            continue
        cols.append(region)
        xs.append(float(x))
        ys.append(float(y))
    return cols, xs, ys
