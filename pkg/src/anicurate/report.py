"""Aggregate per-sample metrics into per-model tables and human alignment.

Metric means are scaled to 0-100 and rounded to two decimals; human 1-5
ratings map affinely onto the same range. Correlations between metric and
human series are reported as both Pearson and Spearman (average ranks for
ties) per dimension across models.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.stats import rankdata

from .evalkit import METRICS, MetricVector

DIMENSIONS = METRICS  # Table column order: smoothness..character

# human ratings ingest schema; the trailing "overall" column is optional
HUMAN_CSV_COLUMNS = ("rater", "entry", "model", "smooth", "motion", "appeal", "tvc", "ivc", "ipc")
_HUMAN_TO_DIMENSION = dict(zip(("smooth", "motion", "appeal", "tvc", "ivc", "ipc"), DIMENSIONS))


@dataclass(frozen=True)
class SampleResult:
    """One model's metric vector on one benchmark entry."""

    model_id: str
    entry_id: str
    metrics: MetricVector
    failed: frozenset[str] = frozenset()
    notes: tuple[tuple[str, str], ...] = ()

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model_id,
                "entry": self.entry_id,
                "metrics": self.metrics.to_dict(),
                "failed": sorted(self.failed),
                "notes": dict(self.notes),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SampleResult":
        data = json.loads(line)
        return cls(
            model_id=data["model"],
            entry_id=data["entry"],
            metrics=MetricVector.from_dict(data["metrics"]),
            failed=frozenset(data.get("failed", [])),
            notes=tuple(sorted(dict(data.get("notes", {})).items())),
        )


@dataclass(frozen=True)
class HumanRating:
    """One rater's 1-5 scores for one (entry, model) pair."""

    rater: str
    entry: str
    model: str
    ratings: tuple[tuple[str, int], ...]  # (dimension, 1..5)
    overall: int | None = None

    def __post_init__(self) -> None:
        for dim, value in self.ratings:
            if dim not in DIMENSIONS:
                raise ValueError(f"unknown rating dimension {dim!r}")
            if not 1 <= value <= 5 or int(value) != value:
                raise ValueError(f"rating for {dim} must be an integer 1..5, got {value}")
        if self.overall is not None and not 1 <= self.overall <= 5:
            raise ValueError(f"overall rating must be 1..5, got {self.overall}")


class Cell(NamedTuple):
    value: float | None  # 0-100 scale, rounded to 2 decimals; None when empty
    used: int
    total: int


def aggregate(results: Iterable[SampleResult]) -> dict[str, dict[str, Cell]]:
    """Per-model per-dimension means on the 0-100 scale with coverage.

    Failed metrics are excluded from the mean but counted in the coverage
    denominator; not-applicable (None) values are excluded from both the
    numerator and the `used` count. Summation uses math.fsum, so input
    order cannot change the output.
    """
    by_model: dict[str, list[SampleResult]] = {}
    for result in results:
        by_model.setdefault(result.model_id, []).append(result)
    table: dict[str, dict[str, Cell]] = {}
    for model, samples in sorted(by_model.items()):
        row: dict[str, Cell] = {}
        for dim in DIMENSIONS:
            values = [
                getattr(s.metrics, dim)
                for s in samples
                if dim not in s.failed and getattr(s.metrics, dim) is not None
            ]
            if values:
                mean = math.fsum(values) / len(values)
                row[dim] = Cell(round(mean * 100.0, 2), len(values), len(samples))
            else:
                row[dim] = Cell(None, 0, len(samples))
        table[model] = row
    return table


def human_mean(ratings: Iterable[HumanRating]) -> dict[str, dict[str, float]]:
    """Per-model per-dimension mean human rating, mapped 1..5 -> 0..100.

    The returned rows include an "overall" key when any rating carried one.
    """
    sums: dict[str, dict[str, list[int]]] = {}
    for rating in ratings:
        row = sums.setdefault(rating.model, {})
        for dim, value in rating.ratings:
            row.setdefault(dim, []).append(value)
        if rating.overall is not None:
            row.setdefault("overall", []).append(rating.overall)
    table: dict[str, dict[str, float]] = {}
    for model, row in sorted(sums.items()):
        table[model] = {
            dim: (math.fsum(values) / len(values) - 1.0) / 4.0 * 100.0
            for dim, values in row.items()
        }
    return table


class CorrelationResult(NamedTuple):
    pearson: float | None
    spearman: float | None


def alignment(
    metric_cells: dict[str, dict[str, float]],
    human_cells: dict[str, dict[str, float]],
) -> dict[str, CorrelationResult]:
    """Pearson and Spearman correlation per dimension across models.

    Needs at least three models present in both tables. Dimensions missing
    a value for any common model are skipped; zero variance in either
    series makes the coefficient undefined (None).
    """
    models = sorted(set(metric_cells) & set(human_cells))
    if len(models) < 3:
        raise ValueError(f"alignment needs >= 3 models, got {len(models)}")
    out: dict[str, CorrelationResult] = {}
    for dim in DIMENSIONS:
        xs, ys = [], []
        complete = True
        for model in models:
            x = metric_cells[model].get(dim)
            y = human_cells[model].get(dim)
            if x is None or y is None:
                complete = False
                break
            xs.append(float(x))
            ys.append(float(y))
        if not complete:
            continue
        out[dim] = CorrelationResult(
            pearson=_pearson(np.asarray(xs), np.asarray(ys)),
            spearman=_pearson(rankdata(xs), rankdata(ys)),
        )
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


# ---------------------------------------------------------------------------
# rendering


def _cell_text(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def render(
    table: dict[str, dict[str, Cell]],
    human_overall: dict[str, float] | None = None,
    fmt: str = "markdown",
) -> str:
    """Render the aggregate table as Markdown or CSV.

    Rows are models (sorted); columns follow the fixed dimension order with
    an optional leading human column. Empty cells render as "-".
    """
    header = ["model"]
    if human_overall is not None:
        header.append("human")
    header.extend(DIMENSIONS)
    rows = []
    for model in sorted(table):
        row = [model]
        if human_overall is not None:
            row.append(_cell_text(human_overall.get(model)))
        row.extend(_cell_text(table[model][dim].value) for dim in DIMENSIONS)
        rows.append(row)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join("---" for _ in header) + "|",
        ]
        lines.extend("| " + " | ".join(row) + " |" for row in rows)
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r} (expected 'markdown' or 'csv')")


def parse_report_csv(text: str) -> dict[str, dict[str, float | None]]:
    """Load a CSV report back into {model: {column: value}} ("-" -> None)."""
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise ValueError("empty report")
    header = rows[0]
    if header[0] != "model":
        raise ValueError(f"first column must be 'model', got {header[0]!r}")
    out: dict[str, dict[str, float | None]] = {}
    for row in rows[1:]:
        if not row:
            continue
        out[row[0]] = {
            col: (None if cell == "-" else float(cell))
            for col, cell in zip(header[1:], row[1:])
        }
    return out


def render_alignment(correlations: dict[str, CorrelationResult]) -> str:
    """Markdown table of per-dimension correlation coefficients."""
    lines = [
        "| dimension | pearson | spearman |",
        "|---|---|---|",
    ]
    for dim in DIMENSIONS:
        if dim not in correlations:
            continue
        corr = correlations[dim]
        pearson = "undefined" if corr.pearson is None else f"{corr.pearson:.4f}"
        spearman = "undefined" if corr.spearman is None else f"{corr.spearman:.4f}"
        lines.append(f"| {dim} | {pearson} | {spearman} |")
    return "\n".join(lines) + "\n"


def load_human_ratings(text: str) -> list[HumanRating]:
    """Parse the human-ratings CSV.

    Schema: rater,entry,model,smooth,motion,appeal,tvc,ivc,ipc with an
    optional trailing "overall" column that feeds the report's human
    column.
    """
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows:
        raise ValueError("empty ratings file")
    header = tuple(rows[0])
    if header[: len(HUMAN_CSV_COLUMNS)] != HUMAN_CSV_COLUMNS:
        raise ValueError(
            f"ratings header must start with {','.join(HUMAN_CSV_COLUMNS)}, got {','.join(header)}"
        )
    has_overall = len(header) > len(HUMAN_CSV_COLUMNS) and header[len(HUMAN_CSV_COLUMNS)] == "overall"
    ratings = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) < len(HUMAN_CSV_COLUMNS):
            raise ValueError(f"line {lineno}: expected >= {len(HUMAN_CSV_COLUMNS)} columns")
        values = tuple(
            (_HUMAN_TO_DIMENSION[col], int(cell))
            for col, cell in zip(HUMAN_CSV_COLUMNS[3:], row[3:])
        )
        overall = int(row[len(HUMAN_CSV_COLUMNS)]) if has_overall else None
        ratings.append(
            HumanRating(rater=row[0], entry=row[1], model=row[2], ratings=values, overall=overall)
        )
    return ratings
