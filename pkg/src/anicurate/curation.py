"""Clip filtering, threshold calibration, and manifest emission.

The filter gate combines four dimensions: text-cover fraction, optical-flow
rate, aesthetic score, and duration. Duration bounds are hard (2 s to 20 s,
closed interval); the other three thresholds are either supplied directly or
calibrated against a retention target by an equal-quantile search.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .media import parse_fps

log = logging.getLogger(__name__)

DURATION_MIN_SECONDS = 2.0
DURATION_MAX_SECONDS = 20.0

# verdict reasons are emitted in this order; duration is the hard gate
DIMENSION_ORDER = ("duration", "text_cover", "flow", "aesthetic")


class CalibrationError(RuntimeError):
    """Raised when no threshold setting can reach the retention target."""


class ManifestError(RuntimeError):
    """Raised when manifest emission aborts (e.g., excess caption failures)."""


class MissingScoreError(ValueError):
    """Raised when a filter dimension has no score to test."""


@dataclass(frozen=True)
class ClipScores:
    """Per-clip filter inputs. Unset dimensions are None until scored."""

    text_cover: float | None = None
    flow: float | None = None
    aesthetic: float | None = None
    duration: float | None = None
    frame_count: int | None = None

    def __post_init__(self) -> None:
        if self.text_cover is not None and not 0.0 <= self.text_cover <= 1.0:
            raise ValueError(f"text_cover must be in [0, 1], got {self.text_cover}")
        if self.flow is not None and self.flow < 0:
            raise ValueError(f"flow must be >= 0, got {self.flow}")
        if self.aesthetic is not None and not 0.0 <= self.aesthetic <= 10.0:
            raise ValueError(f"aesthetic must be in [0, 10], got {self.aesthetic}")
        if self.duration is not None and self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.frame_count is not None and self.frame_count < 1:
            raise ValueError(f"frame_count must be >= 1, got {self.frame_count}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ClipScores":
        return cls(**data)


@dataclass(frozen=True)
class FilterRule:
    """Pass thresholds for the four filter dimensions."""

    text_cover_max: float
    flow_min: float
    flow_max: float
    aesthetic_min: float
    duration_min: float = DURATION_MIN_SECONDS
    duration_max: float = DURATION_MAX_SECONDS

    def __post_init__(self) -> None:
        if not self.flow_min < self.flow_max:
            raise ValueError(f"flow_min must be < flow_max, got [{self.flow_min}, {self.flow_max}]")
        if not self.duration_min < self.duration_max:
            raise ValueError(
                f"duration_min must be < duration_max, got "
                f"[{self.duration_min}, {self.duration_max}]"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FilterRule":
        return cls(**data)


@dataclass(frozen=True)
class Verdict:
    """Pass/fail plus the dimensions that failed, in DIMENSION_ORDER."""

    passed: bool
    reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class ClipRecord:
    """A scored clip with optional verdict, caption, and tags."""

    clip_id: str
    source_id: str
    frame_start: int
    frame_end: int
    fps: Fraction
    scores: ClipScores
    verdict: Verdict | None = None
    caption: str | None = None
    tags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.fps, Fraction):
            object.__setattr__(self, "fps", parse_fps(self.fps))
        if not 0 <= self.frame_start < self.frame_end:
            raise ValueError(
                f"bad frame range [{self.frame_start}, {self.frame_end}) for {self.clip_id}"
            )


def apply_filter(record: ClipRecord | ClipScores, rule: FilterRule) -> Verdict:
    """Evaluate all four dimensions; pass only when every one is inside bounds.

    Bounds are closed on both ends. A dimension with no score raises
    MissingScoreError naming it.
    """
    scores = record.scores if isinstance(record, ClipRecord) else record
    checks: dict[str, Callable[[], bool]] = {
        "duration": lambda: rule.duration_min <= scores.duration <= rule.duration_max,
        "text_cover": lambda: scores.text_cover <= rule.text_cover_max,
        "flow": lambda: rule.flow_min <= scores.flow <= rule.flow_max,
        "aesthetic": lambda: scores.aesthetic >= rule.aesthetic_min,
    }
    reasons = []
    for dim in DIMENSION_ORDER:
        if getattr(scores, dim) is None:
            raise MissingScoreError(f"missing score for dimension '{dim}'")
        if not checks[dim]():
            reasons.append(dim)
    return Verdict(passed=not reasons, reasons=tuple(reasons))


def calibrate(
    scores: Sequence[ClipScores],
    target_retention: float,
    tolerance: float = 0.10,
) -> FilterRule:
    """Solve thresholds so the joint pass rate hits the retention target.

    Duration bounds stay fixed at [2 s, 20 s]. The three remaining
    thresholds are set at a shared per-dimension quantile level q (two-sided
    for flow) found by bisection, so the measured retention on this sample
    lands within +-tolerance relative of the target. Input order does not
    matter: every quantile is computed on sorted copies.
    """
    if len(scores) < 100:
        raise ValueError(f"calibration needs >= 100 samples, got {len(scores)}")
    if not 0.0 < target_retention < 1.0:
        raise CalibrationError(
            f"target retention must be in (0, 1), got {target_retention}"
        )
    arrays = {}
    for dim in ("text_cover", "flow", "aesthetic", "duration"):
        vals = [getattr(s, dim) for s in scores]
        if any(v is None for v in vals):
            raise MissingScoreError(f"missing score for dimension '{dim}'")
        arrays[dim] = np.sort(np.asarray(vals, dtype=np.float64))

    tc = np.asarray([s.text_cover for s in scores])
    fl = np.asarray([s.flow for s in scores])
    ae = np.asarray([s.aesthetic for s in scores])
    du = np.asarray([s.duration for s in scores])
    duration_pass = (du >= DURATION_MIN_SECONDS) & (du <= DURATION_MAX_SECONDS)
    max_retention = float(duration_pass.mean())

    def rule_at(q: float) -> FilterRule:
        text_cover_max = float(np.quantile(arrays["text_cover"], q))
        aesthetic_min = float(np.quantile(arrays["aesthetic"], 1.0 - q))
        flow_min = float(np.quantile(arrays["flow"], (1.0 - q) / 2.0))
        flow_max = float(np.quantile(arrays["flow"], (1.0 + q) / 2.0))
        if flow_min >= flow_max:
            flow_max = flow_min + 1e-9
        return FilterRule(
            text_cover_max=text_cover_max,
            flow_min=flow_min,
            flow_max=flow_max,
            aesthetic_min=aesthetic_min,
        )

    def retention_at(q: float) -> float:
        rule = rule_at(q)
        passed = (
            duration_pass
            & (tc <= rule.text_cover_max)
            & (fl >= rule.flow_min)
            & (fl <= rule.flow_max)
            & (ae >= rule.aesthetic_min)
        )
        return float(passed.mean())

    if target_retention > max_retention * (1.0 + tolerance):
        raise CalibrationError(
            f"target {target_retention} unreachable: duration bounds alone cap "
            f"retention at {max_retention:.4f} (achievable range 0..{max_retention:.4f})"
        )

    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if retention_at(mid) < target_retention:
            lo = mid
        else:
            hi = mid
    best_q, best_err = hi, math.inf
    for q in (lo, hi):
        err = abs(retention_at(q) / target_retention - 1.0)
        if err < best_err:
            best_q, best_err = q, err
    if best_err > tolerance:
        raise CalibrationError(
            f"could not land within {tolerance:.0%} of target {target_retention}: "
            f"closest achieved retention {retention_at(best_q):.5f}"
        )
    return rule_at(best_q)


@dataclass(frozen=True)
class HistogramBin:
    dimension: str
    bin_lo: float
    bin_hi: float
    count: int


def histogram_report(
    scores: Sequence[ClipScores], bins_per_dim: int = 16
) -> list[HistogramBin]:
    """Equal-width histograms of the four filter dimensions.

    Bins span the observed range of each dimension (widened by +-0.5 when
    all values coincide); per-dimension counts sum to the record count.
    """
    if not scores:
        raise ValueError("histogram needs at least one record")
    if bins_per_dim < 1:
        raise ValueError(f"bins_per_dim must be >= 1, got {bins_per_dim}")
    rows: list[HistogramBin] = []
    for dim in ("duration", "text_cover", "aesthetic", "flow"):
        vals = [getattr(s, dim) for s in scores]
        if any(v is None for v in vals):
            raise MissingScoreError(f"missing score for dimension '{dim}'")
        arr = np.asarray(vals, dtype=np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(arr, bins=bins_per_dim, range=(lo, hi))
        for i in range(bins_per_dim):
            rows.append(
                HistogramBin(dim, float(edges[i]), float(edges[i + 1]), int(counts[i]))
            )
    return rows


def format_histogram_csv(rows: Iterable[HistogramBin]) -> str:
    lines = ["dimension,bin_lo,bin_hi,count"]
    for row in rows:
        lines.append(f"{row.dimension},{row.bin_lo!r},{row.bin_hi!r},{row.count}")
    return "\n".join(lines) + "\n"


@dataclass
class ManifestStats:
    written: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (clip_id, reason)


def build_manifest(
    records: Sequence[ClipRecord],
    caption_provider,
    out: TextIO,
    max_failure_fraction: float = 0.10,
) -> ManifestStats:
    """Write one JSON line per passing record, captions from the provider.

    Records without a passing verdict are dropped. A provider failure or an
    empty caption skips the record with a logged reason; when skips exceed
    max_failure_fraction of the passing records, the run aborts with
    ManifestError. Output is ordered by clip id.
    """
    passing = sorted(
        (r for r in records if r.verdict is not None and r.verdict.passed),
        key=lambda r: r.clip_id,
    )
    stats = ManifestStats()
    lines: list[str] = []
    for record in passing:
        caption = record.caption
        if caption is None:
            try:
                caption = caption_provider.caption(
                    {
                        "clip_id": record.clip_id,
                        "source_id": record.source_id,
                        "frame_start": record.frame_start,
                        "frame_end": record.frame_end,
                    }
                )
            except Exception as exc:  # provider boundary: degrade per record
                stats.skipped.append((record.clip_id, f"caption provider failed: {exc}"))
                log.warning("skipping %s: caption provider failed: %s", record.clip_id, exc)
                continue
        if not caption:
            stats.skipped.append((record.clip_id, "empty caption"))
            log.warning("skipping %s: empty caption", record.clip_id)
            continue
        lines.append(manifest_line(record, caption))
    if passing and len(stats.skipped) > max_failure_fraction * len(passing):
        raise ManifestError(
            f"{len(stats.skipped)} of {len(passing)} records failed captioning "
            f"(limit {max_failure_fraction:.0%})"
        )
    for line in lines:
        out.write(line + "\n")
    stats.written = len(lines)
    return stats


def manifest_line(record: ClipRecord, caption: str) -> str:
    payload = {
        "id": record.clip_id,
        "source": record.source_id,
        "frame_start": record.frame_start,
        "frame_end": record.frame_end,
        "fps": str(record.fps),
        "scores": record.scores.to_dict(),
        "caption": caption,
        "tags": list(record.tags),
    }
    return json.dumps(payload, sort_keys=True)


def load_manifest(stream: TextIO | Iterable[str]) -> list[ClipRecord]:
    """Parse manifest JSONL back into records (lossless round trip)."""
    records = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON: {exc}") from exc
        try:
            records.append(
                ClipRecord(
                    clip_id=data["id"],
                    source_id=data["source"],
                    frame_start=data["frame_start"],
                    frame_end=data["frame_end"],
                    fps=parse_fps(data["fps"]),
                    scores=ClipScores.from_dict(data["scores"]),
                    verdict=Verdict(passed=True),
                    caption=data["caption"],
                    tags=tuple(data["tags"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: bad manifest record: {exc}") from exc
    return records
