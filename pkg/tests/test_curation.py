from __future__ import annotations

import io
import logging
from fractions import Fraction

import numpy as np
import pytest

from anicurate import curation
from anicurate.curation import (
    CalibrationError,
    ClipRecord,
    ClipScores,
    FilterRule,
    ManifestError,
    MissingScoreError,
    Verdict,
)
from anicurate.providers import ReferenceProvider

RULE = FilterRule(text_cover_max=0.3, flow_min=5.0, flow_max=100.0, aesthetic_min=3.0)


def scores(text_cover=0.1, flow=20.0, aesthetic=5.0, duration=8.0, frame_count=64):
    return ClipScores(
        text_cover=text_cover,
        flow=flow,
        aesthetic=aesthetic,
        duration=duration,
        frame_count=frame_count,
    )


def record(clip_id="src:000000-000064", passed=None, caption=None, **kwargs):
    verdict = None if passed is None else Verdict(passed=passed)
    return ClipRecord(
        clip_id=clip_id,
        source_id="src",
        frame_start=0,
        frame_end=64,
        fps=Fraction(8),
        scores=scores(**kwargs),
        verdict=verdict,
        caption=caption,
    )


class TestApplyFilter:
    def test_short_clip_fails_on_duration(self):
        verdict = curation.apply_filter(scores(duration=1.5), RULE)
        assert not verdict.passed
        assert verdict.reasons == ("duration",)

    def test_multiple_failures_listed(self):
        verdict = curation.apply_filter(scores(duration=25.0, text_cover=0.9), RULE)
        assert verdict.reasons == ("duration", "text_cover")

    def test_all_inside_bounds_passes(self):
        verdict = curation.apply_filter(scores(), RULE)
        assert verdict.passed and verdict.reasons == ()

    def test_duration_bounds_are_closed(self):
        assert curation.apply_filter(scores(duration=2.0), RULE).passed
        assert curation.apply_filter(scores(duration=20.0), RULE).passed
        assert not curation.apply_filter(scores(duration=1.9), RULE).passed
        assert not curation.apply_filter(scores(duration=20.1), RULE).passed

    def test_missing_score_names_dimension(self):
        with pytest.raises(MissingScoreError, match="flow"):
            curation.apply_filter(ClipScores(text_cover=0.1, aesthetic=5.0, duration=5.0), RULE)

    def test_accepts_clip_record(self):
        assert curation.apply_filter(record(), RULE).passed

    def test_relaxing_a_threshold_never_flips_pass_to_fail(self, rng):
        for _ in range(200):
            s = scores(
                text_cover=float(rng.uniform(0, 1)),
                flow=float(rng.uniform(0, 150)),
                aesthetic=float(rng.uniform(0, 10)),
                duration=float(rng.uniform(0.5, 25)),
            )
            before = curation.apply_filter(s, RULE).passed
            relaxed = FilterRule(
                text_cover_max=RULE.text_cover_max + 0.2,
                flow_min=RULE.flow_min - 2.0,
                flow_max=RULE.flow_max + 50.0,
                aesthetic_min=RULE.aesthetic_min - 1.0,
            )
            after = curation.apply_filter(s, relaxed).passed
            assert after or not before


def synthetic_corpus(rng: np.random.Generator, n: int) -> list[ClipScores]:
    return [
        ClipScores(
            text_cover=float(rng.uniform(0, 1)),
            flow=float(rng.uniform(0, 200)),
            aesthetic=float(rng.uniform(0, 10)),
            duration=float(rng.uniform(1, 25)),
            frame_count=10,
        )
        for _ in range(n)
    ]


def measured_retention(corpus, rule) -> float:
    return sum(curation.apply_filter(s, rule).passed for s in corpus) / len(corpus)


class TestCalibrate:
    def test_hits_target_within_relative_tolerance(self, rng):
        corpus = synthetic_corpus(rng, 2000)
        rule = curation.calibrate(corpus, 0.2)
        assert abs(measured_retention(corpus, rule) / 0.2 - 1.0) <= 0.10
        assert rule.duration_min == 2.0 and rule.duration_max == 20.0

    def test_order_independent(self, rng):
        corpus = synthetic_corpus(rng, 500)
        rule_a = curation.calibrate(corpus, 0.15)
        rule_b = curation.calibrate(list(reversed(corpus)), 0.15)
        assert rule_a == rule_b

    def test_target_one_is_infeasible(self, rng):
        with pytest.raises(CalibrationError):
            curation.calibrate(synthetic_corpus(rng, 500), 1.0)

    def test_unreachable_target_reports_range(self, rng):
        corpus = synthetic_corpus(rng, 500)
        with pytest.raises(CalibrationError, match="achievable"):
            curation.calibrate(corpus, 0.99)

    def test_needs_enough_samples(self, rng):
        with pytest.raises(ValueError, match="100"):
            curation.calibrate(synthetic_corpus(rng, 50), 0.1)


class TestHistogram:
    def test_identical_records_concentrate_in_one_bin(self):
        rows = curation.histogram_report([scores()] * 100, bins_per_dim=8)
        for dim in ("duration", "text_cover", "aesthetic", "flow"):
            counts = [r.count for r in rows if r.dimension == dim]
            assert sum(counts) == 100
            assert sum(1 for c in counts if c > 0) == 1

    def test_counts_sum_to_record_count(self, rng):
        corpus = synthetic_corpus(rng, 333)
        rows = curation.histogram_report(corpus, bins_per_dim=12)
        for dim in ("duration", "text_cover", "aesthetic", "flow"):
            assert sum(r.count for r in rows if r.dimension == dim) == 333

    def test_bin_edges_monotone(self, rng):
        rows = curation.histogram_report(synthetic_corpus(rng, 120), bins_per_dim=6)
        for dim in ("duration", "text_cover", "aesthetic", "flow"):
            dim_rows = [r for r in rows if r.dimension == dim]
            for row in dim_rows:
                assert row.bin_hi > row.bin_lo
            for a, b in zip(dim_rows, dim_rows[1:]):
                assert b.bin_lo == a.bin_hi

    def test_csv_header(self, rng):
        text = curation.format_histogram_csv(curation.histogram_report(synthetic_corpus(rng, 150)))
        assert text.splitlines()[0] == "dimension,bin_lo,bin_hi,count"

    def test_empty_is_an_error(self):
        with pytest.raises(ValueError):
            curation.histogram_report([])


class _FlakyCaptioner:
    """Fails for selected clip ids, echoes the rest."""

    def __init__(self, fail_ids=(), empty_ids=()):
        self.fail_ids = set(fail_ids)
        self.empty_ids = set(empty_ids)
        self.ref = ReferenceProvider()

    def caption(self, meta):
        if meta["clip_id"] in self.fail_ids:
            raise RuntimeError("captioner unavailable")
        if meta["clip_id"] in self.empty_ids:
            return ""
        return self.ref.caption(meta)


class TestManifest:
    def _records(self, n=3, passed=True):
        return [record(clip_id=f"src:{i:06d}-{i + 64:06d}") for i in range(n)]

    def test_three_passing_records_in_id_order(self):
        records = [record(clip_id=f"src:{i:06d}-{i + 64:06d}", passed=True) for i in (2, 0, 1)]
        out = io.StringIO()
        stats = curation.build_manifest(records, ReferenceProvider(), out)
        lines = out.getvalue().strip().splitlines()
        assert stats.written == 3
        ids = [curation.load_manifest([line])[0].clip_id for line in lines]
        assert ids == sorted(ids)

    def test_failing_record_excluded(self):
        records = [
            record(clip_id="src:000000-000064", passed=True),
            record(clip_id="src:000100-000164", passed=False),
        ]
        out = io.StringIO()
        stats = curation.build_manifest(records, ReferenceProvider(), out)
        assert stats.written == 1
        assert "000100" not in out.getvalue()

    def test_empty_caption_skipped_and_logged(self, caplog):
        records = [record(clip_id=f"src:{i:06d}-{i + 64:06d}", passed=True) for i in range(10)]
        provider = _FlakyCaptioner(empty_ids={records[0].clip_id})
        out = io.StringIO()
        with caplog.at_level(logging.WARNING):
            stats = curation.build_manifest(records, provider, out)
        assert stats.written == 9
        assert stats.skipped == [(records[0].clip_id, "empty caption")]
        assert "empty caption" in caplog.text

    def test_excess_failures_abort(self):
        records = [record(clip_id=f"src:{i:06d}-{i + 64:06d}", passed=True) for i in range(10)]
        provider = _FlakyCaptioner(fail_ids={records[0].clip_id, records[1].clip_id})
        with pytest.raises(ManifestError, match="2 of 10"):
            curation.build_manifest(records, provider, io.StringIO())

    def test_roundtrip_is_lossless(self):
        records = [record(clip_id=f"src:{i:06d}-{i + 64:06d}", passed=True) for i in range(3)]
        out = io.StringIO()
        curation.build_manifest(records, ReferenceProvider(), out)
        loaded = curation.load_manifest(io.StringIO(out.getvalue()))
        out2 = io.StringIO()
        for rec in loaded:
            out2.write(curation.manifest_line(rec, rec.caption) + "\n")
        assert out2.getvalue() == out.getvalue()

    def test_load_manifest_rejects_bad_json(self):
        with pytest.raises(ManifestError, match="line 1"):
            curation.load_manifest(io.StringIO("{not json}\n"))
