"""Pipeline CLI: ingest -> scenes -> score -> calibrate -> filter ->
manifest -> condition -> evaluate -> report.

Every stage reads and writes files under the configured output directory,
so stages are resumable and independently testable. Artifacts are written
atomically (temp file + rename), ordered by id, and contain no timestamps;
re-running a stage with the same config and inputs reproduces identical
bytes regardless of the worker count. Progress and per-stage timing go to
stderr; failures print one machine-readable JSON object to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import analysis, conditioning, curation, evalkit, media, providers, report
from .config import (
    AnalysisConfig,
    ConfigError,
    PipelineConfig,
    load_config,
    provider_endpoint,
    resolve_provider,
    stage_seed,
)

log = logging.getLogger("anicurate")


# ---------------------------------------------------------------------------
# small shared helpers


@contextmanager
def _stage(name: str):
    start = time.perf_counter()
    log.info("stage %s: start", name)
    yield
    log.info("stage %s: done in %.2fs", name, time.perf_counter() - start)


@contextmanager
def _atomic_text(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        yield fh
    os.replace(tmp, path)


def _atomic_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with _atomic_text(path) as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _run_parallel(fn: Callable, tasks: Sequence, workers: int) -> list:
    """Order-preserving map, optionally over a process pool.

    Results depend only on the tasks, so the worker count can change
    wall-clock time but never artifact content.
    """
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _chunked(items: Sequence, chunks: int) -> list[list]:
    if chunks <= 1 or len(items) <= 1:
        return [list(items)]
    size = math.ceil(len(items) / chunks)
    return [list(items[i : i + size]) for i in range(0, len(items), size)]


def _clip_id(source: str, start: int, end: int) -> str:
    return f"{source}:{start:06d}-{end:06d}"


def _safe_name(clip_id: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in clip_id)


def _load_clip(row: dict) -> media.FrameSequence:
    seq = media.load_video(row["path"], row.get("fps"))
    return seq.slice(row["start"], row["end"], source_id=row["source"])


# ---------------------------------------------------------------------------
# scenes


def cmd_scenes(config: PipelineConfig, out_dir: Path) -> Path:
    if not config.inputs:
        raise ConfigError("config.inputs is empty; nothing to segment")
    rows = []
    seen_sources = set()
    for spec in config.inputs:
        source = Path(spec.path).stem
        if source in seen_sources:
            raise ConfigError(f"duplicate source id {source!r}; rename the input files")
        seen_sources.add(source)
        seq = media.load_video(spec.path, spec.fps)
        ranges = analysis.detect_scenes(
            seq, config.scene.threshold, config.scene.min_scene_len
        )
        for start, end in ranges:
            rows.append(
                {
                    "clip_id": _clip_id(source, start, end),
                    "source": source,
                    "path": spec.path,
                    "fps": str(seq.fps),
                    "start": start,
                    "end": end,
                }
            )
        log.info("%s: %d frames -> %d clips", source, len(seq), len(ranges))
    rows.sort(key=lambda r: r["clip_id"])
    path = out_dir / "clips.jsonl"
    _write_jsonl(path, rows)
    return path


# ---------------------------------------------------------------------------
# score


def _score_clip(clip: media.FrameSequence, cfg: AnalysisConfig) -> dict:
    sample = media.sample_frames(clip, min(cfg.score_sample_frames, len(clip)))
    text_cover = max(
        analysis.text_cover_score(
            clip[i],
            band_fraction=cfg.text_band_fraction,
            min_area=cfg.text_glyph_min_area,
            max_area_frac=cfg.text_glyph_max_area_frac,
            min_aspect=cfg.text_glyph_min_aspect,
            max_aspect=cfg.text_glyph_max_aspect,
        )
        for i in sample
    )
    aesthetic = math.fsum(
        analysis.aesthetic_ref_score(
            clip[i],
            weights=cfg.aesthetic_weights,
            colorfulness_norm=cfg.colorfulness_norm,
            contrast_norm=cfg.contrast_norm,
            sharpness_norm=cfg.sharpness_norm,
        )
        for i in sample
    ) / len(sample)
    flow = analysis.flow_score(clip, cfg.block_size, cfg.search_radius, cfg.flow_sample_fps)
    return {
        "text_cover": text_cover,
        "flow": flow,
        "aesthetic": aesthetic,
        "duration": clip.duration_seconds,
        "frame_count": len(clip),
    }


def _score_source_task(task: tuple) -> list[dict]:
    rows, cfg = task
    seq = media.load_video(rows[0]["path"], rows[0].get("fps"))
    out = []
    for row in rows:
        clip = seq.slice(row["start"], row["end"], source_id=row["source"])
        out.append({**row, "scores": _score_clip(clip, cfg)})
    return out


def cmd_score(config: PipelineConfig, out_dir: Path) -> Path:
    clips = _read_jsonl(out_dir / "clips.jsonl")
    by_source: dict[str, list[dict]] = {}
    for row in clips:
        by_source.setdefault(row["source"], []).append(row)
    tasks = [(rows, config.analysis) for _, rows in sorted(by_source.items())]
    results = _run_parallel(_score_source_task, tasks, config.workers)
    scored = [row for chunk in results for row in chunk]
    scored.sort(key=lambda r: r["clip_id"])
    path = out_dir / "scores.jsonl"
    _write_jsonl(path, scored)
    log.info("scored %d clips from %d sources", len(scored), len(tasks))
    return path


# ---------------------------------------------------------------------------
# calibrate / filter / manifest / histogram


def _load_scores(out_dir: Path) -> list[dict]:
    return _read_jsonl(out_dir / "scores.jsonl")


def cmd_calibrate(config: PipelineConfig, out_dir: Path, target: float | None) -> Path:
    if target is None:
        target = config.filter.target_retention
    if target is None:
        raise ConfigError("calibrate needs --target or config.filter.target_retention")
    rows = _load_scores(out_dir)
    scores = [curation.ClipScores.from_dict(r["scores"]) for r in rows]
    rule = curation.calibrate(scores, target)
    path = out_dir / "filter_rule.json"
    with _atomic_text(path) as fh:
        fh.write(json.dumps(rule.to_dict(), indent=2, sort_keys=True) + "\n")
    measured = sum(
        curation.apply_filter(s, rule).passed for s in scores
    ) / len(scores)
    log.info("calibrated rule for target %.4f; measured retention %.4f", target, measured)
    return path


def _resolve_rule(config: PipelineConfig, out_dir: Path, rule_path: str | None) -> curation.FilterRule:
    if rule_path:
        return curation.FilterRule.from_dict(json.loads(Path(rule_path).read_text()))
    if config.filter.rule is not None:
        return config.filter.rule
    default = out_dir / "filter_rule.json"
    if default.exists():
        return curation.FilterRule.from_dict(json.loads(default.read_text()))
    raise ConfigError(
        "no filter rule: pass --rule, set config.filter.rule, or run calibrate first"
    )


def cmd_filter(config: PipelineConfig, out_dir: Path, rule_path: str | None) -> Path:
    rule = _resolve_rule(config, out_dir, rule_path)
    rows = _load_scores(out_dir)
    verdicts = []
    passed = 0
    for row in rows:
        verdict = curation.apply_filter(curation.ClipScores.from_dict(row["scores"]), rule)
        passed += verdict.passed
        verdicts.append(
            {
                "clip_id": row["clip_id"],
                "passed": verdict.passed,
                "reasons": list(verdict.reasons),
            }
        )
    verdicts.sort(key=lambda r: r["clip_id"])
    path = out_dir / "verdicts.jsonl"
    _write_jsonl(path, verdicts)
    log.info("filter: %d of %d clips pass", passed, len(rows))
    return path


def cmd_manifest(config: PipelineConfig, out_dir: Path) -> Path:
    rows = _load_scores(out_dir)
    verdict_by_id = {
        r["clip_id"]: curation.Verdict(passed=r["passed"], reasons=tuple(r["reasons"]))
        for r in _read_jsonl(out_dir / "verdicts.jsonl")
    }
    records = []
    for row in rows:
        verdict = verdict_by_id.get(row["clip_id"])
        if verdict is None:
            raise ConfigError(f"clip {row['clip_id']} has no verdict; rerun filter")
        records.append(
            curation.ClipRecord(
                clip_id=row["clip_id"],
                source_id=row["source"],
                frame_start=row["start"],
                frame_end=row["end"],
                fps=media.parse_fps(row["fps"]),
                scores=curation.ClipScores.from_dict(row["scores"]),
                verdict=verdict,
            )
        )
    caption_provider = resolve_provider(config, "caption")
    if caption_provider is None:
        raise ConfigError("manifest needs a caption provider endpoint")
    path = out_dir / "manifest.jsonl"
    with _atomic_text(path) as fh:
        stats = curation.build_manifest(records, caption_provider, fh)
    log.info("manifest: wrote %d records, skipped %d", stats.written, len(stats.skipped))
    return path


def cmd_histogram(config: PipelineConfig, out_dir: Path, bins: int) -> Path:
    rows = _load_scores(out_dir)
    scores = [curation.ClipScores.from_dict(r["scores"]) for r in rows]
    table = curation.histogram_report(scores, bins)
    path = out_dir / "histograms.csv"
    with _atomic_text(path) as fh:
        fh.write(curation.format_histogram_csv(table))
    return path


# ---------------------------------------------------------------------------
# condition


def _condition_chunk(task: tuple) -> list[str]:
    config, out_dir_str, manifest_lines, path_by_source = task
    out_dir = Path(out_dir_str)
    records = curation.load_manifest(manifest_lines)
    embed = resolve_provider(config, "embed")
    if embed is None:
        raise ConfigError("condition needs an embed provider endpoint")
    char = resolve_provider(config, "char") if config.conditioning.motion_area else None
    written = []
    ccfg = config.conditioning
    schedule = conditioning.ScheduleParams.linear(
        ccfg.schedule.steps, ccfg.schedule.beta_start, ccfg.schedule.beta_end
    )
    try:
        for record in records:
            seq = media.load_video(path_by_source[record.source_id], record.fps)
            clip = seq.slice(record.frame_start, record.frame_end)
            w8 = clip.width // 8 * 8
            h8 = clip.height // 8 * 8
            t4 = len(clip) // 4 * 4
            if not w8 or not h8 or not t4:
                log.warning("skipping %s: too small to encode (%dx%d, %d frames)",
                            record.clip_id, clip.width, clip.height, len(clip))
                continue
            frames = tuple(
                media.Frame(clip[i].pixels[:h8, :w8]) for i in range(t4)
            )
            clip = media.FrameSequence(frames, fps=clip.fps, source_id=record.clip_id)
            latent = conditioning.encode_latent_stub(clip)
            w, h, t_lat, c = latent.shape
            plan_seed = stage_seed(config.seed, f"condition:{record.clip_id}")
            positions = conditioning.sample_unmask_plan(
                t_lat, plan_seed, ccfg.interior_candidates
            )
            if ccfg.motion_area:
                if char is None:
                    raise ConfigError("motion_area conditioning needs a char provider")
                fg = char.char_masks(clip[0])
                if fg:
                    initial = conditioning.union_masks(fg)
                else:
                    initial = media.BinaryMask(np.zeros((h8, w8), bool))
                tracked = conditioning.track_foreground(clip, initial)
                motion_grid = conditioning.pixel_mask_grid(conditioning.union_masks(tracked))
                mask_latent_grid = conditioning.reproject_mask(motion_grid, (w, h))
                latent = conditioning.clamp_static_latent(
                    latent, latent.data[:, :, positions[0], :], mask_latent_grid
                )
                plan = conditioning.GuidePlan(
                    n_latent_frames=t_lat,
                    positions=positions,
                    guide_frames=tuple(latent.data[:, :, p, :] for p in positions),
                    spatial_masks=tuple(motion_grid for _ in positions),
                    mask_dims=(w8, h8),
                )
            else:
                plan = conditioning.GuidePlan(
                    n_latent_frames=t_lat,
                    positions=positions,
                    guide_frames=tuple(latent.data[:, :, p, :] for p in positions),
                )
            guide, mask = conditioning.build_guide(plan)
            mask_latent = conditioning.reproject_mask(mask, (w, h, t_lat))
            rng = np.random.default_rng(stage_seed(config.seed, f"noise:{record.clip_id}"))
            timestep = int(rng.integers(1, schedule.steps + 1))
            eps = rng.standard_normal((w, h, t_lat, c))
            noisy = conditioning.noisy_latent(latent.data, eps, schedule, timestep)
            text = embed.embed_text(record.caption or "").values
            text = _fit_channels(text, ccfg.c_text)
            bundle = conditioning.assemble_condition_input(
                noisy.astype(np.float32),
                mask_latent.astype(np.float32),
                guide.data.astype(np.float32),
                text,
            )
            stem = out_dir / "condition" / _safe_name(record.clip_id)
            stem.parent.mkdir(parents=True, exist_ok=True)
            conditioning.save_condition_bundle(bundle, stem, extra={"timestep": timestep})
            written.append(record.clip_id)
    finally:
        _close_providers(embed, char)
    return written


def _close_providers(*provider_objects) -> None:
    for provider in provider_objects:
        close = getattr(provider, "close", None)
        if close is not None:
            close()


def _fit_channels(vector: np.ndarray, channels: int) -> np.ndarray:
    """Truncate or zero-pad an embedding to the configured channel count."""
    vector = np.asarray(vector, dtype=np.float32)
    if vector.shape[0] >= channels:
        return vector[:channels]
    return np.concatenate([vector, np.zeros(channels - vector.shape[0], np.float32)])


def cmd_condition(config: PipelineConfig, out_dir: Path) -> Path:
    manifest_lines = (out_dir / "manifest.jsonl").read_text().splitlines()
    path_by_source = {
        row["source"]: row["path"] for row in _read_jsonl(out_dir / "clips.jsonl")
    }
    chunks = _chunked(manifest_lines, config.workers * 2)
    tasks = [(config, str(out_dir), chunk, path_by_source) for chunk in chunks]
    results = _run_parallel(_condition_chunk, tasks, config.workers)
    written = [clip_id for chunk in results for clip_id in chunk]
    log.info("condition: wrote %d bundles", len(written))
    return out_dir / "condition"


# ---------------------------------------------------------------------------
# evaluate


class _CharacterEvalProvider:
    """Routes char_masks and embed_image to their configured backends."""

    def __init__(self, char_provider, embed_provider):
        self._char = char_provider
        self._embed = embed_provider

    def char_masks(self, frame):
        return self._char.char_masks(frame)

    def embed_image(self, frame):
        return self._embed.embed_image(frame)


def _evaluate_chunk(task: tuple) -> list[str]:
    config, pairs, benchmark_dir = task
    embed = resolve_provider(config, "embed")
    char = resolve_provider(config, "char")
    smooth = resolve_provider(config, "smoothness")
    if embed is None or char is None:
        raise ConfigError("evaluate needs embed and char provider endpoints")
    store = evalkit.CharacterStore()
    if config.evaluation.character_store:
        store = evalkit.CharacterStore.load(config.evaluation.character_store)
    char_eval = _CharacterEvalProvider(char, embed)
    ecfg = config.evaluation
    out = []
    try:
        out.extend(_evaluate_pairs(config, pairs, benchmark_dir, embed, char_eval, smooth, store, ecfg))
    finally:
        _close_providers(embed, char, smooth)
    return out


def _evaluate_pairs(config, pairs, benchmark_dir, embed, char_eval, smooth, store, ecfg) -> list[str]:
    out = []
    for model, model_dir, entry in pairs:
        video_path = Path(model_dir) / f"{entry.entry_id}.y4m"
        notes: dict[str, str] = {}
        failed: set[str] = set()
        values: dict[str, float | None] = {name: None for name in evalkit.METRICS}
        if not video_path.is_file():
            failed = set(evalkit.METRICS)
            notes["error"] = f"missing video {video_path.name}"
        else:
            video = media.load_video(video_path)
            smooth_result = evalkit.smoothness_score(
                video, smooth, config.analysis.smoothness_residual_norm
            )
            values["smoothness"] = smooth_result.score
            notes["smoothness_source"] = smooth_result.source

            def _metric(name: str, fn):
                try:
                    values[name] = fn()
                except providers.ProviderError as exc:
                    failed.add(name)
                    notes[name] = f"provider failure: {exc}"

            _metric("motion", lambda: evalkit.motion_score(video, embed))
            _metric(
                "appeal",
                lambda: evalkit.appeal_score(video, embed, ecfg.keyframe_count),
            )
            _metric(
                "text_video",
                lambda: evalkit.text_video_consistency(video, entry.prompt, embed),
            )
            guide = media.parse_ppm(
                (benchmark_dir / entry.guide_frames[0].image).read_bytes()
            )
            _metric(
                "image_video",
                lambda: evalkit.image_video_consistency(video, guide, embed),
            )
            if entry.character_refs and store:
                _metric(
                    "character",
                    lambda: evalkit.character_consistency(
                        video, store, char_eval, ecfg.char_sample_frames
                    ),
                )
            elif entry.character_refs:
                notes["character"] = "no character store configured"
        result = report.SampleResult(
            model_id=model,
            entry_id=entry.entry_id,
            metrics=evalkit.MetricVector(**values),
            failed=frozenset(failed),
            notes=tuple(sorted(notes.items())),
        )
        out.append(result.to_json())
    return out


def cmd_evaluate(config: PipelineConfig, out_dir: Path) -> Path:
    if not config.evaluation.benchmark:
        raise ConfigError("evaluate needs config.evaluation.benchmark")
    if not config.evaluation.models:
        raise ConfigError("evaluate needs config.evaluation.models")
    benchmark_path = Path(config.evaluation.benchmark)
    bench = evalkit.load_benchmark(benchmark_path)
    pairs = [
        (model, model_dir, entry)
        for model, model_dir in sorted(config.evaluation.models.items())
        for entry in bench.entries
    ]
    chunks = _chunked(pairs, config.workers * 2)
    tasks = [(config, chunk, benchmark_path.parent) for chunk in chunks]
    results = _run_parallel(_evaluate_chunk, tasks, config.workers)
    lines = sorted(
        (json.loads(line) for chunk in results for line in chunk),
        key=lambda r: (r["model"], r["entry"]),
    )
    path = out_dir / "results.jsonl"
    _write_jsonl(path, lines)
    log.info("evaluated %d (model, entry) pairs", len(lines))
    return path


# ---------------------------------------------------------------------------
# report


def cmd_report(
    config: PipelineConfig,
    out_dir: Path,
    human_path: str | None,
    fmt: str,
    with_alignment: bool,
) -> Path:
    results = [
        report.SampleResult.from_json(json.dumps(row))
        for row in _read_jsonl(out_dir / "results.jsonl")
    ]
    table = report.aggregate(results)
    human_overall = None
    human_cells: dict[str, dict[str, float]] | None = None
    if human_path:
        ratings = report.load_human_ratings(Path(human_path).read_text())
        human_cells = report.human_mean(ratings)
        overall = {
            model: cells["overall"] for model, cells in human_cells.items() if "overall" in cells
        }
        human_overall = overall or None
    suffix = "md" if fmt == "markdown" else "csv"
    path = out_dir / f"report.{suffix}"
    with _atomic_text(path) as fh:
        fh.write(report.render(table, human_overall=human_overall, fmt=fmt))
    if with_alignment:
        if human_cells is None:
            raise ConfigError("--alignment needs --human ratings")
        metric_cells = {
            model: {dim: cell.value for dim, cell in row.items() if cell.value is not None}
            for model, row in table.items()
        }
        correlations = report.alignment(metric_cells, human_cells)
        alignment_path = out_dir / "alignment.md"
        with _atomic_text(alignment_path) as fh:
            fh.write(report.render_alignment(correlations))
        log.info("wrote %s", alignment_path)
    return path


# ---------------------------------------------------------------------------
# providers test


def _check(stream: TextIO, op: str, ok: bool, detail: str = "") -> bool:
    status = "ok" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    stream.write(f"{op}: {status}{suffix}\n")
    return ok


def cmd_providers_test(endpoint: str, timeout: float, retries: int, out: TextIO) -> int:
    """Drive every wire op with tiny fixtures and check response shapes."""
    provider = providers.resolve_endpoint(endpoint, timeout, retries)
    rng = np.random.default_rng(0)
    sprite = np.zeros((16, 16, 3), np.uint8)
    sprite[:] = (200, 200, 200)
    sprite[4:12, 4:12] = (255, 0, 0)
    frame = media.Frame(sprite)
    moved = np.zeros((16, 16, 3), np.uint8)
    moved[:] = (200, 200, 200)
    moved[4:12, 6:14] = (255, 0, 0)
    video = media.FrameSequence((frame, media.Frame(moved)), fps=media.parse_fps(8))

    all_ok = True
    try:
        emb = provider.embed_text("conformance probe")
        all_ok &= _check(out, "embed_text", abs(float(np.linalg.norm(emb.values)) - 1.0) < 1e-6,
                         f"dim {emb.dim}")
        img = provider.embed_image(frame)
        all_ok &= _check(out, "embed_image", abs(float(np.linalg.norm(img.values)) - 1.0) < 1e-6,
                         f"dim {img.dim}")
        vid = provider.embed_video(video)
        all_ok &= _check(out, "embed_video", abs(float(np.linalg.norm(vid.values)) - 1.0) < 1e-6,
                         f"dim {vid.dim}")
        caption = provider.caption(
            {"clip_id": "probe:000000-000002", "source_id": "probe", "frame_start": 0, "frame_end": 2}
        )
        all_ok &= _check(out, "caption", isinstance(caption, str) and bool(caption))
        masks = provider.char_masks(frame)
        masks_ok = isinstance(masks, list) and all(
            (m.width, m.height) == (frame.width, frame.height) for m in masks
        )
        all_ok &= _check(out, "char_masks", masks_ok, f"{len(masks)} masks")
        smooth = provider.score_smoothness(video)
        all_ok &= _check(out, "score_smoothness", 0.0 <= smooth <= 1.0, f"{smooth:.4f}")
        probe = providers.Embedding.normalized(rng.standard_normal(img.dim))
        aes = provider.score_aesthetic(probe)
        all_ok &= _check(out, "score_aesthetic", 0.0 <= aes <= 1.0, f"{aes:.4f}")
        reg = provider.score_regression(probe, probe)
        all_ok &= _check(out, "score_regression", 0.0 <= reg <= 1.0, f"{reg:.4f}")
    finally:
        close = getattr(provider, "close", None)
        if close is not None:
            close()
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anicurate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, needs_config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="pipeline config JSON")
            p.add_argument("--workers", type=int, help="override config.workers")
            p.add_argument("--seed", type=int, help="override config.seed")
            p.add_argument("--out", help="override config.out_dir")
        return p

    add("scenes", "segment input videos into clips")
    add("score", "compute the four filter scores per clip")
    p = add("calibrate", "solve filter thresholds for a retention target")
    p.add_argument("--target", type=float, help="retention target in (0, 1)")
    p = add("filter", "apply the filter rule and emit verdicts")
    p.add_argument("--rule", help="filter rule JSON path (default: out/filter_rule.json)")
    add("manifest", "emit the captioned manifest of passing clips")
    p = add("histogram", "emit per-dimension score histograms as CSV")
    p.add_argument("--bins", type=int, default=16)
    add("condition", "build conditioning bundles for manifest clips")
    add("evaluate", "score generated videos against the benchmark")
    p = add("report", "aggregate results into a table")
    p.add_argument("--human", help="human ratings CSV")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--alignment", action="store_true", help="also write alignment.md")
    p = sub.add_parser("providers", help="provider utilities")
    provider_sub = p.add_subparsers(dest="providers_command", required=True)
    t = provider_sub.add_parser("test", help="schema-conformance check of an endpoint")
    t.add_argument("--endpoint", default="ref:")
    t.add_argument("--timeout", type=float, default=providers.DEFAULT_TIMEOUT_SECONDS)
    t.add_argument("--retries", type=int, default=providers.DEFAULT_RETRIES)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "providers":
        return cmd_providers_test(args.endpoint, args.timeout, args.retries, sys.stdout)
    config = load_config(args.config)
    if args.workers is not None:
        config.workers = args.workers
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _stage(args.command):
        if args.command == "scenes":
            cmd_scenes(config, out_dir)
        elif args.command == "score":
            cmd_score(config, out_dir)
        elif args.command == "calibrate":
            cmd_calibrate(config, out_dir, args.target)
        elif args.command == "filter":
            cmd_filter(config, out_dir, args.rule)
        elif args.command == "manifest":
            cmd_manifest(config, out_dir)
        elif args.command == "histogram":
            cmd_histogram(config, out_dir, args.bins)
        elif args.command == "condition":
            cmd_condition(config, out_dir)
        elif args.command == "evaluate":
            cmd_evaluate(config, out_dir)
        elif args.command == "report":
            cmd_report(config, out_dir, args.human, args.format, args.alignment)
        else:  # pragma: no cover - argparse enforces choices
            raise AssertionError(args.command)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return _dispatch(args)
    except Exception as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
