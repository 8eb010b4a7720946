from __future__ import annotations

import json
import logging
import math
from fractions import Fraction

import numpy as np
import pytest

from anicurate import evalkit, media
from anicurate.evalkit import (
    Benchmark,
    BenchmarkFormatError,
    CharacterStore,
    MetricVector,
    PROMPT_LARGE_MOTION,
    PROMPT_STATIONARY,
    appeal_score,
    character_consistency,
    crop_masked,
    extract_keyframes,
    image_video_consistency,
    load_benchmark,
    motion_mask_precision,
    motion_probabilities,
    motion_score,
    saliency_boxes,
    smoothness_score,
    text_video_consistency,
)
from anicurate.media import BinaryMask, Frame, FrameSequence
from anicurate.providers import Embedding, ProviderOpError, ReferenceProvider

from conftest import (
    ScriptedProvider,
    basis_embedding,
    constant_sequence,
    random_frame,
    sprite_sequence,
)


def entry_dict(i: int, style: str = "2D", label: str = "walking", chars: bool = False) -> dict:
    return {
        "id": f"e{i:04d}",
        "action_label": label,
        "style": style,
        "prompt": "a character walks across the room",
        "guide_frames": [{"position": 0, "image": f"guides/e{i:04d}.ppm"}],
        "character_refs": (
            [{"character_id": "hero", "images": ["chars/hero.ppm"]}] if chars else []
        ),
        "gt_clip": f"gt/e{i:04d}.y4m",
    }


def write_benchmark(tmp_path, entries: list[dict], full_set: bool):
    path = tmp_path / "benchmark.json"
    path.write_text(json.dumps({"full_set": full_set, "entries": entries}))
    return path


def full_set_entries(two_d_labels, three_d_labels) -> list[dict]:
    entries = []
    i = 0
    for label, count in two_d_labels:
        for _ in range(count):
            entries.append(entry_dict(i, "2D", label))
            i += 1
    for label, count in three_d_labels:
        for _ in range(count):
            entries.append(entry_dict(i, "3D", label))
            i += 1
    return entries


class TestLoadBenchmark:
    def test_partial_fixture_loads_without_count_checks(self, tmp_path):
        path = write_benchmark(tmp_path, [entry_dict(i) for i in range(5)], full_set=False)
        bench = load_benchmark(path)
        assert len(bench.entries) == 5
        assert bench.entries[0].style == "2D"

    def test_full_set_counts_enforced(self, tmp_path):
        two_d = [(f"act{k}", 30) for k in range(28)] + [("act28", 17)]  # 857
        three_d = [("jump3d", 30), ("run3d", 30), ("eat3d", 21), ("fly3d", 10)]  # 91
        path = write_benchmark(tmp_path, full_set_entries(two_d, three_d), full_set=True)
        bench = load_benchmark(path)
        assert len(bench.entries) == 948

    def test_full_set_wrong_totals_rejected(self, tmp_path):
        path = write_benchmark(tmp_path, [entry_dict(i) for i in range(5)], full_set=True)
        with pytest.raises(BenchmarkFormatError, match="948"):
            load_benchmark(path)

    def test_label_outside_band_warns(self, tmp_path, caplog):
        two_d = [("packed", 31)] + [(f"act{k}", 30) for k in range(27)] + [("tail", 16)]
        three_d = [("jump3d", 30), ("run3d", 30), ("eat3d", 21), ("fly3d", 10)]
        path = write_benchmark(tmp_path, full_set_entries(two_d, three_d), full_set=True)
        with caplog.at_level(logging.WARNING):
            load_benchmark(path)
        assert "packed" in caplog.text and "10-30" in caplog.text

    def test_bad_style_names_entry(self, tmp_path):
        bad = entry_dict(0)
        bad["style"] = "4D"
        path = write_benchmark(tmp_path, [bad], full_set=False)
        with pytest.raises(BenchmarkFormatError, match="e0000"):
            load_benchmark(path)

    def test_empty_prompt_rejected(self, tmp_path):
        bad = entry_dict(0)
        bad["prompt"] = ""
        with pytest.raises(BenchmarkFormatError, match="prompt"):
            load_benchmark(write_benchmark(tmp_path, [bad], full_set=False))

    def test_missing_guide_frames_rejected(self, tmp_path):
        bad = entry_dict(0)
        bad["guide_frames"] = []
        with pytest.raises(BenchmarkFormatError, match="guide"):
            load_benchmark(write_benchmark(tmp_path, [bad], full_set=False))

    def test_duplicate_ids_rejected(self, tmp_path):
        path = write_benchmark(tmp_path, [entry_dict(0), entry_dict(0)], full_set=False)
        with pytest.raises(BenchmarkFormatError, match="duplicate"):
            load_benchmark(path)


class TestCharacterStore:
    def test_roundtrip_and_normalization(self, tmp_path, rng):
        store = CharacterStore()
        store.add("hero", Embedding(2.0 * basis_embedding(0, 4).values))
        store.save(tmp_path / "store.json")
        loaded = CharacterStore.load(tmp_path / "store.json")
        assert len(loaded) == 1
        assert np.linalg.norm(loaded.features["hero"][0].values) == pytest.approx(1.0)

    def test_empty_store_is_falsy(self):
        assert not CharacterStore()


class TestMotionScore:
    def _provider(self, video_emb, moving_emb, still_emb):
        prompts = {PROMPT_LARGE_MOTION: moving_emb, PROMPT_STATIONARY: still_emb}
        return ScriptedProvider(
            text_fn=lambda text: prompts[text], video_fn=lambda seq: video_emb
        )

    def test_aligned_with_moving_prompt(self):
        e0, e1 = basis_embedding(0, 4), basis_embedding(1, 4)
        provider = self._provider(e0, e0, e1)
        video = constant_sequence((0, 0, 0), 2)
        expected = math.e / (math.e + 1.0)
        assert motion_score(video, provider) == pytest.approx(expected, abs=1e-9)

    def test_equidistant_prompts_give_half(self):
        e0, e1 = basis_embedding(0, 4), basis_embedding(1, 4)
        provider = self._provider(e0, e1, e1)
        assert motion_score(constant_sequence((0, 0, 0), 2), provider) == pytest.approx(0.5)

    def test_probabilities_sum_to_one_exactly(self, rng):
        ref = ReferenceProvider()
        video = constant_sequence((80, 10, 160), 4)
        p_move, p_still = motion_probabilities(video, ref)
        assert p_move + p_still == 1.0
        assert 0.0 < p_move < 1.0


class TestExtractKeyframes:
    def test_constant_video_uniform_fallback(self):
        video = constant_sequence((9, 9, 9), 30)
        assert extract_keyframes(video, 3) == [0, 15, 29]

    def test_three_hard_cuts_found(self):
        colors = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0)]
        frames = []
        for segment, color in enumerate(colors):
            frames.extend(media.solid_frame(16, 16, color) for _ in range(10))
        video = FrameSequence(tuple(frames), fps=Fraction(8))
        assert extract_keyframes(video, 3) == [10, 20, 30]

    def test_k1_finds_global_max_delta(self):
        frames = [media.solid_frame(16, 16, (10, 10, 10))] * 10
        frames += [media.solid_frame(16, 16, (40, 40, 40))] * 10  # small step
        frames += [media.solid_frame(16, 16, (255, 255, 255))] * 10  # big step at 20
        video = FrameSequence(tuple(frames), fps=Fraction(8))
        assert extract_keyframes(video, 1) == [20]

    def test_k_capped_by_frame_count(self):
        video = constant_sequence((1, 1, 1), 2)
        assert extract_keyframes(video, 5) == [0, 1]


class TestAppealScore:
    def _video(self):
        return constant_sequence((120, 60, 60), 5)

    def test_constant_head(self):
        provider = ScriptedProvider(
            image_fn=lambda f: basis_embedding(0, 4), aesthetic_fn=lambda e: 0.7
        )
        assert appeal_score(self._video(), provider, keyframe_count=5) == pytest.approx(0.7)

    def test_mean_of_head_values(self):
        values = iter([0.2, 0.4, 0.6, 0.8, 1.0])
        provider = ScriptedProvider(
            image_fn=lambda f: basis_embedding(0, 4), aesthetic_fn=lambda e: next(values)
        )
        assert appeal_score(self._video(), provider, keyframe_count=5) == pytest.approx(0.6)

    def test_raising_one_value_never_lowers_the_mean(self):
        def run(values):
            it = iter(values)
            provider = ScriptedProvider(
                image_fn=lambda f: basis_embedding(0, 4), aesthetic_fn=lambda e: next(it)
            )
            return appeal_score(self._video(), provider, keyframe_count=5)

        base = [0.2, 0.4, 0.6, 0.8, 1.0]
        for i in range(5):
            raised = list(base)
            raised[i] = min(1.0, raised[i] + 0.3)
            assert run(raised) >= run(base)


class TestConsistencyMetrics:
    def test_text_video_anchors(self):
        e = basis_embedding(0, 4)
        o = basis_embedding(1, 4)
        neg = Embedding(-e.values)
        for text_emb, expected in ((e, 1.0), (o, 0.5), (neg, 0.0)):
            provider = ScriptedProvider(video_fn=lambda s: e, text_fn=lambda t: text_emb)
            value = text_video_consistency(constant_sequence((0, 0, 0), 2), "p", provider)
            assert value == pytest.approx(expected, abs=1e-9)

    def test_image_video_match_is_one(self):
        guide = media.solid_frame(16, 16, (120, 80, 200))
        video = FrameSequence(tuple([guide] * 4), fps=Fraction(8))
        score = image_video_consistency(video, guide, ReferenceProvider())
        assert score == pytest.approx(1.0, abs=1e-9)

    def test_unrelated_colors_score_low(self):
        guide = media.solid_frame(16, 16, (255, 0, 0))
        video = constant_sequence((0, 0, 255), 4, width=16, height=16)
        mismatch = image_video_consistency(video, guide, ReferenceProvider())
        match = image_video_consistency(
            video, media.solid_frame(16, 16, (0, 0, 255)), ReferenceProvider()
        )
        assert mismatch == pytest.approx(0.5, abs=1e-9)  # orthogonal hue bins
        assert mismatch < match

    def test_reference_head_is_symmetric(self, rng):
        a = Embedding.normalized(rng.standard_normal(8))
        b = Embedding.normalized(rng.standard_normal(8))
        ref = ReferenceProvider()
        assert ref.score_regression(a, b) == ref.score_regression(b, a)


def marker_video(frames: int = 8) -> FrameSequence:
    out = []
    for i in range(frames):
        canvas = np.full((16, 16, 3), 200, np.uint8)
        canvas[0, 0] = (i, i, i)  # per-frame marker the scripted hooks read
        out.append(Frame(canvas))
    return FrameSequence(tuple(out), fps=Fraction(8))


def full_mask() -> BinaryMask:
    return BinaryMask(np.ones((16, 16), bool))


class TestCharacterConsistency:
    def _store(self):
        store = CharacterStore()
        store.add("hero", basis_embedding(0, 4))
        return store

    def test_all_frames_match(self):
        provider = ScriptedProvider(
            masks_fn=lambda f: [full_mask()],
            image_fn=lambda f: basis_embedding(0, 4),
        )
        value = character_consistency(marker_video(), self._store(), provider)
        assert value == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_embeddings_score_zero(self):
        provider = ScriptedProvider(
            masks_fn=lambda f: [full_mask()],
            image_fn=lambda f: basis_embedding(1, 4),
        )
        assert character_consistency(marker_video(), self._store(), provider) == 0.0

    def test_negative_cosine_clipped_to_zero(self):
        provider = ScriptedProvider(
            masks_fn=lambda f: [full_mask()],
            image_fn=lambda f: Embedding(-basis_embedding(0, 4).values),
        )
        assert character_consistency(marker_video(), self._store(), provider) == 0.0

    def test_half_matched_half_maskless(self):
        provider = ScriptedProvider(
            masks_fn=lambda f: [full_mask()] if f.pixels[0, 0, 0] < 4 else [],
            image_fn=lambda f: basis_embedding(0, 4),
        )
        value = character_consistency(marker_video(8), self._store(), provider, sample_count=8)
        assert value == pytest.approx(0.5, abs=1e-9)

    def test_best_mask_and_best_store_entry_win(self):
        store = self._store()
        store.add("villain", basis_embedding(1, 4))
        masks = [full_mask(), full_mask()]
        embeddings = iter([basis_embedding(2, 4), basis_embedding(1, 4)] * 8)
        provider = ScriptedProvider(
            masks_fn=lambda f: masks, image_fn=lambda f: next(embeddings)
        )
        value = character_consistency(marker_video(8), store, provider)
        assert value == pytest.approx(1.0, abs=1e-9)

    def test_empty_store_is_an_error(self):
        provider = ScriptedProvider(masks_fn=lambda f: [])
        with pytest.raises(ValueError, match="empty"):
            character_consistency(marker_video(), CharacterStore(), provider)


class TestCropMasked:
    def test_background_zeroed_and_cropped(self):
        canvas = np.full((8, 8, 3), 77, np.uint8)
        bits = np.zeros((8, 8), bool)
        bits[2:5, 3:7] = True
        crop = crop_masked(Frame(canvas), BinaryMask(bits))
        assert (crop.width, crop.height) == (4, 3)
        assert (crop.pixels == 77).all()

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            crop_masked(media.solid_frame(4, 4, (1, 1, 1)), BinaryMask(np.zeros((4, 4), bool)))


class TestSmoothness:
    def test_static_video_reference_is_one(self, rng):
        texture = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        seq = FrameSequence(tuple(Frame(texture) for _ in range(4)), fps=Fraction(8))
        result = smoothness_score(seq, provider=None)
        assert result.score == 1.0
        assert result.source == "reference"

    def test_provider_value_used_when_available(self):
        provider = ScriptedProvider(smoothness_fn=lambda seq: 0.42)
        result = smoothness_score(constant_sequence((5, 5, 5), 3), provider)
        assert result == (0.42, "provider")

    def test_provider_failure_falls_back_with_provenance(self, rng, caplog):
        def boom(seq):
            raise ProviderOpError("no smoothness model")

        texture = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        seq = FrameSequence(tuple(Frame(texture) for _ in range(3)), fps=Fraction(8))
        with caplog.at_level(logging.WARNING):
            result = smoothness_score(seq, ScriptedProvider(smoothness_fn=boom))
        assert result.source == "reference"
        assert result.score == 1.0
        assert "falling back" in caplog.text or "reference" in caplog.text


def two_sprite_video(rng, frames=4):
    """Identical sprites moving +2 px/frame, one per canvas half.

    The sprites share texture, size, and block phase, so both trigger the
    same number of moving blocks; only the mask side differs.
    """
    texture = rng.integers(64, 256, (16, 16, 3), dtype=np.uint8)
    out = []
    for i in range(frames):
        canvas = np.full((64, 80, 3), 24, np.uint8)  # 80 wide, 64 tall
        xa, xb = 4 + 2 * i, 44 + 2 * i
        canvas[8:24, xa : xa + 16] = texture
        canvas[40:56, xb : xb + 16] = texture
        out.append(Frame(canvas))
    return FrameSequence(tuple(out), fps=Fraction(8))


def left_half_mask(width=80, height=64, split=40) -> BinaryMask:
    bits = np.zeros((height, width), bool)
    bits[:, :split] = True
    return BinaryMask(bits)


class TestMotionMaskPrecision:
    def test_motion_inside_mask_only(self, rng):
        seq, truth = sprite_sequence(rng, frames=4, dx=2, width=80, height=64)
        mask = left_half_mask()
        assert motion_mask_precision(seq, mask, flow_thresh=1.0) == 1.0

    def test_half_outside_gives_half(self, rng):
        video = two_sprite_video(rng)
        precision = motion_mask_precision(video, left_half_mask(), flow_thresh=1.0)
        assert abs(precision - 0.5) <= 0.02

    def test_static_video_is_one(self):
        video = constant_sequence((70, 70, 70), 4, width=80, height=64)
        assert motion_mask_precision(video, left_half_mask(), flow_thresh=1.0) == 1.0

    def test_monotone_under_dilation(self, rng):
        video = two_sprite_video(rng)
        base = motion_mask_precision(video, left_half_mask(), flow_thresh=1.0)
        dilated = motion_mask_precision(video, left_half_mask(split=64), flow_thresh=1.0)
        assert dilated >= base

    def test_dimension_mismatch(self, rng):
        video = two_sprite_video(rng)
        with pytest.raises(ValueError, match="does not match"):
            motion_mask_precision(video, left_half_mask(width=16, height=16), 1.0)


class TestSaliencyBoxes:
    def test_uniform_frame_no_boxes(self):
        assert saliency_boxes(media.solid_frame(32, 32, (90, 90, 90)), ReferenceProvider()) == []

    def test_two_sprites_two_boxes_tight(self, rng):
        canvas = np.full((48, 48, 3), 30, np.uint8)
        canvas[4:16, 6:18] = (250, 60, 60)
        canvas[30:42, 28:40] = (60, 250, 60)
        boxes = saliency_boxes(Frame(canvas), ReferenceProvider())
        assert len(boxes) == 2
        first, second = boxes
        assert abs(first.x0 - 6) <= 1 and abs(first.y0 - 4) <= 1
        assert abs(first.x1 - 17) <= 1 and abs(first.y1 - 15) <= 1
        assert abs(second.x0 - 28) <= 1 and abs(second.y0 - 30) <= 1

    def test_min_area_filter(self, rng):
        canvas = np.full((32, 32, 3), 30, np.uint8)
        canvas[4:16, 4:16] = (250, 60, 60)
        boxes = saliency_boxes(Frame(canvas), ReferenceProvider(), min_area=1000)
        assert boxes == []


class TestMetricVector:
    def test_dict_roundtrip(self):
        vector = MetricVector(smoothness=0.5, motion=None, appeal=0.1,
                              text_video=0.9, image_video=0.2, character=None)
        assert MetricVector.from_dict(vector.to_dict()) == vector
