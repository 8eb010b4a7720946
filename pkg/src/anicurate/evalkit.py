"""Benchmark schema and the six evaluation metrics for generated videos.

Each metric reduces to a published formula over provider outputs: a softmax
over motion-prompt similarities, mean aesthetic regression over keyframes,
regression heads over embedding pairs for text/image consistency, max-cosine
character matching against a feature store, and a smoothness regressor with
a flow-compensated warp-residual fallback. All scores live in [0, 1]; report
scaling to 0-100 happens in the report module.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import analysis, media
from .media import BinaryMask, Frame, FrameSequence, Region
from .providers import Embedding, Provider, cosine

log = logging.getLogger(__name__)

METRICS = ("smoothness", "motion", "appeal", "text_video", "image_video", "character")

# inference prompts for the motion-amplitude scorer
PROMPT_LARGE_MOTION = (
    "The protagonist has a large range of movement, such as running, jumping, "
    "dancing, or waving arms."
)
PROMPT_STATIONARY = (
    "The protagonist remains stationary in the video with no apparent movement."
)

FULL_SET_TOTAL = 948
FULL_SET_2D = 857
FULL_SET_3D = 91
LABEL_BAND = (10, 30)

DEFAULT_CHARACTER_SAMPLE_FRAMES = 8
DEFAULT_KEYFRAME_COUNT = 5


class BenchmarkFormatError(ValueError):
    """Raised when a benchmark manifest violates its schema or counts."""


@dataclass(frozen=True)
class GuideFrameRef:
    position: int
    image: str


@dataclass(frozen=True)
class CharacterRef:
    character_id: str
    images: tuple[str, ...]


@dataclass(frozen=True)
class BenchmarkEntry:
    """One evaluation case: prompt, guides, style, and ground-truth clip."""

    entry_id: str
    action_label: str
    style: str
    prompt: str
    guide_frames: tuple[GuideFrameRef, ...]
    character_refs: tuple[CharacterRef, ...] = ()
    gt_clip: str = ""

    def __post_init__(self) -> None:
        if self.style not in ("2D", "3D"):
            raise BenchmarkFormatError(
                f"entry {self.entry_id}: style must be 2D or 3D, got {self.style!r}"
            )
        if not self.prompt:
            raise BenchmarkFormatError(f"entry {self.entry_id}: prompt is empty")
        if not self.guide_frames:
            raise BenchmarkFormatError(f"entry {self.entry_id}: needs at least one guide frame")


@dataclass(frozen=True)
class Benchmark:
    full_set: bool
    entries: tuple[BenchmarkEntry, ...]


def load_benchmark(path: str | Path) -> Benchmark:
    """Load and validate a benchmark manifest.

    Manifests declaring full_set=true must carry exactly 948 entries split
    857 2D / 91 3D; action labels outside the 10-30 clip band only warn.
    Partial fixtures (full_set=false) skip the count checks.
    """
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or "entries" not in data:
        raise BenchmarkFormatError("manifest must be an object with an 'entries' list")
    full_set = bool(data.get("full_set", False))
    entries = []
    seen_ids = set()
    for raw in data["entries"]:
        try:
            entry = BenchmarkEntry(
                entry_id=str(raw["id"]),
                action_label=str(raw["action_label"]),
                style=str(raw["style"]),
                prompt=str(raw["prompt"]),
                guide_frames=tuple(
                    GuideFrameRef(position=int(g["position"]), image=str(g["image"]))
                    for g in raw.get("guide_frames", [])
                ),
                character_refs=tuple(
                    CharacterRef(
                        character_id=str(c["character_id"]),
                        images=tuple(str(i) for i in c.get("images", [])),
                    )
                    for c in raw.get("character_refs", [])
                ),
                gt_clip=str(raw.get("gt_clip", "")),
            )
        except KeyError as exc:
            raise BenchmarkFormatError(
                f"entry {raw.get('id', '?')}: missing field {exc}"
            ) from exc
        if entry.entry_id in seen_ids:
            raise BenchmarkFormatError(f"duplicate entry id {entry.entry_id}")
        seen_ids.add(entry.entry_id)
        entries.append(entry)

    if full_set:
        total = len(entries)
        by_style = {"2D": 0, "3D": 0}
        by_label: dict[str, int] = {}
        for e in entries:
            by_style[e.style] += 1
            by_label[e.action_label] = by_label.get(e.action_label, 0) + 1
        if total != FULL_SET_TOTAL or by_style["2D"] != FULL_SET_2D or by_style["3D"] != FULL_SET_3D:
            raise BenchmarkFormatError(
                f"full set must have {FULL_SET_TOTAL} entries "
                f"({FULL_SET_2D} 2D / {FULL_SET_3D} 3D), got {total} "
                f"({by_style['2D']} 2D / {by_style['3D']} 3D)"
            )
        for label, count in sorted(by_label.items()):
            if not LABEL_BAND[0] <= count <= LABEL_BAND[1]:
                log.warning(
                    "label %r has %d clips, outside the %d-%d band",
                    label, count, LABEL_BAND[0], LABEL_BAND[1],
                )
    return Benchmark(full_set=full_set, entries=tuple(entries))


@dataclass
class CharacterStore:
    """Reference feature vectors per character id; embeddings unit-norm."""

    features: dict[str, list[Embedding]] = field(default_factory=dict)

    def add(self, character_id: str, embedding: Embedding) -> None:
        self.features.setdefault(character_id, []).append(
            Embedding.normalized(embedding.values)
        )

    def all_embeddings(self) -> list[Embedding]:
        return [e for embs in self.features.values() for e in embs]

    def __len__(self) -> int:
        return sum(len(v) for v in self.features.values())

    def __bool__(self) -> bool:
        return len(self) > 0

    def save(self, path: str | Path) -> None:
        payload = {
            cid: [e.values.tolist() for e in embs]
            for cid, embs in sorted(self.features.items())
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CharacterStore":
        data = json.loads(Path(path).read_text())
        store = cls()
        for cid, vectors in data.items():
            for vec in vectors:
                store.add(cid, Embedding.normalized(np.asarray(vec, dtype=np.float64)))
        return store


@dataclass(frozen=True)
class MetricVector:
    """Scores on the six dimensions; None marks a not-applicable metric."""

    smoothness: float | None = None
    motion: float | None = None
    appeal: float | None = None
    text_video: float | None = None
    image_video: float | None = None
    character: float | None = None

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRICS}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricVector":
        return cls(**{name: data.get(name) for name in METRICS})


# ---------------------------------------------------------------------------
# metrics


def motion_probabilities(video: FrameSequence, provider: Provider) -> tuple[float, float]:
    """(moving, stationary) probabilities from a softmax over prompt cosines.

    Temperature 1; the stationary probability is the exact complement of
    the moving one.
    """
    video_embedding = provider.embed_video(video)
    cos_moving = cosine(video_embedding, provider.embed_text(PROMPT_LARGE_MOTION))
    cos_still = cosine(video_embedding, provider.embed_text(PROMPT_STATIONARY))
    peak = max(cos_moving, cos_still)
    p_moving = math.exp(cos_moving - peak) / (
        math.exp(cos_moving - peak) + math.exp(cos_still - peak)
    )
    return p_moving, 1.0 - p_moving


def motion_score(video: FrameSequence, provider: Provider) -> float:
    """Probability that the clip matches the large-motion prompt, in (0, 1)."""
    return motion_probabilities(video, provider)[0]


def extract_keyframes(video: FrameSequence, k: int) -> list[int]:
    """Indices of the k largest content-delta peaks, ascending.

    Peaks are non-maximum suppressed over a window of fps/2 frames; when
    fewer than k peaks exist, evenly spaced indices fill the remainder (so
    a constant clip falls back to uniform sampling). At most
    min(k, frame_count) indices are returned.
    """
    if k < 1:
        raise ValueError(f"keyframe count must be >= 1, got {k}")
    deltas = [
        (analysis.content_delta(video[i - 1], video[i]), i) for i in range(1, len(video))
    ]
    window = max(1, int(round(float(video.fps) / 2.0)))
    chosen: list[int] = []
    for delta, idx in sorted(deltas, key=lambda d: (-d[0], d[1])):
        if delta <= 0.0 or len(chosen) >= k:
            break
        if all(abs(idx - kept) >= window for kept in chosen):
            chosen.append(idx)
    taken = set(chosen)
    for idx in media.sample_frames(video, k):
        if len(chosen) >= k:
            break
        if idx not in taken:
            chosen.append(idx)
            taken.add(idx)
    return sorted(chosen)


def appeal_score(
    video: FrameSequence, provider: Provider, keyframe_count: int = DEFAULT_KEYFRAME_COUNT
) -> float:
    """Mean aesthetic regression over keyframe embeddings, clamped to [0, 1]."""
    indices = extract_keyframes(video, keyframe_count)
    scores = [
        provider.score_aesthetic(provider.embed_image(video[i])) for i in indices
    ]
    return min(max(math.fsum(scores) / len(scores), 0.0), 1.0)


def text_video_consistency(video: FrameSequence, prompt: str, provider: Provider) -> float:
    """Regression head over the video and prompt embeddings."""
    return float(
        provider.score_regression(provider.embed_video(video), provider.embed_text(prompt))
    )


def image_video_consistency(
    video: FrameSequence, guide_image: Frame, provider: Provider
) -> float:
    """Regression head over vision-encoder embeddings of video and guide.

    The guide image goes through the video encoder as a one-frame sequence
    so both embeddings share the same space.
    """
    still = FrameSequence((guide_image,), fps=video.fps)
    return float(
        provider.score_regression(provider.embed_video(video), provider.embed_video(still))
    )


def crop_masked(frame: Frame, mask: BinaryMask) -> Frame:
    """Zero the background and crop to the mask's bounding box."""
    if (mask.width, mask.height) != (frame.width, frame.height):
        raise ValueError(
            f"mask {mask.width}x{mask.height} does not match frame "
            f"{frame.width}x{frame.height}"
        )
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise ValueError("cannot crop an empty mask")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    pixels = np.where(
        mask.bits[y0:y1, x0:x1, np.newaxis], frame.pixels[y0:y1, x0:x1], 0
    ).astype(np.uint8)
    return Frame(pixels)


def character_consistency(
    video: FrameSequence,
    store: CharacterStore,
    provider: Provider,
    sample_count: int = DEFAULT_CHARACTER_SAMPLE_FRAMES,
) -> float:
    """Mean over sampled frames of the best stored-character cosine match.

    Per frame: extract character masks, embed each background-zeroed crop,
    take the max cosine against every stored feature (clipped at 0), then
    the max over masks. Frames with no mask contribute 0.
    """
    if not store:
        raise ValueError("character store is empty")
    stored = store.all_embeddings()
    indices = media.sample_frames(video, sample_count)
    frame_scores = []
    for i in indices:
        best = 0.0
        for mask in provider.char_masks(video[i]):
            if not mask.bits.any():
                continue
            embedding = provider.embed_image(crop_masked(video[i], mask))
            match = max(cosine(embedding, ref) for ref in stored)
            best = max(best, max(match, 0.0))
        frame_scores.append(best)
    return math.fsum(frame_scores) / len(frame_scores)


class SmoothnessResult(NamedTuple):
    score: float
    source: str  # "provider" or "reference"


def smoothness_score(
    video: FrameSequence,
    provider: Provider | None = None,
    residual_norm: float = analysis.DEFAULT_SMOOTHNESS_RESIDUAL_NORM,
) -> SmoothnessResult:
    """Smoothness in [0, 1], from the provider when configured.

    Provider failures fall back to the flow-compensated warp-residual
    reference and flag the provenance in the result.
    """
    if provider is not None:
        try:
            value = float(provider.score_smoothness(video))
            return SmoothnessResult(min(max(value, 0.0), 1.0), "provider")
        except Exception as exc:  # degrade to the reference scorer
            log.warning("smoothness provider failed, using reference: %s", exc)
    return SmoothnessResult(analysis.warp_smoothness(video, residual_norm), "reference")


def motion_mask_precision(
    video: FrameSequence,
    mask: BinaryMask,
    flow_thresh: float,
    block_size: int = analysis.DEFAULT_BLOCK_SIZE,
    radius: int = analysis.DEFAULT_SEARCH_RADIUS,
) -> float:
    """Fraction of moving blocks whose center lies inside the motion mask.

    A block moves when its flow magnitude exceeds flow_thresh, measured over
    every consecutive frame pair. A fully static clip scores 1.0.
    """
    if (mask.width, mask.height) != (video.width, video.height):
        raise ValueError(
            f"mask {mask.width}x{mask.height} does not match frames "
            f"{video.width}x{video.height}"
        )
    if len(video) < 2:
        raise ValueError("motion precision needs at least two frames")
    inside = 0
    total = 0
    height, width = video.height, video.width
    for i in range(len(video) - 1):
        flow = analysis.block_flow(video[i], video[i + 1], block_size, radius)
        moving = flow.magnitudes() > flow_thresh
        for by, bx in zip(*np.nonzero(moving)):
            y0, y1 = by * block_size, min((by + 1) * block_size, height)
            x0, x1 = bx * block_size, min((bx + 1) * block_size, width)
            cy, cx = (y0 + y1 - 1) // 2, (x0 + x1 - 1) // 2
            total += 1
            if mask.bits[cy, cx]:
                inside += 1
    return 1.0 if total == 0 else inside / total


def saliency_boxes(
    frame: Frame, provider: Provider, min_area: int = 16
) -> list[Region]:
    """Bounding boxes of salient instances via provider character masks.

    The masks are unioned, split into 4-connected components, and filtered
    by minimum area.
    """
    masks = provider.char_masks(frame)
    if not masks:
        return []
    union = masks[0].bits.copy()
    for m in masks[1:]:
        union |= m.bits
    regions = media.connected_components(BinaryMask(union))
    return [r for r in regions if r.area >= min_area]
