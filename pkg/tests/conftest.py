"""Shared fixtures: synthetic frames, videos, and provider test doubles."""

from __future__ import annotations

from fractions import Fraction
from typing import Callable

import numpy as np
import pytest

from anicurate import media
from anicurate.media import BinaryMask, Frame, FrameSequence
from anicurate.providers import Embedding, cosine


def random_frame(rng: np.random.Generator, width: int = 32, height: int = 32) -> Frame:
    return Frame(rng.integers(0, 256, (height, width, 3), dtype=np.uint8))


def checkerboard_frame(width: int = 32, height: int = 32, cell: int = 1) -> Frame:
    ys, xs = np.mgrid[0:height, 0:width]
    board = ((ys // cell + xs // cell) % 2 * 255).astype(np.uint8)
    return Frame(np.stack([board, board, board], axis=-1))


def rolled_sequence(
    rng: np.random.Generator,
    frames: int,
    shift_per_frame: int,
    width: int = 32,
    height: int = 32,
    fps: int = 8,
) -> FrameSequence:
    """Random texture translated horizontally with wraparound each frame."""
    texture = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    return FrameSequence(
        tuple(Frame(np.roll(texture, i * shift_per_frame, axis=1)) for i in range(frames)),
        fps=Fraction(fps),
    )


def constant_sequence(
    rgb: tuple[int, int, int],
    frames: int,
    width: int = 32,
    height: int = 32,
    fps: int = 8,
) -> FrameSequence:
    return FrameSequence(
        tuple(media.solid_frame(width, height, rgb) for _ in range(frames)),
        fps=Fraction(fps),
    )


def sprite_sequence(
    rng: np.random.Generator,
    frames: int,
    sprite_size: int = 16,
    start_x: int = 4,
    start_y: int = 8,
    dx: int = 2,
    width: int = 64,
    height: int = 64,
    background: tuple[int, int, int] = (32, 32, 32),
    fps: int = 8,
) -> tuple[FrameSequence, list[BinaryMask]]:
    """A textured sprite translating dx px/frame over a flat background.

    Returns the sequence plus the ground-truth sprite mask per frame.
    """
    texture = rng.integers(64, 256, (sprite_size, sprite_size, 3), dtype=np.uint8)
    out_frames, masks = [], []
    for i in range(frames):
        canvas = np.empty((height, width, 3), np.uint8)
        canvas[:] = np.asarray(background, np.uint8)
        x = start_x + i * dx
        canvas[start_y : start_y + sprite_size, x : x + sprite_size] = texture
        bits = np.zeros((height, width), bool)
        bits[start_y : start_y + sprite_size, x : x + sprite_size] = True
        out_frames.append(Frame(canvas))
        masks.append(BinaryMask(bits))
    return FrameSequence(tuple(out_frames), fps=Fraction(fps)), masks


def basis_embedding(index: int, dim: int) -> Embedding:
    values = np.zeros(dim)
    values[index] = 1.0
    return Embedding(values)


class ScriptedProvider:
    """Provider test double with per-op hooks.

    Unset hooks raise, so a test only wires what the metric under test
    uses. The regression and aesthetic heads default to the reference
    (cos + 1) / 2 forms.
    """

    def __init__(
        self,
        text_fn: Callable | None = None,
        image_fn: Callable | None = None,
        video_fn: Callable | None = None,
        caption_fn: Callable | None = None,
        masks_fn: Callable | None = None,
        smoothness_fn: Callable | None = None,
        aesthetic_fn: Callable | None = None,
        regression_fn: Callable | None = None,
    ):
        self._text = text_fn
        self._image = image_fn
        self._video = video_fn
        self._caption = caption_fn
        self._masks = masks_fn
        self._smoothness = smoothness_fn
        self._aesthetic = aesthetic_fn
        self._regression = regression_fn

    def _get(self, hook, name):
        if hook is None:
            raise AssertionError(f"ScriptedProvider has no {name} hook")
        return hook

    def embed_text(self, text):
        return self._get(self._text, "text")(text)

    def embed_image(self, frame):
        return self._get(self._image, "image")(frame)

    def embed_video(self, seq):
        return self._get(self._video, "video")(seq)

    def caption(self, meta):
        return self._get(self._caption, "caption")(meta)

    def char_masks(self, frame):
        return self._get(self._masks, "masks")(frame)

    def score_smoothness(self, seq):
        return self._get(self._smoothness, "smoothness")(seq)

    def score_aesthetic(self, embedding):
        if self._aesthetic is None:
            anchor = Embedding.normalized(np.ones(embedding.dim))
            return (cosine(embedding, anchor) + 1.0) / 2.0
        return self._aesthetic(embedding)

    def score_regression(self, a, b):
        if self._regression is None:
            return (cosine(a, b) + 1.0) / 2.0
        return self._regression(a, b)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
