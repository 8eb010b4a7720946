"""Classical per-clip scoring kernels behind the curation filter.

Everything here is deterministic and numpy-vectorized: HSV content deltas
for scene cuts, exhaustive block-matching flow, gradient-based text-cover
estimation, a colorfulness/contrast/sharpness aesthetic composite, and
flow-based motion classing. Learned counterparts of these kernels plug in
through the providers module instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .media import BinaryMask, Frame, FrameSequence, connected_components, rgb_to_hsv, to_luma

DEFAULT_SCENE_THRESHOLD = 27.0
DEFAULT_MIN_SCENE_LEN = 15
DEFAULT_BLOCK_SIZE = 8
DEFAULT_SEARCH_RADIUS = 7
DEFAULT_FLOW_SAMPLE_FPS = 8.0
# top breakpoint stays reachable: radius 7 at 8 fps sampling caps the
# measurable rate near 56 px/s
DEFAULT_MOTION_BREAKPOINTS = (1.0, 4.0, 10.0, 24.0, 48.0)
DEFAULT_AESTHETIC_WEIGHTS = (0.4, 0.3, 0.3)
DEFAULT_COLORFULNESS_NORM = 120.0
DEFAULT_CONTRAST_NORM = 0.5
DEFAULT_SHARPNESS_NORM = 4.0
# block-matched grayscale noise leaves a ~0.24 mean residual; normalizing
# by 0.25 pins "incoherent" at score ~0
DEFAULT_SMOOTHNESS_RESIDUAL_NORM = 0.25


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-block integer motion vectors (dx, dy) on a coarse grid."""

    vectors: np.ndarray  # (grid_h, grid_w, 2) int32, last axis (dx, dy)
    block_size: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.vectors, dtype=np.int32)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"flow vectors must be (gh, gw, 2), got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    def magnitudes(self) -> np.ndarray:
        v = self.vectors.astype(np.float64)
        return np.hypot(v[..., 0], v[..., 1])


@dataclass(frozen=True)
class SceneCut:
    """First frame of a new scene and the content delta that triggered it."""

    frame_index: int
    score: float


def content_delta(frame_a: Frame, frame_b: Frame) -> float:
    """Mean per-pixel average absolute HSV difference, each channel in [0, 255].

    Symmetric; 0 for identical frames; 255 is the theoretical maximum.
    """
    if (frame_a.width, frame_a.height) != (frame_b.width, frame_b.height):
        raise ValueError(
            f"dimension mismatch: {frame_a.width}x{frame_a.height} vs "
            f"{frame_b.width}x{frame_b.height}"
        )
    diff = np.abs(rgb_to_hsv(frame_a) - rgb_to_hsv(frame_b))
    return float(diff.mean())


def find_cuts(
    seq: FrameSequence,
    threshold: float = DEFAULT_SCENE_THRESHOLD,
    min_scene_len: int = DEFAULT_MIN_SCENE_LEN,
) -> list[SceneCut]:
    """Scene cuts: delta(prev, cur) > threshold, at least min_scene_len apart.

    The sequence start counts as the previous cut, so no cut can appear
    before frame index min_scene_len.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if min_scene_len < 1:
        raise ValueError(f"min_scene_len must be >= 1, got {min_scene_len}")
    cuts: list[SceneCut] = []
    last_cut = 0
    for i in range(1, len(seq)):
        delta = content_delta(seq[i - 1], seq[i])
        if delta > threshold and i - last_cut >= min_scene_len:
            cuts.append(SceneCut(frame_index=i, score=delta))
            last_cut = i
    return cuts


def detect_scenes(
    seq: FrameSequence,
    threshold: float = DEFAULT_SCENE_THRESHOLD,
    min_scene_len: int = DEFAULT_MIN_SCENE_LEN,
) -> list[tuple[int, int]]:
    """Clip ranges [start, end) tiling the sequence exactly, split at cuts."""
    bounds = [0] + [c.frame_index for c in find_cuts(seq, threshold, min_scene_len)]
    bounds.append(len(seq))
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def block_flow(
    frame_a: Frame,
    frame_b: Frame,
    block_size: int = DEFAULT_BLOCK_SIZE,
    radius: int = DEFAULT_SEARCH_RADIUS,
) -> FlowField:
    """Exhaustive block matching on luma over displacements within +-radius.

    Each grid block of frame_a gets the (dx, dy) minimizing the sum of
    absolute luma differences against frame_b (edge-replicated outside the
    frame). Ties break toward smallest |dx|+|dy|, then smallest dy, then
    smallest dx, so identical frames yield an all-zero field.
    """
    if (frame_a.width, frame_a.height) != (frame_b.width, frame_b.height):
        raise ValueError(
            f"dimension mismatch: {frame_a.width}x{frame_a.height} vs "
            f"{frame_b.width}x{frame_b.height}"
        )
    if block_size < 2:
        raise ValueError(f"block size must be >= 2, got {block_size}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")

    # quantized integer luma keeps the integral-image sums exact, so SAD
    # ties (flat regions) resolve by the tie-break instead of float crumbs
    scale = 255.0 * 256.0
    la = np.rint(to_luma(frame_a) * scale).astype(np.int64)
    lb = np.rint(to_luma(frame_b) * scale).astype(np.int64)
    height, width = la.shape
    grid_h = -(-height // block_size)
    grid_w = -(-width // block_size)
    padded = np.pad(lb, radius, mode="edge")
    y_edges = np.minimum(np.arange(grid_h + 1) * block_size, height)
    x_edges = np.minimum(np.arange(grid_w + 1) * block_size, width)

    candidates = sorted(
        ((dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda v: (abs(v[0]) + abs(v[1]), v[1], v[0]),
    )
    best_cost = np.full((grid_h, grid_w), np.iinfo(np.int64).max, np.int64)
    best = np.zeros((grid_h, grid_w, 2), np.int32)
    for dx, dy in candidates:
        shifted = padded[radius + dy : radius + dy + height, radius + dx : radius + dx + width]
        diff = np.abs(la - shifted)
        integral = np.zeros((height + 1, width + 1), np.int64)
        np.cumsum(np.cumsum(diff, axis=0), axis=1, out=integral[1:, 1:])
        sums = (
            integral[np.ix_(y_edges[1:], x_edges[1:])]
            - integral[np.ix_(y_edges[:-1], x_edges[1:])]
            - integral[np.ix_(y_edges[1:], x_edges[:-1])]
            + integral[np.ix_(y_edges[:-1], x_edges[:-1])]
        )
        better = sums < best_cost
        best_cost[better] = sums[better]
        best[better] = (dx, dy)
    return FlowField(vectors=best, block_size=block_size)


def flow_score(
    seq: FrameSequence,
    block_size: int = DEFAULT_BLOCK_SIZE,
    radius: int = DEFAULT_SEARCH_RADIUS,
    sample_fps: float = DEFAULT_FLOW_SAMPLE_FPS,
) -> float:
    """Mean block-flow magnitude in pixels/second.

    Frames are subsampled so pairs are compared at no more than sample_fps;
    the mean per-pair pixel displacement is multiplied by the effective
    pair rate, making the score a rate that is invariant to the sampling
    stride for smooth motion.
    """
    if len(seq) < 2:
        raise ValueError("flow undefined for a single-frame clip")
    if sample_fps <= 0:
        raise ValueError(f"sample_fps must be positive, got {sample_fps}")
    stride = max(1, math.ceil(seq.fps / sample_fps))
    stride = min(stride, len(seq) - 1)
    indices = list(range(0, len(seq), stride))
    mags = [
        block_flow(seq[i], seq[j], block_size, radius).magnitudes()
        for i, j in zip(indices, indices[1:])
    ]
    effective_fps = seq.fps / stride
    return float(np.concatenate([m.ravel() for m in mags]).mean() * float(effective_fps))


def text_cover_score(
    frame: Frame,
    band_fraction: float = 0.25,
    min_area: int = 4,
    max_area_frac: float = 0.2,
    min_aspect: float = 0.08,
    max_aspect: float = 12.0,
    full_frame: bool = False,
) -> float:
    """Fraction of the bottom band covered by glyph-like high-gradient regions.

    Binarizes Sobel gradient magnitude with Otsu's threshold inside the
    band, then keeps 4-connected regions whose pixel count and bounding-box
    aspect ratio fall inside the configured glyph bounds. full_frame widens
    the band to the whole frame.
    """
    if not 0 < band_fraction <= 1:
        raise ValueError(f"band_fraction must be in (0, 1], got {band_fraction}")
    luma = to_luma(frame)
    band_top = 0 if full_frame else int(frame.height * (1.0 - band_fraction))
    band = luma[band_top:, :]
    if band.size == 0:
        return 0.0
    gx = ndimage.sobel(band, axis=1, mode="reflect")
    gy = ndimage.sobel(band, axis=0, mode="reflect")
    grad = np.hypot(gx, gy)
    threshold = _otsu_threshold(grad)
    if threshold is None:
        return 0.0
    mask = BinaryMask(grad > threshold)
    band_area = band.size
    covered = 0
    for region in connected_components(mask):
        aspect = region.box_width / region.box_height
        if region.area < min_area or region.area > max_area_frac * band_area:
            continue
        if not min_aspect <= aspect <= max_aspect:
            continue
        covered += region.area
    return covered / band_area


def aesthetic_ref_score(
    frame: Frame,
    weights: Sequence[float] = DEFAULT_AESTHETIC_WEIGHTS,
    colorfulness_norm: float = DEFAULT_COLORFULNESS_NORM,
    contrast_norm: float = DEFAULT_CONTRAST_NORM,
    sharpness_norm: float = DEFAULT_SHARPNESS_NORM,
) -> float:
    """Composite aesthetic score in [0, 10].

    10 * (w_c * colorfulness + w_k * RMS contrast + w_s * Laplacian
    sharpness), each sub-score clamped to [0, 1] by its norm constant.
    Colorfulness is the Hasler-Suesstrunk opponent-channel statistic.
    """
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"weights must be three values summing to 1, got {weights}")
    rgb = frame.pixels.astype(np.float64)
    rg = rgb[..., 0] - rgb[..., 1]
    yb = 0.5 * (rgb[..., 0] + rgb[..., 1]) - rgb[..., 2]
    colorfulness = math.hypot(rg.std(), yb.std()) + 0.3 * math.hypot(rg.mean(), yb.mean())
    luma = to_luma(frame)
    contrast = float(luma.std())
    sharpness = float(np.abs(ndimage.laplace(luma, mode="reflect")).mean())
    c = min(colorfulness / colorfulness_norm, 1.0)
    k = min(contrast / contrast_norm, 1.0)
    s = min(sharpness / sharpness_norm, 1.0)
    return 10.0 * (w[0] * c + w[1] * k + w[2] * s)


def motion_class(
    seq: FrameSequence,
    breakpoints: Sequence[float] = DEFAULT_MOTION_BREAKPOINTS,
    block_size: int = DEFAULT_BLOCK_SIZE,
    radius: int = DEFAULT_SEARCH_RADIUS,
    sample_fps: float = DEFAULT_FLOW_SAMPLE_FPS,
) -> int:
    """Movement-amplitude degree 1..6: flow_score binned by 5 breakpoints."""
    bp = tuple(float(b) for b in breakpoints)
    if len(bp) != 5 or any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
        raise ValueError(f"need 5 strictly increasing breakpoints, got {breakpoints}")
    score = flow_score(seq, block_size, radius, sample_fps)
    return 1 + sum(score > b for b in bp)


def warp_forward(values: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Forward-warp a (h, w) plane by per-block vectors.

    Returns (sums, counts): each source block is translated by its vector
    and accumulated into the destination; counts tracks how many blocks
    contributed to each destination pixel. Destinations falling outside the
    plane are dropped.
    """
    height, width = values.shape
    bs = flow.block_size
    sums = np.zeros((height, width))
    counts = np.zeros((height, width), np.int32)
    for by in range(flow.height):
        for bx in range(flow.width):
            dx, dy = int(flow.vectors[by, bx, 0]), int(flow.vectors[by, bx, 1])
            y0, y1 = by * bs, min((by + 1) * bs, height)
            x0, x1 = bx * bs, min((bx + 1) * bs, width)
            ty0, ty1 = y0 + dy, y1 + dy
            tx0, tx1 = x0 + dx, x1 + dx
            cy0, cy1 = max(ty0, 0), min(ty1, height)
            cx0, cx1 = max(tx0, 0), min(tx1, width)
            if cy0 >= cy1 or cx0 >= cx1:
                continue
            sy0, sx0 = y0 + (cy0 - ty0), x0 + (cx0 - tx0)
            sy1, sx1 = sy0 + (cy1 - cy0), sx0 + (cx1 - cx0)
            sums[cy0:cy1, cx0:cx1] += values[sy0:sy1, sx0:sx1]
            counts[cy0:cy1, cx0:cx1] += 1
    return sums, counts


def warp_smoothness(
    seq: FrameSequence,
    residual_norm: float = DEFAULT_SMOOTHNESS_RESIDUAL_NORM,
    block_size: int = DEFAULT_BLOCK_SIZE,
    radius: int = DEFAULT_SEARCH_RADIUS,
) -> float:
    """Reference smoothness: 1 - clamped flow-compensated warp residual.

    For each consecutive pair the earlier luma plane is forward-warped by
    block flow toward the later one; the mean absolute residual over covered
    pixels, divided by residual_norm and clamped to [0, 1], is the
    per-pair roughness. Static clips score exactly 1.
    """
    if len(seq) < 2:
        raise ValueError("smoothness undefined for a single-frame clip")
    if residual_norm <= 0:
        raise ValueError(f"residual_norm must be positive, got {residual_norm}")
    residuals = []
    lumas = [to_luma(f) for f in seq]
    for i in range(len(seq) - 1):
        flow = block_flow(seq[i], seq[i + 1], block_size, radius)
        sums, counts = warp_forward(lumas[i], flow)
        covered = counts > 0
        if not covered.any():
            residuals.append(float(np.abs(lumas[i] - lumas[i + 1]).mean()))
            continue
        warped = sums[covered] / counts[covered]
        residuals.append(float(np.abs(warped - lumas[i + 1][covered]).mean()))
    mean_residual = float(np.mean(residuals))
    return 1.0 - min(mean_residual / residual_norm, 1.0)


def _otsu_threshold(values: np.ndarray) -> float | None:
    """Otsu's between-class threshold; None when the input has no spread."""
    flat = values.ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        return None
    hist, edges = np.histogram(flat, bins=256, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weights = hist.astype(np.float64)
    total = weights.sum()
    w0 = np.cumsum(weights)
    w1 = total - w0
    cum_mean = np.cumsum(weights * centers)
    mean0 = np.divide(cum_mean, w0, out=np.zeros_like(w0), where=w0 > 0)
    mean1 = np.divide(
        cum_mean[-1] - cum_mean, w1, out=np.zeros_like(w1), where=w1 > 0
    )
    variance = w0 * w1 * (mean0 - mean1) ** 2
    best = int(np.argmax(variance))
    if variance[best] <= 0:
        return None
    return float(centers[best])
