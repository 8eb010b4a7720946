"""Latent-space conditioning constructions for guided video generation.

Covers the pooling encoder stub that honors the (W/8, H/8, T/4, 16) latent
shape contract, guide/mask sequence assembly, mask reprojection, the
channel-concatenated transformer input, noise-schedule algebra with
v-prediction targets, unmask-plan sampling, and motion-area mask processing.

Latent arrays use axis order (x, y, frame, channel) so shapes read
(width, height, time, channels), matching the serialized contract. Masks on
the pixel grid use (x, y) or (x, y, frame); `pixel_mask_grid` converts from
the row-major masks used by the media module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import chain, count
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import FlowField, block_flow, warp_forward
from .media import BinaryMask, Frame, FrameSequence

SPATIAL_FACTOR = 8
TEMPORAL_FACTOR = 4
LATENT_CHANNELS = 16

# fixed 3 -> 16 channel lift: channel k copies RGB channel k % 3 scaled by
# 1 / (1 + k // 3); rank 3, so channels 0..2 invert it exactly
_LIFT = np.zeros((3, LATENT_CHANNELS))
for _k in range(LATENT_CHANNELS):
    _LIFT[_k % 3, _k] = 1.0 / (1.0 + _k // 3)
_LIFT.setflags(write=False)


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """Latent video tensor with shape (width, height, time, channels)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"latent tensor must be 4-d (w, h, t, c), got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("latent tensor contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LatentTensor):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class ScheduleParams:
    """Noise schedule defined by per-step betas in (0, 1)."""

    betas: tuple[float, ...]

    def __post_init__(self) -> None:
        betas = tuple(float(b) for b in self.betas)
        if not betas:
            raise ValueError("schedule needs at least one beta")
        if any(not 0.0 < b < 1.0 for b in betas):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(
            self, "_alpha_bars", tuple(np.cumprod([1.0 - b for b in betas]))
        )

    @classmethod
    def linear(
        cls, steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
    ) -> "ScheduleParams":
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        return cls(betas=tuple(np.linspace(beta_start, beta_end, steps)))

    @property
    def steps(self) -> int:
        return len(self.betas)


def alpha_bar(params: ScheduleParams, t: int) -> float:
    """Cumulative product of (1 - beta_i) for i = 1..t; strictly decreasing."""
    if not 1 <= t <= params.steps:
        raise ValueError(f"t must be in 1..{params.steps}, got {t}")
    return float(params._alpha_bars[t - 1])  # noqa: SLF001 - own frozen field


def noisy_latent(
    x0: np.ndarray, eps: np.ndarray, params: ScheduleParams, t: int
) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, elementwise."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    abar = alpha_bar(params, t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def v_target(
    x0: np.ndarray, eps: np.ndarray, params: ScheduleParams, t: int
) -> np.ndarray:
    """v = sqrt(1 - abar_t) * x0 - sqrt(abar_t) * eps, elementwise.

    With x_t from noisy_latent the pair satisfies the recovery identities
    x0 = sqrt(abar) x_t + sqrt(1-abar) v and eps = sqrt(1-abar) x_t -
    sqrt(abar) v.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    abar = alpha_bar(params, t)
    return np.sqrt(1.0 - abar) * x0 - np.sqrt(abar) * eps


# ---------------------------------------------------------------------------
# encoder stub


def encode_latent_array(video: np.ndarray) -> LatentTensor:
    """Pool a float (T, H, W, 3) video into a (W/8, H/8, T/4, 16) latent.

    8x8 spatial and 4x temporal mean pooling followed by the fixed linear
    channel lift. Linear in its input.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[3] != 3:
        raise ValueError(f"video array must be (t, h, w, 3), got {video.shape}")
    t, h, w = video.shape[:3]
    problems = []
    if w % SPATIAL_FACTOR:
        problems.append(f"width {w} not divisible by {SPATIAL_FACTOR}")
    if h % SPATIAL_FACTOR:
        problems.append(f"height {h} not divisible by {SPATIAL_FACTOR}")
    if t % TEMPORAL_FACTOR:
        problems.append(f"frame count {t} not divisible by {TEMPORAL_FACTOR}")
    if problems:
        raise ValueError("; ".join(problems) + " (pad or crop the clip first)")
    pooled = video.reshape(
        t // TEMPORAL_FACTOR,
        TEMPORAL_FACTOR,
        h // SPATIAL_FACTOR,
        SPATIAL_FACTOR,
        w // SPATIAL_FACTOR,
        SPATIAL_FACTOR,
        3,
    ).mean(axis=(1, 3, 5))
    lifted = pooled @ _LIFT  # (t', h', w', 16)
    return LatentTensor(lifted.transpose(2, 1, 0, 3))


def encode_latent_stub(seq: FrameSequence) -> LatentTensor:
    """Encode a uint8 frame sequence (pixel values scaled to [0, 1])."""
    video = np.stack([f.pixels for f in seq]).astype(np.float64) / 255.0
    return encode_latent_array(video)


def decode_latent_stub(latent: LatentTensor) -> np.ndarray:
    """Invert the channel lift and unpool back to a float (T, H, W, 3) video.

    Exact on latents produced from pooling-lossless inputs (e.g., constant
    colors); otherwise recovers the blockwise means.
    """
    data = latent.data.transpose(2, 1, 0, 3)  # (t', h', w', c)
    rgb = data[..., :3]  # lift channels 0..2 carry RGB at scale 1
    return (
        rgb.repeat(TEMPORAL_FACTOR, axis=0)
        .repeat(SPATIAL_FACTOR, axis=1)
        .repeat(SPATIAL_FACTOR, axis=2)
    )


# ---------------------------------------------------------------------------
# guide plans


@dataclass(frozen=True)
class GuidePlan:
    """Where guide latent frames sit and which spatial region each one pins.

    `spatial_masks` entries are (mask_w, mask_h) boolean grids (None means
    all-ones); `mask_dims` fixes the grid they live on, defaulting to the
    latent (w, h). `latent_dims` is only needed when there are no positions.
    """

    n_latent_frames: int
    positions: tuple[int, ...]
    guide_frames: tuple[np.ndarray, ...]
    spatial_masks: tuple[np.ndarray | None, ...] | None = None
    mask_dims: tuple[int, int] | None = None
    latent_dims: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.n_latent_frames < 1:
            raise ValueError(f"n_latent_frames must be >= 1, got {self.n_latent_frames}")
        positions = tuple(int(p) for p in self.positions)
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ValueError(f"positions must be strictly increasing, got {positions}")
        for p in positions:
            if not 0 <= p < self.n_latent_frames:
                raise ValueError(
                    f"position {p} outside 0..{self.n_latent_frames - 1}"
                )
        frames = tuple(np.asarray(f, dtype=np.float64) for f in self.guide_frames)
        if len(frames) != len(positions):
            raise ValueError(
                f"{len(frames)} guide frames for {len(positions)} positions"
            )
        shape = self.latent_dims
        for f in frames:
            if f.ndim != 3:
                raise ValueError(f"guide frames must be (w, h, c), got {f.shape}")
            if shape is None:
                shape = f.shape
            elif f.shape != tuple(shape):
                raise ValueError(
                    f"guide frames must share shape: {f.shape} vs {tuple(shape)}"
                )
        if shape is None:
            raise ValueError("a plan with no positions needs explicit latent_dims")
        masks = self.spatial_masks
        if masks is None:
            masks = tuple(None for _ in positions)
        else:
            masks = tuple(
                None if m is None else np.ascontiguousarray(np.asarray(m, dtype=bool))
                for m in masks
            )
            if len(masks) != len(positions):
                raise ValueError(
                    f"{len(masks)} spatial masks for {len(positions)} positions"
                )
        mask_dims = self.mask_dims
        if mask_dims is None:
            mask_dims = (int(shape[0]), int(shape[1]))
        for m in masks:
            if m is not None and m.shape != tuple(mask_dims):
                raise ValueError(
                    f"spatial mask shape {m.shape} does not match mask grid {mask_dims}"
                )
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "guide_frames", frames)
        object.__setattr__(self, "spatial_masks", masks)
        object.__setattr__(self, "mask_dims", tuple(int(d) for d in mask_dims))
        object.__setattr__(self, "latent_dims", tuple(int(d) for d in shape))


def build_guide(plan: GuidePlan) -> tuple[LatentTensor, np.ndarray]:
    """Materialize the guide sequence G and the mask sequence M.

    G is (w, h, n, c): the guide latent frame at each planned position,
    exact zeros elsewhere. M is a boolean (mask_w, mask_h, n) grid: the
    position's spatial mask (all-ones by default) at planned positions,
    zeros elsewhere.
    """
    w, h, c = plan.latent_dims
    n = plan.n_latent_frames
    g = np.zeros((w, h, n, c))
    mw, mh = plan.mask_dims
    m = np.zeros((mw, mh, n), dtype=bool)
    for pos, frame, mask in zip(plan.positions, plan.guide_frames, plan.spatial_masks):
        g[:, :, pos, :] = frame
        m[:, :, pos] = True if mask is None else mask
    return LatentTensor(g), m


def reproject_mask(mask: np.ndarray, latent_dims: Sequence[int]) -> np.ndarray:
    """Majority-downsample a boolean grid onto the latent grid.

    Every axis shrinks by an integer factor (input dim / target dim); an
    output cell is 1 iff strictly more than half of its block is 1. Factors
    of 1 leave an axis untouched, so latent-grid inputs pass through
    unchanged.
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        mask = mask.astype(bool)
    target = tuple(int(d) for d in latent_dims)
    if mask.ndim != len(target):
        raise ValueError(
            f"mask rank {mask.ndim} does not match latent dims {target}"
        )
    factors = []
    for axis, (src, dst) in enumerate(zip(mask.shape, target)):
        if dst < 1 or src % dst:
            raise ValueError(
                f"axis {axis}: input size {src} is not an integer multiple of {dst}"
            )
        factors.append(src // dst)
    interleaved = tuple(chain.from_iterable(zip(target, factors)))
    counts = mask.reshape(interleaved).sum(axis=tuple(range(1, 2 * len(target), 2)))
    block = int(np.prod(factors))
    return counts * 2 > block


# ---------------------------------------------------------------------------
# transformer input assembly

CHANNEL_PART_ORDER = ("noise", "mask", "guide", "text")


@dataclass(frozen=True, eq=False)
class ConditionBundle:
    """Channel-concatenated conditioning input with recoverable slices."""

    x: np.ndarray
    channel_slices: dict[str, tuple[int, int]]

    def part(self, name: str) -> np.ndarray:
        lo, hi = self.channel_slices[name]
        return self.x[..., lo:hi]

    @property
    def guide(self) -> np.ndarray:
        return self.part("guide")

    @property
    def mask_latent(self) -> np.ndarray:
        return self.part("mask")


def _part_array(value: object) -> np.ndarray:
    if isinstance(value, LatentTensor):
        return value.data
    return np.asarray(value)


def assemble_condition_input(
    noise: np.ndarray,
    mask_latent: np.ndarray,
    guide: LatentTensor | np.ndarray,
    text_embedding: np.ndarray,
) -> ConditionBundle:
    """Concatenate [noise | mask | guide | text] along the channel axis.

    All parts must agree on (w, h, t); a 3-d mask gains a singleton channel
    and a 1-d text embedding is broadcast spatially and temporally. Slice
    offsets are recorded so every part can be recovered bit-exactly.
    """
    noise = np.asarray(noise)
    guide_arr = _part_array(guide)
    mask = np.asarray(mask_latent)
    text = np.asarray(text_embedding)
    if noise.ndim != 4:
        raise ValueError(f"noise must be (w, h, t, c), got {noise.shape}")
    w, h, t = noise.shape[:3]
    if mask.ndim == 3:
        mask = mask[..., np.newaxis]
    if text.ndim == 1:
        text = np.broadcast_to(text, (w, h, t, text.shape[0]))
    parts = {"noise": noise, "mask": mask, "guide": guide_arr, "text": text}
    for name, arr in parts.items():
        if arr.ndim != 4 or arr.shape[:3] != (w, h, t):
            raise ValueError(
                f"part '{name}' has shape {arr.shape}, expected ({w}, {h}, {t}, *)"
            )
    slices = {}
    offset = 0
    for name in CHANNEL_PART_ORDER:
        width = parts[name].shape[3]
        slices[name] = (offset, offset + width)
        offset += width
    dtype = np.result_type(*(parts[n].dtype for n in CHANNEL_PART_ORDER))
    x = np.concatenate(
        [parts[n].astype(dtype, copy=False) for n in CHANNEL_PART_ORDER], axis=3
    )
    return ConditionBundle(x=x, channel_slices=slices)


def save_condition_bundle(
    bundle: ConditionBundle, stem: str | Path, extra: dict | None = None
) -> tuple[Path, Path]:
    """Write <stem>.bin (little-endian float32, C order) and <stem>.json.

    `extra` fields (e.g., the sampled diffusion timestep) are merged into
    the sidecar; they may not collide with the fixed schema keys.
    """
    stem = Path(stem)
    bin_path = stem.with_suffix(".bin")
    sidecar_path = stem.with_suffix(".json")
    data = np.ascontiguousarray(bundle.x, dtype="<f4")
    bin_path.write_bytes(data.tobytes(order="C"))
    sidecar = {
        "shape": list(bundle.x.shape),
        "dtype": "float32",
        "byte_order": "little",
        "axis_order": ["width", "height", "time", "channel"],
        "channel_slices": {k: list(v) for k, v in bundle.channel_slices.items()},
    }
    if extra:
        overlap = set(extra) & set(sidecar)
        if overlap:
            raise ValueError(f"extra sidecar fields collide with schema: {sorted(overlap)}")
        sidecar.update(extra)
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return bin_path, sidecar_path


def load_condition_bundle(stem: str | Path) -> ConditionBundle:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    shape = tuple(sidecar["shape"])
    raw = stem.with_suffix(".bin").read_bytes()
    x = np.frombuffer(raw, dtype="<f4").reshape(shape)
    slices = {k: (v[0], v[1]) for k, v in sidecar["channel_slices"].items()}
    return ConditionBundle(x=x, channel_slices=slices)


# ---------------------------------------------------------------------------
# unmask plans

DEFAULT_INTERIOR_CANDIDATES = 2


def unmask_candidates(n_frames: int, interior_candidates: int = DEFAULT_INTERIOR_CANDIDATES) -> tuple[int, ...]:
    """First, last, and evenly spaced interior frames (sorted, deduplicated)."""
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    if interior_candidates < 0:
        raise ValueError(f"interior_candidates must be >= 0, got {interior_candidates}")
    span, slots = n_frames - 1, interior_candidates + 1
    cand = {0, n_frames - 1}
    for j in range(1, interior_candidates + 1):
        cand.add((2 * j * span + slots) // (2 * slots))
    return tuple(sorted(cand))


def sample_unmask_plan(
    n_frames: int,
    rng_seed: int,
    interior_candidates: int = DEFAULT_INTERIOR_CANDIDATES,
) -> tuple[int, ...]:
    """Keep each candidate frame independently with probability 1/2.

    Deterministic for a given seed. An empty draw retries with an
    incremented sub-seed, so the returned plan is never empty (this
    conditions the per-candidate inclusion rate slightly above 1/2; the
    bias is 0.5 / (1 - 2**-m) - 0.5 for m candidates).
    """
    if rng_seed < 0:
        raise ValueError(f"rng_seed must be non-negative, got {rng_seed}")
    cand = unmask_candidates(n_frames, interior_candidates)
    for attempt in count():
        rng = np.random.default_rng([rng_seed, attempt])
        keep = rng.random(len(cand)) < 0.5
        if keep.any():
            return tuple(c for c, k in zip(cand, keep) if k)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# motion-area masks


def track_foreground(
    seq: FrameSequence,
    initial_mask: BinaryMask,
    block_size: int = 8,
    radius: int = 7,
) -> list[BinaryMask]:
    """Propagate a first-frame foreground mask along block flow.

    mask[i+1] is mask[i] forward-warped by block_flow(frame_i, frame_{i+1})
    and re-binarized by majority vote of the contributing blocks. A static
    clip reproduces the initial mask on every frame.
    """
    if (initial_mask.width, initial_mask.height) != (seq.width, seq.height):
        raise ValueError(
            f"mask {initial_mask.width}x{initial_mask.height} does not match "
            f"frames {seq.width}x{seq.height}"
        )
    masks = [initial_mask]
    current = initial_mask.bits.astype(np.float64)
    for i in range(len(seq) - 1):
        flow: FlowField = block_flow(seq[i], seq[i + 1], block_size, radius)
        sums, counts = warp_forward(current, flow)
        nxt = (2.0 * sums > counts) & (counts > 0)
        masks.append(BinaryMask(nxt))
        current = nxt.astype(np.float64)
    return masks


def union_masks(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Pixelwise OR of all masks (the motion-area mask of a clip)."""
    if not masks:
        raise ValueError("need at least one mask")
    first = masks[0]
    bits = first.bits.copy()
    for i, mask in enumerate(masks[1:], start=1):
        if (mask.width, mask.height) != (first.width, first.height):
            raise ValueError(
                f"mask {i} is {mask.width}x{mask.height}, expected "
                f"{first.width}x{first.height}"
            )
        bits |= mask.bits
    return BinaryMask(bits)


def clamp_static_latent(
    video_latent: LatentTensor | np.ndarray,
    guide_latent_frame: np.ndarray,
    motion_mask_latent: np.ndarray,
) -> LatentTensor:
    """Pin non-moving latent cells to the guide frame.

    Wherever the (w, h) latent-grid motion mask is 0, every latent frame
    takes the guide frame's value; cells inside the mask keep the video
    latent. Idempotent.
    """
    video = _part_array(video_latent)
    guide = np.asarray(guide_latent_frame, dtype=np.float64)
    mask = np.asarray(motion_mask_latent, dtype=bool)
    if video.ndim != 4:
        raise ValueError(f"video latent must be (w, h, t, c), got {video.shape}")
    w, h, _, c = video.shape
    if guide.shape != (w, h, c):
        raise ValueError(f"guide frame shape {guide.shape}, expected ({w}, {h}, {c})")
    if mask.shape != (w, h):
        raise ValueError(f"motion mask shape {mask.shape}, expected ({w}, {h})")
    out = np.where(mask[:, :, np.newaxis, np.newaxis], video, guide[:, :, np.newaxis, :])
    return LatentTensor(out)


def pixel_mask_grid(mask: BinaryMask) -> np.ndarray:
    """A BinaryMask as a (width, height) boolean grid in (x, y) order."""
    return np.ascontiguousarray(mask.bits.T)


def stack_mask_grids(masks: Sequence[BinaryMask]) -> np.ndarray:
    """Per-frame masks as a (width, height, frames) boolean grid."""
    if not masks:
        raise ValueError("need at least one mask")
    return np.stack([pixel_mask_grid(m) for m in masks], axis=2)
