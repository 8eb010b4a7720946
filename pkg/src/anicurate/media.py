"""Frame-level media primitives: Y4M/P6 ingest, color transforms, masks.

Pixel data is held in numpy arrays: frames as (height, width, 3) uint8 RGB,
masks as (height, width) bool. Arrays are locked read-only after construction
so frames, masks, and sequences can be shared freely across workers.

Color conversions are pinned to BT.601 (Kr=0.299, Kb=0.114). Y4M streams
carry studio-swing YCbCr (Y 16..235, C 16..240); decoding expands to
full-range RGB, so luma 16 maps to black and 235 to white.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np
from scipy import ndimage


class FormatError(ValueError):
    """Raised when a Y4M stream or PPM file cannot be parsed."""


# ---------------------------------------------------------------------------
# core types


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB frame: (height, width, 3) uint8, row-major, read-only."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.dtype != np.uint8:
            raise ValueError(f"frame pixels must be uint8, got {arr.dtype}")
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"frame pixels must have shape (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("frame dimensions must be positive")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel boolean mask with the same layout as the frame it annotates."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        """Number of set pixels."""
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Ordered frames of identical dimensions plus a rational frame rate."""

    frames: tuple[Frame, ...]
    fps: Fraction
    source_id: str = ""

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a frame sequence needs at least one frame")
        w, h = frames[0].width, frames[0].height
        for i, f in enumerate(frames):
            if (f.width, f.height) != (w, h):
                raise ValueError(
                    f"frame {i} is {f.width}x{f.height}, expected {w}x{h}"
                )
        if not isinstance(self.fps, Fraction):
            object.__setattr__(self, "fps", parse_fps(self.fps))
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def duration_seconds(self) -> float:
        return float(Fraction(len(self.frames)) / self.fps)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> Frame:
        return self.frames[index]

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.frames)

    def slice(self, start: int, stop: int, source_id: str | None = None) -> "FrameSequence":
        """Sub-sequence [start, stop) sharing frame objects with the parent."""
        if not 0 <= start < stop <= len(self.frames):
            raise ValueError(f"bad slice [{start}, {stop}) for {len(self.frames)} frames")
        return FrameSequence(
            self.frames[start:stop],
            fps=self.fps,
            source_id=self.source_id if source_id is None else source_id,
        )


@dataclass(frozen=True)
class Region:
    """A 4-connected component: pixel count and tight inclusive bounding box."""

    area: int
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def box_width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def box_height(self) -> int:
        return self.y1 - self.y0 + 1


def parse_fps(value: object) -> Fraction:
    """Coerce ints, floats, "30000/1001"-style strings, or Fractions to Fraction."""
    if isinstance(value, Fraction):
        fps = value
    elif isinstance(value, int):
        fps = Fraction(value)
    elif isinstance(value, float):
        fps = Fraction(value).limit_denominator(1_000_000)
    elif isinstance(value, str):
        try:
            fps = Fraction(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"cannot parse fps {value!r}") from exc
    else:
        raise TypeError(f"cannot parse fps from {type(value).__name__}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {value!r}")
    return fps


# ---------------------------------------------------------------------------
# BT.601 conversions

_Y_EXPAND = 255.0 / 219.0
_C_EXPAND = 255.0 / 224.0
# 2*(1-Kr), 2*(1-Kb), 2*Kb*(1-Kb)/Kg, 2*Kr*(1-Kr)/Kg for Kr=0.299, Kb=0.114
_CR_R = 1.402
_CB_B = 1.772
_CB_G = 0.344136
_CR_G = 0.714136

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    c = (y.astype(np.float64) - 16.0) * _Y_EXPAND
    d = (cb.astype(np.float64) - 128.0) * _C_EXPAND
    e = (cr.astype(np.float64) - 128.0) * _C_EXPAND
    r = c + _CR_R * e
    g = c - _CB_G * d - _CR_G * e
    b = c + _CB_B * d
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _rgb_to_ycbcr(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = pixels.astype(np.float64)
    yf = LUMA_WEIGHTS[0] * rgb[..., 0] + LUMA_WEIGHTS[1] * rgb[..., 1] + LUMA_WEIGHTS[2] * rgb[..., 2]
    cbf = (rgb[..., 2] - yf) / _CB_B
    crf = (rgb[..., 0] - yf) / _CR_R
    y = np.clip(np.rint(16.0 + yf / _Y_EXPAND), 0, 255).astype(np.uint8)
    cb = np.clip(np.rint(128.0 + cbf / _C_EXPAND), 0, 255).astype(np.uint8)
    cr = np.clip(np.rint(128.0 + crf / _C_EXPAND), 0, 255).astype(np.uint8)
    return y, cb, cr


def to_luma(frame: Frame) -> np.ndarray:
    """Per-pixel luma in [0, 1]: (0.299 R + 0.587 G + 0.114 B) / 255."""
    rgb = frame.pixels.astype(np.float64)
    wr, wg, wb = LUMA_WEIGHTS
    return (wr * rgb[..., 0] + wg * rgb[..., 1] + wb * rgb[..., 2]) / 255.0


def rgb_to_hsv(frame: Frame) -> np.ndarray:
    """HSV planes, each scaled to [0, 255], as an (h, w, 3) float64 array.

    Hue covers the full circle in [0, 255) (degrees * 255/360); achromatic
    pixels get hue 0 and saturation 0. Channel-max ties resolve in R, G, B
    precedence order.
    """
    rgb = frame.pixels.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / np.where(v > 0, v, 1.0) * 255.0, 0.0)
        safe_c = np.where(c > 0, c, 1.0)
        h_deg = np.select(
            [(c > 0) & (v == r), (c > 0) & (v == g), (c > 0) & (v == b)],
            [
                60.0 * np.mod((g - b) / safe_c, 6.0),
                60.0 * ((b - r) / safe_c + 2.0),
                60.0 * ((r - g) / safe_c + 4.0),
            ],
            default=0.0,
        )
    h = h_deg * (255.0 / 360.0)
    return np.stack([h, s, v], axis=-1)


# ---------------------------------------------------------------------------
# YUV4MPEG2

_Y4M_MAGIC = b"YUV4MPEG2"
_C420_TAGS = {"420", "420jpeg", "420mpeg2", "420paldv"}


def parse_y4m(data: bytes | BinaryIO, source_id: str = "y4m") -> FrameSequence:
    """Decode a YUV4MPEG2 stream into RGB frames.

    Supports C420 (any siting variant; chroma upsampled 2x2 nearest) and
    C444. Frame rate comes from the F tag; I/A/X tags are accepted and
    ignored.
    """
    stream = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    header = stream.readline()
    if not header.endswith(b"\n"):
        raise FormatError("missing stream header line")
    tokens = header.rstrip(b"\n").split(b" ")
    if tokens[0] != _Y4M_MAGIC:
        raise FormatError(f"bad magic token {tokens[0]!r}, expected {_Y4M_MAGIC!r}")

    width = height = None
    fps: Fraction | None = None
    colorspace = "420"
    for tok in tokens[1:]:
        if not tok:
            continue
        tag, val = tok[:1], tok[1:]
        if tag == b"W":
            width = _parse_dim(val, tok)
        elif tag == b"H":
            height = _parse_dim(val, tok)
        elif tag == b"F":
            m = re.fullmatch(rb"(\d+):(\d+)", val)
            if not m or int(m.group(2)) == 0 or int(m.group(1)) == 0:
                raise FormatError(f"bad frame-rate token {tok!r}")
            fps = Fraction(int(m.group(1)), int(m.group(2)))
        elif tag == b"C":
            colorspace = val.decode("ascii", "replace")
            if colorspace not in _C420_TAGS and colorspace != "444":
                raise FormatError(f"unsupported colorspace token {tok!r}")
        elif tag in (b"I", b"A", b"X"):
            continue
        else:
            raise FormatError(f"unrecognized header token {tok!r}")
    if width is None or height is None or fps is None:
        raise FormatError("header must carry W, H, and F tags")
    is_420 = colorspace in _C420_TAGS
    if is_420 and (width % 2 or height % 2):
        raise FormatError(f"C{colorspace} needs even dimensions, got {width}x{height}")

    luma_size = width * height
    chroma_size = (width // 2) * (height // 2) if is_420 else luma_size

    frames: list[Frame] = []
    while True:
        marker = stream.readline()
        if marker == b"":
            break
        marker = marker.rstrip(b"\n")
        if marker != b"FRAME" and not marker.startswith(b"FRAME "):
            raise FormatError(
                f"expected FRAME marker before frame {len(frames)}, got {marker[:32]!r}"
            )
        payload = stream.read(luma_size + 2 * chroma_size)
        if len(payload) != luma_size + 2 * chroma_size:
            raise FormatError(f"truncated payload in frame {len(frames)}")
        y = np.frombuffer(payload, np.uint8, luma_size).reshape(height, width)
        cb = np.frombuffer(payload, np.uint8, chroma_size, luma_size)
        cr = np.frombuffer(payload, np.uint8, chroma_size, luma_size + chroma_size)
        if is_420:
            cb = cb.reshape(height // 2, width // 2).repeat(2, 0).repeat(2, 1)
            cr = cr.reshape(height // 2, width // 2).repeat(2, 0).repeat(2, 1)
        else:
            cb = cb.reshape(height, width)
            cr = cr.reshape(height, width)
        frames.append(Frame(_ycbcr_to_rgb(y, cb, cr)))
    if not frames:
        raise FormatError("no frames")
    return FrameSequence(tuple(frames), fps=fps, source_id=source_id)


def write_y4m(seq: FrameSequence, stream: BinaryIO) -> None:
    """Debug writer: serialize a sequence as C444 YUV4MPEG2."""
    stream.write(
        f"YUV4MPEG2 W{seq.width} H{seq.height} F{seq.fps.numerator}:{seq.fps.denominator} Ip A1:1 C444\n".encode()
    )
    for frame in seq:
        stream.write(b"FRAME\n")
        y, cb, cr = _rgb_to_ycbcr(frame.pixels)
        stream.write(y.tobytes())
        stream.write(cb.tobytes())
        stream.write(cr.tobytes())


def y4m_bytes(seq: FrameSequence) -> bytes:
    buf = io.BytesIO()
    write_y4m(seq, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# P6 portable pixmap

_WHITESPACE = b" \t\n\r\v\f"


def parse_ppm(data: bytes) -> Frame:
    """Decode a binary (P6) portable pixmap with 8-bit samples."""
    pos = 0

    def _token() -> bytes:
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch in _WHITESPACE:
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE:
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        return data[start:pos]

    magic = _token()
    if magic != b"P6":
        raise FormatError(f"not a P6 pixmap (magic {magic!r})")
    try:
        width, height, maxval = int(_token()), int(_token()), int(_token())
    except ValueError as exc:
        raise FormatError("non-numeric PPM header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise FormatError(f"PPM raster truncated: {len(raster)} of {expected} bytes")
    return Frame(np.frombuffer(raster, np.uint8).reshape(height, width, 3))


def ppm_bytes(frame: Frame) -> bytes:
    return b"P6\n%d %d\n255\n" % (frame.width, frame.height) + frame.pixels.tobytes()


def read_frame_dir(path: str | Path, fps: object) -> FrameSequence:
    """Read lexicographically ordered *.ppm files as one sequence."""
    directory = Path(path)
    if not directory.is_dir():
        raise FormatError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix == ".ppm")
    if not files:
        raise FormatError(f"no .ppm frames in {directory}")
    frames = []
    for p in files:
        try:
            frames.append(parse_ppm(p.read_bytes()))
        except FormatError as exc:
            raise FormatError(f"{p.name}: {exc}") from exc
    first = frames[0]
    for p, f in zip(files, frames):
        if (f.width, f.height) != (first.width, first.height):
            raise FormatError(
                f"{p.name} is {f.width}x{f.height}, expected "
                f"{first.width}x{first.height}"
            )
    return FrameSequence(tuple(frames), fps=parse_fps(fps), source_id=directory.name)


def write_frame_dir(seq: FrameSequence, path: str | Path) -> None:
    """Write a sequence as zero-padded .ppm files (lossless transport form)."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq):
        (directory / f"{i:06d}.ppm").write_bytes(ppm_bytes(frame))


def load_video(path: str | Path, fps: object | None = None) -> FrameSequence:
    """Load a .y4m file or a directory of .ppm frames (fps required for dirs)."""
    p = Path(path)
    if p.is_dir():
        if fps is None:
            raise FormatError(f"fps is required for frame directory {p}")
        return read_frame_dir(p, fps)
    if not p.is_file():
        raise FormatError(f"no such video: {p}")
    seq = parse_y4m(p.read_bytes(), source_id=p.stem)
    return seq


# ---------------------------------------------------------------------------
# mask and sampling utilities

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def connected_components(mask: BinaryMask) -> list[Region]:
    """4-connected regions of the mask, ordered by bounding-box top-left."""
    labels, count = ndimage.label(mask.bits, structure=_FOUR_CONNECTED)
    if count == 0:
        return []
    areas = np.bincount(labels.ravel())
    regions = []
    for index, slc in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = slc
        regions.append(
            Region(
                area=int(areas[index]),
                x0=int(xs.start),
                y0=int(ys.start),
                x1=int(xs.stop - 1),
                y1=int(ys.stop - 1),
            )
        )
    regions.sort(key=lambda r: (r.y0, r.x0, r.y1, r.x1))
    return regions


def region_mask(mask: BinaryMask, region: Region) -> BinaryMask:
    """The component containing `region` as a standalone full-size mask."""
    labels, _ = ndimage.label(mask.bits, structure=_FOUR_CONNECTED)
    label = labels[region.y0, region.x0]
    if label == 0:
        # bounding-box corner may be off-component; probe inside the box
        box = labels[region.y0 : region.y1 + 1, region.x0 : region.x1 + 1]
        nz = box[box > 0]
        if nz.size == 0:
            raise ValueError("region does not overlap any component")
        label = nz[0]
    return BinaryMask(labels == label)


def sample_frames(seq: FrameSequence, n: int) -> list[int]:
    """Evenly spaced frame indices: first is 0, last is frame_count-1 for n>=2.

    When n exceeds the frame count the rounded indices collapse; duplicates
    are removed, so fewer than n indices may be returned.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    count = len(seq)
    if n == 1:
        return [0]
    span, steps = count - 1, n - 1
    indices = [(2 * i * span + steps) // (2 * steps) for i in range(n)]
    out: list[int] = []
    for idx in indices:
        if not out or idx > out[-1]:
            out.append(idx)
    return out


def solid_frame(width: int, height: int, rgb: Sequence[int]) -> Frame:
    """Constant-color frame; handy for fixtures and calibration targets."""
    arr = np.empty((height, width, 3), np.uint8)
    arr[:] = np.asarray(rgb, np.uint8)
    return Frame(arr)


def _parse_dim(val: bytes, tok: bytes) -> int:
    try:
        n = int(val)
    except ValueError as exc:
        raise FormatError(f"bad dimension token {tok!r}") from exc
    if n <= 0:
        raise FormatError(f"bad dimension token {tok!r}")
    return n
