"""Pluggable model providers and their line-delimited JSON wire protocol.

Every learned model in the pipeline (captioner, text/image/video encoders,
character mask extractor, aesthetic/consistency/smoothness regressors) sits
behind a provider. This module ships deterministic in-process reference
implementations and a client/server for external processes speaking the
wire protocol:

    request:  {"id": int, "op": str, "payload": {...}}\n
    response: {"id": int, "ok": true, "result": {...}}\n
              {"id": int, "ok": false, "error": "..."}\n

One UTF-8 JSON object per line. Images travel as base64-encoded binary P6;
videos as a path to a .y4m file or a directory of .ppm frames plus an
"fps" field. Masks come back as base64 P6 with foreground white.

Run `python -m anicurate.providers` to serve the reference provider on
stdio, or `--tcp HOST:PORT` for a TCP endpoint.
"""

from __future__ import annotations

import argparse
import base64
import hashlib
import json
import logging
import queue
import shlex
import socket
import socketserver
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Protocol, TextIO

import numpy as np

from . import analysis, media
from .media import BinaryMask, Frame, FrameSequence

log = logging.getLogger(__name__)

OPS = (
    "embed_video",
    "embed_text",
    "embed_image",
    "caption",
    "char_masks",
    "score_smoothness",
    "score_aesthetic",
    "score_regression",
)

DEFAULT_TIMEOUT_SECONDS = 30.0
DEFAULT_RETRIES = 2


class ProviderError(RuntimeError):
    """Base class for provider failures."""


class TransportError(ProviderError):
    """Retryable transport failure: timeout, broken pipe, or provider exit."""


class ProtocolError(ProviderError):
    """Fatal protocol violation: malformed JSON or a mismatched response id."""


class ProviderOpError(ProviderError):
    """The provider reported an error for this operation."""


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-length float vector; unit L2 norm once normalized."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"embedding must be 1-d, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("embedding contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def normalized(cls, values: np.ndarray | Iterable[float]) -> "Embedding":
        arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                         dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm <= 0.0:
            raise ValueError("cannot normalize a zero vector")
        return cls(arr / norm)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise ValueError(f"embedding dims differ: {a.dim} vs {b.dim}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.dot(a.values, b.values) / (na * nb))


class Provider(Protocol):
    """The in-process surface every provider backend exposes."""

    def embed_text(self, text: str) -> Embedding: ...

    def embed_image(self, frame: Frame) -> Embedding: ...

    def embed_video(self, seq: FrameSequence) -> Embedding: ...

    def caption(self, meta: dict) -> str: ...

    def char_masks(self, frame: Frame) -> list[BinaryMask]: ...

    def score_smoothness(self, seq: FrameSequence) -> float: ...

    def score_aesthetic(self, embedding: Embedding) -> float: ...

    def score_regression(self, a: Embedding, b: Embedding) -> float: ...


# ---------------------------------------------------------------------------
# reference provider

HIST_BINS_PER_CHANNEL = 4  # 4*4*4 = 64-bin HSV histogram
IMAGE_EMBED_DIM = HIST_BINS_PER_CHANNEL**3
VIDEO_SAMPLE_FRAMES = 8


class ReferenceProvider:
    """Deterministic, dependency-free stand-ins for the fine-tuned models.

    Image embeddings are L2-normalized 64-bin HSV histograms; video
    embeddings append a normalized flow-rate channel; text embeddings are
    seeded from a SHA-256 of the text. Regression heads are the affine map
    (cos + 1) / 2. Weak semantically, but every downstream formula becomes
    exactly testable.
    """

    def __init__(
        self,
        text_dim: int = IMAGE_EMBED_DIM + 1,
        motion_norm: float = 64.0,
        char_color_threshold: float = 40.0,
        char_min_area: int = 16,
        smoothness_residual_norm: float = analysis.DEFAULT_SMOOTHNESS_RESIDUAL_NORM,
    ) -> None:
        if text_dim < 1:
            raise ValueError(f"text_dim must be >= 1, got {text_dim}")
        self.text_dim = text_dim
        self.motion_norm = motion_norm
        self.char_color_threshold = char_color_threshold
        self.char_min_area = char_min_area
        self.smoothness_residual_norm = smoothness_residual_norm

    def embed_text(self, text: str) -> Embedding:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return Embedding.normalized(rng.standard_normal(self.text_dim))

    def embed_image(self, frame: Frame) -> Embedding:
        hsv = media.rgb_to_hsv(frame)
        bins = np.minimum(
            (hsv / (256.0 / HIST_BINS_PER_CHANNEL)).astype(np.int64),
            HIST_BINS_PER_CHANNEL - 1,
        )
        flat = (
            bins[..., 0] * HIST_BINS_PER_CHANNEL**2
            + bins[..., 1] * HIST_BINS_PER_CHANNEL
            + bins[..., 2]
        )
        hist = np.bincount(flat.ravel(), minlength=IMAGE_EMBED_DIM).astype(np.float64)
        return Embedding.normalized(hist)

    def embed_video(self, seq: FrameSequence) -> Embedding:
        indices = media.sample_frames(seq, VIDEO_SAMPLE_FRAMES)
        images = np.stack([self.embed_image(seq[i]).values for i in indices])
        appearance = images.mean(axis=0)
        if len(seq) >= 2:
            motion = min(analysis.flow_score(seq) / self.motion_norm, 1.0)
        else:
            motion = 0.0
        return Embedding.normalized(np.concatenate([appearance, [motion]]))

    def caption(self, meta: dict) -> str:
        clip = meta.get("clip_id", "?")
        source = meta.get("source_id", "?")
        start = meta.get("frame_start", "?")
        end = meta.get("frame_end", "?")
        return f"clip {clip} of {source}, frames {start}-{end}"

    def char_masks(self, frame: Frame) -> list[BinaryMask]:
        rgb = frame.pixels.astype(np.float64)
        border = np.concatenate(
            [rgb[0, :], rgb[-1, :], rgb[1:-1, 0], rgb[1:-1, -1]], axis=0
        )
        background = border.mean(axis=0)
        distance = np.linalg.norm(rgb - background, axis=2)
        foreground = BinaryMask(distance > self.char_color_threshold)
        masks = []
        for region in media.connected_components(foreground):
            if region.area < self.char_min_area:
                continue
            masks.append(media.region_mask(foreground, region))
        return masks

    def score_smoothness(self, seq: FrameSequence) -> float:
        return analysis.warp_smoothness(seq, self.smoothness_residual_norm)

    def score_aesthetic(self, embedding: Embedding) -> float:
        anchor = Embedding.normalized(np.ones(embedding.dim))
        return (cosine(embedding, anchor) + 1.0) / 2.0

    def score_regression(self, a: Embedding, b: Embedding) -> float:
        return (cosine(a, b) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# wire encoding helpers


def frame_to_b64(frame: Frame) -> str:
    return base64.b64encode(media.ppm_bytes(frame)).decode("ascii")


def frame_from_b64(data: str) -> Frame:
    return media.parse_ppm(base64.b64decode(data))


def mask_to_b64(mask: BinaryMask) -> str:
    gray = np.where(mask.bits[..., np.newaxis], 255, 0).astype(np.uint8)
    return frame_to_b64(Frame(np.repeat(gray, 3, axis=2)))


def mask_from_b64(data: str) -> BinaryMask:
    frame = frame_from_b64(data)
    return BinaryMask(frame.pixels[..., 0] > 127)


def _load_wire_video(payload: dict) -> FrameSequence:
    path = payload.get("video")
    if not isinstance(path, str):
        raise ValueError("payload needs a 'video' path")
    fps = payload.get("fps")
    return media.load_video(path, fps)


def dispatch(provider: Provider, op: str, payload: dict) -> dict:
    """Run one wire op against an in-process provider and encode the result."""
    if op == "embed_text":
        return {"values": provider.embed_text(payload["text"]).values.tolist()}
    if op == "embed_image":
        emb = provider.embed_image(frame_from_b64(payload["image"]))
        return {"values": emb.values.tolist()}
    if op == "embed_video":
        return {"values": provider.embed_video(_load_wire_video(payload)).values.tolist()}
    if op == "caption":
        return {"caption": provider.caption(dict(payload))}
    if op == "char_masks":
        masks = provider.char_masks(frame_from_b64(payload["image"]))
        return {"masks": [mask_to_b64(m) for m in masks]}
    if op == "score_smoothness":
        return {"score": provider.score_smoothness(_load_wire_video(payload))}
    if op == "score_aesthetic":
        emb = Embedding(np.asarray(payload["embedding"], dtype=np.float64))
        return {"score": provider.score_aesthetic(emb)}
    if op == "score_regression":
        a = Embedding(np.asarray(payload["embedding_a"], dtype=np.float64))
        b = Embedding(np.asarray(payload["embedding_b"], dtype=np.float64))
        return {"score": provider.score_regression(a, b)}
    raise ValueError(f"unknown op {op!r}")


def serve(provider: Provider, in_stream: TextIO, out_stream: TextIO) -> None:
    """Answer wire requests line by line until the input stream closes."""
    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            _emit(out_stream, {"id": None, "ok": False, "error": f"malformed request: {exc}"})
            continue
        request_id = request.get("id")
        try:
            result = dispatch(provider, request.get("op", ""), request.get("payload") or {})
            _emit(out_stream, {"id": request_id, "ok": True, "result": result})
        except Exception as exc:  # report per-request, keep serving
            _emit(
                out_stream,
                {"id": request_id, "ok": False, "error": f"{type(exc).__name__}: {exc}"},
            )


def _emit(stream: TextIO, obj: dict) -> None:
    stream.write(json.dumps(obj) + "\n")
    stream.flush()


# ---------------------------------------------------------------------------
# transports and the remote client


class StdioTransport:
    """Line transport over a spawned subprocess's stdin/stdout."""

    def __init__(self, argv: list[str]):
        self.argv = argv
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._start()

    def _start(self) -> None:
        self._proc = subprocess.Popen(
            self.argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines = queue.Queue()
        thread = threading.Thread(
            target=self._pump, args=(self._proc, self._lines), daemon=True
        )
        thread.start()

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)  # EOF sentinel

    def send_line(self, line: str) -> None:
        if self._proc is None or self._proc.stdin is None:
            raise TransportError("provider process is not running")
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"provider pipe closed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"provider timed out after {timeout}s") from None
        if line is None:
            raise TransportError("provider closed the connection")
        return line

    def reset(self) -> None:
        self.close()
        self._start()

    def close(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None


class TcpTransport:
    """Line transport over a TCP connection."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self._sock: socket.socket | None = None
        self._file = None
        self._connect()

    def _connect(self) -> None:
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=10.0)
        except OSError as exc:
            raise TransportError(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
        self._file = self._sock.makefile("rw", encoding="utf-8", newline="\n")

    def send_line(self, line: str) -> None:
        if self._file is None:
            raise TransportError("connection is not open")
        try:
            self._file.write(line + "\n")
            self._file.flush()
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        if self._sock is None or self._file is None:
            raise TransportError("connection is not open")
        self._sock.settimeout(timeout)
        try:
            line = self._file.readline()
        except (TimeoutError, socket.timeout) as exc:
            raise TransportError(f"provider timed out after {timeout}s") from exc
        except OSError as exc:
            raise TransportError(f"recv failed: {exc}") from exc
        if line == "":
            raise TransportError("provider closed the connection")
        return line

    def reset(self) -> None:
        self.close()
        self._connect()

    def close(self) -> None:
        if self._file is not None:
            try:
                self._file.close()
            except OSError:
                pass
            self._file = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None


class RemoteProvider:
    """Provider backed by a wire-protocol endpoint.

    Thread-safe: calls are serialized on one connection. TransportErrors
    reset the transport and retry up to `retries` times; protocol errors
    and provider-reported op errors are raised immediately.
    """

    def __init__(
        self,
        transport: StdioTransport | TcpTransport,
        timeout: float = DEFAULT_TIMEOUT_SECONDS,
        retries: int = DEFAULT_RETRIES,
    ) -> None:
        self._transport = transport
        self.timeout = timeout
        self.retries = retries
        self._next_id = 0
        self._lock = threading.Lock()

    def call(self, op: str, payload: dict) -> dict:
        with self._lock:
            last_error: TransportError | None = None
            for attempt in range(self.retries + 1):
                self._next_id += 1
                request_id = self._next_id
                request = {"id": request_id, "op": op, "payload": payload}
                try:
                    self._transport.send_line(json.dumps(request))
                    line = self._transport.recv_line(self.timeout)
                except TransportError as exc:
                    last_error = exc
                    log.warning("provider transport error (attempt %d): %s", attempt + 1, exc)
                    if attempt < self.retries:
                        self._transport.reset()
                    continue
                try:
                    response = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ProtocolError(f"malformed response: {line[:200]!r}") from exc
                if response.get("id") != request_id:
                    raise ProtocolError(
                        f"response id {response.get('id')!r} does not match request {request_id}"
                    )
                if not response.get("ok"):
                    raise ProviderOpError(str(response.get("error", "unknown provider error")))
                result = response.get("result")
                if not isinstance(result, dict):
                    raise ProtocolError(f"response result must be an object, got {type(result).__name__}")
                return result
            assert last_error is not None
            raise last_error

    def close(self) -> None:
        self._transport.close()

    # provider surface -----------------------------------------------------

    def embed_text(self, text: str) -> Embedding:
        return Embedding(np.asarray(self.call("embed_text", {"text": text})["values"]))

    def embed_image(self, frame: Frame) -> Embedding:
        result = self.call("embed_image", {"image": frame_to_b64(frame)})
        return Embedding(np.asarray(result["values"]))

    def embed_video(self, seq: FrameSequence) -> Embedding:
        with _wire_video(seq) as payload:
            return Embedding(np.asarray(self.call("embed_video", payload)["values"]))

    def caption(self, meta: dict) -> str:
        result = self.call("caption", dict(meta))
        caption = result.get("caption")
        if not isinstance(caption, str):
            raise ProtocolError("caption result must carry a string 'caption'")
        return caption

    def char_masks(self, frame: Frame) -> list[BinaryMask]:
        result = self.call("char_masks", {"image": frame_to_b64(frame)})
        return [mask_from_b64(m) for m in result["masks"]]

    def score_smoothness(self, seq: FrameSequence) -> float:
        with _wire_video(seq) as payload:
            return float(self.call("score_smoothness", payload)["score"])

    def score_aesthetic(self, embedding: Embedding) -> float:
        result = self.call("score_aesthetic", {"embedding": embedding.values.tolist()})
        return float(result["score"])

    def score_regression(self, a: Embedding, b: Embedding) -> float:
        result = self.call(
            "score_regression",
            {"embedding_a": a.values.tolist(), "embedding_b": b.values.tolist()},
        )
        return float(result["score"])


class _wire_video:
    """Context manager: a sequence as an on-disk .ppm directory payload."""

    def __init__(self, seq: FrameSequence):
        self.seq = seq
        self._tmp: tempfile.TemporaryDirectory | None = None

    def __enter__(self) -> dict:
        self._tmp = tempfile.TemporaryDirectory(prefix="anicurate-video-")
        media.write_frame_dir(self.seq, self._tmp.name)
        return {"video": self._tmp.name, "fps": str(self.seq.fps)}

    def __exit__(self, *exc_info) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()


def resolve_endpoint(
    endpoint: str,
    timeout: float = DEFAULT_TIMEOUT_SECONDS,
    retries: int = DEFAULT_RETRIES,
) -> Provider:
    """Build a provider from an endpoint string.

    "ref:" (or "ref") is the in-process reference; "stdio:<command>" spawns
    a subprocess speaking the wire protocol; "tcp:<host>:<port>" connects
    to a long-lived provider.
    """
    if endpoint in ("ref", "ref:"):
        return ReferenceProvider()
    if endpoint.startswith("stdio:"):
        command = endpoint[len("stdio:") :].strip()
        if not command:
            raise ValueError("stdio endpoint needs a command")
        return RemoteProvider(StdioTransport(shlex.split(command)), timeout, retries)
    if endpoint.startswith("tcp:"):
        rest = endpoint[len("tcp:") :]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ValueError(f"tcp endpoint must be tcp:host:port, got {endpoint!r}")
        return RemoteProvider(TcpTransport(host, int(port)), timeout, retries)
    raise ValueError(f"unrecognized provider endpoint {endpoint!r}")


def call_provider(
    endpoint: str,
    request: dict,
    timeout: float = DEFAULT_TIMEOUT_SECONDS,
    retries: int = DEFAULT_RETRIES,
) -> dict:
    """One-shot raw wire call; returns the op result dict."""
    provider = resolve_endpoint(endpoint, timeout, retries)
    if isinstance(provider, ReferenceProvider):
        return dispatch(provider, request.get("op", ""), request.get("payload") or {})
    try:
        return provider.call(request.get("op", ""), request.get("payload") or {})
    finally:
        provider.close()


# ---------------------------------------------------------------------------
# reference server entry point


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="anicurate-providers", description="Serve the reference provider."
    )
    parser.add_argument("--tcp", metavar="HOST:PORT", help="serve over TCP instead of stdio")
    args = parser.parse_args(argv)
    provider = ReferenceProvider()
    if args.tcp:
        host, sep, port = args.tcp.rpartition(":")
        if not sep:
            parser.error("--tcp needs HOST:PORT")

        class Handler(socketserver.StreamRequestHandler):
            def handle(self) -> None:
                rfile = open(self.rfile.fileno(), "r", encoding="utf-8", closefd=False)
                wfile = open(self.wfile.fileno(), "w", encoding="utf-8", closefd=False)
                serve(provider, rfile, wfile)

        with socketserver.TCPServer((host, int(port)), Handler) as server:
            server.serve_forever()
        return 0
    serve(provider, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
