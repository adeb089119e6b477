"""Uniform frame sampling from short clips through an external ffmpeg decoder."""

from __future__ import annotations

import io
import logging
import os
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from PIL import Image

from .errors import DecodeFailure, EmptyClip

log = logging.getLogger(__name__)

# Clip lengths the prompts were designed around, in seconds.
SHORT_CLIP_RANGE = (4.0, 7.0)

DEFAULT_PROBE_COMMAND = (
    "{ffmpeg}", "-hide_banner", "-nostdin", "-i", "{input}", "-map", "0:v:0", "-f", "null", "-",
)
DEFAULT_EXTRACT_COMMAND = (
    "{ffmpeg}", "-hide_banner", "-loglevel", "error", "-nostdin", "-i", "{input}",
    "-vf", "select='{select}'", "-fps_mode", "passthrough", "-q:v", "2", "{output}",
)


@dataclass(frozen=True)
class Frame:
    data: bytes
    media_type: str = "image/jpeg"


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[Frame, ...]
    timestamps: tuple[float, ...]
    source_id: str
    clip_duration: float
    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("a frame sequence needs at least one frame")
        if len(self.timestamps) != len(self.frames):
            raise ValueError("one timestamp per frame is required")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")
        if len({f.media_type for f in self.frames}) != 1:
            raise ValueError("all frames must share one media type")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def media_type(self) -> str:
        return self.frames[0].media_type


@dataclass(frozen=True)
class ClipInfo:
    duration: float
    frame_count: int
    fps: float
    width: int
    height: int

    @property
    def in_short_clip_regime(self) -> bool:
        lo, hi = SHORT_CLIP_RANGE
        return lo <= self.duration <= hi


@dataclass
class SamplerConfig:
    target_count: int = 8
    max_edge_pixels: int = 768
    decoder_command: Sequence[str] = DEFAULT_EXTRACT_COMMAND
    probe_command: Sequence[str] = DEFAULT_PROBE_COMMAND
    ffmpeg: str | None = None
    timeout_s: float = 120.0
    jpeg_quality: int = 90
    max_frames: int = 64

    def __post_init__(self) -> None:
        if self.target_count < 1:
            raise ValueError("target_count must be positive")
        if self.target_count > self.max_frames:
            raise ValueError("target_count exceeds max_frames")
        if self.max_edge_pixels < 1:
            raise ValueError("max_edge_pixels must be positive")


def sample_indices(frame_count: int, target_count: int) -> list[int]:
    """Indices floor(i*(N-1)/(k-1)) for i < k, with k = min(target_count, N)."""
    if frame_count < 1:
        raise EmptyClip("clip has no decodable frames")
    if target_count < 1:
        raise ValueError("target_count must be positive")
    k = min(target_count, frame_count)
    if k == 1:
        return [0]
    return [i * (frame_count - 1) // (k - 1) for i in range(k)]


def find_ffmpeg(explicit: str | None = None) -> str:
    """Locate an ffmpeg binary: explicit path, $ROADSCENE_FFMPEG, PATH, imageio-ffmpeg."""
    for candidate in (explicit, os.environ.get("ROADSCENE_FFMPEG")):
        if candidate:
            return candidate
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg
    except ImportError:
        raise DecodeFailure("no ffmpeg binary found; set ROADSCENE_FFMPEG") from None
    return imageio_ffmpeg.get_ffmpeg_exe()


class Decoder(Protocol):
    def probe(self, clip: str | Path) -> ClipInfo: ...

    def extract(self, clip: str | Path, indices: Sequence[int]) -> list[bytes]: ...


_DURATION = re.compile(r"Duration:\s*(\d+):(\d+):(\d+(?:\.\d+)?)")
_VIDEO_STREAM = re.compile(r"Stream #\S+.*?Video:.*?(\d{2,5})x(\d{2,5}).*?(\d+(?:\.\d+)?) (?:fps|tbr)")
_FRAME_COUNT = re.compile(r"frame=\s*(\d+)")


def parse_probe_output(text: str) -> ClipInfo:
    duration = _DURATION.search(text)
    stream = _VIDEO_STREAM.search(text)
    counts = _FRAME_COUNT.findall(text)
    if not (duration and stream and counts):
        raise DecodeFailure("could not read clip metadata from decoder output")
    h, m, s = duration.groups()
    return ClipInfo(
        duration=int(h) * 3600 + int(m) * 60 + float(s),
        frame_count=int(counts[-1]),
        fps=float(stream.group(3)),
        width=int(stream.group(1)),
        height=int(stream.group(2)),
    )


@dataclass
class FfmpegDecoder:
    config: SamplerConfig = field(default_factory=SamplerConfig)

    def _fill(self, template: Sequence[str], **values: str) -> list[str]:
        values.setdefault("ffmpeg", find_ffmpeg(self.config.ffmpeg))
        return [part.format(**values) for part in template]

    def _run(self, argv: list[str]) -> subprocess.CompletedProcess[str]:
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, errors="replace",
                timeout=self.config.timeout_s, check=False,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise DecodeFailure(f"decoder could not run: {exc}") from exc
        if proc.returncode != 0:
            tail = proc.stderr.strip().splitlines()[-1:] or [""]
            raise DecodeFailure(f"decoder exited with {proc.returncode}: {tail[0]}")
        return proc

    def probe(self, clip: str | Path) -> ClipInfo:
        proc = self._run(self._fill(self.config.probe_command, input=str(clip)))
        info = parse_probe_output(proc.stderr + proc.stdout)
        if info.fps > 0 and abs(info.duration * info.fps - info.frame_count) > info.fps:
            raise DecodeFailure(
                f"inconsistent metadata: {info.duration}s at {info.fps} fps but {info.frame_count} frames"
            )
        return info

    def extract(self, clip: str | Path, indices: Sequence[int]) -> list[bytes]:
        select = "+".join(f"eq(n\\,{i})" for i in indices)
        with tempfile.TemporaryDirectory(prefix="roadscene-frames-") as tmp:
            pattern = os.path.join(tmp, "frame_%05d.jpg")
            self._run(self._fill(self.config.decoder_command, input=str(clip), select=select, output=pattern))
            paths = sorted(Path(tmp).glob("frame_*.jpg"))
            if not paths:
                raise DecodeFailure("decoder emitted no frames")
            return [p.read_bytes() for p in paths]


def probe_clip(clip: str | Path, config: SamplerConfig | None = None) -> ClipInfo:
    return FfmpegDecoder(config or SamplerConfig()).probe(clip)


def downscale_jpeg(data: bytes, max_edge: int, quality: int = 90) -> bytes:
    """Shrink so the longer edge is at most ``max_edge``, keeping aspect ratio."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            fmt = img.format
            if max(img.size) <= max_edge and fmt == "JPEG":
                return data
            w, h = img.size
            scale = min(1.0, max_edge / max(w, h))
            size = (max(1, round(w * scale)), max(1, round(h * scale)))
            out = img.convert("RGB")
            if size != img.size:
                out = out.resize(size, Image.Resampling.LANCZOS)
    except OSError as exc:
        raise DecodeFailure(f"decoder produced an unreadable frame: {exc}") from exc
    buf = io.BytesIO()
    out.save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


def sample_frames(
    clip: str | Path,
    config: SamplerConfig | None = None,
    decoder: Decoder | None = None,
    source_id: str | None = None,
) -> FrameSequence:
    config = config or SamplerConfig()
    decoder = decoder or FfmpegDecoder(config)
    info = decoder.probe(clip)
    if info.frame_count == 0:
        raise EmptyClip(f"{clip}: no decodable frames")
    if not info.in_short_clip_regime:
        log.info("clip %s is %.2fs, outside the %s-%ss regime", clip, info.duration, *SHORT_CLIP_RANGE)
    indices = sample_indices(info.frame_count, config.target_count)
    raw = decoder.extract(clip, indices)
    if len(raw) != len(indices):
        raise DecodeFailure(f"asked for {len(indices)} frames, decoder returned {len(raw)}")
    fps = info.fps if info.fps > 0 else info.frame_count / max(info.duration, 1e-9)
    frames = tuple(
        Frame(downscale_jpeg(data, config.max_edge_pixels, config.jpeg_quality)) for data in raw
    )
    return FrameSequence(
        frames=frames,
        timestamps=tuple(i / fps for i in indices),
        source_id=source_id or Path(clip).stem,
        clip_duration=info.duration,
        indices=tuple(indices),
    )

