from __future__ import annotations

import io
import shutil
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import pytest
from PIL import Image

from roadscene.frames import ClipInfo, SamplerConfig
from roadscene.gateway import BackendConfig, Gateway, RetryPolicy, ScriptedBackend
from roadscene.pipeline import Analyzer


def jpeg_bytes(color: tuple[int, int, int] = (40, 80, 120), size: tuple[int, int] = (64, 48)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="JPEG", quality=85)
    return buf.getvalue()


@dataclass
class SyntheticDecoder:
    """In-memory decoder: clip name -> (frame_count, fps). Frame i is a solid color."""

    clips: Mapping[str, tuple[int, float]] = field(default_factory=dict)
    default: tuple[int, float] = (50, 10.0)
    size: tuple[int, int] = (64, 48)
    extracted: list[tuple[int, ...]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def _spec(self, clip: str | Path) -> tuple[int, float]:
        return self.clips.get(Path(str(clip)).stem, self.default)

    def probe(self, clip: str | Path) -> ClipInfo:
        n, fps = self._spec(clip)
        return ClipInfo(duration=n / fps, frame_count=n, fps=fps, width=self.size[0], height=self.size[1])

    def extract(self, clip: str | Path, indices) -> list[bytes]:
        with self._lock:
            self.extracted.append(tuple(indices))
        return [jpeg_bytes(((i * 7) % 256, (i * 13) % 256, 90), self.size) for i in indices]


def make_analyzer(
    script: Mapping[str, Any],
    *,
    scenario: str | None = None,
    decoder: SyntheticDecoder | None = None,
    parallelism: int = 4,
    retry: RetryPolicy | None = None,
    **kwargs: Any,
) -> tuple[Analyzer, BackendConfig, ScriptedBackend]:
    transport = ScriptedBackend(script, scenario=scenario)
    gateway = Gateway({"agent2": transport}, sleep=lambda _s: None)
    backend = BackendConfig(name="agent2", kind="scripted", parallelism=parallelism, retry=retry or RetryPolicy())
    analyzer = Analyzer(gateway, sampler=SamplerConfig(target_count=8), decoder=decoder or SyntheticDecoder(), **kwargs)
    return analyzer, backend, transport


def congestion_reply(pressure: str, slow: bool, final: str, impression: str = "smooth") -> str:
    return (
        "Step-by-step notes on spacing and motion.\n"
        f"IMPRESSION: {impression}\nPRESSURE: {pressure}\nFLOW_SLOW: {str(slow).lower()}\nFINAL: {final}"
    )


def ffmpeg_binary() -> str | None:
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg
    except ImportError:
        return None
    try:
        return imageio_ffmpeg.get_ffmpeg_exe()
    except RuntimeError:
        return None


@pytest.fixture(scope="session")
def ffmpeg() -> str:
    exe = ffmpeg_binary()
    if exe is None:
        pytest.skip("no ffmpeg binary available")
    return exe


@pytest.fixture(scope="session")
def make_clip(ffmpeg, tmp_path_factory):
    """Render a test-pattern mp4: make_clip(name, seconds, fps)."""
    root = tmp_path_factory.mktemp("clips")

    def _make(name: str, seconds: float = 5.0, fps: int = 10, size: str = "320x240") -> Path:
        path = root / f"{name}.mp4"
        if not path.exists():
            subprocess.run(
                [ffmpeg, "-y", "-loglevel", "error", "-f", "lavfi", "-i", f"testsrc=size={size}:rate={fps}",
                 "-t", str(seconds), "-pix_fmt", "yuv420p", str(path)],
                check=True,
            )
        return path

    return _make


MANIFEST_HEADER = "clip_id,clip_path,task,ground_truth,direction,sensor_ref,multimodal_kind"

# 12 clips, 3 per task: (clip_id, task, direction, truth, scripted reply)
TWELVE_CLIPS = [
    ("w1", "weather", "", "clear", "Bright.\nFINAL: clear"),
    ("w2", "weather", "", "rainy", "Streaks on the lens.\nFINAL: rainy"),
    ("w3", "weather", "", "snowy", "Looks rainy to me.\nFINAL: rainy"),
    ("r1", "wetness-rain", "", "rainy flooded", "I am uncertain between fully wet and flooded.\nFINAL: rainy fully wet"),
    ("r2", "wetness-rain", "", "dry", "FINAL: dry"),
    ("r3", "wetness-rain", "", "rainy partially wet", "FINAL: rainy fully wet"),
    ("s1", "wetness-snow", "", "snowy wet with icy warning", "FINAL: snowy wet with icy warning"),
    ("s2", "wetness-snow", "", "snowy partially wet", "FINAL: snowy partially wet"),
    ("s3", "wetness-snow", "", "dry", ["garbled", "FINAL: dry"]),
    ("c1", "congestion", "inbound", "congested", congestion_reply("moderate", True, "unobstructed")),
    ("c2", "congestion", "inbound", "unobstructed", congestion_reply("weak", False, "unobstructed")),
    ("c3", "congestion", "inbound", "congested", congestion_reply("strong", False, "congested")),
]


def write_manifest(path: Path, rows, sensors: Mapping[str, tuple[str, str]] | None = None) -> Path:
    """rows: (clip_id, task, direction, truth, ...); sensors: clip_id -> (sensor_ref, multimodal_kind)."""
    sensors = sensors or {}
    lines = [MANIFEST_HEADER]
    for clip_id, task, direction, truth, *_ in rows:
        ref, kind = sensors.get(clip_id, ("", ""))
        lines.append(f"{clip_id},clips/{clip_id}.mp4,{task},{truth},{direction},{ref},{kind}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def twelve_clip_script() -> dict[str, Any]:
    script: dict[str, Any] = {}
    for clip_id, task, direction, _truth, reply in TWELVE_CLIPS:
        slug = f"{task}:{direction}" if direction else task
        script[f"{clip_id}/{slug}"] = reply
    return script


# Acceptance criteria outcomes, printed once at the end of the session.
ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter) -> None:
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        outcome, title = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {outcome}  {title}")
