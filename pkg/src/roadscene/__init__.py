"""Highway scene understanding with a two-agent vision-language pipeline."""

__version__ = "0.1.0"

from .errors import RoadsceneError
from .frames import FrameSequence, SamplerConfig, sample_frames, sample_indices
from .gateway import BackendConfig, Gateway, RetryPolicy, ScriptedBackend
from .pipeline import AnalysisJob, AnalysisResult, Analyzer, Mode, SceneReport
from .prompts import PromptBundle, PromptStore, compile_cot, validate_cot
from .sensors import SensorContext, ice_risk_flags, load_sensor_csv, render_context
from .taxonomy import CongestionLabel, Direction, Task, TaskKind, WeatherClass, WetnessClass
from .verdict import Verdict, apply_flood_priority, gate_congestion, parse_verdict

__all__ = [
    "AnalysisJob",
    "AnalysisResult",
    "Analyzer",
    "BackendConfig",
    "CongestionLabel",
    "Direction",
    "FrameSequence",
    "Gateway",
    "Mode",
    "PromptBundle",
    "PromptStore",
    "RetryPolicy",
    "RoadsceneError",
    "SamplerConfig",
    "SceneReport",
    "ScriptedBackend",
    "SensorContext",
    "Task",
    "TaskKind",
    "Verdict",
    "WeatherClass",
    "WetnessClass",
    "__version__",
    "apply_flood_priority",
    "compile_cot",
    "gate_congestion",
    "ice_risk_flags",
    "load_sensor_csv",
    "parse_verdict",
    "render_context",
    "sample_frames",
    "sample_indices",
    "validate_cot",
]
