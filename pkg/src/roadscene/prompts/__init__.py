from .compiler import (
    FINAL_DIRECTIVE,
    FLOOD_DIRECTIVE,
    FULLY_WET_THRESHOLD,
    SIMPLE_PROMPT_VERSION,
    Agent1Brief,
    Origin,
    PromptBundle,
    ValidationResult,
    build_agent1_request,
    compile_cot,
    direction_note,
    reminder_text,
    required_anchors,
    rule_anchors,
    simple_prompt,
    validate_cot,
)
from .store import LATEST, PromptStore, parse_bundle, render_bundle

__all__ = [
    "FINAL_DIRECTIVE",
    "FLOOD_DIRECTIVE",
    "FULLY_WET_THRESHOLD",
    "LATEST",
    "SIMPLE_PROMPT_VERSION",
    "Agent1Brief",
    "Origin",
    "PromptBundle",
    "PromptStore",
    "ValidationResult",
    "build_agent1_request",
    "compile_cot",
    "direction_note",
    "parse_bundle",
    "reminder_text",
    "render_bundle",
    "required_anchors",
    "rule_anchors",
    "simple_prompt",
    "validate_cot",
]
