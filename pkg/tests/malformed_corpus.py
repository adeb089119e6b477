"""Malformed Agent 2 outputs paired with the error each must raise."""

from __future__ import annotations

from roadscene.errors import MalformedResponse, MissingGatingFields, UnknownVerdictLabel
from roadscene.taxonomy import CONGESTION_INBOUND, CONGESTION_OUTBOUND, WEATHER, WETNESS_RAIN, WETNESS_SNOW

GATE_OK = "IMPRESSION: smooth\nPRESSURE: weak\nFLOW_SLOW: false\n"

CORPUS = [
    # missing or empty FINAL line
    ("empty", WEATHER, "", MalformedResponse),
    ("whitespace", WEATHER, "  \n\t\n", MalformedResponse),
    ("no-final", WEATHER, "The sky is overcast and the road glistens.", MalformedResponse),
    ("final-empty", WEATHER, "Looks wet.\nFINAL:", MalformedResponse),
    ("final-no-colon", WEATHER, "Reasoning done.\nFINAL clear", MalformedResponse),
    ("final-answer-phrase", WETNESS_RAIN, "Final answer - rainy flooded", MalformedResponse),
    ("label-buried-mid-text", WETNESS_RAIN, "I would call this rainy fully wet overall.", MalformedResponse),
    ("final-mid-line", WEATHER, "After review the FINAL: clear verdict holds", MalformedResponse),
    ("json-instead", WEATHER, '{"label": "clear"}', MalformedResponse),
    ("truncated", WETNESS_SNOW, "Step 1: the pavement shows", MalformedResponse),
    # unknown labels
    ("unknown-sunny", WEATHER, "FINAL: sunny", UnknownVerdictLabel),
    ("unknown-flooded-bare", WETNESS_RAIN, "Water pools.\nFINAL: flooded", UnknownVerdictLabel),
    ("unknown-wet", WETNESS_RAIN, "FINAL: wet", UnknownVerdictLabel),
    ("cross-task-label", WEATHER, "FINAL: congested", UnknownVerdictLabel),
    ("wrong-regime", WETNESS_RAIN, "FINAL: snowy fully wet", UnknownVerdictLabel),
    ("wrong-regime-snow", WETNESS_SNOW, "FINAL: rainy flooded", UnknownVerdictLabel),
    ("two-labels", WEATHER, "FINAL: clear, rainy", UnknownVerdictLabel),
    ("label-with-sentence", WEATHER, "FINAL: clear because the sky is blue", UnknownVerdictLabel),
    ("unknown-jammed", CONGESTION_INBOUND, GATE_OK + "FINAL: jammed", UnknownVerdictLabel),
    ("icy-abbrev", WETNESS_SNOW, "FINAL: icy", UnknownVerdictLabel),
    # congestion gating fields
    ("no-pressure", CONGESTION_INBOUND, "FLOW_SLOW: true\nFINAL: congested", MissingGatingFields),
    ("no-flow-slow", CONGESTION_INBOUND, "PRESSURE: strong\nFINAL: congested", MissingGatingFields),
    ("no-gating", CONGESTION_OUTBOUND, "Cars crawl.\nFINAL: congested", MissingGatingFields),
    ("gating-only-impression", CONGESTION_OUTBOUND, "IMPRESSION: disrupted\nFINAL: unobstructed",
     MissingGatingFields),
    ("gating-inline", CONGESTION_INBOUND, "pressure is strong and flow_slow true\nFINAL: congested",
     MissingGatingFields),
    # invalid gating values
    ("pressure-high", CONGESTION_INBOUND, "PRESSURE: high\nFLOW_SLOW: true\nFINAL: congested", MalformedResponse),
    ("pressure-number", CONGESTION_INBOUND, "PRESSURE: 3\nFLOW_SLOW: true\nFINAL: congested", MalformedResponse),
    ("flow-maybe", CONGESTION_OUTBOUND, "PRESSURE: moderate\nFLOW_SLOW: maybe\nFINAL: congested",
     MalformedResponse),
    ("flow-empty", CONGESTION_OUTBOUND, "PRESSURE: moderate\nFLOW_SLOW:\nFINAL: unobstructed", MalformedResponse),
    ("impression-bad", CONGESTION_INBOUND, "IMPRESSION: chaotic\nPRESSURE: weak\nFLOW_SLOW: false\nFINAL: unobstructed",
     MalformedResponse),
]
