from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from roadscene.errors import UnknownLabel
from roadscene.taxonomy import (
    CONGESTION_INBOUND,
    CONGESTION_OUTBOUND,
    WEATHER,
    WETNESS_RAIN,
    WETNESS_SNOW,
    CongestionLabel,
    Direction,
    Task,
    TaskKind,
    WeatherClass,
    WetnessClass,
    congestion_features,
    cue_card,
    cue_cards_for,
    label_from_value,
    labels_for,
    normalize_label_text,
    parse_label,
)

ALL_TASKS = [WEATHER, WETNESS_RAIN, WETNESS_SNOW, CONGESTION_INBOUND, CONGESTION_OUTBOUND]


def test_label_sets_per_task():
    assert [l.value for l in labels_for(WEATHER)] == ["clear", "rainy", "snowy"]
    assert [l.value for l in labels_for(WETNESS_RAIN)] == [
        "dry", "rainy partially wet", "rainy fully wet", "rainy flooded",
    ]
    assert [l.value for l in labels_for(WETNESS_SNOW)] == [
        "dry", "snowy partially wet", "snowy fully wet", "snowy wet with icy warning",
    ]
    assert set(labels_for(CONGESTION_INBOUND)) == set(CongestionLabel)


def test_wetness_regime():
    assert WetnessClass.RAINY_FLOODED.regime is WeatherClass.RAINY
    assert WetnessClass.SNOWY_WET_ICY_WARNING.regime is WeatherClass.SNOWY
    assert WetnessClass.DRY.regime is WeatherClass.CLEAR


@pytest.mark.parametrize("task", ALL_TASKS, ids=lambda t: t.slug)
def test_parse_label_roundtrips_canonical_names(task):
    for label in labels_for(task):
        assert parse_label(label.value, task) is label


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Rainy Fully Wet", WetnessClass.RAINY_FULLY_WET),
        ("rainy-fully-wet", WetnessClass.RAINY_FULLY_WET),
        ("**rainy   flooded**", WetnessClass.RAINY_FLOODED),
        ("`dry`.", WetnessClass.DRY),
        ("rainy_partially_wet", WetnessClass.RAINY_PARTIALLY_WET),
    ],
)
def test_parse_label_forgives_cosmetics(text, expected):
    assert parse_label(text, WETNESS_RAIN) is expected


@pytest.mark.parametrize("text", ["flooded", "wet", "rainy fully", "snowy fully wet", "fully wet rainy"])
def test_parse_label_rejects_near_misses(text):
    with pytest.raises(UnknownLabel):
        parse_label(text, WETNESS_RAIN)


def test_parse_label_rejects_label_from_other_task():
    with pytest.raises(UnknownLabel):
        parse_label("congested", WEATHER)


def test_parse_label_empty_is_value_error():
    with pytest.raises(ValueError):
        parse_label("   ", WEATHER)


@given(st.sampled_from(ALL_TASKS), st.data())
def test_normalization_is_idempotent_and_case_blind(task, data):
    label = data.draw(st.sampled_from(labels_for(task)))
    mangled = data.draw(st.sampled_from([label.value.upper(), label.value.title(), f" *{label.value}* "]))
    assert normalize_label_text(normalize_label_text(mangled)) == normalize_label_text(mangled)
    assert parse_label(mangled, task) is label


def test_task_parse_and_slug():
    assert Task.parse("congestion:outbound") == CONGESTION_OUTBOUND
    assert Task.parse("Wetness-Snow") == WETNESS_SNOW
    assert CONGESTION_INBOUND.slug == "congestion:inbound"
    with pytest.raises(ValueError):
        Task.parse("congestion")
    with pytest.raises(ValueError):
        Task.parse("weather:inbound")
    with pytest.raises(ValueError):
        Task.parse("traffic")


def test_direction_definitions_name_the_camera():
    assert "approaching the camera" in Direction.INBOUND.definition
    assert "away from the camera" in Direction.OUTBOUND.definition


def test_every_label_has_a_cue_card():
    for kind in TaskKind:
        cards = cue_cards_for(kind)
        assert [c.label for c in cards] == labels_for(kind)
        assert all(c.cues for c in cards)


def test_congestion_features_are_the_congested_cues():
    feats = congestion_features()
    assert len(feats) == 4
    assert feats == cue_card(CongestionLabel.CONGESTED).cues
    assert any("stop" in f for f in feats)


def test_label_from_value_inverts_every_label():
    for kind in TaskKind:
        for label in labels_for(kind):
            assert label_from_value(label.value) is label
