import numpy as np
import pytest
from pydantic import ValidationError

from src.audio.attributes import CONTINUOUS_ATTRIBUTES, AttributeVector
from src.cues.cue_engine import (
    RELATIVE_NAMES,
    SAME,
    SIMILAR,
    CueKind,
    CueSettings,
    CueSource,
    ThresholdTable,
    attribute_delta,
    cue_labels_for_pair,
    discrete_relative,
    fit_independent_quantizer,
    fit_quantizers,
    independent_quantize,
    load_quantizers,
    load_thresholds,
    percent_diff,
    relative_category,
    save_quantizers,
    save_thresholds,
)
from src.errors import DataError


def _vector(**kwargs):
    base = dict(
        mean_f0_hz=200.0, f0_span_hz=80.0, age_years=30.0, speaking_duration_s=3.0,
        speaking_rate_spm=240.0, rms_energy_db=-20.0, distance_m=1.0, appearance_time_s=0.2,
        language="en", gender="female", emotion="happy", transcription="hello world",
    )
    base.update(kwargs)
    return AttributeVector(**base)


def test_default_thresholds():
    table = ThresholdTable.default()
    assert table["rms_energy"].theta == 3.0
    assert table["distance"].theta == 0.5
    assert table["age"].theta == 10.0
    assert table["mean_f0"].theta == 6.0
    assert table["f0_span"].theta == 25.0
    assert table["speaking_rate"].theta == 15.0
    assert table["speaking_duration"].theta == 15.0
    assert table["appearance_time"].theta == 0.1
    assert table["mean_f0"].mode == "percent"
    assert table["distance"].mode == "direct"


def test_percent_diff_uses_smaller_value():
    assert percent_diff(200.0, 180.0) == pytest.approx(100.0 * 20 / 180)
    assert percent_diff(180.0, 200.0) == pytest.approx(-100.0 * 20 / 180)


def test_percent_diff_rejects_non_positive():
    with pytest.raises(DataError):
        percent_diff(0.0, 100.0)


@pytest.mark.parametrize("attribute,tar,inf,expected", [
    ("mean_f0", 200.0, 180.0, "higher"),
    ("mean_f0", 180.0, 200.0, "lower"),
    ("mean_f0", 200.0, 190.0, SIMILAR),
    ("distance", 1.6, 1.0, "farther"),
    ("distance", 1.0, 1.6, "nearer"),
    ("distance", 1.5, 1.0, SIMILAR),
    ("rms_energy", -20.0, -25.0, "louder"),
    ("age", 25.0, 60.0, "younger"),
    ("appearance_time", 0.3, 0.1, "later"),
    ("speaking_rate", 200.0, 300.0, "slower"),
    ("speaking_duration", 4.0, 3.0, "longer"),
    ("f0_span", 50.0, 100.0, "narrower"),
])
def test_relative_category(attribute, tar, inf, expected):
    label = relative_category(attribute, tar, inf)
    assert label.category == expected
    assert label.kind == CueKind.RELATIVE
    assert label.delta == pytest.approx(attribute_delta(attribute, tar, inf))


def test_relative_category_is_antisymmetric():
    forward = relative_category("mean_f0", 220.0, 150.0)
    backward = relative_category("mean_f0", 150.0, 220.0)
    assert forward.delta == pytest.approx(-backward.delta)
    assert (forward.category, backward.category) == ("higher", "lower")


@pytest.mark.parametrize("attribute", CONTINUOUS_ATTRIBUTES)
def test_swapping_speakers_swaps_categories(attribute):
    table = ThresholdTable.default()
    upper, lower = RELATIVE_NAMES[attribute]
    swapped = {upper: lower, lower: upper, SIMILAR: SIMILAR}
    rng = np.random.default_rng(len(attribute))
    if table[attribute].mode == "percent":
        pairs = rng.uniform(50.0, 400.0, size=(1250, 2))
    else:
        pairs = rng.uniform(0.0, 4.0 * table[attribute].theta, size=(1250, 2))
    seen = set()
    for a, b in pairs:
        forward = relative_category(attribute, a, b, table).category
        assert relative_category(attribute, b, a, table).category == swapped[forward]
        seen.add(forward)
    assert seen == {upper, lower, SIMILAR}


@pytest.mark.parametrize("attribute,tar,inf", [
    ("mean_f0", 106.0, 100.0),
    ("rms_energy", -20.0, -23.0),
    ("distance", 1.5, 1.0),
    ("age", 40.0, 30.0),
])
def test_delta_equal_to_threshold_is_similar(attribute, tar, inf):
    assert relative_category(attribute, tar, inf).category == SIMILAR
    assert relative_category(attribute, inf, tar).category == SIMILAR


def test_threshold_override_changes_category():
    table = CueSettings(thresholds={"distance": 1.0}).threshold_table()
    assert table["distance"].theta == 1.0
    assert relative_category("distance", 1.6, 1.0, table).category == SIMILAR


def test_threshold_settings_validation():
    with pytest.raises(ValidationError):
        CueSettings(thresholds={"height": 1.0})
    with pytest.raises(ValidationError):
        CueSettings(thresholds={"age": 0.0})
    with pytest.raises(ValidationError):
        ThresholdTable(entries={})


def test_discrete_relative():
    assert discrete_relative("language", "en", "en").category == SAME
    assert discrete_relative("language", "en", "fr").category == "English"
    assert discrete_relative("gender", "female", "male").category == "female"
    assert discrete_relative("emotion", "sad", "happy").category == "sad"
    with pytest.raises(DataError):
        discrete_relative("emotion", "", "happy")


def test_quantizer_breakpoints():
    q = fit_independent_quantizer("mean_f0", range(1, 10), 3)
    assert q.breakpoints == [3.5, 6.5]
    assert q.categories == ["low", "normal", "high"]
    assert q.category(1.0) == "low"
    assert q.category(3.5) == "normal"
    assert q.category(9.0) == "high"


def test_quantizer_two_bins():
    q = fit_independent_quantizer("distance", [0.4, 0.6, 0.9, 1.4], 2)
    assert q.breakpoints == [pytest.approx(0.75)]
    assert independent_quantize(q, 0.5).category == "near"
    label = independent_quantize(q, 1.2)
    assert label.category == "far"
    assert label.kind == CueKind.INDEPENDENT
    assert label.source == CueSource.TARGET


def test_quantizer_errors():
    with pytest.raises(DataError):
        fit_independent_quantizer("mean_f0", [1.0, 1.0, 2.0], 3)
    with pytest.raises(DataError):
        fit_independent_quantizer("mean_f0", range(10), 4)
    with pytest.raises(DataError):
        fit_independent_quantizer("distance", [0.5, 0.5, 0.5], 2)


@pytest.mark.parametrize("values,k,expected", [
    ([1, 1, 1, 1, 1, 1, 1, 2, 3], 3, [1.5, 2.5]),
    ([1, 2, 2, 2, 2, 2, 3], 3, [1.5, 2.5]),
    ([1, 2, 3, 3, 3, 3, 4, 5, 6], 3, [3.5, 4.5]),
    ([5, 5, 5, 5, 6], 2, [5.5]),
])
def test_quantizer_handles_ties(values, k, expected):
    names = ["low", "normal", "high"] if k == 3 else ["near", "far"]
    q = fit_independent_quantizer("mean_f0" if k == 3 else "distance", values, k, names)
    assert q.breakpoints == expected
    assert {q.category(v) for v in values} == set(names)


def test_fit_quantizers_covers_default_attributes():
    vectors = [
        _vector(mean_f0_hz=100.0 + 20 * i, f0_span_hz=30.0 + 10 * i, rms_energy_db=-30.0 + i,
                distance_m=0.3 + 0.1 * i, speaking_rate_spm=150.0 + 10 * i, speaking_duration_s=1.0 + 0.3 * i)
        for i in range(9)
    ]
    quantizers = fit_quantizers(vectors)
    assert set(quantizers) == {"mean_f0", "f0_span", "rms_energy", "distance", "speaking_rate", "speaking_duration"}
    assert len(quantizers["distance"].categories) == 2
    assert len(quantizers["mean_f0"].breakpoints) == 2


def test_cue_labels_for_pair():
    tar = _vector(mean_f0_hz=220.0, distance_m=0.5, language="en", gender="female", emotion="sad")
    inf = _vector(mean_f0_hz=120.0, distance_m=1.4, language="en", gender="male", emotion="happy",
                  transcription="good morning")
    labels = cue_labels_for_pair(tar, inf)
    by_attribute = {label.attribute: label for label in labels}
    assert len(labels) == 12
    assert by_attribute["mean_f0"].category == "higher"
    assert by_attribute["distance"].category == "nearer"
    assert by_attribute["age"].category == SIMILAR
    assert by_attribute["language"].category == SAME
    assert by_attribute["gender"].category == "female"
    assert by_attribute["emotion"].category == "sad"
    assert by_attribute["transcription"].category == "hello world"
    assert not by_attribute["language"].informative
    assert by_attribute["gender"].informative


def test_cue_labels_skip_missing_values():
    tar = _vector(age_years=None, emotion=None)
    inf = _vector()
    attributes = {label.attribute for label in cue_labels_for_pair(tar, inf)}
    assert "age" not in attributes
    assert "emotion" not in attributes
    assert "mean_f0" in attributes


def test_cue_labels_include_independent_cues():
    q = fit_independent_quantizer("distance", [0.4, 0.6, 0.9, 1.4], 2)
    labels = cue_labels_for_pair(_vector(distance_m=0.5), _vector(distance_m=1.3), quantizers={"distance": q})
    independent = [label for label in labels if label.kind == CueKind.INDEPENDENT]
    assert [(label.attribute, label.category) for label in independent] == [("distance", "near")]


def test_tables_persist(tmp_path):
    table = CueSettings(thresholds={"age": 5.0}).threshold_table()
    save_thresholds(table, tmp_path / "thresholds.json")
    assert load_thresholds(tmp_path / "thresholds.json") == table

    quantizers = {"distance": fit_independent_quantizer("distance", [0.4, 0.6, 0.9, 1.4], 2)}
    save_quantizers(quantizers, tmp_path / "quantizers.json")
    assert load_quantizers(tmp_path / "quantizers.json") == quantizers


def test_fit_quantizers_skips_degenerate_attributes():
    vectors = [_vector(distance_m=0.3 + 0.2 * i) for i in range(4)]
    quantizers = fit_quantizers(vectors)
    assert set(quantizers) == {"distance"}
