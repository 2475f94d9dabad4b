import json
from pathlib import Path

import pytest

from src.audio.syllables import SyllableCounter, count_syllables, speaking_rate
from src.errors import DataError

FIXTURE = json.loads((Path(__file__).parent / "data" / "syllable_fixture.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("case", FIXTURE, ids=lambda c: f"{c['language']}:{c['text']}")
def test_fixture_counts(case):
    assert count_syllables(case["text"], case["language"]) == case["syllables"]


def test_y_is_vowel_only_in_english():
    assert count_syllables("rhythm", "en") == 1
    assert count_syllables("rhythm", "de") == 0


def test_custom_vowel_set():
    counter = SyllableCounter({"de": "aeiouäöüy"})
    assert counter.count("Typisch", "de") == 2


def test_unsupported_language_raises():
    with pytest.raises(DataError):
        count_syllables("ciao", "it")


def test_speaking_rate():
    assert speaking_rate("hello world", "en", 1.5) == pytest.approx(120.0)


def test_speaking_rate_zero_duration_raises():
    with pytest.raises(DataError):
        speaking_rate("hello", "en", 0.0)


@pytest.mark.parametrize("case", [c for c in FIXTURE if c["language"] in ("en", "fr", "de", "es")],
                         ids=lambda c: f"{c['language']}:{c['text']}")
def test_count_is_additive_over_words(case):
    words = case["text"].split()
    assert count_syllables(" ".join(words), case["language"]) == sum(
        count_syllables(word, case["language"]) for word in words)
