import numpy as np
import pytest
from pydantic import ValidationError

from src.cues.cue_engine import SAME, SIMILAR, CueKind, CueLabel, CueSource
from src.cues.prompt_gen import (
    PhraseTable,
    PromptConfig,
    PromptRecord,
    PromptSettings,
    compose_prompt,
    generate_all,
    generate_individual,
    generate_independent,
    generate_prompts,
    generate_random,
    verbalize_cue,
)
from src.errors import DataError

VERBS = ("extract", "separate", "isolate")


def _rel(attribute, category):
    return CueLabel(attribute=attribute, kind=CueKind.RELATIVE, category=category)


def _ind(attribute, category):
    return CueLabel(attribute=attribute, kind=CueKind.INDEPENDENT, category=category, source=CueSource.TARGET)


LABELS = [
    _rel("rms_energy", "louder"),
    _rel("distance", SIMILAR),
    _rel("mean_f0", "higher"),
    _rel("speaking_rate", "slower"),
    _rel("appearance_time", "earlier"),
    _rel("language", SAME),
    _rel("gender", "female"),
    _rel("emotion", "happy"),
    _ind("mean_f0", "high"),
    _ind("distance", "near"),
]


def _strip_verb(text):
    for verb in VERBS:
        prefix = f"Please {verb} "
        if text.startswith(prefix):
            return text[len(prefix):]
    raise AssertionError(f"unexpected verb in {text!r}")


def test_verbalize_cue():
    assert verbalize_cue(_rel("mean_f0", "higher")) == "a higher pitch"
    assert verbalize_cue(_rel("gender", "female")) == "the female speaker"
    assert verbalize_cue(_rel("language", "English")) == "English speech"
    assert verbalize_cue(_rel("language", SAME)) == "the same language"
    assert verbalize_cue(_ind("distance", "near")) == "a near position to the microphone"


def test_verbalize_unknown_attribute_raises():
    with pytest.raises(DataError):
        verbalize_cue(_rel("height", "taller"))


def test_compose_subject_only():
    prompt = compose_prompt([_rel("gender", "male")], PromptConfig.INDIVIDUAL, "m1")
    assert _strip_verb(prompt.text) == "the male speaker."
    assert prompt.cue_types == ["gender"]
    assert prompt.categories == ["male"]


def test_compose_default_subject():
    prompt = compose_prompt([_rel("mean_f0", "higher")], PromptConfig.INDIVIDUAL, "m1")
    assert _strip_verb(prompt.text) == "the speaker with a higher pitch."


def test_compose_multiple_cues():
    labels = [_rel("mean_f0", "higher"), _rel("gender", "female"), _rel("rms_energy", "louder")]
    prompt = compose_prompt(labels, PromptConfig.ALL, "m1", target_index=2)
    assert _strip_verb(prompt.text) == "the female speaker with a higher pitch and a louder voice."
    assert prompt.target_index == 2
    assert prompt.labels == [("mean_f0", "higher"), ("gender", "female"), ("rms_energy", "louder")]


def test_compose_is_deterministic():
    labels = [_rel("mean_f0", "higher")]
    first = compose_prompt(labels, PromptConfig.INDIVIDUAL, "m7")
    second = compose_prompt(labels, PromptConfig.INDIVIDUAL, "m7")
    assert first.text == second.text


def test_compose_requires_labels():
    with pytest.raises(DataError):
        compose_prompt([], PromptConfig.ALL)


def test_individual_filters_similar():
    prompts = generate_individual(LABELS, "m1")
    assert [p.cue_types[0] for p in prompts] == [
        "rms_energy", "mean_f0", "speaking_rate", "appearance_time", "gender", "emotion",
    ]
    assert all(p.config == PromptConfig.INDIVIDUAL for p in prompts)


def test_individual_keeps_similar_when_asked():
    prompts = generate_individual(LABELS, "m1", settings=PromptSettings(filter_similar=False))
    assert len(prompts) == 8
    assert any(p.categories == [SIMILAR] for p in prompts)


def test_random_subset_size():
    rng = np.random.default_rng(0)
    pool = ["rms_energy", "mean_f0", "speaking_rate", "appearance_time", "gender", "emotion"]
    for _ in range(20):
        prompt = generate_random(LABELS, rng, "m1")
        assert prompt.config == PromptConfig.RANDOM
        assert 2 <= len(prompt.cue_types) <= 5
        assert prompt.cue_types == [c for c in pool if c in prompt.cue_types]


def test_random_needs_more_than_three_cues():
    labels = [_rel("mean_f0", "higher"), _rel("gender", "female"), _rel("rms_energy", "louder")]
    assert generate_random(labels, np.random.default_rng(0)) is None


def test_all_prompt():
    prompt = generate_all(LABELS, "m1")
    assert len(prompt.cue_types) == 6
    assert generate_all([_rel("mean_f0", "higher")]) is None


def test_independent_prompts():
    prompts = generate_independent(LABELS, "m1")
    assert [p.kind for p in prompts] == [CueKind.INDEPENDENT, CueKind.INDEPENDENT]
    assert _strip_verb(prompts[0].text) == "the speaker with a high pitch."


def test_generate_prompts_counts():
    prompts = generate_prompts(LABELS, np.random.default_rng(1), "m1", target_index=1)
    configs = [p.config for p in prompts]
    assert configs.count(PromptConfig.INDIVIDUAL) == 6 + 2
    assert configs.count(PromptConfig.RANDOM) == 1
    assert configs.count(PromptConfig.ALL) == 1


def test_generate_prompts_reproducible():
    a = generate_prompts(LABELS, np.random.default_rng(5), "m3")
    b = generate_prompts(LABELS, np.random.default_rng(5), "m3")
    assert [p.text for p in a] == [p.text for p in b]


def test_generate_prompts_without_independent():
    prompts = generate_prompts(LABELS, np.random.default_rng(1), "m1",
                               settings=PromptSettings(independent_prompts=False))
    assert all(p.kind == CueKind.RELATIVE for p in prompts)


def test_custom_phrase_table(tmp_path):
    path = tmp_path / "phrases.tsv"
    path.write_text("mean_f0\thigher\ta brighter tone\n", encoding="utf-8")
    table = PhraseTable.load(path)
    prompt = compose_prompt([_rel("mean_f0", "higher")], PromptConfig.INDIVIDUAL, table=table)
    assert _strip_verb(prompt.text) == "the speaker with a brighter tone."


def test_phrase_table_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("mean_f0\thigher\n", encoding="utf-8")
    with pytest.raises(DataError):
        PhraseTable.load(path)


def test_prompt_record_requires_cues():
    with pytest.raises(ValidationError):
        PromptRecord(text="x", config="all", cue_types=[], categories=[], target_index=1)
