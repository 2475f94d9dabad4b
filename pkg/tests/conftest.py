import pytest

from tests.synth import harmonic_utterance, write_corpus


@pytest.fixture
def corpus_manifest(tmp_path):
    return write_corpus(tmp_path / "corpus")


@pytest.fixture
def tone():
    return harmonic_utterance(200.0, seconds=2.0)
