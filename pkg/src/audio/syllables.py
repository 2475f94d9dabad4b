"""
音節計數與語速
"""
import re
import unicodedata
from typing import Dict, Optional

from ..errors import DataError

# 各語言的母音字元；"y" 只在英文視為母音
DEFAULT_VOWEL_SETS: Dict[str, str] = {
    "en": "aeiouy",
    "es": "aeiouáéíóúü",
    "fr": "aeiouàâæéèêëîïôœùûü",
    "de": "aeiouäöü",
}

CJK_IDEOGRAPH = re.compile(
    "[\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff\U00020000-\U0002a6df]"
)
NON_LETTERS = re.compile(r"[\W\d_]+")

SUPPORTED_LANGUAGES = ("en", "fr", "de", "es", "zh")


def _language_code(language) -> str:
    return getattr(language, "value", language)


class SyllableCounter:
    """以「字詞內連續母音群」規則計數音節；中文每個漢字算一個音節"""

    def __init__(self, vowel_sets: Optional[Dict[str, str]] = None):
        sets = dict(DEFAULT_VOWEL_SETS)
        sets.update(vowel_sets or {})
        self.vowel_patterns = {
            lang: re.compile(f"[{re.escape(vowels.lower())}]+") for lang, vowels in sets.items()
        }

    def count_word(self, word: str, language) -> int:
        code = _language_code(language)
        pattern = self.vowel_patterns.get(code)
        if pattern is None:
            raise DataError(f"不支援的語言: {code}")
        return len(pattern.findall(word))

    def count(self, text: str, language) -> int:
        code = _language_code(language)
        if code not in SUPPORTED_LANGUAGES:
            raise DataError(f"不支援的語言: {code}")
        text = unicodedata.normalize("NFC", text or "")
        if code == "zh":
            return len(CJK_IDEOGRAPH.findall(text))
        words = NON_LETTERS.sub(" ", text.lower()).split()
        return sum(self.count_word(word, code) for word in words)


_DEFAULT_COUNTER = SyllableCounter()


def count_syllables(text: str, language, vowel_sets: Optional[Dict[str, str]] = None) -> int:
    """音節數"""
    counter = SyllableCounter(vowel_sets) if vowel_sets else _DEFAULT_COUNTER
    return counter.count(text, language)


def speaking_rate(
    text: str,
    language,
    speaking_duration_s: float,
    vowel_sets: Optional[Dict[str, str]] = None,
) -> float:
    """語速（音節/分鐘）"""
    if speaking_duration_s <= 0:
        raise DataError(f"說話時長必須為正: {speaking_duration_s}")
    return 60.0 * count_syllables(text, language, vowel_sets) / speaking_duration_s
