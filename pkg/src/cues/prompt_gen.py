"""
提示語產生器

把線索標籤轉成英文提示語，支援三種組合：individual（每個線索一句）、random（隨機子集）、all（全部線索）。
"""
import csv
import logging
import zlib
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from langchain_core.prompts import PromptTemplate
from pydantic import BaseModel, field_validator

from ..errors import DataError
from .cue_engine import CueKind, CueLabel

logger = logging.getLogger(__name__)

DEFAULT_PHRASE_TABLE = Path(__file__).parent / "templates" / "phrases.tsv"
WILDCARD = "*"


class PromptConfig(str, Enum):
    INDIVIDUAL = "individual"
    RANDOM = "random"
    ALL = "all"


class PromptSettings(BaseModel):
    """提示語設定"""
    verbs: List[str] = ["extract", "separate", "isolate"]
    filter_similar: bool = True
    phrase_table: Optional[str] = None
    sentence_template: str = "Please {verb} {subject} with {attributes}."
    subject_only_template: str = "Please {verb} {subject}."
    default_subject: str = "the speaker"
    independent_prompts: bool = True

    @field_validator("verbs")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("verbs 不可為空")
        return value


class PromptRecord(BaseModel):
    """一句提示語及其線索中繼資料"""
    text: str
    config: PromptConfig
    kind: CueKind = CueKind.RELATIVE
    cue_types: List[str]
    categories: List[str]
    target_index: int
    mixture_id: str = ""

    @field_validator("cue_types")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("cue_types 不可為空")
        return value

    @property
    def labels(self) -> List[Tuple[str, str]]:
        return list(zip(self.cue_types, self.categories))


class PhraseTable:
    """屬性/類別 -> 片語對照表（attribute<TAB>category<TAB>phrase）"""

    def __init__(self, phrases: Dict[Tuple[str, str], str]):
        self.phrases = dict(phrases)
        self.attributes = {attribute for attribute, _ in self.phrases}

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "PhraseTable":
        path = Path(path) if path else DEFAULT_PHRASE_TABLE
        if not path.exists():
            raise DataError(f"找不到片語表: {path}")
        phrases = {}
        with path.open("r", encoding="utf-8", newline="") as f:
            for line_no, row in enumerate(csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 3:
                    raise DataError(f"{path}:{line_no} 需要三個欄位，收到 {len(row)}")
                attribute, category, phrase = (cell.strip() for cell in row)
                phrases[(attribute, category)] = phrase
        logger.debug("載入片語表 %s: %d 筆", path, len(phrases))
        return cls(phrases)

    def phrase(self, attribute: str, category: str) -> str:
        if attribute not in self.attributes:
            raise DataError(f"片語表沒有屬性: {attribute}")
        template = self.phrases.get((attribute, category)) or self.phrases.get((attribute, WILDCARD))
        if template is None:
            raise DataError(f"片語表沒有 ({attribute}, {category})")
        return template.replace("{category}", category)


_DEFAULT_TABLE: Optional[PhraseTable] = None


def default_phrase_table() -> PhraseTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = PhraseTable.load()
    return _DEFAULT_TABLE


def verbalize_cue(label: CueLabel, table: Optional[PhraseTable] = None) -> str:
    """例: (mean_f0, higher) -> "a higher pitch"、(gender, female) -> "the female speaker" """
    return (table or default_phrase_table()).phrase(label.attribute, label.category)


def _join(phrases: Sequence[str]) -> str:
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def _choose_verb(mixture_id: str, labels: Sequence[CueLabel], verbs: Sequence[str]) -> str:
    key = mixture_id + "|" + "+".join(f"{l.attribute}={l.category}" for l in labels)
    return verbs[zlib.crc32(key.encode("utf-8")) % len(verbs)]


def compose_prompt(
    labels: Sequence[CueLabel],
    config: PromptConfig,
    mixture_id: str = "",
    target_index: int = 1,
    settings: Optional[PromptSettings] = None,
    table: Optional[PhraseTable] = None,
) -> PromptRecord:
    """把一組線索組成一句提示語"""
    settings = settings or PromptSettings()
    if not labels:
        raise DataError("至少需要一個線索才能產生提示語")
    subjects, attributes = [], []
    for label in labels:
        phrase = verbalize_cue(label, table)
        (subjects if phrase.endswith("speaker") else attributes).append(phrase)
    subject = subjects[0] if subjects else settings.default_subject
    # 多個主詞片語時，其餘的併入 with 子句
    attributes = [s.replace(" speaker", " voice") for s in subjects[1:]] + attributes
    verb = _choose_verb(mixture_id, labels, settings.verbs)
    if attributes:
        template = PromptTemplate.from_template(settings.sentence_template)
        text = template.format(verb=verb, subject=subject, attributes=_join(attributes))
    else:
        template = PromptTemplate.from_template(settings.subject_only_template)
        text = template.format(verb=verb, subject=subject)
    kinds = {label.kind for label in labels}
    return PromptRecord(
        text=text,
        config=config,
        kind=CueKind.INDEPENDENT if kinds == {CueKind.INDEPENDENT} else CueKind.RELATIVE,
        cue_types=[label.attribute for label in labels],
        categories=[label.category for label in labels],
        target_index=target_index,
        mixture_id=mixture_id,
    )


def eligible_labels(labels: Sequence[CueLabel], kind: CueKind = CueKind.RELATIVE,
                    filter_similar: bool = True) -> List[CueLabel]:
    """依種類篩選；filter_similar 時排除 similar / Same"""
    return [l for l in labels if l.kind == kind and (l.informative or not filter_similar)]


def generate_individual(
    labels: Sequence[CueLabel],
    mixture_id: str = "",
    target_index: int = 1,
    settings: Optional[PromptSettings] = None,
    table: Optional[PhraseTable] = None,
) -> List[PromptRecord]:
    """每個可用線索各一句"""
    settings = settings or PromptSettings()
    return [
        compose_prompt([label], PromptConfig.INDIVIDUAL, mixture_id, target_index, settings, table)
        for label in eligible_labels(labels, CueKind.RELATIVE, settings.filter_similar)
    ]


def generate_random(
    labels: Sequence[CueLabel],
    rng: np.random.Generator,
    mixture_id: str = "",
    target_index: int = 1,
    settings: Optional[PromptSettings] = None,
    table: Optional[PhraseTable] = None,
) -> Optional[PromptRecord]:
    """n > 3 時隨機取 2 到 n-1 個線索，否則不產生"""
    settings = settings or PromptSettings()
    pool = eligible_labels(labels, CueKind.RELATIVE, settings.filter_similar)
    n = len(pool)
    if n <= 3:
        return None
    size = int(rng.integers(2, n))
    chosen = sorted(rng.choice(n, size=size, replace=False).tolist())
    return compose_prompt([pool[i] for i in chosen], PromptConfig.RANDOM, mixture_id, target_index, settings, table)


def generate_all(
    labels: Sequence[CueLabel],
    mixture_id: str = "",
    target_index: int = 1,
    settings: Optional[PromptSettings] = None,
    table: Optional[PhraseTable] = None,
) -> Optional[PromptRecord]:
    """至少兩個線索時產生包含全部線索的一句"""
    settings = settings or PromptSettings()
    pool = eligible_labels(labels, CueKind.RELATIVE, settings.filter_similar)
    if len(pool) < 2:
        return None
    return compose_prompt(pool, PromptConfig.ALL, mixture_id, target_index, settings, table)


def generate_independent(
    labels: Sequence[CueLabel],
    mixture_id: str = "",
    target_index: int = 1,
    settings: Optional[PromptSettings] = None,
    table: Optional[PhraseTable] = None,
) -> List[PromptRecord]:
    """獨立線索的 individual 提示語，用於相對/獨立線索比較"""
    return [
        compose_prompt([label], PromptConfig.INDIVIDUAL, mixture_id, target_index, settings, table)
        for label in labels if label.kind == CueKind.INDEPENDENT
    ]


def generate_prompts(
    labels: Sequence[CueLabel],
    rng: np.random.Generator,
    mixture_id: str = "",
    target_index: int = 1,
    settings: Optional[PromptSettings] = None,
    table: Optional[PhraseTable] = None,
) -> List[PromptRecord]:
    """一筆混合的全部提示語"""
    settings = settings or PromptSettings()
    if table is None and settings.phrase_table:
        table = PhraseTable.load(settings.phrase_table)
    prompts = generate_individual(labels, mixture_id, target_index, settings, table)
    for prompt in (
        generate_random(labels, rng, mixture_id, target_index, settings, table),
        generate_all(labels, mixture_id, target_index, settings, table),
    ):
        if prompt is not None:
            prompts.append(prompt)
    if settings.independent_prompts:
        prompts.extend(generate_independent(labels, mixture_id, target_index, settings, table))
    return prompts
