"""
相對線索與獨立線索標註

相對線索比較目標與干擾說話者的同一屬性；獨立線索以等頻分箱把單一說話者的屬性量化成類別。
"""
import logging
from bisect import bisect_right
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from ..audio.attributes import (
    CONTINUOUS_ATTRIBUTES,
    DISCRETE_ATTRIBUTES,
    LANGUAGE_NAMES,
    AttributeVector,
    Language,
)
from ..errors import DataError
from ..utils.io import read_json, write_json

logger = logging.getLogger(__name__)

SIMILAR = "similar"
SAME = "Same"


class ThresholdMode(str, Enum):
    """差值計算方式"""
    DIRECT = "direct"
    PERCENT = "percent"


class CueKind(str, Enum):
    RELATIVE = "relative"
    INDEPENDENT = "independent"


class CueSource(str, Enum):
    TARGET = "target"
    PAIR = "pair"


# 屬性 -> (差值大於門檻時的類別, 差值小於負門檻時的類別)
RELATIVE_NAMES: Dict[str, Tuple[str, str]] = {
    "rms_energy": ("louder", "quieter"),
    "distance": ("farther", "nearer"),
    "age": ("older", "younger"),
    "mean_f0": ("higher", "lower"),
    "f0_span": ("wider", "narrower"),
    "speaking_rate": ("faster", "slower"),
    "speaking_duration": ("longer", "shorter"),
    "appearance_time": ("later", "earlier"),
}

# 年齡與出現時間不做獨立線索
DEFAULT_INDEPENDENT_CATEGORIES: Dict[str, List[str]] = {
    "mean_f0": ["low", "normal", "high"],
    "f0_span": ["narrow", "normal", "wide"],
    "rms_energy": ["quiet", "normal", "loud"],
    "distance": ["near", "far"],
    "speaking_rate": ["slow", "normal", "fast"],
    "speaking_duration": ["short", "long"],
}


class ThresholdEntry(BaseModel):
    mode: ThresholdMode
    theta: float
    unit: str

    @field_validator("theta")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError(f"門檻必須為正: {value}")
        return value


# 感知最小可覺差門檻
DEFAULT_THRESHOLDS: Dict[str, Tuple[str, float, str]] = {
    "rms_energy": ("direct", 3.0, "dB"),
    "distance": ("direct", 0.5, "m"),
    "age": ("direct", 10.0, "years"),
    "mean_f0": ("percent", 6.0, "%"),
    "f0_span": ("percent", 25.0, "%"),
    "speaking_rate": ("percent", 15.0, "%"),
    "speaking_duration": ("percent", 15.0, "%"),
    "appearance_time": ("direct", 0.1, "s"),
}


class ThresholdTable(BaseModel):
    """每個連續屬性恰有一筆門檻"""
    entries: Dict[str, ThresholdEntry]

    @model_validator(mode="after")
    def _complete(self):
        missing = set(CONTINUOUS_ATTRIBUTES) - set(self.entries)
        unknown = set(self.entries) - set(CONTINUOUS_ATTRIBUTES)
        if missing or unknown:
            raise ValueError(f"門檻表屬性不符，缺少 {sorted(missing)}，多出 {sorted(unknown)}")
        return self

    @classmethod
    def default(cls) -> "ThresholdTable":
        return cls(entries={
            name: ThresholdEntry(mode=mode, theta=theta, unit=unit)
            for name, (mode, theta, unit) in DEFAULT_THRESHOLDS.items()
        })

    def with_overrides(self, theta: Mapping[str, float]) -> "ThresholdTable":
        entries = dict(self.entries)
        for name, value in theta.items():
            if name not in entries:
                raise DataError(f"未知的屬性門檻: {name}")
            entries[name] = entries[name].model_copy(update={"theta": float(value)})
        return ThresholdTable(entries=entries)

    def __getitem__(self, attribute: str) -> ThresholdEntry:
        try:
            return self.entries[attribute]
        except KeyError:
            raise DataError(f"門檻表沒有屬性: {attribute}") from None


class CueSettings(BaseModel):
    """門檻覆寫與獨立線索類別"""
    thresholds: Dict[str, float] = {}
    independent_categories: Dict[str, List[str]] = {k: list(v) for k, v in DEFAULT_INDEPENDENT_CATEGORIES.items()}
    fit_split: str = "train"

    @field_validator("thresholds")
    @classmethod
    def _known_thresholds(cls, value):
        for name, theta in value.items():
            if name not in DEFAULT_THRESHOLDS:
                raise ValueError(f"未知的屬性門檻: {name}")
            if theta <= 0:
                raise ValueError(f"{name} 門檻必須為正: {theta}")
        return value

    @field_validator("independent_categories")
    @classmethod
    def _category_lists(cls, value):
        for name, categories in value.items():
            if name not in DEFAULT_THRESHOLDS:
                raise ValueError(f"未知的獨立線索屬性: {name}")
            if len(categories) not in (2, 3) or len(set(categories)) != len(categories):
                raise ValueError(f"{name}: 類別必須是 2 或 3 個不重複名稱")
        return value

    def threshold_table(self) -> "ThresholdTable":
        return ThresholdTable.default().with_overrides(self.thresholds)


class CueLabel(BaseModel):
    """單一屬性的線索類別"""
    attribute: str
    kind: CueKind
    category: str
    delta: Optional[float] = None
    source: CueSource = CueSource.PAIR

    @property
    def informative(self) -> bool:
        """非 similar / Same 的線索才能區分兩位說話者"""
        return self.category not in (SIMILAR, SAME)


class IndependentQuantizer(BaseModel):
    """等頻分箱量化器"""
    attribute: str
    breakpoints: List[float]
    categories: List[str]

    @model_validator(mode="after")
    def _check(self):
        if len(self.categories) not in (2, 3):
            raise ValueError(f"{self.attribute}: 類別數必須為 2 或 3")
        if len(self.categories) != len(self.breakpoints) + 1:
            raise ValueError(f"{self.attribute}: 類別數必須比分界點多 1")
        if any(a >= b for a, b in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError(f"{self.attribute}: 分界點必須嚴格遞增")
        return self

    def bin_index(self, x: float) -> int:
        # 恰好落在分界點時歸入上方的箱
        return bisect_right(self.breakpoints, x)

    def category(self, x: float) -> str:
        return self.categories[self.bin_index(x)]


def direct_diff(x_tar: float, x_inf: float) -> float:
    return x_tar - x_inf


def percent_diff(x_tar: float, x_inf: float) -> float:
    """(x_tar - x_inf) / min(x_tar, x_inf) * 100，兩個方向共用同一個分母"""
    if x_tar <= 0 or x_inf <= 0:
        raise DataError(f"百分比差值需要正值: ({x_tar}, {x_inf})")
    return (x_tar - x_inf) * 100.0 / min(x_tar, x_inf)


def attribute_delta(attribute: str, x_tar: float, x_inf: float,
                    thresholds: Optional[ThresholdTable] = None) -> float:
    """依屬性模式計算差值"""
    thresholds = thresholds or ThresholdTable.default()
    entry = thresholds[attribute]
    if entry.mode == ThresholdMode.PERCENT:
        return percent_diff(x_tar, x_inf)
    return direct_diff(x_tar, x_inf)


def relative_category(attribute: str, x_tar: float, x_inf: float,
                      thresholds: Optional[ThresholdTable] = None) -> CueLabel:
    """|delta| <= theta 為 similar，否則依正負號取該屬性的兩個相對名稱"""
    thresholds = thresholds or ThresholdTable.default()
    if attribute not in RELATIVE_NAMES:
        raise DataError(f"不是連續屬性: {attribute}")
    delta = attribute_delta(attribute, x_tar, x_inf, thresholds)
    theta = thresholds[attribute].theta
    upper, lower = RELATIVE_NAMES[attribute]
    if delta > theta:
        category = upper
    elif delta < -theta:
        category = lower
    else:
        category = SIMILAR
    return CueLabel(attribute=attribute, kind=CueKind.RELATIVE, category=category, delta=delta)


def discrete_relative(attribute: str, d_tar: str, d_inf: str) -> CueLabel:
    """相同則為 Same，否則保留目標說話者的類別"""
    if not d_tar or not d_inf:
        raise DataError(f"{attribute}: 離散類別不可為空")
    d_tar = getattr(d_tar, "value", d_tar)
    d_inf = getattr(d_inf, "value", d_inf)
    if d_tar == d_inf:
        category = SAME
    elif attribute == "language":
        category = LANGUAGE_NAMES[Language(d_tar)]
    else:
        category = str(d_tar)
    return CueLabel(attribute=attribute, kind=CueKind.RELATIVE, category=category)


def fit_independent_quantizer(attribute: str, training_values: Iterable[float], k: int,
                              names: Optional[Sequence[str]] = None) -> IndependentQuantizer:
    """
    等頻分箱

    第 j 個分界點位於排序後第 c-1 與第 c 個值的中點，c = floor(n j / k + 0.5)。
    兩值相等時改取該值與下一個相異值的中點，並依序往後推，使分界點嚴格遞增；
    至少要有 k 個相異值。
    """
    if k not in (2, 3):
        raise DataError(f"{attribute}: k 必須為 2 或 3，收到 {k}")
    names = list(names) if names is not None else list(DEFAULT_INDEPENDENT_CATEGORIES.get(attribute, []))
    if len(names) != k:
        raise DataError(f"{attribute}: 需要 {k} 個類別名稱，收到 {names}")
    values = np.sort(np.asarray([v for v in training_values if v is not None], dtype=np.float64))
    distinct = np.unique(values)
    if distinct.size < k:
        raise DataError(f"{attribute}: 相異值少於 {k} 個，無法分箱")
    n = values.size
    # gap g 指 distinct[g] 與 distinct[g + 1] 之間
    last_gap = distinct.size - 2
    gaps: List[int] = []
    for j in range(1, k):
        c = int(np.floor(n * j / k + 0.5))
        g = min(int(np.searchsorted(distinct, values[c - 1])), last_gap - (k - 1 - j))
        if gaps:
            g = max(g, gaps[-1] + 1)
        gaps.append(g)
    breakpoints = [float(0.5 * (distinct[g] + distinct[g + 1])) for g in gaps]
    if distinct.size < n:
        logger.debug("%s 有重複值，分界點取相異值的中點: %s", attribute, breakpoints)
    return IndependentQuantizer(attribute=attribute, breakpoints=breakpoints, categories=names)


def independent_quantize(q: IndependentQuantizer, x: float) -> CueLabel:
    return CueLabel(attribute=q.attribute, kind=CueKind.INDEPENDENT, category=q.category(x),
                    source=CueSource.TARGET)


def fit_quantizers(
    vectors: Iterable[AttributeVector],
    category_names: Optional[Mapping[str, Sequence[str]]] = None,
) -> Dict[str, IndependentQuantizer]:
    """以訓練集屬性向量擬合每個獨立線索屬性的量化器"""
    category_names = category_names or DEFAULT_INDEPENDENT_CATEGORIES
    vectors = list(vectors)
    quantizers = {}
    for attribute, names in category_names.items():
        values = [v.value(attribute) for v in vectors if v.value(attribute) is not None]
        try:
            quantizers[attribute] = fit_independent_quantizer(attribute, values, len(names), names)
        except DataError as e:
            logger.warning("略過 %s 的獨立線索: %s", attribute, e)
            continue
        logger.debug("%s 分界點: %s", attribute, quantizers[attribute].breakpoints)
    return quantizers


def _percent_valid(attribute: str, a: float, b: float, thresholds: ThresholdTable) -> bool:
    return thresholds[attribute].mode != ThresholdMode.PERCENT or (a > 0 and b > 0)


def cue_labels_for_pair(
    av_tar: AttributeVector,
    av_inf: AttributeVector,
    thresholds: Optional[ThresholdTable] = None,
    quantizers: Optional[Mapping[str, IndependentQuantizer]] = None,
) -> List[CueLabel]:
    """兩個向量都有的屬性各產生一個相對線索；目標有值且已擬合量化器的屬性各產生一個獨立線索"""
    thresholds = thresholds or ThresholdTable.default()
    labels: List[CueLabel] = []
    for attribute in CONTINUOUS_ATTRIBUTES:
        a, b = av_tar.value(attribute), av_inf.value(attribute)
        if a is None or b is None:
            continue
        if not _percent_valid(attribute, a, b, thresholds):
            logger.debug("略過 %s：百分比模式需要正值 (%s, %s)", attribute, a, b)
            continue
        labels.append(relative_category(attribute, a, b, thresholds))
    for attribute in DISCRETE_ATTRIBUTES:
        a, b = av_tar.value(attribute), av_inf.value(attribute)
        if a is None or b is None:
            continue
        labels.append(discrete_relative(attribute, a, b))
    for attribute, q in (quantizers or {}).items():
        x = av_tar.value(attribute)
        if x is not None:
            labels.append(independent_quantize(q, x))
    return labels


def save_thresholds(table: ThresholdTable, path: Union[str, Path]) -> None:
    write_json(path, table.model_dump(mode="json"))


def load_thresholds(path: Union[str, Path]) -> ThresholdTable:
    try:
        return ThresholdTable.model_validate(read_json(path))
    except ValidationError as e:
        raise DataError(f"門檻檔格式錯誤 {path}: {e}") from e


def save_quantizers(quantizers: Mapping[str, IndependentQuantizer], path: Union[str, Path]) -> None:
    write_json(path, {name: q.model_dump(mode="json") for name, q in quantizers.items()})


def load_quantizers(path: Union[str, Path]) -> Dict[str, IndependentQuantizer]:
    try:
        return {name: IndependentQuantizer.model_validate(row) for name, row in read_json(path).items()}
    except ValidationError as e:
        raise DataError(f"量化器檔格式錯誤 {path}: {e}") from e
