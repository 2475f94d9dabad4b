"""
語音屬性擷取

由乾淨語句與其標註計算連續屬性（平均 F0、F0 範圍、說話時長、語速、RMS 能量、距離、出現時間、年齡）
與離散屬性（語言、性別、情緒、轉錄文字）。
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import soundfile as sf
from pydantic import BaseModel, ValidationError, field_validator, model_validator

from ..errors import DataError
from ..utils.io import iter_jsonl
from .pitch import estimate_f0_track, f0_span, mean_f0
from .syllables import SyllableCounter
from .vad import detect_speech_segments, speaking_duration
from .wave_core import Segment, WaveBuffer, rms_db

logger = logging.getLogger(__name__)


class Language(str, Enum):
    """語言"""
    EN = "en"
    FR = "fr"
    DE = "de"
    ES = "es"
    ZH = "zh"


class Gender(str, Enum):
    """性別"""
    MALE = "male"
    FEMALE = "female"


LANGUAGE_NAMES = {
    Language.EN: "English",
    Language.FR: "French",
    Language.DE: "German",
    Language.ES: "Spanish",
    Language.ZH: "Chinese",
}

# 屬性 id -> AttributeVector 欄位
CONTINUOUS_FIELDS: Dict[str, str] = {
    "rms_energy": "rms_energy_db",
    "distance": "distance_m",
    "age": "age_years",
    "mean_f0": "mean_f0_hz",
    "f0_span": "f0_span_hz",
    "speaking_rate": "speaking_rate_spm",
    "speaking_duration": "speaking_duration_s",
    "appearance_time": "appearance_time_s",
}
DISCRETE_FIELDS: Dict[str, str] = {
    "language": "language",
    "gender": "gender",
    "emotion": "emotion",
    "transcription": "transcription",
}
CONTINUOUS_ATTRIBUTES: Tuple[str, ...] = tuple(CONTINUOUS_FIELDS)
DISCRETE_ATTRIBUTES: Tuple[str, ...] = tuple(DISCRETE_FIELDS)

Word = Tuple[str, float, float]


class AttributeSettings(BaseModel):
    """屬性擷取參數"""
    fmin_hz: float = 50.0
    fmax_hz: float = 600.0
    yin_threshold: float = 0.1
    frame_length: int = 742
    hop_length: int = 160
    vad_frame_s: float = 0.030
    vad_hop_s: float = 0.010
    vad_floor_db: float = -45.0
    vad_margin_db: float = 10.0
    vad_hangover_s: float = 0.1
    vad_noise_percentile: float = 10.0
    vad_peak_margin_db: Optional[float] = 20.0
    max_pause_s: float = 0.6
    vowel_sets: Dict[str, str] = {}

    @model_validator(mode="after")
    def _check(self):
        if not (50.0 <= self.fmin_hz < self.fmax_hz <= 600.0):
            raise ValueError("fmin_hz 與 fmax_hz 需滿足 50 <= fmin < fmax <= 600")
        if self.hop_length <= 0 or self.frame_length <= 2 * self.hop_length:
            raise ValueError("frame_length 需大於兩倍 hop_length")
        return self


class UtteranceMeta(BaseModel):
    """語句標註"""
    utterance_id: str
    speaker_id: str
    language: Language
    gender: Gender
    age_years: Optional[float] = None
    emotion: Optional[str] = None
    transcription: Optional[str] = None
    word_boundaries: Optional[List[Word]] = None
    path: Optional[str] = None
    split: str = "train"

    @field_validator("age_years")
    @classmethod
    def _check_age(cls, value):
        if value is not None and not (0 < value < 120):
            raise ValueError(f"年齡需在 (0, 120) 之間: {value}")
        return value

    @field_validator("emotion", "transcription")
    @classmethod
    def _blank_to_none(cls, value):
        if value is not None and not value.strip():
            return None
        return value

    @model_validator(mode="after")
    def _check_words(self):
        words = self.word_boundaries or []
        previous_end = None
        for word, start, end in words:
            if end < start:
                raise ValueError(f"字詞 '{word}' 的結束時間早於開始時間")
            if previous_end is not None and start < previous_end - 1e-9:
                raise ValueError(f"字詞 '{word}' 與前一字詞重疊或未依時間排序")
            previous_end = end
        return self

    @classmethod
    def from_manifest(cls, row: Dict, base_dir: Optional[Path] = None) -> "UtteranceMeta":
        """由清單 JSON 物件建立，欄位名稱: id, path, speaker, language, gender, age, emotion, transcription, words"""
        path = row.get("path")
        if path is not None and base_dir is not None and not Path(path).is_absolute():
            path = str(base_dir / path)
        return cls(
            utterance_id=str(row["id"]),
            speaker_id=str(row["speaker"]),
            language=row["language"],
            gender=row["gender"],
            age_years=row.get("age"),
            emotion=row.get("emotion"),
            transcription=row.get("transcription"),
            word_boundaries=[tuple(w) for w in row["words"]] if row.get("words") else None,
            path=path,
            split=row.get("split", "train"),
        )

    def shifted(self, start_s: float) -> "UtteranceMeta":
        """字詞時間平移（裁切後使用）"""
        if not self.word_boundaries:
            return self
        words = [(w, s - start_s, e - start_s) for w, s, e in self.word_boundaries]
        return self.model_copy(update={"word_boundaries": words})


class AttributeVector(BaseModel):
    """一句語音的屬性向量"""
    mean_f0_hz: Optional[float] = None
    f0_span_hz: Optional[float] = None
    age_years: Optional[float] = None
    speaking_duration_s: float
    speaking_rate_spm: Optional[float] = None
    rms_energy_db: float
    distance_m: float
    appearance_time_s: float
    language: Language
    gender: Gender
    emotion: Optional[str] = None
    transcription: Optional[str] = None

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.mean_f0_hz is not None and not (50.0 <= self.mean_f0_hz <= 600.0):
            raise ValueError(f"mean_f0_hz 超出 [50, 600]: {self.mean_f0_hz}")
        if self.f0_span_hz is not None and not (0.0 <= self.f0_span_hz <= 1000.0):
            raise ValueError(f"f0_span_hz 超出 [0, 1000]: {self.f0_span_hz}")
        if self.speaking_duration_s < 0 or self.appearance_time_s < 0:
            raise ValueError("時長與出現時間不可為負")
        if self.distance_m <= 0:
            raise ValueError(f"distance_m 必須為正: {self.distance_m}")
        return self

    def value(self, attribute: str):
        """依屬性 id 取值"""
        if attribute in CONTINUOUS_FIELDS:
            return getattr(self, CONTINUOUS_FIELDS[attribute])
        if attribute in DISCRETE_FIELDS:
            value = getattr(self, DISCRETE_FIELDS[attribute])
            return value.value if isinstance(value, Enum) else value
        raise DataError(f"未知的屬性: {attribute}")


class UtteranceProfile(BaseModel):
    """只依乾淨訊號計算的屬性（不含房間與混合資訊）"""
    utterance_id: str
    duration_s: float
    segments: List[Segment]
    mean_f0_hz: Optional[float] = None
    f0_span_hz: Optional[float] = None
    speaking_duration_s: float
    speaking_rate_spm: Optional[float] = None
    rms_energy_db: float


def profile_utterance(w: WaveBuffer, meta: UtteranceMeta, settings: Optional[AttributeSettings] = None) -> UtteranceProfile:
    """計算乾淨語句的 F0、說話時長、語速與 RMS"""
    settings = settings or AttributeSettings()
    track = estimate_f0_track(
        w,
        settings.fmin_hz,
        settings.fmax_hz,
        threshold=settings.yin_threshold,
        frame_length=settings.frame_length,
        hop_length=settings.hop_length,
    )
    segments = detect_speech_segments(
        w,
        frame_s=settings.vad_frame_s,
        hop_s=settings.vad_hop_s,
        floor_db=settings.vad_floor_db,
        margin_db=settings.vad_margin_db,
        hangover_s=settings.vad_hangover_s,
        noise_percentile=settings.vad_noise_percentile,
        peak_margin_db=settings.vad_peak_margin_db,
    )
    if meta.word_boundaries:
        duration = speaking_duration(meta.word_boundaries, settings.max_pause_s)
    else:
        duration = speaking_duration(segments, settings.max_pause_s)
    duration = min(duration, w.duration_s)

    rate = None
    if meta.transcription and duration > 0:
        syllables = SyllableCounter(settings.vowel_sets).count(meta.transcription, meta.language)
        if syllables > 0:
            rate = 60.0 * syllables / duration

    return UtteranceProfile(
        utterance_id=meta.utterance_id,
        duration_s=w.duration_s,
        segments=segments,
        mean_f0_hz=mean_f0(track),
        f0_span_hz=f0_span(track),
        speaking_duration_s=duration,
        speaking_rate_spm=rate,
        rms_energy_db=rms_db(w, segments),
    )


def appearance_time(plan, source_index: int, segments: List[Segment]) -> float:
    """聲源第一段語音在混合訊號中的起始時間 = 放置偏移 + 第一個 VAD 區段起點"""
    if source_index not in (1, 2):
        raise DataError(f"source_index 必須為 1 或 2: {source_index}")
    offset = plan.offset1_s if source_index == 1 else plan.offset2_s
    first = segments[0][0] if segments else 0.0
    return float(offset + first)


def extract_all(
    w: WaveBuffer,
    meta: UtteranceMeta,
    placement,
    *,
    plan=None,
    source_index: int = 1,
    reverberant: Optional[WaveBuffer] = None,
    settings: Optional[AttributeSettings] = None,
    profile: Optional[UtteranceProfile] = None,
) -> AttributeVector:
    """
    擷取完整屬性向量

    Args:
        w: 裁切後的乾淨語句
        meta: 標註（字詞時間需已對齊裁切後的訊號）
        placement: SourcePlacement，提供距離
        plan: MixturePlan，提供放置偏移；None 表示偏移 0
        reverberant: 已放置並縮放的殘響訊號，RMS 在其上依語音區段計算
    """
    profile = profile or profile_utterance(w, meta, settings)
    offset = 0.0
    if plan is not None:
        offset = plan.offset1_s if source_index == 1 else plan.offset2_s
        appearance = appearance_time(plan, source_index, profile.segments)
    else:
        appearance = profile.segments[0][0] if profile.segments else 0.0

    rms = profile.rms_energy_db
    if reverberant is not None:
        shifted = [(s + offset, e + offset) for s, e in profile.segments]
        rms = rms_db(reverberant, shifted)

    return AttributeVector(
        mean_f0_hz=profile.mean_f0_hz,
        f0_span_hz=profile.f0_span_hz,
        age_years=meta.age_years,
        speaking_duration_s=profile.speaking_duration_s,
        speaking_rate_spm=profile.speaking_rate_spm,
        rms_energy_db=rms,
        distance_m=placement.horizontal_distance_m,
        appearance_time_s=appearance,
        language=meta.language,
        gender=meta.gender,
        emotion=meta.emotion,
        transcription=meta.transcription,
    )


def load_manifest(path: Union[str, Path], max_source_s: Optional[float] = None) -> List[UtteranceMeta]:
    """
    讀取 JSON Lines 清單

    同一說話者出現在兩個 split 會報錯；超過 max_source_s 的音檔會被略過並記錄警告。
    """
    path = Path(path)
    base_dir = path.parent
    utterances: List[UtteranceMeta] = []
    seen_ids = set()
    speaker_split: Dict[str, str] = {}
    for line_no, row in enumerate(iter_jsonl(path), 1):
        try:
            meta = UtteranceMeta.from_manifest(row, base_dir)
        except (KeyError, ValidationError) as e:
            raise DataError(f"{path}:{line_no} 清單欄位錯誤: {e}") from e
        if meta.utterance_id in seen_ids:
            raise DataError(f"{path}:{line_no} 重複的語句 id: {meta.utterance_id}")
        seen_ids.add(meta.utterance_id)
        previous = speaker_split.setdefault(meta.speaker_id, meta.split)
        if previous != meta.split:
            raise DataError(f"說話者 {meta.speaker_id} 同時出現在 {previous} 與 {meta.split}，違反說話者不重疊")
        if meta.path is None or not Path(meta.path).exists():
            raise DataError(f"{path}:{line_no} 找不到音檔: {meta.path}")
        if max_source_s is not None:
            info = sf.info(meta.path)
            if info.frames / info.samplerate > max_source_s:
                logger.warning("略過 %s：長度 %.2fs 超過上限 %.1fs", meta.utterance_id, info.frames / info.samplerate, max_source_s)
                continue
        utterances.append(meta)
    logger.info("清單載入 %d 句語音，%d 位說話者", len(utterances), len(speaker_split))
    return utterances
