"""
音訊 / 文字嵌入提供者

神經編碼器在行程外執行，向量以 EMBD 檔案匯入；另有以屬性類別構造向量的 oracle 提供者，用於閉環測試。
"""
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Mapping, Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
from pydantic import BaseModel, field_validator
from scipy.special import expit

from ..audio.attributes import CONTINUOUS_ATTRIBUTES, AttributeVector, Gender, Language, LANGUAGE_NAMES
from ..cues.cue_engine import RELATIVE_NAMES, SAME, SIMILAR, DEFAULT_INDEPENDENT_CATEGORIES, CueKind
from ..cues.prompt_gen import PromptRecord
from ..errors import ConfigError, DataError
from ..utils.seeding import derive_rng

logger = logging.getLogger(__name__)

MAGIC = b"EMBD"
VERSION = 1
HEADER = struct.Struct("<4sHIQ")
KEY_LENGTH = struct.Struct("<H")
ORACLE_DIMENSION = 64


class ProviderSettings(BaseModel):
    """嵌入提供者選擇"""
    kind: Literal["none", "oracle", "file"] = "none"
    path: Optional[str] = None
    dimension: int = ORACLE_DIMENSION
    noise_sigma: float = 0.0

    @field_validator("noise_sigma")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError(f"noise_sigma 不可為負: {value}")
        return value


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """固定維度的嵌入向量"""
    key: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise DataError(f"{self.key}: 嵌入必須為非空的一維向量")
        if not np.all(np.isfinite(values)):
            raise DataError(f"{self.key}: 嵌入含有非有限值")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dimension(self) -> int:
        return int(self.values.size)


class EmbeddingStore:
    """key -> 32 位元浮點向量，維度一致且 key 不重複"""

    def __init__(self, dimension: int, vectors: Optional[Mapping[str, Sequence[float]]] = None):
        if dimension <= 0:
            raise DataError(f"維度必須為正: {dimension}")
        self.dimension = int(dimension)
        self._vectors: Dict[str, np.ndarray] = {}
        for key, values in (vectors or {}).items():
            self.add(key, values)

    def add(self, key: str, values: Sequence[float]) -> None:
        if key in self._vectors:
            raise DataError(f"重複的嵌入 key: {key}")
        array = np.asarray(values, dtype=np.float32)
        if array.shape != (self.dimension,):
            raise DataError(f"嵌入 {key} 的維度 {array.size} 與檔案維度 {self.dimension} 不符")
        if not np.all(np.isfinite(array)):
            raise DataError(f"嵌入 {key} 含有非有限值")
        array.setflags(write=False)
        self._vectors[key] = array

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._vectors))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (self.dimension == other.dimension and self._vectors.keys() == other._vectors.keys()
                and all(np.array_equal(v, other._vectors[k]) for k, v in self._vectors.items()))

    def get(self, key: str) -> EmbeddingVector:
        try:
            return EmbeddingVector(key, self._vectors[key])
        except KeyError:
            raise DataError(f"嵌入檔中找不到 key: {key}") from None


def save_store(store: EmbeddingStore, path: Union[str, Path]) -> None:
    """寫出 EMBD 檔：標頭後接依 key 排序的紀錄"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, store.dimension, len(store)))
        for key in store:
            encoded = key.encode("utf-8")
            f.write(KEY_LENGTH.pack(len(encoded)))
            f.write(encoded)
            f.write(store.get(key).values.astype("<f4").tobytes())


def _load_jsonl(path: Path) -> EmbeddingStore:
    store: Optional[EmbeddingStore] = None
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key, values = str(row["key"]), row["values"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{line_no} 嵌入紀錄格式錯誤: {e}") from e
            if store is None:
                store = EmbeddingStore(len(values))
            store.add(key, values)
    if store is None:
        raise DataError(f"嵌入檔為空: {path}")
    return store


def load_store(path: Union[str, Path]) -> EmbeddingStore:
    """讀取 EMBD 檔；副檔名 .jsonl 時以 {"key", "values"} 行格式匯入"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"找不到嵌入檔: {path}")
    if path.suffix == ".jsonl":
        return _load_jsonl(path)
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise DataError(f"嵌入檔截斷（標頭不完整）: {path}")
    magic, version, dimension, count = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"不是 EMBD 檔: {path}")
    if version != VERSION:
        raise DataError(f"不支援的 EMBD 版本 {version}: {path}")
    store = EmbeddingStore(dimension)
    offset = HEADER.size
    vector_bytes = 4 * dimension
    for index in range(count):
        if offset + KEY_LENGTH.size > len(blob):
            raise DataError(f"嵌入檔截斷（第 {index} 筆）: {path}")
        (key_length,) = KEY_LENGTH.unpack_from(blob, offset)
        offset += KEY_LENGTH.size
        if offset + key_length + vector_bytes > len(blob):
            raise DataError(f"嵌入檔截斷（第 {index} 筆）: {path}")
        key = blob[offset:offset + key_length].decode("utf-8")
        offset += key_length
        store.add(key, np.frombuffer(blob, dtype="<f4", count=dimension, offset=offset))
        offset += vector_bytes
    if offset != len(blob):
        raise DataError(f"嵌入檔尾端有多餘資料: {path}")
    return store


@runtime_checkable
class EmbeddingProvider(Protocol):
    dimension: int

    def embed_audio(self, key: str, attributes: Optional[AttributeVector] = None) -> EmbeddingVector:
        ...

    def embed_text(self, prompt: Union[str, PromptRecord]) -> EmbeddingVector:
        ...


def audio_key(mixture_id: str, channel: int) -> str:
    return f"{mixture_id}/est{channel}"


def enrollment_key(mixture_id: str) -> str:
    return f"{mixture_id}/enroll"


class FileEmbeddingProvider:
    """
    由外部編碼器匯出的嵌入檔提供向量

    目錄中需有 audio.embd（key 為 <mixture_id>/est1、<mixture_id>/est2、<mixture_id>/enroll）
    與 text.embd（key 為提示語原文）。
    """

    def __init__(self, directory: Union[str, Path]):
        directory = Path(directory)
        self.audio = load_store(directory / "audio.embd")
        self.text = load_store(directory / "text.embd")
        self.dimension = self.audio.dimension
        logger.info("載入嵌入檔: %d 筆音訊、%d 筆文字，維度 %d/%d",
                    len(self.audio), len(self.text), self.audio.dimension, self.text.dimension)

    def embed_audio(self, key: str, attributes: Optional[AttributeVector] = None) -> EmbeddingVector:
        return self.audio.get(key)

    def embed_text(self, prompt: Union[str, PromptRecord]) -> EmbeddingVector:
        return self.text.get(prompt.text if isinstance(prompt, PromptRecord) else prompt)


# oracle 向量的區塊配置
LANGUAGE_SLOTS: List[str] = [lang.value for lang in Language] + ["unknown"]
GENDER_SLOTS: List[str] = [g.value for g in Gender] + ["unknown"]
EMOTION_SLOTS: List[str] = ["neutral", "happy", "sad", "angry", "surprised", "fearful", "disgusted", "other", "unknown"]
TRANSCRIPTION_DIM = 16

# 連續屬性: (是否取對數, 中心, 尺度)
ORACLE_SCALES: Dict[str, tuple] = {
    "mean_f0": (True, np.log(150.0), 0.4),
    "f0_span": (True, np.log(100.0), 0.7),
    "speaking_rate": (True, np.log(250.0), 0.4),
    "speaking_duration": (True, np.log(3.0), 0.5),
    "rms_energy": (False, -25.0, 6.0),
    "distance": (False, 0.9, 0.4),
    "age": (False, 40.0, 12.0),
    "appearance_time": (False, 1.5, 1.0),
}

_E1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
_E2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
_ONES3 = np.ones(3) / np.sqrt(3.0)
TEXT_OFFSET = 1.5
# 大於零和單位向量的最小可能分量，使文字區塊非負
TRANSCRIPTION_LIFT = 1.0


def _arc(angle: float) -> np.ndarray:
    """和為 0、長度為 1 的三維向量，隨角度旋轉"""
    return np.cos(angle) * _E1 + np.sin(angle) * _E2


def _one_hot(slots: List[str], value: Optional[str]) -> np.ndarray:
    block = np.zeros(len(slots))
    block[slots.index(value if value in slots else "unknown")] = 1.0
    return block


def _emotion_direction(value: Optional[str]) -> np.ndarray:
    """
    情緒區塊中和為 0 的單位方向

    清單內的情緒對應 one-hot 去掉平均後的方向，清單外的情緒由名稱雜湊出各自的方向，
    不同名稱不會共用同一個方向。
    """
    size = len(EMOTION_SLOTS)
    if value is None or value in EMOTION_SLOTS:
        v = _one_hot(EMOTION_SLOTS, value)
    else:
        rng = np.random.default_rng(zlib.crc32(f"emotion:{value}".encode("utf-8")))
        v = rng.standard_normal(size)
    v = v - v.mean()
    return v / np.linalg.norm(v)


def _emotion_block(value: Optional[str], text: bool = False) -> np.ndarray:
    """音訊端長度 1、總和 1（清單內即 one-hot）；文字端加上最小的常數使其非負"""
    size = len(EMOTION_SLOTS)
    direction = np.sqrt(1.0 - 1.0 / size) * _emotion_direction(value)
    if text:
        return direction + max(0.0, -float(direction.min()))
    return direction + 1.0 / size


def _transcription_vector(text: Optional[str]) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32((text or "").encode("utf-8")))
    v = rng.standard_normal(TRANSCRIPTION_DIM)
    v -= v.mean()
    return v / np.linalg.norm(v)


class OracleLayout:
    """區塊位置"""

    def __init__(self, dimension: int = ORACLE_DIMENSION):
        self.blocks: Dict[str, slice] = {}
        offset = 0
        for attribute in CONTINUOUS_ATTRIBUTES:
            self.blocks[attribute] = slice(offset, offset + 3)
            offset += 3
        for name, size in (("language", len(LANGUAGE_SLOTS)), ("gender", len(GENDER_SLOTS)),
                           ("emotion", len(EMOTION_SLOTS)), ("transcription", TRANSCRIPTION_DIM)):
            self.blocks[name] = slice(offset, offset + size)
            offset += size
        if dimension < offset:
            raise ConfigError("provider.dimension", f"oracle 提供者至少需要 {offset} 維")
        self.used = offset
        self.dimension = dimension


def continuous_angle(attribute: str, value: Optional[float]) -> float:
    """屬性值經 sigmoid 映射到 [0, pi/2]，缺值為 pi/4"""
    if value is None:
        return np.pi / 4.0
    use_log, centre, scale = ORACLE_SCALES[attribute]
    x = np.log(max(value, 1e-6)) if use_log else value
    return float(np.pi / 2.0 * expit((x - centre) / scale))


def _language_code(category: str) -> Optional[str]:
    for language, name in LANGUAGE_NAMES.items():
        if category in (name, language.value):
            return language.value
    return None


class OracleEmbeddingProvider:
    """
    以屬性類別構造嵌入的合成提供者

    音訊向量：每個連續屬性一個三維旋轉區塊，語言與性別為 one-hot，情緒為每個名稱各自的方向，
    轉錄文字為雜湊出的單位向量。
    文字向量只在提示語提到的屬性區塊有值，方向指向提示的類別。無雜訊時，
    經過恆等初始化的投影頭，目標通道的餘弦相似度嚴格較高。
    """

    def __init__(self, noise_sigma: float = 0.0, seed: int = 0, dimension: int = ORACLE_DIMENSION):
        if noise_sigma < 0:
            raise DataError(f"noise_sigma 不可為負: {noise_sigma}")
        self.layout = OracleLayout(dimension)
        self.dimension = dimension
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)

    def _noise(self, side: str, key: str) -> np.ndarray:
        if self.noise_sigma == 0.0:
            return np.zeros(self.dimension)
        rng = derive_rng(self.seed, side, key)
        return rng.standard_normal(self.dimension) * self.noise_sigma / np.sqrt(self.dimension)

    def encode_attributes(self, attributes: AttributeVector) -> np.ndarray:
        blocks = self.layout.blocks
        values = np.zeros(self.dimension)
        for attribute in CONTINUOUS_ATTRIBUTES:
            values[blocks[attribute]] = _arc(continuous_angle(attribute, attributes.value(attribute)))
        values[blocks["language"]] = _one_hot(LANGUAGE_SLOTS, attributes.value("language"))
        values[blocks["gender"]] = _one_hot(GENDER_SLOTS, attributes.value("gender"))
        values[blocks["emotion"]] = _emotion_block(attributes.value("emotion"))
        values[blocks["transcription"]] = _transcription_vector(attributes.value("transcription"))
        return values

    def encode_cues(self, prompt: PromptRecord) -> np.ndarray:
        blocks = self.layout.blocks
        values = np.zeros(self.dimension)
        for attribute, category in prompt.labels:
            block = blocks.get(attribute)
            if block is None:
                raise DataError(f"oracle 提供者不認得線索: {attribute}")
            if category == SAME:
                continue
            if attribute in RELATIVE_NAMES:
                values[block] = _arc(self._cue_angle(attribute, category, prompt.kind)) + TEXT_OFFSET * _ONES3
            elif attribute == "language":
                values[block] = _one_hot(LANGUAGE_SLOTS, _language_code(category))
            elif attribute == "gender":
                values[block] = _one_hot(GENDER_SLOTS, category)
            elif attribute == "emotion":
                values[block] = _emotion_block(category, text=True)
            else:
                values[block] = _transcription_vector(category) + TRANSCRIPTION_LIFT * np.ones(TRANSCRIPTION_DIM)
        return values

    @staticmethod
    def _cue_angle(attribute: str, category: str, kind: CueKind) -> float:
        upper, lower = RELATIVE_NAMES[attribute]
        if category == upper:
            return np.pi / 2.0
        if category == lower:
            return 0.0
        if category == SIMILAR:
            return np.pi / 4.0
        names = DEFAULT_INDEPENDENT_CATEGORIES.get(attribute, [])
        if category in names:
            return np.pi / 2.0 * names.index(category) / (len(names) - 1)
        raise DataError(f"oracle 提供者不認得類別: ({attribute}, {category})")

    def embed_audio(self, key: str, attributes: Optional[AttributeVector] = None) -> EmbeddingVector:
        """
        由乾淨聲源的屬性編碼，不看估計波形

        因此 separation.leak_db 只影響標籤與 SI-SDR，不會改變音訊嵌入；
        通道與聲源的對應由呼叫端以 PIT 決定。
        """
        if attributes is None:
            raise DataError(f"oracle 提供者需要屬性向量才能編碼音訊 {key}")
        return EmbeddingVector(key, self.encode_attributes(attributes) + self._noise("audio", key))

    def embed_text(self, prompt: Union[str, PromptRecord]) -> EmbeddingVector:
        if not isinstance(prompt, PromptRecord):
            raise DataError("oracle 提供者需要 PromptRecord（含線索中繼資料），不接受純文字")
        key = f"{prompt.mixture_id}|{prompt.text}"
        return EmbeddingVector(key, self.encode_cues(prompt) + self._noise("text", key))


def embed_audio(provider: EmbeddingProvider, key: str, attributes: Optional[AttributeVector] = None) -> EmbeddingVector:
    vector = provider.embed_audio(key, attributes)
    if vector.dimension != provider.dimension:
        raise DataError(f"{key}: 音訊嵌入維度 {vector.dimension} 與提供者維度 {provider.dimension} 不符")
    return vector


def embed_text(provider: EmbeddingProvider, prompt: Union[str, PromptRecord]) -> EmbeddingVector:
    return provider.embed_text(prompt)


def oracle_encode(source: Union[AttributeVector, PromptRecord], noise_sigma: float = 0.0,
                  seed: int = 0, key: str = "") -> EmbeddingVector:
    """屬性向量編碼為音訊嵌入，PromptRecord 編碼為文字嵌入"""
    provider = OracleEmbeddingProvider(noise_sigma, seed)
    if isinstance(source, PromptRecord):
        return provider.embed_text(source)
    return provider.embed_audio(key or "audio", source)


def make_provider(settings: ProviderSettings, seed: int = 0) -> EmbeddingProvider:
    """依設定建立提供者；未設定時回報 provider.kind"""
    if settings.kind == "none":
        raise ConfigError("provider.kind", "未設定嵌入提供者，請用 --provider oracle 或 --provider file 並指定 provider.path")
    if settings.kind == "oracle":
        return OracleEmbeddingProvider(settings.noise_sigma, seed, settings.dimension)
    if not settings.path:
        raise ConfigError("provider.path", "file 提供者需要嵌入檔目錄")
    if not Path(settings.path).is_dir():
        raise ConfigError("provider.path", f"找不到嵌入檔目錄 {settings.path}")
    return FileEmbeddingProvider(settings.path)
