"""
第二階段目標分類

投影頭把文字嵌入映射到音訊嵌入空間，兩個分離通道的餘弦相似度差經溫度縮放的 sigmoid 得到機率。
標籤以 SI-SDR 決定，投影頭以 BCE 訓練。
"""
import itertools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator
from scipy.special import expit
from tqdm import tqdm

from ..audio.mixer import MixtureRecord, oracle_separate
from ..audio.wave_core import WaveBuffer, si_sdr
from ..cues.prompt_gen import PromptRecord
from ..errors import DataError
from ..utils.seeding import derive_rng
from .embeddings import EmbeddingProvider, audio_key, embed_audio, embed_text, enrollment_key

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
COSINE_EPS = 1e-12
NORM_EPS = 1e-8
DECISION_THRESHOLD = 0.5


class ClassifierConfig(BaseModel):
    """分類器參數"""
    temperature: float = 0.2
    threshold: float = DECISION_THRESHOLD

    @field_validator("temperature")
    @classmethod
    def _check_temperature(cls, value):
        if not (0.0 < value <= 1.0):
            raise ValueError(f"temperature 需在 (0, 1]: {value}")
        return value


class TrainingSchedule(BaseModel):
    """訓練排程"""
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    patience: int = 3
    lr_decay: float = 0.5
    init: str = "identity"
    seed: int = 0

    @field_validator("epochs", "patience")
    @classmethod
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError(f"不可為負: {value}")
        return value

    @field_validator("batch_size")
    @classmethod
    def _positive(cls, value):
        if value <= 0:
            raise ValueError(f"batch_size 必須為正: {value}")
        return value


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"維度不一致: {a.shape} != {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("零向量的餘弦相似度無定義")
    return float(np.clip(np.dot(a, b) / max(na * nb, COSINE_EPS), -1.0, 1.0))


def logit(z_p, z_1, z_2) -> float:
    """cos(z_p, z_1) - cos(z_p, z_2)"""
    return cosine_sim(z_p, z_1) - cosine_sim(z_p, z_2)


def predict_prob(value: float, config: Optional[ClassifierConfig] = None) -> float:
    config = config or ClassifierConfig()
    return float(expit(value / config.temperature))


def predict_label(prob: float, threshold: float = DECISION_THRESHOLD) -> int:
    return 1 if prob > threshold else 0


def pit_assign(estimates: Sequence[WaveBuffer], references: Sequence[WaveBuffer]) -> Tuple[Tuple[int, ...], List[float]]:
    """
    選出平均 SI-SDR 最高的排列

    Returns:
        (perm, scores)，perm[i] 是分配給第 i 個參考的估計索引
    """
    if len(estimates) != len(references):
        raise DataError(f"估計數 {len(estimates)} 與參考數 {len(references)} 不一致")
    best_perm, best_scores, best_mean = None, None, -np.inf
    for perm in itertools.permutations(range(len(estimates))):
        scores = [si_sdr(estimates[j], references[i]) for i, j in enumerate(perm)]
        mean = float(np.mean(scores))
        if mean > best_mean:
            best_perm, best_scores, best_mean = perm, scores, mean
    return best_perm, best_scores


def make_label(est1: WaveBuffer, est2: WaveBuffer, reference: WaveBuffer) -> int:
    """通道 1 的 SI-SDR 嚴格較高時為 1，相等為 0"""
    return 1 if si_sdr(est1, reference) > si_sdr(est2, reference) else 0


def bce_loss(prob, label) -> float:
    p = np.clip(np.asarray(prob, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(label, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


@dataclass
class ProjectionHead:
    """
    線性投影 + ReLU + 逐向量標準化（含可學習 gamma / beta）

    W 的形狀為 (D_text, D_audio)，輸出維度等於音訊嵌入維度。
    """
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    MAGIC = b"PHED"
    VERSION = 1

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        self.gamma = np.array(self.gamma, dtype=np.float64)
        self.beta = np.array(self.beta, dtype=np.float64)
        d_audio = self.weight.shape[1]
        if self.bias.shape != (d_audio,) or self.gamma.shape != (d_audio,) or self.beta.shape != (d_audio,):
            raise DataError("投影頭參數維度不一致")
        if not all(np.all(np.isfinite(p)) for p in self.parameters()):
            raise DataError("投影頭參數含有非有限值")

    @property
    def d_text(self) -> int:
        return int(self.weight.shape[0])

    @property
    def d_audio(self) -> int:
        return int(self.weight.shape[1])

    @classmethod
    def identity(cls, d_text: int, d_audio: Optional[int] = None) -> "ProjectionHead":
        d_audio = d_audio or d_text
        return cls(np.eye(d_text, d_audio), np.zeros(d_audio), np.ones(d_audio), np.zeros(d_audio))

    @classmethod
    def random(cls, d_text: int, d_audio: int, rng: np.random.Generator) -> "ProjectionHead":
        weight = rng.standard_normal((d_text, d_audio)) / np.sqrt(d_text)
        return cls(weight, np.zeros(d_audio), np.ones(d_audio), np.zeros(d_audio))

    def parameters(self) -> List[np.ndarray]:
        return [self.weight, self.bias, self.gamma, self.beta]

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(*(p.copy() for p in self.parameters()))

    def forward(self, z: np.ndarray, return_cache: bool = False):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.d_text:
            raise DataError(f"文字嵌入維度 {z.shape[1]} 與投影頭 {self.d_text} 不符")
        a = z @ self.weight + self.bias
        h = np.maximum(a, 0.0)
        mean = h.mean(axis=1, keepdims=True)
        std = np.sqrt(h.var(axis=1, keepdims=True) + NORM_EPS)
        normalized = (h - mean) / std
        out = normalized * self.gamma + self.beta
        if return_cache:
            return out, (z, a, normalized, std)
        return out

    def __call__(self, z: np.ndarray) -> np.ndarray:
        out = self.forward(z)
        return out[0] if np.ndim(z) == 1 else out

    def save(self, path: Union[str, Path]) -> None:
        """標頭 (magic, version u16, d_text u32, d_audio u32) 後接 W、b、gamma、beta 的 float32"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = struct.pack("<4sHII", self.MAGIC, self.VERSION, self.d_text, self.d_audio)
        body = b"".join(p.astype("<f4").tobytes() for p in self.parameters())
        path.write_bytes(header + body)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProjectionHead":
        path = Path(path)
        if not path.exists():
            raise DataError(f"找不到投影頭檔案: {path}")
        blob = path.read_bytes()
        size = struct.calcsize("<4sHII")
        if len(blob) < size:
            raise DataError(f"投影頭檔案截斷: {path}")
        magic, version, d_text, d_audio = struct.unpack_from("<4sHII", blob)
        if magic != cls.MAGIC or version != cls.VERSION:
            raise DataError(f"不是投影頭檔案: {path}")
        expected = size + 4 * (d_text * d_audio + 3 * d_audio)
        if len(blob) != expected:
            raise DataError(f"投影頭檔案長度 {len(blob)} 不符，預期 {expected}: {path}")
        values = np.frombuffer(blob, dtype="<f4", offset=size).astype(np.float64)
        weight = values[:d_text * d_audio].reshape(d_text, d_audio)
        rest = values[d_text * d_audio:].reshape(3, d_audio)
        return cls(weight, rest[0], rest[1], rest[2])


class TrainingExample(NamedTuple):
    """(原始文字嵌入, 通道 1 音訊嵌入, 通道 2 音訊嵌入, 標籤)"""
    z_p_raw: np.ndarray
    z_1: np.ndarray
    z_2: np.ndarray
    label: int


def _stack(examples: Sequence[TrainingExample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    zp = np.stack([np.asarray(e.z_p_raw, dtype=np.float64) for e in examples])
    z1 = np.stack([np.asarray(e.z_1, dtype=np.float64) for e in examples])
    z2 = np.stack([np.asarray(e.z_2, dtype=np.float64) for e in examples])
    y = np.array([e.label for e in examples], dtype=np.float64)
    return zp, z1, z2, y


def _row_cosine(u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """逐列餘弦相似度及其對 u 的梯度"""
    nu = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), COSINE_EPS)
    nv = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), COSINE_EPS)
    cos = np.sum(u * v, axis=1, keepdims=True) / (nu * nv)
    grad = v / (nu * nv) - cos * u / nu ** 2
    return cos[:, 0], grad


def loss_and_gradients(head: ProjectionHead, batch: Sequence[TrainingExample],
                       config: Optional[ClassifierConfig] = None) -> Tuple[float, List[np.ndarray]]:
    """平均 BCE 與對 (W, b, gamma, beta) 的解析梯度"""
    config = config or ClassifierConfig()
    zp, z1, z2, y = _stack(batch)
    if z1.shape[1] != head.d_audio or z2.shape[1] != head.d_audio:
        raise DataError(f"音訊嵌入維度與投影頭 {head.d_audio} 不符")
    out, (z, a, normalized, std) = head.forward(zp, return_cache=True)
    cos1, g1 = _row_cosine(out, z1)
    cos2, g2 = _row_cosine(out, z2)
    p = expit((cos1 - cos2) / config.temperature)
    loss = bce_loss(p, y)

    batch_size = len(batch)
    d_logit = (p - y) / config.temperature / batch_size
    d_out = d_logit[:, None] * (g1 - g2)
    d_gamma = np.sum(d_out * normalized, axis=0)
    d_beta = np.sum(d_out, axis=0)
    d_norm = d_out * head.gamma
    d_h = (d_norm - d_norm.mean(axis=1, keepdims=True)
           - normalized * np.mean(d_norm * normalized, axis=1, keepdims=True)) / std
    d_a = d_h * (a > 0)
    d_weight = z.T @ d_a
    d_bias = np.sum(d_a, axis=0)
    return loss, [d_weight, d_bias, d_gamma, d_beta]


def batch_accuracy(head: ProjectionHead, examples: Sequence[TrainingExample],
                   config: Optional[ClassifierConfig] = None) -> float:
    config = config or ClassifierConfig()
    correct = 0
    for e in examples:
        prob = predict_prob(logit(head(e.z_p_raw), e.z_1, e.z_2), config)
        correct += int(predict_label(prob, config.threshold) == e.label)
    return correct / len(examples)


@dataclass
class TrainingResult:
    head: ProjectionHead
    trace: pd.DataFrame
    epoch_losses: List[float] = field(default_factory=list)


def train_projection(
    examples: Sequence[TrainingExample],
    head: ProjectionHead,
    config: Optional[ClassifierConfig] = None,
    schedule: Optional[TrainingSchedule] = None,
    progress: bool = False,
) -> TrainingResult:
    """
    小批次動量梯度下降訓練投影頭

    每個 epoch 的樣本順序由 schedule.seed 決定；epoch 平均損失連續 patience 次沒有改善時學習率減半。
    loss trace 每一步一列 (step, loss, lr)。
    """
    config = config or ClassifierConfig()
    schedule = schedule or TrainingSchedule()
    if not examples:
        raise DataError("訓練資料為空")
    dims = {(np.size(e.z_p_raw), np.size(e.z_1), np.size(e.z_2)) for e in examples}
    if len(dims) != 1:
        raise DataError(f"訓練資料維度不一致: {sorted(dims)}")
    d_text, d_audio, _ = dims.pop()
    if d_text != head.d_text or d_audio != head.d_audio:
        raise DataError(f"訓練資料維度 ({d_text}, {d_audio}) 與投影頭 ({head.d_text}, {head.d_audio}) 不符")

    head = head.copy()
    velocity = [np.zeros_like(p) for p in head.parameters()]
    lr = schedule.learning_rate
    best, stale, step = np.inf, 0, 0
    rows, epoch_losses = [], []
    epochs = range(schedule.epochs)
    for epoch in (tqdm(epochs, desc="訓練投影頭") if progress else epochs):
        order = derive_rng(schedule.seed, "epoch", epoch).permutation(len(examples))
        losses = []
        for start in range(0, len(order), schedule.batch_size):
            batch = [examples[i] for i in order[start:start + schedule.batch_size]]
            loss, grads = loss_and_gradients(head, batch, config)
            for param, grad, v in zip(head.parameters(), grads, velocity):
                v *= schedule.momentum
                v -= lr * grad
                param += v
            losses.append(loss)
            rows.append({"step": step, "loss": loss, "lr": lr})
            step += 1
        epoch_loss = float(np.mean(losses))
        epoch_losses.append(epoch_loss)
        if epoch_loss < best - 1e-12:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= schedule.patience:
                lr *= schedule.lr_decay
                stale = 0
                logger.info("epoch %d: 損失未改善，學習率降為 %.5f", epoch, lr)
        logger.debug("epoch %d: loss=%.5f lr=%.5f", epoch, epoch_loss, lr)
    trace = pd.DataFrame(rows, columns=["step", "loss", "lr"])
    return TrainingResult(head=head, trace=trace, epoch_losses=epoch_losses)


def initial_head(d_text: int, d_audio: int, schedule: Optional[TrainingSchedule] = None) -> ProjectionHead:
    schedule = schedule or TrainingSchedule()
    if schedule.init == "identity":
        return ProjectionHead.identity(d_text, d_audio)
    if schedule.init == "random":
        return ProjectionHead.random(d_text, d_audio, derive_rng(schedule.seed, "head-init"))
    raise DataError(f"未知的初始化方式: {schedule.init}")


class ClassificationResult(BaseModel):
    mixture_id: str
    pred_index: int
    prob: float
    logit: float
    similarities: Tuple[float, float]
    permutation: Tuple[int, int]
    label: int
    true_index: int

    @property
    def correct(self) -> bool:
        return self.pred_index == self.true_index


def _channel_attributes(record: MixtureRecord, perm: Tuple[int, ...]):
    """perm[i] 是分配給聲源 i+1 的估計；回傳每個估計通道對應聲源的屬性"""
    by_channel = {}
    for source, channel in enumerate(perm, 1):
        by_channel[channel + 1] = record.source_attributes(source)
    return by_channel[1], by_channel[2]


def query_embedding(record: MixtureRecord, prompt: Optional[PromptRecord], provider: EmbeddingProvider,
                    enrollment: bool = False) -> np.ndarray:
    if enrollment:
        return embed_audio(provider, enrollment_key(record.mixture_id), record.attributes_tar).values
    if prompt is None:
        raise DataError("非註冊模式需要提示語")
    return embed_text(provider, prompt).values


def classify_mixture(
    record: MixtureRecord,
    prompt: Optional[PromptRecord],
    provider: EmbeddingProvider,
    head: Optional[ProjectionHead] = None,
    config: Optional[ClassifierConfig] = None,
    estimates: Optional[Tuple[WaveBuffer, WaveBuffer]] = None,
    leak_db: Optional[float] = None,
    enrollment: bool = False,
) -> ClassificationResult:
    """
    完整的第二階段推論

    estimates 未提供時以 oracle 分離取得；PIT 把估計通道對應到聲源後，每個通道以對應聲源的屬性嵌入。
    機率大於 0.5 時選通道 1，否則通道 2。
    """
    config = config or ClassifierConfig()
    if estimates is None:
        estimates = oracle_separate(record, leak_db)
    perm, _ = pit_assign(estimates, (record.rev1, record.rev2))
    attrs1, attrs2 = _channel_attributes(record, perm)
    z1 = embed_audio(provider, audio_key(record.mixture_id, 1), attrs1).values
    z2 = embed_audio(provider, audio_key(record.mixture_id, 2), attrs2).values

    raw = query_embedding(record, prompt, provider, enrollment)
    if head is None:
        head = ProjectionHead.identity(raw.size, z1.size)
    z_p = head(raw)
    sims = (cosine_sim(z_p, z1), cosine_sim(z_p, z2))
    value = sims[0] - sims[1]
    prob = predict_prob(value, config)
    label = make_label(estimates[0], estimates[1], record.rev_target)
    return ClassificationResult(
        mixture_id=record.mixture_id,
        pred_index=1 if predict_label(prob, config.threshold) == 1 else 2,
        prob=prob,
        logit=value,
        similarities=sims,
        permutation=tuple(int(p) for p in perm),
        label=label,
        true_index=1 if label == 1 else 2,
    )


def training_examples(
    records: Sequence[MixtureRecord],
    prompts: Sequence[PromptRecord],
    provider: EmbeddingProvider,
    seed: int = 0,
    leak_db: Optional[float] = None,
) -> List[TrainingExample]:
    """
    由混合與提示語建立訓練樣本

    每個樣本的通道順序隨機，標籤跟著排列翻轉。
    """
    by_id: Dict[str, MixtureRecord] = {r.mixture_id: r for r in records}
    examples = []
    for prompt in prompts:
        record = by_id.get(prompt.mixture_id)
        if record is None:
            raise DataError(f"提示語指向不存在的混合: {prompt.mixture_id}")
        est = oracle_separate(record, leak_db)
        perm, _ = pit_assign(est, (record.rev1, record.rev2))
        attrs1, attrs2 = _channel_attributes(record, perm)
        z1 = embed_audio(provider, audio_key(record.mixture_id, 1), attrs1).values
        z2 = embed_audio(provider, audio_key(record.mixture_id, 2), attrs2).values
        label = make_label(est[0], est[1], record.rev_target)
        rng = derive_rng(seed, "channel-order", record.mixture_id, prompt.text)
        if rng.random() < 0.5:
            z1, z2, label = z2, z1, 1 - label
        examples.append(TrainingExample(embed_text(provider, prompt).values, z1, z2, label))
    return examples
