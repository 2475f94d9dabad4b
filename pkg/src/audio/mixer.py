"""
雙說話者殘響混合

裁切靜音、安排時間重疊、取樣房間與 SIR、渲染混合訊號，並提供取代第一階段分離器的 oracle 分離。
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from ..errors import DataError
from ..utils.seeding import derive_rng, derive_seed
from .attributes import AttributeSettings, AttributeVector, UtteranceMeta, extract_all, profile_utterance
from .room_sim import (
    RIR,
    RIRCache,
    RoomSettings,
    RoomSpec,
    SourcePlacement,
    apply_rir,
    image_source_rir,
    rt60_to_absorption,
    sample_placement,
    sample_room,
)
from .vad import detect_speech_segments
from .wave_core import WaveBuffer, energy, pad_to, read_wav, sir_gain

logger = logging.getLogger(__name__)

Range = Tuple[float, float]


class MixerSettings(BaseModel):
    """混合規則參數"""
    sir_range: Range = (-6.0, 6.0)
    fixed_span_s: float = 6.0
    short_source_s: float = 3.0
    peak: float = 0.9

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.sir_range
        if not lo < hi:
            raise ValueError(f"sir_range 下限需小於上限: {self.sir_range}")
        if not (0.0 < self.peak <= 1.0):
            raise ValueError(f"peak 需在 (0, 1]: {self.peak}")
        if self.fixed_span_s <= 0 or self.short_source_s <= 0:
            raise ValueError("fixed_span_s 與 short_source_s 必須為正")
        return self


class MixturePlan(BaseModel):
    """一筆混合的全部隨機決定"""
    mixture_id: str
    split: str = "train"
    s1_id: str
    s2_id: str
    len1_s: float
    len2_s: float
    offset1_s: float
    offset2_s: float
    overlap_s: float
    overlap_capped: bool = False
    target_index: int
    sir_db: float
    room: RoomSpec
    placement1: SourcePlacement
    placement2: SourcePlacement
    seed: int

    @model_validator(mode="after")
    def _check(self):
        if self.target_index not in (1, 2):
            raise ValueError(f"target_index 必須為 1 或 2: {self.target_index}")
        if self.offset1_s < 0 or self.offset2_s < 0:
            raise ValueError("偏移不可為負")
        return self

    @property
    def interference_index(self) -> int:
        return 2 if self.target_index == 1 else 1

    def placed_overlap_s(self) -> float:
        """依放置區間計算的實際重疊"""
        start = max(self.offset1_s, self.offset2_s)
        end = min(self.offset1_s + self.len1_s, self.offset2_s + self.len2_s)
        return max(0.0, end - start)


@dataclass(frozen=True, eq=False)
class MixtureRecord:
    """
    渲染後的混合

    rev1 / rev2 是已放置、已縮放並經過正規化增益的殘響成分，mixture == rev1 + rev2。
    """
    plan: MixturePlan
    mixture: WaveBuffer
    rev1: WaveBuffer
    rev2: WaveBuffer
    gain: float
    absorption: Tuple[float, float] = (0.0, 0.0)
    attributes1: Optional[AttributeVector] = None
    attributes2: Optional[AttributeVector] = None
    cue_labels: List[Any] = field(default_factory=list)
    prompts: List[Any] = field(default_factory=list)

    @property
    def mixture_id(self) -> str:
        return self.plan.mixture_id

    @property
    def rev_target(self) -> WaveBuffer:
        return self.rev1 if self.plan.target_index == 1 else self.rev2

    @property
    def rev_interf(self) -> WaveBuffer:
        return self.rev2 if self.plan.target_index == 1 else self.rev1

    @property
    def attributes_tar(self) -> Optional[AttributeVector]:
        return self.attributes1 if self.plan.target_index == 1 else self.attributes2

    @property
    def attributes_inf(self) -> Optional[AttributeVector]:
        return self.attributes2 if self.plan.target_index == 1 else self.attributes1

    def source_attributes(self, index: int) -> Optional[AttributeVector]:
        return self.attributes1 if index == 1 else self.attributes2

    def with_annotations(self, **changes) -> "MixtureRecord":
        return replace(self, **changes)


def trim_bounds(w: WaveBuffer, meta: Optional[UtteranceMeta] = None,
                settings: Optional[AttributeSettings] = None) -> Tuple[float, float]:
    """有字詞時間時取第一個字到最後一個字，否則取 VAD 包絡"""
    if meta is not None and meta.word_boundaries:
        start = max(0.0, meta.word_boundaries[0][1])
        end = min(w.duration_s, meta.word_boundaries[-1][2])
        if end <= start:
            raise DataError(f"{meta.utterance_id}: 字詞時間無有效語音範圍")
        return start, end
    settings = settings or AttributeSettings()
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
    if not segments:
        name = meta.utterance_id if meta is not None else "訊號"
        raise DataError(f"{name}: 偵測不到語音，無法裁切")
    return segments[0][0], segments[-1][1]


def trim_silence(w: WaveBuffer, meta: Optional[UtteranceMeta] = None,
                 settings: Optional[AttributeSettings] = None) -> WaveBuffer:
    """去除開頭與結尾的靜音"""
    start, end = trim_bounds(w, meta, settings)
    return w.crop(start, end)


def plan_overlap(
    len1_s: float,
    len2_s: float,
    rng: np.random.Generator,
    settings: Optional[MixerSettings] = None,
    fs: int = 16000,
) -> Tuple[float, float, float, bool]:
    """
    安排兩個聲源的起始偏移

    任一聲源短於 3 秒時，重疊等於較短者長度，較短者的偏移在 [0, 長-短] 內均勻取樣；
    否則 S1 偏移 0、S2 偏移 6 - len2（不小於 0），重疊 len1 + len2 - 6，
    超過較短者長度時截斷並標記。偏移一律對齊到整數樣本。

    Returns:
        (offset1_s, offset2_s, overlap_s, overlap_capped)
    """
    settings = settings or MixerSettings()
    if len1_s <= 0 or len2_s <= 0:
        raise DataError(f"聲源長度必須為正: {len1_s}, {len2_s}")
    n1 = int(round(len1_s * fs))
    n2 = int(round(len2_s * fs))
    shortest = min(len1_s, len2_s)

    if shortest < settings.short_source_s:
        slack = abs(n1 - n2)
        offset = int(rng.integers(0, slack + 1))
        if n1 <= n2:
            return offset / fs, 0.0, min(n1, n2) / fs, False
        return 0.0, offset / fs, min(n1, n2) / fs, False

    span = int(round(settings.fixed_span_s * fs))
    offset2 = max(0, span - n2)
    formula = n1 + n2 - span
    overlap = min(formula, min(n1, n2))
    capped = formula > min(n1, n2)
    if capped:
        logger.debug("重疊公式 %.3fs 超過較短聲源，截斷為 %.3fs", formula / fs, overlap / fs)
    return 0.0, offset2 / fs, max(overlap, 0) / fs, capped


def sample_plan(
    mixture_id: str,
    split: str,
    meta1: UtteranceMeta,
    meta2: UtteranceMeta,
    len1_s: float,
    len2_s: float,
    seed: int,
    rng: np.random.Generator,
    room_settings: Optional[RoomSettings] = None,
    mixer_settings: Optional[MixerSettings] = None,
) -> MixturePlan:
    """取樣重疊、房間、兩個聲源位置、SIR 與目標"""
    mixer_settings = mixer_settings or MixerSettings()
    offset1, offset2, overlap, capped = plan_overlap(len1_s, len2_s, rng, mixer_settings)
    room = sample_room(rng, room_settings)
    placement1 = sample_placement(rng, room, room_settings)
    placement2 = sample_placement(rng, room, room_settings)
    sir_db = float(rng.uniform(*mixer_settings.sir_range))
    target_index = int(rng.integers(1, 3))
    return MixturePlan(
        mixture_id=mixture_id,
        split=split,
        s1_id=meta1.utterance_id,
        s2_id=meta2.utterance_id,
        len1_s=len1_s,
        len2_s=len2_s,
        offset1_s=offset1,
        offset2_s=offset2,
        overlap_s=overlap,
        overlap_capped=capped,
        target_index=target_index,
        sir_db=sir_db,
        room=room,
        placement1=placement1,
        placement2=placement2,
        seed=seed,
    )


def _rir_for(room: RoomSpec, placement: SourcePlacement, settings: RoomSettings,
             cache: Optional[RIRCache]) -> RIR:
    if cache is not None:
        return cache.get_or_compute(room, placement, settings.max_order, settings.absorption_model, settings.highpass)
    return image_source_rir(room, placement, settings.max_order, settings.absorption_model, settings.highpass)


def render_mixture(
    plan: MixturePlan,
    w1: WaveBuffer,
    w2: WaveBuffer,
    room_settings: Optional[RoomSettings] = None,
    mixer_settings: Optional[MixerSettings] = None,
    rirs: Optional[Tuple[RIR, RIR]] = None,
    cache: Optional[RIRCache] = None,
) -> MixtureRecord:
    """
    渲染混合訊號

    兩個聲源各自卷積 RIR（保留完整尾端）並補零放置；殘響 S2 固定，S1 依整段訊號能量縮放到 plan.sir_db。
    最後對混合與兩個成分做聯合峰值正規化，增益記錄在 record.gain。
    """
    room_settings = room_settings or RoomSettings()
    mixer_settings = mixer_settings or MixerSettings()
    if rirs is None:
        rirs = (_rir_for(plan.room, plan.placement1, room_settings, cache),
                _rir_for(plan.room, plan.placement2, room_settings, cache))
    rev1 = apply_rir(w1, rirs[0])
    rev2 = apply_rir(w2, rirs[1])

    fs = w1.sample_rate_hz
    start1 = int(round(plan.offset1_s * fs))
    start2 = int(round(plan.offset2_s * fs))
    total = max(start1 + len(rev1), start2 + len(rev2))
    placed1 = pad_to(rev1, plan.offset1_s, total)
    placed2 = pad_to(rev2, plan.offset2_s, total)

    if energy(placed2) == 0.0:
        raise DataError(f"{plan.mixture_id}: 干擾聲源全為零")
    s1 = placed1.samples * sir_gain(placed1, placed2, plan.sir_db)
    s2 = placed2.samples
    joint_peak = max(np.max(np.abs(s1 + s2)), np.max(np.abs(s1)), np.max(np.abs(s2)))
    gain = mixer_settings.peak / joint_peak if joint_peak > 0 else 1.0
    c1 = s1 * gain
    c2 = s2 * gain
    return MixtureRecord(
        plan=plan,
        mixture=WaveBuffer(c1 + c2, fs),
        rev1=WaveBuffer(c1, fs),
        rev2=WaveBuffer(c2, fs),
        gain=float(gain),
        absorption=(rirs[0].absorption, rirs[1].absorption),
    )


def leak_gain(own: WaveBuffer, other: WaveBuffer, leak_db: float) -> float:
    """使 own / (g * other) 的能量比等於 leak_db 的增益 g"""
    other_energy = energy(other)
    if other_energy == 0.0:
        return 0.0
    return float(np.sqrt(energy(own) / other_energy * 10.0 ** (-leak_db / 10.0)))


def oracle_separate(record: MixtureRecord, leak_db: Optional[float] = None) -> Tuple[WaveBuffer, WaveBuffer]:
    """
    以已知殘響成分取代分離器輸出，依聲源順序回傳 (s1_hat, s2_hat)

    leak_db 為 None 時完美分離；否則每個通道混入另一成分，訊號對洩漏比等於 leak_db。
    """
    if leak_db is None:
        return record.rev1, record.rev2
    if leak_db <= 0:
        raise DataError(f"leak_db 必須為正: {leak_db}")
    g1 = leak_gain(record.rev1, record.rev2, leak_db)
    g2 = leak_gain(record.rev2, record.rev1, leak_db)
    est1 = record.rev1.with_samples(record.rev1.samples + g1 * record.rev2.samples)
    est2 = record.rev2.with_samples(record.rev2.samples + g2 * record.rev1.samples)
    return est1, est2


def _group_by_speaker(utterances: Sequence[UtteranceMeta], split: str) -> Dict[str, List[UtteranceMeta]]:
    groups: Dict[str, List[UtteranceMeta]] = {}
    for meta in utterances:
        if meta.split == split:
            groups.setdefault(meta.speaker_id, []).append(meta)
    return {speaker: sorted(items, key=lambda m: m.utterance_id) for speaker, items in sorted(groups.items())}


def _load_trimmed(meta: UtteranceMeta, settings: AttributeSettings) -> Tuple[WaveBuffer, UtteranceMeta]:
    w = read_wav(meta.path)
    start, end = trim_bounds(w, meta, settings)
    return w.crop(start, end), meta.shifted(start)


def simulate_mixture(
    ordinal: int,
    speakers: Dict[str, List[UtteranceMeta]],
    split: str,
    seed: int,
    room_settings: RoomSettings,
    mixer_settings: MixerSettings,
    attribute_settings: AttributeSettings,
    annotate: Optional[Callable[[MixtureRecord], MixtureRecord]] = None,
) -> MixtureRecord:
    """產生第 ordinal 筆混合；亂數只依 (seed, split, ordinal) 派生"""
    rng = derive_rng(seed, split, "mixture", ordinal)
    names = list(speakers)
    first, second = rng.choice(len(names), size=2, replace=False)
    meta1 = speakers[names[first]][int(rng.integers(len(speakers[names[first]])))]
    meta2 = speakers[names[second]][int(rng.integers(len(speakers[names[second]])))]

    w1, meta1 = _load_trimmed(meta1, attribute_settings)
    w2, meta2 = _load_trimmed(meta2, attribute_settings)
    mixture_id = f"{split}-{ordinal:06d}"
    plan = sample_plan(mixture_id, split, meta1, meta2, w1.duration_s, w2.duration_s,
                       derive_seed(seed, split, "mixture", ordinal), rng, room_settings, mixer_settings)
    cache = RIRCache(room_settings.cache_dir) if room_settings.cache_dir else None
    record = render_mixture(plan, w1, w2, room_settings, mixer_settings, cache=cache)

    attributes = []
    for index, (w, meta, placement, component) in enumerate(
        ((w1, meta1, plan.placement1, record.rev1), (w2, meta2, plan.placement2, record.rev2)), 1
    ):
        profile = profile_utterance(w, meta, attribute_settings)
        attributes.append(extract_all(
            w, meta, placement, plan=plan, source_index=index,
            reverberant=component, settings=attribute_settings, profile=profile,
        ))
    record = record.with_annotations(attributes1=attributes[0], attributes2=attributes[1])
    logger.debug("%s: %s + %s, SIR %.2f dB, 重疊 %.2fs, alpha %.3f/%.3f (Sabine %.3f)",
                 mixture_id, plan.s1_id, plan.s2_id, plan.sir_db, plan.overlap_s,
                 record.absorption[0], record.absorption[1], rt60_to_absorption(plan.room))
    return annotate(record) if annotate is not None else record


def build_dataset(
    utterances: Sequence[UtteranceMeta],
    split: str,
    count: int,
    seed: int,
    room_settings: Optional[RoomSettings] = None,
    mixer_settings: Optional[MixerSettings] = None,
    attribute_settings: Optional[AttributeSettings] = None,
    jobs: int = 1,
    annotate: Optional[Callable[[MixtureRecord], MixtureRecord]] = None,
) -> Iterator[MixtureRecord]:
    """
    依序產生 count 筆混合

    每筆混合從該 split 中抽兩位不同說話者；輸出順序固定為序號順序，與 jobs 無關。
    annotate 在工作行程內對每筆 record 加上提示線索等標註，必須可被 pickle。
    """
    speakers = _group_by_speaker(utterances, split)
    if len(speakers) < 2:
        raise DataError(f"split '{split}' 只有 {len(speakers)} 位說話者，至少需要 2 位")
    room_settings = room_settings or RoomSettings()
    if room_settings.absorption_model == "sabine":
        logger.warning("absorption_model=sabine: 鏡像源法量得的 T60 比目標長，0.6 s 時約多 1/3；需要準確 T60 請用 calibrated")
    worker = partial(
        simulate_mixture,
        speakers=speakers,
        split=split,
        seed=seed,
        room_settings=room_settings,
        mixer_settings=mixer_settings or MixerSettings(),
        attribute_settings=attribute_settings or AttributeSettings(),
        annotate=annotate,
    )
    logger.info("建立 %s 資料集: %d 筆混合，%d 位說話者，jobs=%d", split, count, len(speakers), jobs)
    if jobs <= 1:
        for ordinal in range(count):
            yield worker(ordinal)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(worker, range(count))
