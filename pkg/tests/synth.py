"""
測試用的合成語料
"""
import json
from pathlib import Path

import numpy as np

from src.audio.attributes import AttributeVector, UtteranceMeta
from src.audio.mixer import MixerSettings, render_mixture, sample_plan
from src.audio.room_sim import RoomSettings
from src.audio.wave_core import WaveBuffer, write_wav

FS = 16000

# (speaker, split, language, gender, age, f0, seconds, emotion, transcription)
CORPUS = [
    ("spk01", "train", "en", "female", 31, 220.0, 2.2, "happy", "please find the quiet room"),
    ("spk01", "train", "en", "female", 31, 230.0, 3.4, "neutral", "the weather is lovely today"),
    ("spk02", "train", "de", "male", 58, 110.0, 3.6, "sad", "guten morgen meine freunde"),
    ("spk02", "train", "de", "male", 58, 115.0, 1.8, "neutral", "danke schön"),
    ("spk03", "train", "fr", "female", 24, 260.0, 2.8, "angry", "je suis très fatigué"),
    ("spk03", "train", "fr", "female", 24, 250.0, 3.2, "neutral", "bonjour le monde entier"),
    ("spk04", "valid", "es", "male", 45, 130.0, 2.5, "neutral", "hola mundo feliz"),
    ("spk05", "valid", "zh", "female", 37, 240.0, 3.0, "happy", "今天天气很好"),
    ("spk06", "test", "zh", "male", 66, 120.0, 3.3, "neutral", "我喜欢学习中文"),
    ("spk06", "test", "zh", "male", 66, 125.0, 2.1, "sad", "谢谢你"),
    ("spk07", "test", "en", "female", 19, 280.0, 3.8, "happy", "isolate the louder voice please"),
    ("spk07", "test", "en", "female", 19, 270.0, 2.4, "neutral", "crystal clear skies"),
]


def harmonic_utterance(f0, seconds=2.0, lead_s=0.25, tail_s=0.25, amplitude=0.3):
    """語音替身：帶音節起伏的諧波音，前後有靜音"""
    t = np.arange(int(round(seconds * FS))) / FS
    voiced = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in range(1, 5))
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * 4.0 * t)
    samples = np.concatenate([
        np.zeros(int(round(lead_s * FS))),
        amplitude * envelope * voiced,
        np.zeros(int(round(tail_s * FS))),
    ])
    return WaveBuffer(samples)


def _words(text, lead_s, seconds):
    tokens = text.split() if " " in text else list(text)
    step = seconds / len(tokens)
    return [[token, round(lead_s + i * step, 4), round(lead_s + (i + 0.9) * step, 4)] for i, token in enumerate(tokens)]


def write_corpus(root, rows=CORPUS, with_words=True):
    """寫出音檔與 JSON Lines 清單，回傳清單路徑"""
    root = Path(root)
    audio_dir = root / "audio"
    lines = []
    for i, (speaker, split, language, gender, age, f0, seconds, emotion, text) in enumerate(rows):
        utt_id = f"{speaker}_{i:02d}"
        write_wav(audio_dir / f"{utt_id}.wav", harmonic_utterance(f0, seconds))
        row = {
            "id": utt_id,
            "path": f"audio/{utt_id}.wav",
            "speaker": speaker,
            "split": split,
            "language": language,
            "gender": gender,
            "age": age,
            "emotion": emotion,
            "transcription": text,
        }
        if with_words:
            row["words"] = _words(text, 0.25, seconds)
        lines.append(json.dumps(row, ensure_ascii=False))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def attribute_vector(**kwargs):
    """預設值完整的屬性向量"""
    base = dict(
        mean_f0_hz=200.0, f0_span_hz=80.0, age_years=30.0, speaking_duration_s=3.0,
        speaking_rate_spm=240.0, rms_energy_db=-20.0, distance_m=1.0, appearance_time_s=0.2,
        language="en", gender="female", emotion="happy", transcription="hello world",
    )
    base.update(kwargs)
    return AttributeVector(**base)


def make_record(seed=0, attributes1=None, attributes2=None, mixture_id="test-000000"):
    """兩個諧波音的小房間混合，可附上屬性"""
    room = RoomSettings(max_order=2, absorption_model="sabine")
    rng = np.random.default_rng(seed)
    w1 = harmonic_utterance(150.0, 3.5, lead_s=0.0, tail_s=0.0)
    w2 = harmonic_utterance(240.0, 4.0, lead_s=0.0, tail_s=0.0)
    meta1 = UtteranceMeta(utterance_id="a", speaker_id="s1", language="en", gender="male")
    meta2 = UtteranceMeta(utterance_id="b", speaker_id="s2", language="en", gender="female")
    plan = sample_plan(mixture_id, mixture_id.split("-")[0], meta1, meta2,
                       w1.duration_s, w2.duration_s, seed, rng, room, MixerSettings())
    record = render_mixture(plan, w1, w2, room)
    return record.with_annotations(attributes1=attributes1, attributes2=attributes2)


EMOTIONS = ["neutral", "happy", "sad", "calm", "excited", "frustrated"]
TRANSCRIPTIONS = ["hello world", "please find the quiet room", "the weather is lovely today", "crystal clear skies"]


def random_attributes(rng):
    """各屬性在常見範圍內均勻取樣"""
    return attribute_vector(
        mean_f0_hz=float(rng.uniform(90.0, 300.0)),
        f0_span_hz=float(rng.uniform(20.0, 150.0)),
        age_years=float(rng.integers(18, 80)),
        speaking_duration_s=float(rng.uniform(1.0, 8.0)),
        speaking_rate_spm=float(rng.uniform(120.0, 360.0)),
        rms_energy_db=float(rng.uniform(-35.0, -10.0)),
        distance_m=float(rng.uniform(0.3, 1.5)),
        appearance_time_s=float(rng.uniform(0.0, 3.0)),
        language=str(rng.choice(["en", "fr", "de", "es", "zh"])),
        gender=str(rng.choice(["male", "female"])),
        emotion=str(rng.choice(EMOTIONS)),
        transcription=str(rng.choice(TRANSCRIPTIONS)),
    )


def closed_loop_records(count, seed=0):
    """
    兩筆渲染好的混合輪流換上新的 mixture_id、目標通道與隨機屬性

    oracle 提供者只看屬性與 mixture_id，音訊只用在 PIT 與標籤。
    """
    rng = np.random.default_rng(seed)
    bases = [make_record(seed), make_record(seed + 1)]
    records = []
    for i in range(count):
        base = bases[i % 2]
        plan = base.plan.model_copy(update={"mixture_id": f"test-{i:06d}", "target_index": 1 + (i // 2) % 2})
        records.append(base.with_annotations(plan=plan, attributes1=random_attributes(rng),
                                             attributes2=random_attributes(rng)))
    return records
