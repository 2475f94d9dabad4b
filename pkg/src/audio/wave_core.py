"""
音訊緩衝區與訊號層級指標（RMS、SI-SDR、SIR 縮放、卷積）
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
from scipy.signal import fftconvolve

from ..errors import DataError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
RMS_FLOOR_DB = -120.0
SI_SDR_EPS = 1e-10
SI_SDR_CLAMP_DB = 60.0
PEAK_EPS = 1e-6

Segment = Tuple[float, float]


@dataclass(frozen=True, eq=False)
class WaveBuffer:
    """單聲道取樣音訊，建立後不可修改"""
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"WaveBuffer 只支援單聲道，收到 shape={samples.shape}")
        if int(self.sample_rate_hz) <= 0:
            raise DataError(f"取樣率必須為正整數: {self.sample_rate_hz}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    def with_samples(self, samples: np.ndarray) -> "WaveBuffer":
        return WaveBuffer(samples, self.sample_rate_hz)

    def crop(self, start_s: float, end_s: float) -> "WaveBuffer":
        """擷取 [start_s, end_s) 區段"""
        start = max(0, int(round(start_s * self.sample_rate_hz)))
        end = min(len(self), int(round(end_s * self.sample_rate_hz)))
        return self.with_samples(self.samples[start:end])

    @classmethod
    def silence(cls, duration_s: float, sample_rate_hz: int = SAMPLE_RATE) -> "WaveBuffer":
        return cls(np.zeros(int(round(duration_s * sample_rate_hz))), sample_rate_hz)


def _require_samples(w: WaveBuffer, name: str = "訊號") -> None:
    if len(w) == 0:
        raise DataError(f"{name}為空，無法計算指標")


def _check_pair(a: WaveBuffer, b: WaveBuffer) -> None:
    if len(a) != len(b):
        raise DataError(f"長度不一致: {len(a)} != {len(b)}")
    if a.sample_rate_hz != b.sample_rate_hz:
        raise DataError(f"取樣率不一致: {a.sample_rate_hz} != {b.sample_rate_hz}")
    _require_samples(a)


def segment_mask(w: WaveBuffer, segments: Sequence[Segment]) -> np.ndarray:
    """區段聯集的樣本遮罩"""
    mask = np.zeros(len(w), dtype=bool)
    tolerance = 1.0 / w.sample_rate_hz
    for start_s, end_s in segments:
        if start_s < -tolerance or end_s > w.duration_s + tolerance or end_s < start_s:
            raise DataError(f"區段 [{start_s:.3f}, {end_s:.3f}] 超出訊號長度 {w.duration_s:.3f}s")
        start = max(0, int(round(start_s * w.sample_rate_hz)))
        end = min(len(w), int(round(end_s * w.sample_rate_hz)))
        mask[start:end] = True
    return mask


def energy(w: WaveBuffer) -> float:
    return float(np.dot(w.samples, w.samples))


def rms_db(w: WaveBuffer, segments: Optional[Sequence[Segment]] = None) -> float:
    """
    RMS 能量 (dB)

    segments 為 None 時計算整段；否則只計算區段聯集內的樣本，空的區段列表與全零訊號回傳 -120 dB。
    """
    _require_samples(w)
    samples = w.samples
    if segments is not None:
        samples = samples[segment_mask(w, segments)]
    if samples.size == 0:
        return RMS_FLOOR_DB
    mean_square = float(np.mean(samples * samples))
    if mean_square <= 0.0:
        return RMS_FLOOR_DB
    return max(10.0 * np.log10(mean_square), RMS_FLOOR_DB)


def si_sdr(estimate: WaveBuffer, reference: WaveBuffer) -> float:
    """尺度不變訊號失真比，結果限制在 ±60 dB"""
    _check_pair(estimate, reference)
    s = reference.samples
    e = estimate.samples
    ref_energy = float(np.dot(s, s))
    if ref_energy == 0.0:
        raise DataError("參考訊號全為零，SI-SDR 無定義")
    alpha = float(np.dot(e, s)) / ref_energy
    target = alpha * s
    residual = e - target
    target_energy = float(np.dot(target, target))
    if target_energy == 0.0:
        return -SI_SDR_CLAMP_DB
    value = 10.0 * np.log10(target_energy / (float(np.dot(residual, residual)) + SI_SDR_EPS))
    return float(np.clip(value, -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


def si_sdri(estimate: WaveBuffer, reference: WaveBuffer, mixture: WaveBuffer) -> float:
    """相對於混合訊號的 SI-SDR 改善量"""
    return si_sdr(estimate, reference) - si_sdr(mixture, reference)


def measure_sir(signal: WaveBuffer, interference: WaveBuffer) -> float:
    """全長能量比 (dB)"""
    signal_energy = energy(signal)
    interference_energy = energy(interference)
    if signal_energy == 0.0 or interference_energy == 0.0:
        raise DataError("訊號或干擾全為零，SIR 無定義")
    return 10.0 * np.log10(signal_energy / interference_energy)


def sir_gain(signal: WaveBuffer, interference: WaveBuffer, sir_db: float) -> float:
    signal_energy = energy(signal)
    interference_energy = energy(interference)
    if interference_energy == 0.0:
        raise DataError("干擾訊號全為零，無法設定 SIR")
    if signal_energy == 0.0:
        raise DataError("訊號全為零，無法達到目標 SIR")
    return float(np.sqrt(interference_energy / signal_energy * 10.0 ** (sir_db / 10.0)))


def scale_to_sir(signal: WaveBuffer, interference: WaveBuffer, sir_db: float) -> WaveBuffer:
    """縮放 signal 使其相對 interference 的能量比等於 sir_db"""
    return signal.with_samples(sir_gain(signal, interference, sir_db) * signal.samples)


def convolve(w: WaveBuffer, kernel: Union[Sequence[float], np.ndarray]) -> WaveBuffer:
    """完整線性卷積，輸出長度 len(w) + len(kernel) - 1"""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size == 0:
        raise DataError("卷積核必須為非空的一維序列")
    if len(w) == 0:
        return w.with_samples(np.zeros(kernel.size - 1))
    return w.with_samples(fftconvolve(w.samples, kernel, mode="full"))


def pad_to(w: WaveBuffer, offset_s: float, total_samples: int) -> WaveBuffer:
    """補零放置到 offset_s，總長 total_samples"""
    offset = int(round(offset_s * w.sample_rate_hz))
    if offset + len(w) > total_samples:
        raise DataError(f"放置超出總長: {offset} + {len(w)} > {total_samples}")
    out = np.zeros(total_samples)
    out[offset:offset + len(w)] = w.samples
    return w.with_samples(out)


def peak_normalize(w: WaveBuffer, peak: float = 0.9) -> Tuple[WaveBuffer, float]:
    """峰值正規化，回傳 (新訊號, 增益)"""
    current = w.peak
    if current == 0.0:
        return w, 1.0
    gain = peak / current
    return w.with_samples(w.samples * gain), gain


def read_wav(path: Union[str, Path]) -> WaveBuffer:
    """讀取 16 kHz 單聲道 WAV"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"找不到音檔: {path}")
    info = sf.info(str(path))
    if info.channels != 1:
        raise DataError(f"{path}: channels={info.channels}，只接受單聲道")
    if info.samplerate != SAMPLE_RATE:
        raise DataError(f"{path}: sample_rate={info.samplerate}，只接受 {SAMPLE_RATE} Hz")
    data, _ = sf.read(str(path), dtype="float64", always_2d=False)
    return WaveBuffer(data, SAMPLE_RATE)


def write_wav(path: Union[str, Path], w: WaveBuffer) -> None:
    """寫出 16-bit PCM 單聲道 WAV"""
    if w.sample_rate_hz != SAMPLE_RATE:
        raise DataError(f"sample_rate={w.sample_rate_hz}，只支援 {SAMPLE_RATE} Hz")
    if w.peak > 1.0 + PEAK_EPS:
        raise DataError(f"峰值 {w.peak:.6f} 超過 1，寫檔前需先正規化")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(w.samples, -1.0, 1.0), SAMPLE_RATE, subtype="PCM_16")

