"""
YIN 基頻追蹤

以累積平均正規化差分函數 (CMNDF) 搭配絕對門檻與拋物線內插估計每個音框的 F0。
"""
import logging
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError
from .wave_core import WaveBuffer

logger = logging.getLogger(__name__)

F0_MIN_HZ = 50.0
F0_MAX_HZ = 600.0
FRAME_LENGTH = 742  # 46.4 ms
HOP_LENGTH = 160  # 10 ms
YIN_THRESHOLD = 0.1
SILENCE_ENERGY = 1e-10


class F0Frame(NamedTuple):
    """單一音框的基頻，無聲音框 f0_hz 為 None"""
    time_s: float
    f0_hz: Optional[float]

    @property
    def voiced(self) -> bool:
        return self.f0_hz is not None


def _difference_function(frames: np.ndarray, window: int, tau_max: int) -> np.ndarray:
    """d(tau) = E0 + E_tau - 2 r(tau)，以 FFT 計算自相關"""
    n_fft = 1 << int(np.ceil(np.log2(frames.shape[1] + window)))
    spec = np.fft.rfft(frames, n_fft, axis=1)
    head_spec = np.fft.rfft(frames[:, :window], n_fft, axis=1)
    corr = np.fft.irfft(spec * np.conj(head_spec), n_fft, axis=1)[:, :tau_max + 1]

    squares = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    energy_tau = squares[:, taus + window] - squares[:, taus]
    energy_0 = energy_tau[:, :1]
    diff = energy_0 + energy_tau - 2.0 * corr
    diff[:, 0] = 0.0
    return np.maximum(diff, 0.0)


def _cmndf(diff: np.ndarray) -> np.ndarray:
    cmndf = np.ones_like(diff)
    running = np.cumsum(diff[:, 1:], axis=1)
    taus = np.arange(1, diff.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        values = diff[:, 1:] * taus / running
    cmndf[:, 1:] = np.where(running > 0, values, 1.0)
    return cmndf


def _pick_period(curve: np.ndarray, tau_min: int, tau_max: int, threshold: float) -> Optional[float]:
    below = np.nonzero(curve[tau_min:tau_max + 1] < threshold)[0]
    if below.size == 0:
        return None
    tau = tau_min + int(below[0])
    while tau + 1 <= tau_max and curve[tau + 1] < curve[tau]:
        tau += 1
    if tau <= 0 or tau >= tau_max:
        return float(tau)
    a, b, c = curve[tau - 1], curve[tau], curve[tau + 1]
    denom = a - 2.0 * b + c
    if denom <= 0:
        return float(tau)
    shift = 0.5 * (a - c) / denom
    return tau + float(np.clip(shift, -1.0, 1.0))


def estimate_f0_track(
    w: WaveBuffer,
    fmin_hz: float = F0_MIN_HZ,
    fmax_hz: float = F0_MAX_HZ,
    threshold: float = YIN_THRESHOLD,
    frame_length: int = FRAME_LENGTH,
    hop_length: int = HOP_LENGTH,
) -> List[F0Frame]:
    """
    逐音框估計 F0

    Args:
        w: 乾淨語音
        fmin_hz, fmax_hz: 搜尋範圍，必須落在 [50, 600] Hz
        threshold: CMNDF 絕對門檻
    Returns:
        (時間, F0 或 None) 列表
    """
    if not (F0_MIN_HZ <= fmin_hz < fmax_hz <= F0_MAX_HZ):
        raise DataError(f"F0 範圍無效: fmin={fmin_hz}, fmax={fmax_hz}，需 50 <= fmin < fmax <= 600")
    if len(w) < frame_length + hop_length:
        raise DataError(f"訊號太短 ({len(w)} 樣本)，至少需要兩個音框")

    fs = w.sample_rate_hz
    window = frame_length // 2
    tau_min = max(2, int(np.floor(fs / fmax_hz)))
    tau_max = min(int(np.ceil(fs / fmin_hz)), frame_length - window)

    frames = sliding_window_view(w.samples, frame_length)[::hop_length]
    diff = _difference_function(frames, window, tau_max)
    cmndf = _cmndf(diff)
    frame_energy = np.sum(frames[:, :window] ** 2, axis=1)

    track = []
    for i in range(frames.shape[0]):
        time_s = (i * hop_length + frame_length / 2) / fs
        f0 = None
        if frame_energy[i] > SILENCE_ENERGY:
            period = _pick_period(cmndf[i], tau_min, tau_max, threshold)
            if period is not None and period > 0:
                candidate = fs / period
                if fmin_hz <= candidate <= fmax_hz:
                    f0 = float(candidate)
        track.append(F0Frame(time_s, f0))

    voiced = sum(1 for f in track if f.voiced)
    logger.debug("YIN: %d 個音框，其中 %d 個有聲", len(track), voiced)
    return track


def _voiced_values(track: Sequence[F0Frame]) -> List[float]:
    return [f.f0_hz for f in track if f.f0_hz is not None]


def mean_f0(track: Sequence[F0Frame]) -> Optional[float]:
    """有聲音框的平均基頻"""
    voiced = _voiced_values(track)
    if not voiced:
        return None
    return float(np.mean(voiced))


def f0_span(track: Sequence[F0Frame]) -> Optional[float]:
    """有聲音框基頻的最大值減最小值"""
    voiced = _voiced_values(track)
    if not voiced:
        return None
    return float(max(voiced) - min(voiced))
