"""
能量式語音活動偵測與說話時長
"""
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .wave_core import Segment, WaveBuffer

logger = logging.getLogger(__name__)

FRAME_S = 0.030
HOP_S = 0.010
FLOOR_DB = -45.0
NOISE_MARGIN_DB = 10.0
HANGOVER_S = 0.1
NOISE_PERCENTILE = 10.0
PEAK_MARGIN_DB = 20.0
MAX_PAUSE_S = 0.6
ENERGY_EPS = 1e-12

Interval = Union[Tuple[float, float], Tuple[str, float, float]]


def frame_energies_db(w: WaveBuffer, frame_s: float = FRAME_S, hop_s: float = HOP_S) -> Tuple[np.ndarray, np.ndarray]:
    """回傳 (音框起點秒數, 音框能量 dB)，尾端不足一框時補零"""
    fs = w.sample_rate_hz
    frame = int(round(frame_s * fs))
    hop = int(round(hop_s * fs))
    n = len(w)
    n_frames = 1 if n <= frame else int(np.ceil((n - frame) / hop)) + 1
    padded = np.zeros((n_frames - 1) * hop + frame)
    padded[:n] = w.samples
    starts = np.arange(n_frames) * hop
    frames = padded[starts[:, None] + np.arange(frame)[None, :]]
    energies = 10.0 * np.log10(np.maximum(np.mean(frames ** 2, axis=1), ENERGY_EPS))
    return starts / fs, energies


def _merge(segments: List[List[float]], hangover_s: float) -> List[Segment]:
    merged: List[List[float]] = []
    for start, end in segments:
        if merged and start - merged[-1][1] <= hangover_s + 1e-9:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(float(s), float(e)) for s, e in merged]


def detect_speech_segments(
    w: WaveBuffer,
    frame_s: float = FRAME_S,
    hop_s: float = HOP_S,
    floor_db: float = FLOOR_DB,
    margin_db: float = NOISE_MARGIN_DB,
    hangover_s: float = HANGOVER_S,
    noise_percentile: float = NOISE_PERCENTILE,
    peak_margin_db: Optional[float] = PEAK_MARGIN_DB,
) -> List[Segment]:
    """
    以音框能量門檻偵測語音區段

    門檻 = max(floor_db, 噪音底 + margin_db)；噪音底取能量分佈的低百分位數。
    噪音底 + margin_db 另以 峰值 - peak_margin_db 為上限，否則靜音音框少於
    noise_percentile% 的輸入（整段都是語音）會因噪音底就是語音能量而偵測不到任何區段。
    只有噪音底與峰值相距不到 margin_db + peak_margin_db 時上限才會生效；
    peak_margin_db 為 None 時不設上限。
    間隔不超過 hangover_s 的區段會被合併。
    """
    if len(w) == 0:
        return []
    starts, energies = frame_energies_db(w, frame_s, hop_s)
    noise_floor = float(np.percentile(energies, noise_percentile))
    peak = float(np.max(energies))
    relative = noise_floor + margin_db
    if peak_margin_db is not None:
        relative = min(relative, peak - peak_margin_db)
    threshold = max(floor_db, relative)
    active = energies > threshold
    if not np.any(active):
        return []

    duration = w.duration_s
    raw: List[List[float]] = []
    run_start = None
    for i, flag in enumerate(active):
        if flag and run_start is None:
            run_start = i
        if not flag and run_start is not None:
            raw.append([starts[run_start], min(starts[i - 1] + frame_s, duration)])
            run_start = None
    if run_start is not None:
        raw.append([starts[run_start], min(starts[-1] + frame_s, duration)])

    segments = _merge(raw, hangover_s)
    logger.debug("VAD 門檻 %.1f dB，偵測到 %d 個區段", threshold, len(segments))
    return segments


def _as_interval(item: Interval) -> Tuple[float, float]:
    if len(item) == 3:
        return float(item[1]), float(item[2])
    return float(item[0]), float(item[1])


def speaking_duration(intervals: Sequence[Interval], max_pause_s: float = MAX_PAUSE_S) -> float:
    """
    總說話時間

    各字詞/區段時長加上不超過 max_pause_s 的停頓；較長的停頓不計入。
    輸入可以是 (start, end) 或 (word, start, end)。
    """
    spans = [_as_interval(item) for item in intervals]
    total = 0.0
    previous_end = None
    for start, end in spans:
        total += max(0.0, end - start)
        if previous_end is not None:
            pause = start - previous_end
            if 0.0 < pause <= max_pause_s + 1e-9:
                total += pause
        previous_end = end if previous_end is None else max(previous_end, end)
    return total
