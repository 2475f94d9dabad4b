"""
房間取樣與鏡像源法 RIR 合成
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator
from scipy.signal import lfilter

from ..errors import DataError
from .wave_core import SAMPLE_RATE, WaveBuffer, convolve

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
SINC_HALF_WIDTH = 16
MAX_PLACEMENT_ATTEMPTS = 100
ABSORPTION_BOUNDS = (0.005, 0.99)
CALIBRATION_STEPS = 40
# 校準用的渲染長度，以 rt60 的倍數表示
CALIBRATION_WINDOW = 2.0
HIGHPASS_CUTOFF_HZ = 100.0

Range = Tuple[float, float]


class RoomSettings(BaseModel):
    """房間與聲源取樣範圍"""
    length_range: Range = (9.0, 11.0)
    width_range: Range = (9.0, 11.0)
    height_range: Range = (2.6, 3.5)
    rt60_range: Range = (0.3, 0.6)
    distance_range: Range = (0.3, 1.5)
    source_height_range: Range = (1.6, 1.9)
    mic_height_m: Optional[float] = None
    wall_margin_m: float = 0.1
    max_order: int = 30
    absorption_model: Literal["calibrated", "sabine"] = "calibrated"
    highpass: bool = True
    cache_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("length_range", "width_range", "height_range", "rt60_range",
                     "distance_range", "source_height_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi):
                raise ValueError(f"{name} 必須滿足 0 < 下限 < 上限: {(lo, hi)}")
        if self.max_order < 0:
            raise ValueError("max_order 不可為負")
        return self


class RoomSpec(BaseModel):
    """鞋盒房間，麥克風位於水平中心"""
    length_m: float
    width_m: float
    height_m: float
    rt60_s: float
    mic_height_m: float

    @model_validator(mode="after")
    def _check(self):
        if min(self.length_m, self.width_m, self.height_m) <= 0 or self.rt60_s <= 0:
            raise ValueError("房間尺寸與 RT60 必須為正")
        if not (0 < self.mic_height_m < self.height_m):
            raise ValueError(f"麥克風高度 {self.mic_height_m} 不在房間內")
        return self

    @property
    def dimensions(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])

    @property
    def mic_position(self) -> np.ndarray:
        return np.array([self.length_m / 2.0, self.width_m / 2.0, self.mic_height_m])

    @property
    def volume(self) -> float:
        return self.length_m * self.width_m * self.height_m

    @property
    def surface(self) -> float:
        l, w, h = self.length_m, self.width_m, self.height_m
        return 2.0 * (l * w + l * h + w * h)


class SourcePlacement(BaseModel):
    """聲源相對麥克風的位置"""
    horizontal_distance_m: float
    azimuth_rad: float
    source_height_m: float
    position: Tuple[float, float, float]

    def distance_to(self, mic: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(self.position) - mic))


@dataclass(frozen=True, eq=False)
class RIR:
    """房間脈衝響應"""
    taps: np.ndarray
    direct_path_index: int
    absorption: float
    sample_rate_hz: int = SAMPLE_RATE


def sample_room(rng: np.random.Generator, settings: Optional[RoomSettings] = None) -> RoomSpec:
    """在設定範圍內均勻取樣房間"""
    settings = settings or RoomSettings()
    length = rng.uniform(*settings.length_range)
    width = rng.uniform(*settings.width_range)
    height = rng.uniform(*settings.height_range)
    rt60 = rng.uniform(*settings.rt60_range)
    mic_height = settings.mic_height_m if settings.mic_height_m is not None else height / 2.0
    return RoomSpec(length_m=length, width_m=width, height_m=height, rt60_s=rt60, mic_height_m=mic_height)


def placement_from_polar(room: RoomSpec, distance_m: float, azimuth_rad: float, height_m: float) -> SourcePlacement:
    mic = room.mic_position
    position = (
        float(mic[0] + distance_m * np.cos(azimuth_rad)),
        float(mic[1] + distance_m * np.sin(azimuth_rad)),
        float(height_m),
    )
    return SourcePlacement(
        horizontal_distance_m=float(distance_m),
        azimuth_rad=float(azimuth_rad),
        source_height_m=float(height_m),
        position=position,
    )


def _inside(room: RoomSpec, position: Tuple[float, float, float], margin: float) -> bool:
    return all(margin <= p <= d - margin for p, d in zip(position, room.dimensions))


def sample_placement(
    rng: np.random.Generator,
    room: RoomSpec,
    settings: Optional[RoomSettings] = None,
) -> SourcePlacement:
    """取樣距離、方位角與高度；方位角重抽直到聲源位於牆內"""
    settings = settings or RoomSettings()
    distance = rng.uniform(*settings.distance_range)
    height = rng.uniform(*settings.source_height_range)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        placement = placement_from_polar(room, distance, azimuth, height)
        if _inside(room, placement.position, settings.wall_margin_m):
            return placement
    raise DataError(f"{MAX_PLACEMENT_ATTEMPTS} 次嘗試後仍無法把聲源放進房間 (distance={distance:.2f}m)")


def sabine_absorption(volume_m3: float, surface_m2: float, rt60_s: float) -> float:
    """Sabine 公式 alpha = 0.161 V / (T60 S)，限制在 (0, 0.99]"""
    if rt60_s <= 0:
        raise DataError(f"rt60 必須為正: {rt60_s}")
    alpha = 0.161 * volume_m3 / (rt60_s * surface_m2)
    return float(min(max(alpha, 1e-6), 0.99))


def rt60_to_absorption(room: RoomSpec) -> float:
    return sabine_absorption(room.volume, room.surface, room.rt60_s)


def measure_rt60(taps: np.ndarray, fs: int = SAMPLE_RATE, decay_db: float = 20.0,
                 direct_index: Optional[int] = None) -> float:
    """
    Schroeder 反向積分估計 T60

    從直達聲之後開始積分，在 -5 dB 到 -(5 + decay_db) dB 之間做線性擬合再外插到 60 dB。
    衰減不足時回傳 inf。
    """
    taps = np.asarray(taps, dtype=np.float64)
    if direct_index is None:
        direct_index = int(np.argmax(np.abs(taps)))
    tail = taps[direct_index + SINC_HALF_WIDTH + 1:]
    energy = tail ** 2
    total = float(np.sum(energy))
    if tail.size < 2 or total <= 0.0:
        return float("inf")
    edc = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / total)
    start = np.nonzero(edc_db <= -5.0)[0]
    stop = np.nonzero(edc_db <= -5.0 - decay_db)[0]
    if start.size == 0 or stop.size == 0 or stop[0] - start[0] < 2:
        return float("inf")
    i0, i1 = int(start[0]), int(stop[0])
    t = np.arange(i0, i1 + 1) / fs
    slope, _ = np.polyfit(t, edc_db[i0:i1 + 1], 1)
    if slope >= 0:
        return float("inf")
    return float(-60.0 / slope)


@lru_cache(maxsize=8)
def _image_lattice(max_order: int) -> np.ndarray:
    """|mx| + |my| + |mz| <= max_order 的整數格點"""
    r = np.arange(-max_order, max_order + 1)
    mx, my, mz = np.meshgrid(r, r, r, indexing="ij")
    lattice = np.stack([mx.ravel(), my.ravel(), mz.ravel()], axis=1)
    lattice = lattice[np.abs(lattice).sum(axis=1) <= max_order]
    lattice.setflags(write=False)
    return lattice


def _highpass(taps: np.ndarray, fs: int) -> np.ndarray:
    """Allen-Berkley 100 Hz 高通"""
    w = 2.0 * np.pi * HIGHPASS_CUTOFF_HZ / fs
    r1 = np.exp(-w)
    b1 = 2.0 * r1 * np.cos(w)
    b2 = -r1 * r1
    a1 = -(1.0 + r1)
    return lfilter([1.0, a1, r1], [1.0, -b1, -b2], taps, axis=-1)


def _render_by_order(room: RoomSpec, placement: SourcePlacement, max_order: int, fs: int,
                     duration_s: float) -> Tuple[np.ndarray, int]:
    """
    依反射次數分組渲染未衰減的鏡像源

    回傳 (max_order+1, n_taps) 陣列，第 n 列是所有 n 次反射鏡像的 1/(4 pi d) 加權分數延遲脈衝總和。
    """
    dims = room.dimensions
    mic = room.mic_position
    src = np.asarray(placement.position)
    direct_delay = placement.distance_to(mic) / SPEED_OF_SOUND
    n_taps = int(np.ceil((duration_s + direct_delay) * fs)) + 1

    lattice = _image_lattice(max_order)
    odd = np.mod(lattice, 2) == 1
    images = lattice * dims + np.where(odd, dims - src, src)
    distances = np.linalg.norm(images - mic, axis=1)
    delays = distances / SPEED_OF_SOUND * fs
    keep = delays < n_taps - 1
    orders = np.abs(lattice[keep]).sum(axis=1)
    distances = distances[keep]
    delays = delays[keep]

    offsets = np.arange(-SINC_HALF_WIDTH + 1, SINC_HALF_WIDTH + 1)
    index = np.floor(delays).astype(np.int64)[:, None] + offsets[None, :]
    t = index - delays[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / SINC_HALF_WIDTH))
    kernel = np.sinc(t) * np.where(np.abs(t) < SINC_HALF_WIDTH, window, 0.0)
    weights = kernel / (4.0 * np.pi * distances[:, None])
    valid = (index >= 0) & (index < n_taps)
    flat = (orders[:, None] * n_taps + index)[valid]
    by_order = np.bincount(flat, weights=weights[valid], minlength=(max_order + 1) * n_taps)
    return by_order.reshape(max_order + 1, n_taps), n_taps


def _combine(by_order: np.ndarray, absorption: float, highpass: bool, fs: int) -> np.ndarray:
    beta = np.sqrt(1.0 - absorption)
    taps = np.power(beta, np.arange(by_order.shape[0])) @ by_order
    # 自由場（無反射）不做高通
    if highpass and by_order.shape[0] > 1:
        taps = _highpass(taps, fs)
    return taps


def _calibrate_absorption(by_order: np.ndarray, target_rt60: float, highpass: bool, fs: int) -> float:
    """二分搜尋均勻吸收係數，使渲染後 RIR 的 Schroeder T60 等於目標值"""
    lo, hi = ABSORPTION_BOUNDS
    if measure_rt60(_combine(by_order, lo, highpass, fs), fs) <= target_rt60:
        return lo
    if measure_rt60(_combine(by_order, hi, highpass, fs), fs) >= target_rt60:
        return hi
    for _ in range(CALIBRATION_STEPS):
        mid = 0.5 * (lo + hi)
        if measure_rt60(_combine(by_order, mid, highpass, fs), fs) > target_rt60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def image_source_rir(
    room: RoomSpec,
    placement: SourcePlacement,
    max_order: int = 30,
    absorption_model: str = "calibrated",
    highpass: bool = True,
    fs: int = SAMPLE_RATE,
) -> RIR:
    """
    鏡像源法 RIR

    每個鏡像的增益為 beta^反射次數 / (4 pi d)，beta = sqrt(1 - alpha)；
    分數延遲以半寬 16 的 Hann 視窗 sinc 實現。長度涵蓋 rt60 加直達延遲。
    absorption_model="sabine" 直接用 Sabine 公式，量得的 T60 會偏長（目標 0.6 s 時約 0.8 s）；
    "calibrated" 以二分搜尋調整 alpha 讓量測 T60 符合 room.rt60_s。
    """
    if max_order < 0:
        raise DataError(f"max_order 不可為負: {max_order}")
    by_order, _ = _render_by_order(room, placement, max_order, fs, CALIBRATION_WINDOW * room.rt60_s)
    direct_delay = placement.distance_to(room.mic_position) / SPEED_OF_SOUND
    n_taps = int(np.ceil((room.rt60_s + direct_delay) * fs)) + 1
    if absorption_model == "sabine" or max_order == 0:
        absorption = rt60_to_absorption(room)
    elif absorption_model == "calibrated":
        absorption = _calibrate_absorption(by_order, room.rt60_s, highpass, fs)
    else:
        raise DataError(f"未知的吸收模型: {absorption_model}")
    taps = _combine(by_order, absorption, highpass, fs)[:n_taps]
    # 以 float32 精度保存，讓快取讀回與重新計算完全一致
    taps = taps.astype(np.float32).astype(np.float64)
    taps.setflags(write=False)
    direct = int(round(direct_delay * fs))
    logger.debug("RIR: %d taps, 直達 %d, alpha=%.4f (Sabine %.4f)",
                 taps.size, direct, absorption, rt60_to_absorption(room))
    return RIR(taps=taps, direct_path_index=direct, absorption=float(absorption), sample_rate_hz=fs)


def apply_rir(w: WaveBuffer, rir: RIR) -> WaveBuffer:
    """卷積 RIR，保留完整殘響尾端"""
    if w.sample_rate_hz != rir.sample_rate_hz:
        raise DataError(f"取樣率不一致: {w.sample_rate_hz} != {rir.sample_rate_hz}")
    return convolve(w, rir.taps)


class RIRCache:
    """
    RIR 磁碟快取

    以 (房間, 聲源位置, 反射次數, 模型設定) 的內容雜湊為鍵；檔案格式為
    magic "RIR1"、fs (u32)、taps 數 (u32)、吸收係數 (f32)，接著 float32 taps。
    """

    MAGIC = b"RIR1"
    HEADER = struct.Struct("<4sIIf")

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(room: RoomSpec, placement: SourcePlacement, max_order: int,
            absorption_model: str, highpass: bool, fs: int) -> str:
        payload = json.dumps({
            "room": room.model_dump(mode="json"),
            "placement": placement.model_dump(mode="json"),
            "max_order": max_order,
            "absorption_model": absorption_model,
            "highpass": highpass,
            "fs": fs,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _read(self, path: Path, room: RoomSpec, placement: SourcePlacement) -> RIR:
        blob = path.read_bytes()
        if len(blob) < self.HEADER.size:
            raise DataError(f"RIR 快取檔案截斷: {path}")
        magic, fs, count, absorption = self.HEADER.unpack_from(blob)
        if magic != self.MAGIC or len(blob) != self.HEADER.size + 4 * count:
            raise DataError(f"RIR 快取檔案損毀: {path}")
        taps = np.frombuffer(blob, dtype="<f4", count=count, offset=self.HEADER.size).astype(np.float64)
        taps.setflags(write=False)
        direct = int(round(placement.distance_to(room.mic_position) / SPEED_OF_SOUND * fs))
        return RIR(taps=taps, direct_path_index=direct, absorption=float(absorption), sample_rate_hz=fs)

    def get_or_compute(self, room: RoomSpec, placement: SourcePlacement, max_order: int = 30,
                       absorption_model: str = "calibrated", highpass: bool = True,
                       fs: int = SAMPLE_RATE) -> RIR:
        path = self.directory / f"{self.key(room, placement, max_order, absorption_model, highpass, fs)}.rir"
        if path.exists():
            return self._read(path, room, placement)
        rir = image_source_rir(room, placement, max_order, absorption_model, highpass, fs)
        header = self.HEADER.pack(self.MAGIC, fs, rir.taps.size, rir.absorption)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(header + rir.taps.astype("<f4").tobytes())
        tmp.replace(path)
        return rir
