"""
音訊處理：波形、屬性擷取、房間模擬、混合
"""

from .wave_core import WaveBuffer, read_wav, si_sdr, si_sdri, write_wav
from .attributes import AttributeVector, UtteranceMeta, extract_all
from .room_sim import RIR, RoomSpec, SourcePlacement, image_source_rir
from .mixer import MixturePlan, MixtureRecord, build_dataset, render_mixture

__all__ = [
    'WaveBuffer',
    'read_wav',
    'write_wav',
    'si_sdr',
    'si_sdri',
    'AttributeVector',
    'UtteranceMeta',
    'extract_all',
    'RIR',
    'RoomSpec',
    'SourcePlacement',
    'image_source_rir',
    'MixturePlan',
    'MixtureRecord',
    'build_dataset',
    'render_mixture',
]
