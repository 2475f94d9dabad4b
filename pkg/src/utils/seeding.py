"""
由根種子依名稱派生亂數產生器，不使用全域亂數狀態
"""
import zlib
from typing import Union

import numpy as np

Name = Union[str, int]


def _name_to_int(name: Name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def derive_seed(seed: int, *names: Name) -> int:
    """派生一個 32 位元整數種子"""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_name_to_int(n) for n in names)])
    return int(seq.generate_state(1)[0])


def derive_rng(seed: int, *names: Name) -> np.random.Generator:
    """
    依 (seed, names...) 建立獨立的 Generator

    同一組名稱永遠得到同一條亂數序列，與執行順序和平行度無關。
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(_name_to_int(n) for n in names)])
