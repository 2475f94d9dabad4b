"""
共用工具
"""

from .seeding import derive_rng, derive_seed

__all__ = ['derive_rng', 'derive_seed']
