"""
第二階段：嵌入與目標分類
"""

from .embeddings import EmbeddingStore, OracleEmbeddingProvider, make_provider
from .classifier import ClassifierConfig, ProjectionHead, classify_mixture, train_projection

__all__ = [
    'EmbeddingStore',
    'OracleEmbeddingProvider',
    'make_provider',
    'ClassifierConfig',
    'ProjectionHead',
    'classify_mixture',
    'train_projection',
]
