"""
線索標註與提示語產生
"""

from .cue_engine import CueLabel, ThresholdTable, cue_labels_for_pair
from .prompt_gen import PromptConfig, PromptRecord, generate_prompts

__all__ = [
    'CueLabel',
    'ThresholdTable',
    'cue_labels_for_pair',
    'PromptConfig',
    'PromptRecord',
    'generate_prompts',
]
