"""
評估與報表
"""

from .analysis import EvalRow, accuracy_by_cue, accuracy_by_delta, group_crosstab

__all__ = ['EvalRow', 'accuracy_by_cue', 'accuracy_by_delta', 'group_crosstab']
