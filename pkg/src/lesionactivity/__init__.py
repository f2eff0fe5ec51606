"""Longitudinal lesion-activity segmentation toolkit.

Capabilities: volume preprocessing and I/O, synthetic longitudinal scan
pairs with ground-truth activity, single- and two-path 3D encoder-decoder
networks with attention-guided interactions, dice training, overlapping
tiled inference, and lesion-wise evaluation with significance testing.
"""

from .volumes import (
    DegenerateInputError,
    ScanPair,
    Volume,
    filter_small_lesions,
    resample,
    standardize,
)
from .volume_io import VolumeFormatError, read_volume, write_volume
from .metrics import (
    CaseMetrics,
    EvalReport,
    LesionSet,
    aggregate,
    case_metrics,
    connected_components,
    interrater_pairs,
    lesion_rates,
    majority_vote,
    select_threshold,
)
from .stats import ComparisonResult, WilcoxonResult, compare_models, wilcoxon_signed_rank

__version__ = "0.1.0"

__all__ = [
    "CaseMetrics",
    "ComparisonResult",
    "DegenerateInputError",
    "EvalReport",
    "LesionSet",
    "ScanPair",
    "Volume",
    "VolumeFormatError",
    "WilcoxonResult",
    "aggregate",
    "case_metrics",
    "compare_models",
    "connected_components",
    "filter_small_lesions",
    "interrater_pairs",
    "lesion_rates",
    "majority_vote",
    "read_volume",
    "resample",
    "select_threshold",
    "standardize",
    "wilcoxon_signed_rank",
    "write_volume",
]
