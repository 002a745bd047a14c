"""Temporal action localization on person tracks with two-stream recurrent scorers."""
from .estimators import TrackLocalizer, TrackScorer
from .evaluation import EvalConfig, correctness_analysis, mean_ap
from .localization import LocalizationConfig, ViterbiConfig, localize, st_nms
from .tracks import (BoundingBox, Detection, GroundTruthInstance, PersonTrack, assign_frame_labels,
                     spatial_iou, st_iou, temporal_iou)

__version__ = "0.1.0"
