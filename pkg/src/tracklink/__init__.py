"""3D detection linking: box geometry, tracking deltas, keypoint correlation,
tube extraction and KITTI-style evaluation."""

from .codec import LossConfig, LossTerms, TrackDelta, decode_delta, encode_delta, multitask_loss, smooth_l1
from .correlation import CorrelationMap, KeypointFeatureSet, argmax_match, assemble_combined, correlate
from .evaluation import EvalConfig, EvalReport, GroundTruth, ScoredBox, average_precision, evaluate
from .geometry import OrientedBox3D, box_corners, iou_3d, iou_bev
from .linker import (
    Detection,
    LinkerConfig,
    OnlineLinker,
    Tracklet,
    Tube,
    build_graphs,
    extract_tubes,
    link_online,
    link_score,
    link_sequence,
)

__version__ = "0.1.0"
