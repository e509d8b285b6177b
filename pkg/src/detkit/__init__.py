"""Detection data tooling for large multimodal model detectors."""

__version__ = "0.1.0"

from .detmodel import (
    BBox,
    CategorySet,
    Detection,
    DetectionDataset,
    GroundTruthAnnotation,
    ImageRecord,
    ScoredAnnotation,
    dataset_stats,
    load_coco_json,
    validate,
)
from .evaluator import EvalConfig, EvalResult, evaluate
from .geom import greedy_match, iou, nms
from .tokencodec import TokenCodecConfig, encode_answer, parse_answer

__all__ = [
    "BBox",
    "CategorySet",
    "Detection",
    "DetectionDataset",
    "EvalConfig",
    "EvalResult",
    "GroundTruthAnnotation",
    "ImageRecord",
    "ScoredAnnotation",
    "TokenCodecConfig",
    "dataset_stats",
    "encode_answer",
    "evaluate",
    "greedy_match",
    "iou",
    "load_coco_json",
    "nms",
    "parse_answer",
    "validate",
]
