"""Parameter-efficient vision-language tuning for referring segmentation and grasping.

A frozen dual encoder is steered by small vision-language adapters; a
multimodal decoder and task heads produce referring masks (``res``), grasp
maps (``rgs``) or rotation-indexed grasp affordances (``rga``).
"""
from .adapter import AdapterConfig, VLAdapter, tunable_parameters
from .backbone import BackboneConfig, Tokenizer, assert_frozen, build_toy_backbone, snapshot
from .datasynth import SceneSpec, SceneSample, generate_dataset, generate_scene, load_dataset, save_dataset
from .decoder import DecoderConfig
from .errors import ConfigError, VLGraspError
from .grasp import GraspMaps, GraspRectangle, jacquard_at_n, recover_grasp, rect_iou
from .heads import HeadConfig
from .metrics import MetricsReport, mask_iou
from .model import GroundingModel, ModelConfig
from .trainer import Checkpoint, TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig", "VLAdapter", "tunable_parameters",
    "BackboneConfig", "Tokenizer", "assert_frozen", "build_toy_backbone", "snapshot",
    "SceneSpec", "SceneSample", "generate_dataset", "generate_scene", "load_dataset", "save_dataset",
    "DecoderConfig", "ConfigError", "VLGraspError",
    "GraspMaps", "GraspRectangle", "jacquard_at_n", "recover_grasp", "rect_iou",
    "HeadConfig", "MetricsReport", "mask_iou", "GroundingModel", "ModelConfig",
    "Checkpoint", "TrainConfig", "evaluate", "predict", "train",
]
