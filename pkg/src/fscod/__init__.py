"""Cooperative object detection on shared BEV feature maps."""

from .config import ConfigError, ExperimentConfig, load_config
from .evaluate import Detection, DetectionGrid, decode, iou, match_detections, nms
from .geometry import BevGrid, BevImage, FeatureMap, project_bev, rotate_to_global, translate_featuremap
from .pipeline import FsCodModel, PipelineConfig, Trainer, TrainingSample, detection_loss, fuse
from .sim import SceneParams, generate_scene, simulate_lidar
from .transport import FeatureMessage, decode as decode_message, encode as encode_message
from .types import LidarSpec, OrientedBox, Pose, Scene, VehicleBox

__version__ = "0.1.0"
