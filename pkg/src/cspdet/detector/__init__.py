"""Two-stage detection and instance-mask heads."""
from .model import FeatureConfig, HeadConfig, InstanceSegmenter, ModelConfig
from .postprocess import Detection

__all__ = ["FeatureConfig", "HeadConfig", "InstanceSegmenter", "ModelConfig", "Detection"]
