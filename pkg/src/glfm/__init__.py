"""Point-cloud anomaly detection with clustered global/local feature memory banks.

Training clouds are summarised by pooled global features, grouped with
k-means, and each group keeps a coreset of its local patch features.  A test
cloud is routed to the nearest group and scored patch by patch against that
group's bank only.
"""
from glfm.adaptation import SegHead, TrainConfig, predict_patch_probs, train_seg_head
from glfm.bank import GlfmModel, build_model, load_model, save_model
from glfm.cloud import PointCloud, read_cloud, write_cloud
from glfm.detection import AnomalyResult, detect
from glfm.features import ExtractorConfig, FeatureSet, extract_local_features
from glfm.metrics import EvalReport, aupro, auroc, evaluate
from glfm.rng import SeededRng
from glfm.synthesis import SynthesisConfig, synthesize_anomaly

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult", "EvalReport", "ExtractorConfig", "FeatureSet", "GlfmModel", "PointCloud",
    "SeededRng", "SegHead", "SynthesisConfig", "TrainConfig", "aupro", "auroc", "build_model",
    "detect", "evaluate", "extract_local_features", "load_model", "predict_patch_probs",
    "read_cloud", "save_model", "synthesize_anomaly", "train_seg_head", "write_cloud",
]
