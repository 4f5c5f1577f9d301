"""Dental age estimation from panoramic radiographs with truncated pretrained CNNs."""

from .augment import AugmentationConfig, AugmentationSample, apply, sample_params
from .backbones import BackboneSpec, FeatureExtractor, TruncationSpec, build_backbone, count_trainable_parameters, truncate_inception
from .dataset import DatasetSplit, ImageRecord, PreprocessSpec, load_and_preprocess, load_manifest, split_dataset
from .gradcam import HeatmapOverlay, grad_cam, render_overlay
from .metrics import MetricsReport, compute_mae, compute_mse, compute_r2, compute_rmse
from .regressor import RegressionModel, assemble, load_checkpoint, predict, save_checkpoint
from .trainer import TrainingConfig, TrainingState, should_stop, step_scheduler, train

__version__ = "0.1.0"
