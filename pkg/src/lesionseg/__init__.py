"""Multi-stage, multi-target lesion segmentation for multi-phase 3-D scans."""

from .augment import AugmentPolicy, augment, intensity_augment, spatial_augment
from .blocks import BlockConfig, ConvNext3d, DownConvNext3d, OutputHead, Stem
from .config import PipelineConfig
from .errors import ConfigError, DependencyError, NumericalError
from .ffa import AxialCoarseAttention, CoarseFineFFA, FFAConfig, GatedFineAttention
from .flagger import (FlaggerConfig, FlaggerNet, Heatmap, ScaleMap, apply_heatmap,
                      compose_heatmap, flag_targets)
from .fusion import (FusionModelConfig, FusionNet, LesionInstance, crop_with_margin,
                     extract_lesions, form_fusion_input, refine_lesions, refiner_config)
from .losses import LossConfig, bce_loss, compound_loss, dice_coeff, dice_loss
from .metrics import (DetectionCurve, EvalReport, SubjectScores, detection_curve,
                      evaluate_cases, global_dice, localization_error, subject_scores,
                      surface_dice, threshold_buckets)
from .phantom import PhantomSpec, generate_case, generate_dataset
from .pipeline import NetworkBundle, PipelineOutputs, prepare_case, run_pipeline
from .segmenter import SegModelConfig, SegmenterNet, sliding_window_infer
from .train import TrainConfig, load_checkpoint, save_checkpoint, seed_everything
from .volume import (PHASE_ORDER, MultiPhaseCase, PatchSample, PhaseVolume,
                     clip_normalize, extract_patch, resample_isotropic,
                     weighted_sample_origins)

__version__ = "0.1.0"
