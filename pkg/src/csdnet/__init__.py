"""Cross-modal saliency detection from depth and thermal images.

CFAR-prescreened dual MobileNetV2 encoders, a soft-logic deep fusion
block, a deep-supervised decoder, embedding-guided encoder pre-training and
the standard SOD metric suite.
"""

from .cfar import (BorderPolicy, CfarConfig, Polarity, background_maps, cfar_detect, cross_prescreen,
                   finite_sample_pfa, local_background_stats, pfa_from_threshold, threshold_from_pfa)
from .checkpoint import load_checkpoint, load_model_state, save_checkpoint
from .data import (DatasetLayout, ObjectSpec, Sample, SceneSpec, load_vdt_sample, make_split, random_scene,
                   synth_sample, synthetic_dataset, write_png, write_sample)
from .decoder import Decoder, DecoderOutputs
from .encoder import Encoder, EncoderConfig, FeaturePyramid, count_parameters
from .errors import (ConfigError, CSDNetError, DataError, DegenerateAttentionError, DegenerateWindowError,
                     DomainError, EmbeddingFormatError, EmbeddingIOError, NumericError, UndefinedMetricError,
                     WeightLoadError)
from .ican import ICAN, SoftLogicResult, soft_logic
from .losses import TransferCriterion, TransferWeights, ioubce, sod_loss
from .metrics import MetricReport, e_measure, evaluate, f_measure, mae, s_measure, weighted_f
from .model import CSDNet, ModelConfig
from .samaep import PretrainConfig, SamEmbedding, load_sam_embedding, pretrain_depth_encoder, save_sam_embedding
from .training import OptimConfig, Trainer, cost_report, predict

__version__ = "0.1.0"
