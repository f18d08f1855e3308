"""Patient-specific radiomic fingerprints with diffusion-reconstructed healthy personas."""

from .volume import (Volume, VolumeFormatError, BoxMask, Subpatch, read_volume,
                     write_volume, resample_trilinear, partition_grid, central_mask,
                     apply_mask_zero)
from .dataset import VIEWS, TASKS, SubjectRecord, load_dataset
from .phantom import PhantomConfig, SyntheticSubject, gen_phantom, gen_cohort
from .features import (FEATURE_NAMES, FIRST_ORDER_NAMES, SHAPE_NAMES, SPATIAL_NAMES,
                       FeatureId, FeatureVector, StandardizerStats,
                       first_order_features, foreground_mask, shape_features,
                       patch_feature_vector, assemble_features, feature_vector_length,
                       fit_standardizer, standardize)
from .diffusion import (NoiseSchedule, DenoiserConfig, DiffusionTrainConfig,
                        DiffusionModel, make_schedule, forward_diffuse,
                        denoiser_forward, train_persona, inpaint, inpaint_batch,
                        residual, save_diffusion_model, load_diffusion_model)
from .ssim import ssim3d, mse
from .fingerprint import (UsageNetConfig, FingerprintTrainConfig, FingerprintModel,
                          FingerprintData, InterpretabilityReport, usage_forward,
                          predict_prob, hard_select, marginalize_exact, objective,
                          grad_objective, train_fingerprint, explain,
                          save_fingerprint_model, load_fingerprint_model)
from .metrics import (ScoredLabels, EvalReport, confusion_at, roc_auc,
                      youden_threshold, aggregate_runs)

__version__ = "0.1.0"
