"""Desk-scale masked autoregressive image generation over continuous tokens,
with a per-token diffusion sampling head and discrete/L2 baselines.
"""

from .backbone import AttentionCache, Backbone, TransformerConfig, classifier_free_dropout
from .data import (SyntheticImageSpec, TokenGrid, TokenStats, destandardize,
                   detokenize, generate_dataset, pixel_tokenize, standardize)
from .denoiser import DenoiserMLP, sinusoidal_features
from .diffusion import (NoiseSchedule, SamplerConfig, build_cosine_schedule,
                        cfg_combine, diffusion_loss, p_sample_step, q_sample,
                        resample_schedule, sample_token, schedule_to_csv)
from .metrics import (FeatureScaler, GaussianStats, desk_frechet, diversity,
                      energy_distance, frechet_gaussian, speed_accuracy_sweep)
from .models import (Codebook, CrossEntropyHead, DiffusionHead, GeneratorVariant,
                     L2Head, MaskPlan, ModelConfig, SequenceModel, ce_sample,
                     cosine_mask_schedule, kmeans_codebook, l2_sample,
                     make_mask_plan, make_order, sample_masking_ratio, train_step)
from .optim import (ParamStore, adamw_step, ema_update, grad_check,
                    load_entries, save_entries)
from .pipeline import (DataBundle, RunConfig, build_data, build_model,
                       generate_images, load_checkpoint_into, train_model)
from .rng import Rng
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
