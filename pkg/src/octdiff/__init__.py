"""Unsupervised diffusion-based speckle denoising for tomographic b-scans.

The pieces, in pipeline order: `data` synthesizes or ingests volumes,
`fusion` builds high-SNR training references from neighboring slices,
`diffusion` holds the closed-form chain math, `model`/`training` fit the
noise regressor, `sampling` runs the adjustable partial reverse chain, and
`metrics` scores the results.  `cli` wires them together.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    PhantomSpec,
    Volume,
    average_repeats,
    load_image,
    load_volume,
    make_phantom,
    make_phantom_volume,
    normalize,
    pad_to_square,
    phantom_rois,
    save_image,
    save_volume,
)
from .diffusion import (
    VarianceSchedule,
    elbo_terms,
    kl_gaussian,
    make_linear_schedule,
    predict_mu_from_eps,
    predict_x0_from_eps,
    q_mean_variance,
    q_posterior,
    q_sample,
    q_sample_step,
)
from .fusion import FusionConfig, fuse, fuse_volume, register, similarity_weight
from .metrics import MetricsReport, Rect, ROISet, cnr, enl, evaluate_pair, paired_t_test, psnr, snr
from .model import EpsilonPredictor, NetworkConfig, time_embedding
from .sampling import denoise, p_sample_step, sweep_t
from .training import TrainConfig, TrainResult, lr_schedule, train, training_step

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EpsilonPredictor",
    "FusionConfig",
    "MetricsReport",
    "NetworkConfig",
    "PhantomSpec",
    "Rect",
    "ROISet",
    "TrainConfig",
    "TrainResult",
    "VarianceSchedule",
    "Volume",
    "average_repeats",
    "cnr",
    "denoise",
    "elbo_terms",
    "enl",
    "evaluate_pair",
    "fuse",
    "fuse_volume",
    "kl_gaussian",
    "load_checkpoint",
    "load_image",
    "load_volume",
    "lr_schedule",
    "make_linear_schedule",
    "make_phantom",
    "make_phantom_volume",
    "normalize",
    "p_sample_step",
    "pad_to_square",
    "paired_t_test",
    "phantom_rois",
    "predict_mu_from_eps",
    "predict_x0_from_eps",
    "psnr",
    "q_mean_variance",
    "q_posterior",
    "q_sample",
    "q_sample_step",
    "register",
    "save_checkpoint",
    "save_image",
    "save_volume",
    "similarity_weight",
    "snr",
    "sweep_t",
    "time_embedding",
    "train",
    "training_step",
]
