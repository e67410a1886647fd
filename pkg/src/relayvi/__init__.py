"""Encoderless variational inference with shared latent relays.

Per-datapoint Gaussian posteriors are optimized directly by gradient
ascent on the evidence lower bound; their means decompose into sparse
combinations of shared relay vectors plus private residuals, so
gradients propagate between datapoints instead of staying mean-field.
Includes autodecoding (VAD) and amortized (VAE) baselines and a
benchmark harness for convergence, missing-data, imputation and
representation-quality experiments.
"""

from .data import MaskedDataset, MissingSpec, apply_missing, gen_artificial, load_idx, subsample
from .models import EncoderHead, Mlp, build_decoder, build_encoder, decode, encode
from .objective import ElboBreakdown, elastic_metric, elbo, imputation_loss, kl_diag_gaussian, masked_recon_loglik
from .optimize import Adam, RowAdam, TrainConfig, generate, infer_test, train_rvi, train_vad, train_vae
from .posterior import PosteriorBank, RelayGroup, extend_bank, init_bank, posterior_params, relay_mean, reparam_sample
from .records import RunRecord
from .tensor import Tensor, backward, elementwise, gather_rows, matmul, reduce

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ElboBreakdown",
    "EncoderHead",
    "MaskedDataset",
    "MissingSpec",
    "Mlp",
    "PosteriorBank",
    "RelayGroup",
    "RowAdam",
    "RunRecord",
    "Tensor",
    "TrainConfig",
    "apply_missing",
    "backward",
    "build_decoder",
    "build_encoder",
    "decode",
    "elastic_metric",
    "elbo",
    "elementwise",
    "encode",
    "extend_bank",
    "gather_rows",
    "gen_artificial",
    "generate",
    "imputation_loss",
    "infer_test",
    "init_bank",
    "kl_diag_gaussian",
    "load_idx",
    "masked_recon_loglik",
    "matmul",
    "posterior_params",
    "reduce",
    "relay_mean",
    "reparam_sample",
    "subsample",
    "train_rvi",
    "train_vad",
    "train_vae",
]
