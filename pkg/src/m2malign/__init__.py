"""Multimodal fusion classifier with contrastive cross-modal alignment.

A small numpy-backed stack: a define-by-run gradient tape, patch-attention
volume encoders, latent-query fusion, the patch-to-patch contrastive
alignment loss, and the training/evaluation workflows the CLI exposes.
"""

from .alignment import M2MConfig, info_nce_loss, m2m_loss, recall_at_k, similarity_matrix
from .encoders import EncoderConfig, encode_tabular, encode_volume, latent_grid
from .metrics import MetricsReport, accuracy, pr_auc, roc_auc
from .model import ModelConfig, ModelOutput, forward, forward_subject, init_model_params
from .synthdata import SynthSpec, generate_dataset, load_dataset, save_dataset
from .tensor import GradientTape, Tensor
from .training import TrainConfig, cross_validate, fit_alignment, train_fold

__all__ = [
    "EncoderConfig",
    "GradientTape",
    "M2MConfig",
    "MetricsReport",
    "ModelConfig",
    "ModelOutput",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "accuracy",
    "cross_validate",
    "encode_tabular",
    "encode_volume",
    "fit_alignment",
    "forward",
    "forward_subject",
    "generate_dataset",
    "info_nce_loss",
    "init_model_params",
    "latent_grid",
    "load_dataset",
    "m2m_loss",
    "pr_auc",
    "recall_at_k",
    "roc_auc",
    "save_dataset",
    "similarity_matrix",
    "train_fold",
]
