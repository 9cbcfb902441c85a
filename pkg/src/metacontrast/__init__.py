"""Two-view contrastive video representation learning with a meta-learned pairing branch."""

from .autodiff import Node, ParamSet, backward, numeric_grad, sgd_step
from .checkpoint import load_params, save_params
from .contrastive import ContrastiveConfig, FeatureBank, nce_loss, score, select_negatives
from .encoder import EncoderConfig, encode, init_encoder
from .evaluation import EvalReport, evaluate_split, extract_features, linear_probe, retrieval_topk
from .meta_branch import bce_loss, classify, fcm_pairs, init_head
from .seeding import derive_seed, rng_for
from .synth import (Clip, CorpusSplit, ViewPair, augment, generate_corpus, load_corpus,
                    make_view_pair, residual_view, save_corpus, split_support_query)
from .trainer import (RunRecord, TrainConfig, baseline_train, compute_branch_losses,
                      inner_update, meta_loss, meta_update, train)

__version__ = "0.1.0"

__all__ = [
    "Clip",
    "ContrastiveConfig",
    "CorpusSplit",
    "EncoderConfig",
    "EvalReport",
    "FeatureBank",
    "Node",
    "ParamSet",
    "RunRecord",
    "TrainConfig",
    "ViewPair",
    "augment",
    "backward",
    "baseline_train",
    "bce_loss",
    "classify",
    "compute_branch_losses",
    "derive_seed",
    "encode",
    "evaluate_split",
    "extract_features",
    "fcm_pairs",
    "generate_corpus",
    "init_encoder",
    "init_head",
    "inner_update",
    "linear_probe",
    "load_corpus",
    "load_params",
    "make_view_pair",
    "meta_loss",
    "meta_update",
    "nce_loss",
    "numeric_grad",
    "residual_view",
    "retrieval_topk",
    "rng_for",
    "save_corpus",
    "save_params",
    "score",
    "select_negatives",
    "sgd_step",
    "split_support_query",
    "train",
    "__version__",
]
