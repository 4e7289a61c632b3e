"""Dual-branch concept-aligned MIL pretraining on precomputed patch embeddings."""

from .conceptbranch import TopKConfig, perturbed_topk
from .conceptprior import ConceptPrior, ConceptSet, PatchFeatureBag, compute_prior, validate_concept_set
from .diffcore import Tensor
from .evalkit import EvalProtocol, roc_auc, train_probe, zero_shot_predict
from .model import DualMIL, ModelConfig
from .pretrainer import ContrastiveConfig, train

__version__ = "0.1.0"
