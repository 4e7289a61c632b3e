"""The dual-branch MIL model: deep branch, concept branch, projection heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .conceptbranch import AbmilConceptBranch, ConceptBranch, TopKConfig
from .deepbranch import DeepBranch
from .diffcore import Tensor

VARIANTS = ("gecko", "dual_abmil")


@dataclass
class ModelConfig:
    in_dim: int
    n_concepts: int
    hidden: int = 512
    attn_hidden: int = 512
    k: int = 10
    sigma: float = 0.05
    n_samples: int = 100
    mixer_layers: int = 4
    mixer_hidden: int = 64
    gate_hidden: int = 64
    variant: str = "gecko"
    aux_dim: int | None = None
    aux_hidden: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def topk(self) -> TopKConfig:
        return TopKConfig(k=self.k, sigma=self.sigma, n_samples=self.n_samples)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AuxEncoder:
    """Two-layer MLP for an auxiliary per-case vector (e.g. gene expression)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.W1 = dc.xavier_uniform(rng, in_dim, hidden, "aux.W1")
        self.b1 = dc.zeros_param(hidden, name="aux.b1")
        self.W2 = dc.xavier_uniform(rng, hidden, out_dim, "aux.W2")
        self.b2 = dc.zeros_param(out_dim, name="aux.b2")

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise dc.DimensionError(f"aux encoder expects dim {self.in_dim}, got {x.shape}")
        return dc.linear(dc.relu(dc.linear(x, self.W1, self.b1)), self.W2, self.b2)


@dataclass
class SlideEncoding:
    slide_id: str
    F_wsi: Tensor
    M_wsi: Tensor
    alpha: Tensor
    beta: Tensor
    selected: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


class DualMIL:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.deep = DeepBranch(config.in_dim, rng, config.hidden, config.attn_hidden)
        if config.variant == "gecko":
            self.concept = ConceptBranch(config.n_concepts, config.topk(), rng,
                                         config.mixer_layers, config.mixer_hidden, config.gate_hidden)
        else:
            self.concept = AbmilConceptBranch(config.n_concepts, rng, config.gate_hidden, config.k)
        self.head_W = dc.xavier_uniform(rng, config.hidden, config.n_concepts, "head.W")
        self.head_b = dc.zeros_param(config.n_concepts, name="head.b")
        self.aux = None
        if config.aux_dim:
            self.aux = AuxEncoder(config.aux_dim, config.aux_hidden, config.hidden, rng)
            self.aux_head_W = dc.xavier_uniform(rng, config.hidden, config.n_concepts, "aux_head.W")
            self.aux_head_b = dc.zeros_param(config.n_concepts, name="aux_head.b")

    def parameters(self) -> list[Tensor]:
        params = [*self.deep.parameters(), *self.concept.parameters(), self.head_W, self.head_b]
        if self.aux is not None:
            params += [*self.aux.parameters(), self.aux_head_W, self.aux_head_b]
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            named[p.name] = p
        return named

    def project(self, F_wsi) -> Tensor:
        """Linear map from deep-embedding width to concept count (works on rows)."""
        return dc.linear(F_wsi, self.head_W, self.head_b)

    def project_aux(self, g) -> Tensor:
        return dc.linear(g, self.aux_head_W, self.aux_head_b)

    def encode(self, features, prior, mode: str = "train", rng=None, slide_id: str = "",
               differentiable_topk: bool = True) -> SlideEncoding:
        deep = self.deep(features)
        prior = dc.as_tensor(prior)
        if prior.shape != (deep.alpha.shape[0], self.config.n_concepts):
            raise dc.DimensionError(
                f"slide {slide_id!r}: prior shape {prior.shape} does not match "
                f"({deep.alpha.shape[0]}, {self.config.n_concepts})"
            )
        enc = self.concept(prior, deep.alpha, mode=mode, rng=rng, differentiable_topk=differentiable_topk)
        return SlideEncoding(slide_id, deep.F_wsi, enc.M_wsi, deep.alpha, enc.beta, enc.selected,
                             extras={"concept": enc, "deep": deep})
