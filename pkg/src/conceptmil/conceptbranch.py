"""Interpretable concept-encoding branch.

The K most attended patches are picked with a perturbed (Monte-Carlo smoothed)
Top-K operator, the prior is truncated to them, a small MLP-Mixer plus gated
attention head produces one sigmoid weight per concept, and the truncated prior
is rescaled column-wise by those weights and averaged over the K rows.  The
rescaling is the only place the learned weights touch the prior, so every entry
of the slide-level concept embedding remains a weighted concept activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .deepbranch import GatedAttention
from .diffcore import Tensor


@dataclass
class TopKConfig:
    k: int = 10
    sigma: float = 0.05
    n_samples: int = 100
    hard_eval: bool = True
    antithetic: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def hard_topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores in rank order; ties go to the lower index."""
    scores = np.asarray(scores)
    if k > scores.shape[-1]:
        raise dc.ContractError(f"cannot select top {k} of {scores.shape[-1]} entries")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def hard_topk(alpha, k: int) -> Tensor:
    """One-hot ``(k, N)`` selection rows for the exact Top-K; carries no gradient."""
    a = dc.as_tensor(alpha).data
    idx = hard_topk_indices(a, k)
    sel = np.zeros((k, a.shape[0]))
    sel[np.arange(k), idx] = 1.0
    return Tensor(sel)


def perturbed_topk(
    alpha,
    cfg: TopKConfig,
    rng: np.random.Generator | int | None = None,
    differentiable: bool = True,
) -> Tensor:
    """Expected rank-ordered Top-K one-hot rows under Gaussian score noise.

    Row ``r`` of the ``(k, N)`` output is the Monte-Carlo frequency with which
    each patch holds rank ``r`` after adding ``sigma * z`` to the scores.  The
    backward pass uses the perturbation estimator
    ``dE[Y]/dalpha = E[Y z^T] / sigma`` with the same noise draws.
    """
    alpha = dc.as_tensor(alpha)
    a = alpha.data
    if a.ndim != 1:
        raise dc.DimensionError(f"perturbed_topk expects a vector, got {a.shape}")
    n_items, k, n = a.shape[0], cfg.k, cfg.n_samples
    if k > n_items:
        raise dc.ContractError(f"K={k} exceeds the {n_items} available patches")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    if cfg.antithetic:
        half = rng.standard_normal(((n + 1) // 2, n_items))
        z = np.concatenate([half, -half])[:n]
    else:
        z = rng.standard_normal((n, n_items))
    idx = hard_topk_indices(a[None, :] + cfg.sigma * z, k)  # (n, k)

    counts = np.zeros((k, n_items))
    rows = np.broadcast_to(np.arange(k), idx.shape)
    np.add.at(counts, (rows, idx), 1.0)
    selection = counts / n

    def backward(g):
        picked = g[rows, idx].sum(axis=1)  # (n,)
        return (picked @ z / (n * cfg.sigma),)

    if not differentiable:
        return Tensor(selection)
    return dc.make_op(selection, (alpha,), backward, "perturbed_topk")


def truncate_prior(prior, selection) -> Tensor:
    """Soft row selection of the prior: ``selection @ prior``."""
    prior, selection = dc.as_tensor(prior), dc.as_tensor(selection)
    if selection.ndim != 2 or prior.ndim != 2 or selection.shape[1] != prior.shape[0]:
        raise dc.DimensionError(f"truncate_prior: selection {selection.shape} vs prior {prior.shape}")
    return dc.matmul(selection, prior)


class MixerLayer:
    """Token mixing across the concept rows, then channel mixing across the K slots."""

    def __init__(self, n_concepts: int, k: int, hidden: int, rng: np.random.Generator, prefix: str):
        self.ln1_w = dc.ones_param(k, name=f"{prefix}.ln1_w")
        self.ln1_b = dc.zeros_param(k, name=f"{prefix}.ln1_b")
        self.tok_W1 = dc.xavier_uniform(rng, n_concepts, hidden, f"{prefix}.tok_W1")
        self.tok_b1 = dc.zeros_param(hidden, name=f"{prefix}.tok_b1")
        self.tok_W2 = dc.xavier_uniform(rng, hidden, n_concepts, f"{prefix}.tok_W2")
        self.tok_b2 = dc.zeros_param(n_concepts, name=f"{prefix}.tok_b2")
        self.ln2_w = dc.ones_param(k, name=f"{prefix}.ln2_w")
        self.ln2_b = dc.zeros_param(k, name=f"{prefix}.ln2_b")
        self.ch_W1 = dc.xavier_uniform(rng, k, hidden, f"{prefix}.ch_W1")
        self.ch_b1 = dc.zeros_param(hidden, name=f"{prefix}.ch_b1")
        self.ch_W2 = dc.xavier_uniform(rng, hidden, k, f"{prefix}.ch_W2")
        self.ch_b2 = dc.zeros_param(k, name=f"{prefix}.ch_b2")

    def parameters(self) -> list[Tensor]:
        return [
            self.ln1_w, self.ln1_b, self.tok_W1, self.tok_b1, self.tok_W2, self.tok_b2,
            self.ln2_w, self.ln2_b, self.ch_W1, self.ch_b1, self.ch_W2, self.ch_b2,
        ]

    def __call__(self, x: Tensor) -> Tensor:
        # x: (C, K)
        y = dc.layer_norm(x, self.ln1_w, self.ln1_b).T  # (K, C)
        y = dc.linear(dc.gelu(dc.linear(y, self.tok_W1, self.tok_b1)), self.tok_W2, self.tok_b2)
        x = x + y.T
        y = dc.layer_norm(x, self.ln2_w, self.ln2_b)
        y = dc.linear(dc.gelu(dc.linear(y, self.ch_W1, self.ch_b1)), self.ch_W2, self.ch_b2)
        return x + y


class ConceptAttention:
    """MLP-Mixer over the transposed truncated prior followed by a sigmoid-gated scorer."""

    def __init__(self, n_concepts: int, k: int, rng: np.random.Generator,
                 n_layers: int = 4, mixer_hidden: int = 64, gate_hidden: int = 64):
        self.n_concepts, self.k = n_concepts, k
        self.layers = [MixerLayer(n_concepts, k, mixer_hidden, rng, f"concept.mixer{i}") for i in range(n_layers)]
        self.gate = GatedAttention(k, gate_hidden, rng, prefix="concept.gate")

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out + self.gate.parameters()

    def __call__(self, m_trunc) -> Tensor:
        m_trunc = dc.as_tensor(m_trunc)
        if m_trunc.shape != (self.k, self.n_concepts):
            raise dc.DimensionError(
                f"concept attention built for ({self.k}, {self.n_concepts}), got {m_trunc.shape}"
            )
        x = m_trunc.T
        for layer in self.layers:
            x = layer(x)
        return dc.sigmoid(self.gate(x))


def scale_and_pool(m_trunc, beta) -> tuple[Tensor, Tensor]:
    """Rescale each concept column by its weight, then average over the K rows."""
    m_trunc, beta = dc.as_tensor(m_trunc), dc.as_tensor(beta)
    if beta.ndim != 1 or m_trunc.ndim != 2 or beta.shape[0] != m_trunc.shape[1]:
        raise dc.DimensionError(f"scale_and_pool: weights {beta.shape} for columns of {m_trunc.shape}")
    m_hat = m_trunc * beta
    return m_hat, dc.mean(m_hat, axis=0)


@dataclass
class ConceptEncoding:
    selection: Tensor  # (K, N)
    M_trunc: Tensor  # (K, C)
    beta: Tensor  # (C,)
    M_hat: Tensor  # (K, C)
    M_wsi: Tensor  # (C,)
    selected: np.ndarray | None = None  # hard-mode patch indices, rank order


class ConceptBranch:
    def __init__(self, n_concepts: int, topk: TopKConfig, rng: np.random.Generator,
                 n_layers: int = 4, mixer_hidden: int = 64, gate_hidden: int = 64):
        self.n_concepts = n_concepts
        self.topk = topk
        self.attention = ConceptAttention(n_concepts, topk.k, rng, n_layers, mixer_hidden, gate_hidden)

    def parameters(self) -> list[Tensor]:
        return self.attention.parameters()

    def __call__(self, prior, alpha, mode: str = "train", rng=None, differentiable_topk: bool = True) -> ConceptEncoding:
        return encode_concepts(prior, alpha, self, self.topk, mode, rng, differentiable_topk)


def encode_concepts(prior, alpha, branch: ConceptBranch, cfg: TopKConfig, mode: str = "train",
                    rng=None, differentiable_topk: bool = True) -> ConceptEncoding:
    prior, alpha = dc.as_tensor(prior), dc.as_tensor(alpha)
    if prior.shape[0] != alpha.shape[0]:
        raise dc.DimensionError(f"prior has {prior.shape[0]} rows but alpha has {alpha.shape[0]} entries")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    selected = None
    if mode == "eval" and cfg.hard_eval:
        selected = hard_topk_indices(alpha.data, cfg.k)
        selection = hard_topk(alpha, cfg.k)
    else:
        selection = perturbed_topk(alpha, cfg, rng, differentiable=differentiable_topk)
    m_trunc = truncate_prior(prior, selection)
    beta = branch.attention(m_trunc)
    m_hat, m_wsi = scale_and_pool(m_trunc, beta)
    return ConceptEncoding(selection, m_trunc, beta, m_hat, m_wsi, selected)


class AbmilConceptBranch:
    """Ablation variant: projector-free gated-attention pooling over all prior rows.

    No Top-K and no per-concept weights; the slide embedding is a convex
    combination of prior rows with its own softmax attention.
    """

    def __init__(self, n_concepts: int, rng: np.random.Generator, gate_hidden: int = 64, k: int = 10):
        self.n_concepts = n_concepts
        self.k = k
        self.gate = GatedAttention(n_concepts, gate_hidden, rng, prefix="concept.abmil")

    def parameters(self) -> list[Tensor]:
        return self.gate.parameters()

    def __call__(self, prior, alpha=None, mode: str = "train", rng=None, differentiable_topk: bool = True) -> ConceptEncoding:
        prior = dc.as_tensor(prior)
        if prior.ndim != 2 or prior.shape[1] != self.n_concepts:
            raise dc.DimensionError(f"expected (N, {self.n_concepts}) prior, got {prior.shape}")
        gamma = dc.softmax(self.gate(prior), axis=0)
        m_wsi = dc.matmul(gamma.reshape(1, prior.shape[0]), prior).reshape(self.n_concepts)
        ones = Tensor(np.ones(self.n_concepts))
        k = min(self.k, prior.shape[0])
        selected = hard_topk_indices(gamma.data, k)
        return ConceptEncoding(gamma.reshape(1, prior.shape[0]), prior, ones, prior, m_wsi, selected)
