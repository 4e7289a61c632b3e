"""Attention-MIL deep-encoding branch.

Patch features go through a two-layer MLP projector, a gated attention head
scores every patch, and the softmax-normalized scores pool the projected
patches into one slide-level embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class GatedAttention:
    """Gated attention scorer: ``w . (tanh(V x) * sigmoid(U x)) + b`` per row."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, prefix: str = "attn"):
        self.V = dc.xavier_uniform(rng, in_dim, hidden, f"{prefix}.V")
        self.V_b = dc.zeros_param(hidden, name=f"{prefix}.V_b")
        self.U = dc.xavier_uniform(rng, in_dim, hidden, f"{prefix}.U")
        self.U_b = dc.zeros_param(hidden, name=f"{prefix}.U_b")
        self.w = dc.xavier_uniform(rng, hidden, 1, f"{prefix}.w")
        self.w_b = dc.zeros_param(1, name=f"{prefix}.w_b")

    def parameters(self) -> list[Tensor]:
        return [self.V, self.V_b, self.U, self.U_b, self.w, self.w_b]

    def __call__(self, x: Tensor) -> Tensor:
        gate = dc.tanh(dc.linear(x, self.V, self.V_b)) * dc.sigmoid(dc.linear(x, self.U, self.U_b))
        logits = dc.linear(gate, self.w, self.w_b)
        return logits.reshape(x.shape[0])


@dataclass
class DeepEncoding:
    f_tilde: Tensor  # (N, H)
    alpha: Tensor  # (N,)
    F_wsi: Tensor  # (H,)


class DeepBranch:
    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 512, attn_hidden: int | None = None):
        self.in_dim = in_dim
        self.hidden = hidden
        self.W1 = dc.xavier_uniform(rng, in_dim, hidden, "deep.W1")
        self.b1 = dc.zeros_param(hidden, name="deep.b1")
        self.W2 = dc.xavier_uniform(rng, hidden, hidden, "deep.W2")
        self.b2 = dc.zeros_param(hidden, name="deep.b2")
        self.attention = GatedAttention(hidden, attn_hidden or hidden, rng, prefix="deep.attn")

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2, *self.attention.parameters()]

    def project(self, features) -> Tensor:
        x = dc.as_tensor(features)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise dc.DimensionError(f"projector expects (N, {self.in_dim}) input, got {x.shape}")
        return dc.linear(dc.relu(dc.linear(x, self.W1, self.b1)), self.W2, self.b2)

    def attention_logits(self, f_tilde: Tensor) -> Tensor:
        return self.attention(f_tilde)

    def patch_attention(self, f_tilde: Tensor) -> Tensor:
        return dc.softmax(self.attention_logits(f_tilde), axis=0)

    def __call__(self, features) -> DeepEncoding:
        f_tilde = self.project(features)
        alpha = self.patch_attention(f_tilde)
        return DeepEncoding(f_tilde, alpha, attention_pool(f_tilde, alpha))


def attention_pool(f_tilde, alpha) -> Tensor:
    """Convex combination of the rows of ``f_tilde`` with weights ``alpha``."""
    f_tilde, alpha = dc.as_tensor(f_tilde), dc.as_tensor(alpha)
    if alpha.ndim != 1 or alpha.shape[0] != f_tilde.shape[0]:
        raise dc.DimensionError(f"attention_pool: {alpha.shape} weights for {f_tilde.shape} rows")
    if abs(float(alpha.data.sum()) - 1.0) > 1e-6:
        raise dc.ContractError(f"attention weights sum to {alpha.data.sum():.8g}, expected 1")
    pooled = dc.matmul(alpha.reshape(1, alpha.shape[0]), f_tilde)
    return pooled.reshape(f_tilde.shape[1])
