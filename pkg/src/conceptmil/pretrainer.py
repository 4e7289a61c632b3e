"""Symmetric contrastive pretraining of the dual-branch model."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .model import DualMIL

logger = logging.getLogger(__name__)


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    r_keep: float = 0.7
    batch_size: int = 64
    epochs: int = 50
    lr_peak: float = 1e-4
    lr_floor: float = 1e-8
    warmup_epochs: int = 5
    seed: int = 0
    drop_last: bool = True

    def __post_init__(self):
        if not 0 < self.r_keep <= 1:
            raise ValueError(f"r_keep must lie in (0, 1], got {self.r_keep}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lr_floor > self.lr_peak:
            raise ValueError("lr_floor must not exceed lr_peak")

    def to_dict(self) -> dict:
        return asdict(self)


def n_dropped(batch_size: int, r_keep: float) -> int:
    """Negatives removed per anchor: floor((1 - r_keep) * (B - 1))."""
    # tolerance guards products such as 0.3 * 10 landing just below an integer
    return int(math.floor((1.0 - r_keep) * (batch_size - 1) + 1e-9))


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with dc.no_grad():
        return dc.cosine_matrix(Tensor(a), Tensor(b)).data


def false_negative_mask(a, b, r_keep: float) -> np.ndarray:
    """Boolean ``(B, B)`` keep mask dropping each anchor's most similar negatives.

    Negatives are ranked by the cross-modal cosine ``sim(a_i, b_j)``; ties are
    broken toward the lower index.  The diagonal is always kept.
    """
    if not 0 < r_keep <= 1:
        raise ValueError(f"r_keep must lie in (0, 1], got {r_keep}")
    sim = _cosine(dc.as_tensor(a).data, dc.as_tensor(b).data)
    B = sim.shape[0]
    keep = np.ones((B, B), dtype=bool)
    drop = n_dropped(B, r_keep)
    if drop == 0:
        return keep
    masked = sim.copy()
    np.fill_diagonal(masked, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :drop]
    keep[np.arange(B)[:, None], order] = False
    return keep


def clip_loss(a, b, tau: float, keep_mask: np.ndarray | None = None) -> Tensor:
    """One-directional InfoNCE over cosine similarities, anchors are rows of ``a``."""
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise dc.DimensionError(f"clip_loss: shapes {a.shape} and {b.shape}")
    B = a.shape[0]
    if B < 2:
        raise dc.ContractError("clip_loss needs a batch of at least 2")
    if tau <= 0:
        raise dc.ContractError("temperature must be positive")
    if keep_mask is not None:
        keep_mask = np.asarray(keep_mask, dtype=bool).copy()
        np.fill_diagonal(keep_mask, True)
    logits = dc.scale(dc.cosine_matrix(a, b), 1.0 / tau)
    logp = dc.log_softmax(logits, axis=1, mask=keep_mask)
    diag = logp[np.arange(B), np.arange(B)]
    return dc.scale(dc.mean(diag), -1.0)


def symmetric_loss(a, b, cfg: ContrastiveConfig) -> Tensor:
    """Mean of both directions, each with its own false-negative mask."""
    mask_ab = false_negative_mask(a, b, cfg.r_keep)
    mask_ba = false_negative_mask(b, a, cfg.r_keep)
    return dc.scale(clip_loss(a, b, cfg.tau, mask_ab) + clip_loss(b, a, cfg.tau, mask_ba), 0.5)


def total_loss(F_proj, M_wsi, cfg: ContrastiveConfig) -> Tensor:
    """Deep/concept alignment loss; ``F_proj`` is already projected to C dimensions."""
    return symmetric_loss(F_proj, M_wsi, cfg)


def kway_total_loss(F_proj, M_wsi, G_proj, cfg: ContrastiveConfig, F_wsi=None, G=None) -> Tensor:
    """Average of the three pairwise symmetric losses when an auxiliary modality exists.

    deep<->concept and aux<->concept use the C-dimensional projections;
    deep<->aux compares the unprojected embeddings ``F_wsi`` and ``G``.
    """
    if G_proj is None or G is None or F_wsi is None:
        raise dc.ContractError("auxiliary modality missing; use total_loss for the two-branch objective")
    losses = [
        symmetric_loss(F_proj, M_wsi, cfg),
        symmetric_loss(G_proj, M_wsi, cfg),
        symmetric_loss(F_wsi, G, cfg),
    ]
    return dc.scale(losses[0] + losses[1] + losses[2], 1.0 / 3.0)


def lr_at(step: int, steps_per_epoch: int, cfg: ContrastiveConfig) -> float:
    """Linear warmup floor->peak, then cosine decay back to the floor."""
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    span = cfg.lr_peak - cfg.lr_floor
    if step < warm:
        return cfg.lr_floor + span * step / warm
    if total <= warm:
        return cfg.lr_peak
    progress = min(1.0, (step - warm) / (total - warm))
    return cfg.lr_floor + span * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainingSlide:
    slide_id: str
    features: np.ndarray
    prior: np.ndarray
    aux: np.ndarray | None = None


@dataclass
class TrainResult:
    model: DualMIL
    epoch_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def batch_loss(model: DualMIL, batch: Sequence[TrainingSlide], cfg: ContrastiveConfig,
               rng: np.random.Generator, use_aux: bool = False, differentiable_topk: bool = True) -> Tensor:
    encs = [model.encode(s.features, s.prior, mode="train", rng=rng, slide_id=s.slide_id,
                         differentiable_topk=differentiable_topk) for s in batch]
    F = dc.stack([e.F_wsi for e in encs])
    M = dc.stack([e.M_wsi for e in encs])
    F_proj = model.project(F)
    if not use_aux:
        return total_loss(F_proj, M, cfg)
    if model.aux is None:
        raise dc.ContractError("model has no auxiliary encoder")
    missing = [s.slide_id for s in batch if s.aux is None]
    if missing:
        raise dc.ContractError(f"slides without auxiliary data: {missing[:5]}")
    G = model.aux(np.stack([s.aux for s in batch]))
    return kway_total_loss(F_proj, M, model.project_aux(G), cfg, F_wsi=F, G=G)


def train(slides: Sequence[TrainingSlide], model: DualMIL, cfg: ContrastiveConfig,
          use_aux: bool = False) -> TrainResult:
    """Adam pretraining with seeded shuffling; returns the per-epoch mean loss."""
    n = len(slides)
    if n < cfg.batch_size:
        raise ValueError(f"dataset of {n} slides is smaller than batch size {cfg.batch_size}")
    if cfg.drop_last:
        steps_per_epoch = n // cfg.batch_size
    else:
        steps_per_epoch = math.ceil(n / cfg.batch_size)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    noise_rng = np.random.default_rng([cfg.seed, 1])
    opt = dc.Adam(model.parameters())
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [slides[i] for i in idx]
            loss = batch_loss(model, batch, cfg, noise_rng, use_aux=use_aux)
            value = float(loss.data)
            if not math.isfinite(value):
                raise dc.NumericError(f"non-finite loss at epoch {epoch} step {b}: {value}")
            opt.zero_grad()
            loss.backward()
            lr = lr_at(step, steps_per_epoch, cfg)
            opt.step(lr)
            result.lrs.append(lr)
            losses.append(value)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        logger.info("epoch %d mean loss %.5f", epoch + 1, result.epoch_losses[-1])
    return result
