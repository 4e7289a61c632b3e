"""Inference and evaluation: label-free prediction, linear probes, AUC, concept accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_softmax, softmax
from scipy.stats import rankdata

from . import diffcore as dc
from .conceptprior import ConceptSet
from .model import DualMIL, SlideEncoding


class UndefinedMetricError(ValueError):
    pass


# -- label-free prediction -------------------------------------------------------

def zero_shot_predict(m_wsi, concepts: ConceptSet, clamp: bool = True) -> np.ndarray:
    """Class probabilities proportional to the summed activation of each class's concepts.

    Accepts a single ``(C,)`` embedding or a ``(n, C)`` stack.  Activations are
    clamped at zero first unless ``clamp`` is False; a vanishing total falls
    back to the uniform distribution.
    """
    if not concepts.class_partition or any(len(v) == 0 for v in concepts.class_partition.values()):
        raise ValueError("concept partition is empty")
    m = np.asarray(getattr(m_wsi, "data", m_wsi), dtype=np.float64)
    single = m.ndim == 1
    m = np.atleast_2d(m)
    if clamp:
        m = np.maximum(m, 0.0)
    classes = sorted(concepts.class_partition)
    per_class = np.stack([m[:, concepts.class_partition[c]].sum(axis=1) for c in classes], axis=1)
    everything = np.concatenate([concepts.class_partition[c] for c in classes])
    denom = m[:, everything].sum(axis=1, keepdims=True)
    uniform = np.full_like(per_class, 1.0 / len(classes))
    degenerate = np.abs(denom) < 1e-12
    probs = np.where(degenerate, uniform, per_class / np.where(degenerate, 1.0, denom))
    return probs[0] if single else probs


# -- linear probing ----------------------------------------------------------------

@dataclass
class ProbeConfig:
    reg: float = 1.0  # strength of the 0.5 * ||w||^2 penalty
    max_iter: int = 10_000
    gtol: float = 1e-6


@dataclass
class ProbeModel:
    weights: np.ndarray  # (1, d) for binary, (L, d) otherwise
    bias: np.ndarray
    classes: np.ndarray
    trained: bool = True
    n_iter: int = 0

    @property
    def binary(self) -> bool:
        return len(self.classes) == 2

    def decision_function(self, X) -> np.ndarray:
        z = np.asarray(X, dtype=np.float64) @ self.weights.T + self.bias
        return z[:, 0] if self.binary else z

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        if self.binary:
            p1 = expit(z)
            return np.stack([1.0 - p1, p1], axis=1)
        return softmax(z, axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]


def _probe_objective(theta, X, Y, n_rows, reg, binary):
    d = X.shape[1]
    W = theta[: n_rows * d].reshape(n_rows, d)
    b = theta[n_rows * d:]
    Z = X @ W.T + b
    if binary:
        z = Z[:, 0]
        y = Y[:, 1]
        # log(1 + e^z) - y z, computed stably
        loss = np.sum(np.logaddexp(0.0, z) - y * z)
        dZ = (expit(z) - y)[:, None]
    else:
        logp = log_softmax(Z, axis=1)
        loss = -np.sum(Y * logp)
        dZ = np.exp(logp) - Y
    loss += 0.5 * reg * np.sum(W * W)
    gW = dZ.T @ X + reg * W
    gb = dZ.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def probe_loss(probe: ProbeModel, X, y, reg: float = 1.0) -> float:
    X = np.asarray(X, dtype=np.float64)
    Y = (np.asarray(y)[:, None] == probe.classes[None, :]).astype(np.float64)
    theta = np.concatenate([probe.weights.ravel(), probe.bias])
    return float(_probe_objective(theta, X, Y, probe.weights.shape[0], reg, probe.binary)[0])


def train_probe(X, y, config: ProbeConfig | None = None) -> ProbeModel:
    """L2-regularized logistic regression (binary or multinomial) fit with L-BFGS."""
    config = config or ProbeConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise dc.DimensionError(f"probe data {X.shape} does not match {y.shape[0]} labels")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("train_probe needs at least two classes in y")
    binary = len(classes) == 2
    n_rows = 1 if binary else len(classes)
    Y = (y[:, None] == classes[None, :]).astype(np.float64)
    theta0 = np.zeros(n_rows * X.shape[1] + n_rows)
    res = minimize(
        _probe_objective, theta0, args=(X, Y, n_rows, config.reg, binary), jac=True,
        method="L-BFGS-B", options={"maxiter": config.max_iter, "gtol": config.gtol, "maxfun": 10 * config.max_iter},
    )
    d = X.shape[1]
    return ProbeModel(res.x[: n_rows * d].reshape(n_rows, d).copy(), res.x[n_rows * d:].copy(), classes, True, int(res.nit))


def ensemble_predict(p_deep, p_concept) -> np.ndarray:
    a = np.asarray(p_deep, dtype=np.float64)
    b = np.asarray(p_concept, dtype=np.float64)
    if a.shape != b.shape:
        raise dc.DimensionError(f"ensemble: shapes {a.shape} and {b.shape} differ")
    for p in (a, b):
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
            raise ValueError("ensemble inputs must be probability rows summing to 1")
    return 0.5 * (a + b)


# -- metrics -------------------------------------------------------------------------

def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks credit ties 0.5
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; for a score matrix, macro one-vs-rest over the classes present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise UndefinedMetricError("AUC is undefined with a single class")
    if scores.ndim == 1:
        if len(classes) > 2:
            raise UndefinedMetricError("1-D scores need binary labels")
        return _binary_auc(scores, labels == classes[-1])
    if scores.shape[1] == 2 and len(classes) == 2:
        return _binary_auc(scores[:, 1], labels == classes[-1])
    return float(np.mean([_binary_auc(scores[:, int(c)], labels == c) for c in classes]))


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), one point per distinct score plus the origin."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(p)[last]
    fps = (last + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos], np.r_[np.inf, s[last]]


def auc_pair_count(scores, labels) -> float:
    """O(n^2) reference: fraction of (pos, neg) pairs ordered correctly, ties counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def _top_indices(values: np.ndarray, j: int, largest: bool = True) -> np.ndarray:
    order = np.argsort(-values if largest else values, kind="stable")
    return order[:j]


def concept_topj_accuracy(encodings: Sequence, labels, concepts: ConceptSet, j: int,
                          mode: str = "unsupervised", probe: ProbeModel | None = None) -> float:
    """Mean fraction of each slide's j selected concepts that belong to its true class."""
    C = concepts.n_concepts
    if not 1 <= j <= C:
        raise ValueError(f"j must lie in [1, {C}], got {j}")
    if mode not in ("unsupervised", "supervised"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "supervised" and probe is None:
        raise ValueError("supervised top-j needs a probe trained on concept embeddings")
    owner = concepts.class_of()
    scores = []
    for enc, label in zip(encodings, labels):
        m = np.asarray(getattr(getattr(enc, "M_wsi", enc), "data", getattr(enc, "M_wsi", enc)), dtype=np.float64)
        if mode == "unsupervised":
            picked = _top_indices(m, j)
        else:
            pred = int(probe.predict(m[None, :])[0])
            if probe.binary:
                weighted = probe.weights[0] * m
                picked = _top_indices(weighted, j, largest=pred == probe.classes[1])
            else:
                row = int(np.searchsorted(probe.classes, pred))
                picked = _top_indices(probe.weights[row] * m, j)
        scores.append(np.mean(owner[picked] == int(label)))
    return float(np.mean(scores))


def concept_table(m_wsi, concepts: ConceptSet, top: int | None = None) -> list[tuple[str, float]]:
    m = np.asarray(getattr(m_wsi, "data", m_wsi), dtype=np.float64)
    order = _top_indices(m, len(m))
    if top is not None:
        order = order[:top]
    return [(concepts.names[i], float(m[i])) for i in order]


# -- protocols -----------------------------------------------------------------------

@dataclass
class EvalProtocol:
    mode: str = "zero"  # zero | few_k | full
    k: int = 10
    repetitions: int = 10
    folds: int = 1
    seed: int = 0
    clamp: bool = True

    def __post_init__(self):
        if self.mode not in ("zero", "few_k", "full"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if self.mode == "few_k" and self.k < 1:
            raise ValueError("few_k needs k >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalSlide:
    slide_id: str
    features: np.ndarray
    prior: np.ndarray
    label: int | None = None
    split: str | None = None


@dataclass
class EmbeddedSlides:
    slide_ids: list[str]
    deep: np.ndarray  # (n, H)
    concept: np.ndarray  # (n, C)
    labels: np.ndarray  # -1 where unknown
    splits: list[str | None] = field(default_factory=list)
    selected: list[np.ndarray] = field(default_factory=list)
    alphas: list[np.ndarray] = field(default_factory=list)
    betas: list[np.ndarray] = field(default_factory=list)


def encode_slides(model: DualMIL, slides: Sequence[EvalSlide]) -> EmbeddedSlides:
    """Frozen inference embeddings with hard Top-K selection."""
    deep, concept, sel, alphas, betas = [], [], [], [], []
    with dc.no_grad():
        for s in slides:
            enc: SlideEncoding = model.encode(s.features, s.prior, mode="eval", slide_id=s.slide_id)
            deep.append(enc.F_wsi.data.copy())
            concept.append(enc.M_wsi.data.copy())
            sel.append(enc.selected)
            alphas.append(enc.alpha.data.copy())
            betas.append(enc.beta.data.copy())
    labels = np.array([-1 if s.label is None else int(s.label) for s in slides])
    return EmbeddedSlides([s.slide_id for s in slides], np.array(deep), np.array(concept), labels,
                          [s.split for s in slides], sel, alphas, betas)


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng([seed, 7])
    assignment = np.empty(len(labels), dtype=int)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % folds
    return [(np.flatnonzero(assignment != f), np.flatnonzero(assignment == f)) for f in range(folds)]


def _splits(emb: EmbeddedSlides, protocol: EvalProtocol) -> list[tuple[np.ndarray, np.ndarray]]:
    if protocol.folds > 1:
        labelled = np.flatnonzero(emb.labels >= 0)
        return [(labelled[tr], labelled[te]) for tr, te in stratified_folds(emb.labels[labelled], protocol.folds, protocol.seed)]
    splits = np.array([s or "" for s in emb.splits])
    test = np.flatnonzero(splits == "test")
    if len(test) == 0:
        test = np.arange(len(splits))
        train = test
    else:
        train = np.flatnonzero(splits != "test")
    return [(train, test)]


def _sample_few(labels: np.ndarray, pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = []
    for c in np.unique(labels[pool]):
        members = pool[labels[pool] == c]
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} training slides, fewer than k={k}")
        chosen.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_auc(scores, labels)
    except UndefinedMetricError:
        return None


def _summary(values: list[float]) -> dict:
    arr = np.array([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean_auc": None, "std_auc": None}
    return {"mean_auc": float(arr.mean()), "std_auc": float(arr.std())}


def run_protocol(emb: EmbeddedSlides, concepts: ConceptSet, protocol: EvalProtocol,
                 probe_config: ProbeConfig | None = None) -> dict:
    """Evaluate frozen embeddings under the zero / few-k / full label protocol.

    Returns a JSON-ready report with per-head mean/std AUC and per-fold detail.
    For ``zero`` the report also carries every evaluated slide's class
    probabilities.
    """
    folds = _splits(emb, protocol)
    heads = ["zero"] if protocol.mode == "zero" else ["deep", "concept", "ensemble"]
    per_head = {h: [] for h in heads}
    fold_reports = []
    slide_probs: dict[str, list[float]] = {}
    for f, (train_idx, test_idx) in enumerate(folds):
        test_labels = emb.labels[test_idx]
        fold = {"fold": f, "n_train": int(len(train_idx)), "n_test": int(len(test_idx)), "heads": {}}
        if protocol.mode == "zero":
            P = zero_shot_predict(emb.concept[test_idx], concepts, clamp=protocol.clamp)
            for i, p in zip(test_idx, P):
                slide_probs[emb.slide_ids[i]] = [float(v) for v in p]
            auc = _safe_auc(P, test_labels) if np.all(test_labels >= 0) else None
            fold["heads"]["zero"] = {"aucs": [auc], "n_probes": 0, **_summary([auc])}
            per_head["zero"].append(auc)
        else:
            reps = protocol.repetitions if protocol.mode == "few_k" else 1
            aucs = {h: [] for h in heads}
            for r in range(reps):
                if protocol.mode == "few_k":
                    rng = np.random.default_rng([protocol.seed, f, r])
                    chosen = _sample_few(emb.labels, train_idx, protocol.k, rng)
                else:
                    chosen = train_idx
                probs = {}
                for head, X in (("deep", emb.deep), ("concept", emb.concept)):
                    probe = train_probe(X[chosen], emb.labels[chosen], probe_config)
                    probs[head] = probe.predict_proba(X[test_idx])
                probs["ensemble"] = ensemble_predict(probs["deep"], probs["concept"])
                for head in heads:
                    aucs[head].append(_safe_auc(probs[head], test_labels))
            for head in heads:
                n_probes = 0 if head == "ensemble" else reps
                fold["heads"][head] = {"aucs": aucs[head], "n_probes": n_probes, **_summary(aucs[head])}
                per_head[head].extend(aucs[head])
        fold_reports.append(fold)

    report = {
        "protocol": protocol.to_dict(),
        "heads": {
            h: {**_summary(per_head[h]), "per_fold": [fr["heads"][h]["mean_auc"] for fr in fold_reports]}
            for h in heads
        },
        "folds": fold_reports,
    }
    if protocol.mode == "zero":
        report["probabilities"] = slide_probs
    return report
