"""Patch-concept similarity prior.

The prior of a slide is the ``N x C`` matrix of cosine similarities between its
patch embeddings and the concept text embeddings.  It is computed once per slide
and treated as a frozen input afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import DimensionError

ZERO_NORM = 1e-12


@dataclass
class PatchFeatureBag:
    slide_id: str
    features: np.ndarray  # (N, D)
    label: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(f"bag {self.slide_id!r}: features must be 2-D, got {self.features.shape}")
        if self.features.shape[0] == 0:
            raise ValueError(f"bag {self.slide_id!r} is empty")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"bag {self.slide_id!r} has non-finite features")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ConceptSet:
    names: list[str]
    embeddings: np.ndarray  # (C, D)
    class_partition: dict[int, list[int]]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.class_partition = {int(k): [int(i) for i in v] for k, v in self.class_partition.items()}
        if not self.class_names:
            self.class_names = [str(k) for k in sorted(self.class_partition)]

    @property
    def n_concepts(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_partition)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def class_of(self) -> np.ndarray:
        """Class index owning each concept column."""
        owner = np.full(self.n_concepts, -1, dtype=int)
        for cls, idx in self.class_partition.items():
            owner[idx] = cls
        return owner


@dataclass
class ConceptPrior:
    slide_id: str
    matrix: np.ndarray  # (N, C)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norm < ZERO_NORM, 0.0, x / np.where(norm < ZERO_NORM, 1.0, norm))


def cosine_prior(features: np.ndarray, concepts: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix between rows; zero-norm rows give 0."""
    return _unit_rows(np.asarray(features, dtype=np.float64)) @ _unit_rows(np.asarray(concepts, dtype=np.float64)).T


def compute_prior(bag: PatchFeatureBag, concepts: ConceptSet) -> ConceptPrior:
    if bag.dim != concepts.dim:
        raise DimensionError(
            f"slide {bag.slide_id!r}: patch dim {bag.dim} != concept dim {concepts.dim}"
        )
    return ConceptPrior(bag.slide_id, cosine_prior(bag.features, concepts.embeddings))


def validate_concept_set(concepts: ConceptSet) -> list[str]:
    """Structural problems with a concept set; an empty list means it is usable."""
    problems = []
    seen: dict[str, int] = {}
    for i, name in enumerate(concepts.names):
        if name in seen:
            problems.append(f"duplicate concept name {name!r} at indices {seen[name]} and {i}")
        else:
            seen[name] = i
    C = concepts.embeddings.shape[0] if concepts.embeddings.ndim == 2 else len(concepts.names)
    if len(concepts.names) != C:
        problems.append(f"{len(concepts.names)} names for {C} embeddings")
    owner: dict[int, int] = {}
    for cls in sorted(concepts.class_partition):
        idx = concepts.class_partition[cls]
        if not idx:
            problems.append(f"class {cls} has no concepts")
        for i in idx:
            if not 0 <= i < C:
                problems.append(f"index {i} of class {cls} out of range [0, {C})")
            elif i in owner:
                problems.append(f"index {i} in two classes ({owner[i]} and {cls})")
            else:
                owner[i] = cls
    missing = sorted(set(range(C)) - set(owner))
    if missing:
        problems.append(f"indices {missing} belong to no class")
    if concepts.class_names and len(concepts.class_names) != len(concepts.class_partition):
        problems.append(
            f"{len(concepts.class_names)} class names for {len(concepts.class_partition)} classes"
        )
    return problems
