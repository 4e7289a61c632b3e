"""Shared small synthetic setup for the demo scripts (runs in seconds)."""

import numpy as np

from conceptmil import dataio
from conceptmil.conceptprior import cosine_prior
from conceptmil.evalkit import EvalSlide
from conceptmil.model import ModelConfig
from conceptmil.pretrainer import ContrastiveConfig, TrainingSlide

SYNTH = dataio.SynthConfig(n_slides_per_class=40, n_patches=32, dim=16, concepts_per_class=5,
                           salient_fraction=0.125, background_types=2, background_noise=0.1, seed=0)
MODEL = ModelConfig(in_dim=16, n_concepts=10, hidden=64, attn_hidden=64, k=4, seed=0)
TRAIN = ContrastiveConfig(batch_size=8, epochs=30, seed=0)


def load():
    ds = dataio.generate_synthetic(SYNTH)
    T = ds.concepts.embeddings
    priors = {b.slide_id: cosine_prior(b.features, T) for b in ds.bags}
    train = [TrainingSlide(b.slide_id, b.features, priors[b.slide_id])
             for b, s in zip(ds.bags, ds.splits) if s == "train"]
    evals = [EvalSlide(b.slide_id, b.features, priors[b.slide_id], b.label, s) for b, s in zip(ds.bags, ds.splits)]
    return ds, priors, train, evals


def test_rows(emb):
    return np.array([i for i, s in enumerate(emb.splits) if s == "test"])
