# The concept prior: cosine similarity between every patch and every concept.
#
# A synthetic slide of class l hides a handful of salient patches built from
# class-l concept directions among background patches. The prior already
# lights up the right concepts on those patches, before any training.

import numpy as np

from conceptmil.conceptprior import compute_prior, validate_concept_set

from _setup import load

ds, priors, _, _ = load()
concepts = ds.concepts
print(f"{len(ds.bags)} slides, {concepts.n_concepts} concepts in {concepts.dim} dimensions")
print("concept set problems:", validate_concept_set(concepts) or "none")

bag = ds.bags[0]
M = compute_prior(bag, concepts).matrix  # (N, C)
print(f"slide {bag.slide_id}: prior {M.shape}, range [{M.min():.2f}, {M.max():.2f}]")

salient = ds.salient[bag.slide_id]
owner = concepts.class_of()
top = np.argmax(M, axis=1)
print("salient patches:", salient)
print("their top concept's class:", owner[top[salient]].tolist(), "(label", bag.label, ")")

# the class margin over the salient patches, averaged over all slides
margins = []
for b in ds.bags:
    rows = priors[b.slide_id][ds.salient[b.slide_id]]
    own = rows[:, owner == b.label].mean()
    other = rows[:, owner != b.label].mean()
    margins.append(own - other)
print(f"mean own-class minus other-class activation on salient patches: {np.mean(margins):.3f}")

# background patches carry no class signal
bg = np.setdiff1d(np.arange(len(M)), salient)
print(f"background patches: mean |activation| {np.abs(M[bg]).mean():.3f}")
