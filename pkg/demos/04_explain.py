# Reading a slide's explanation.
#
# The concept embedding is a vector of concept activations, so it can be
# printed as a ranked table. The Top-K indices say which patches fed it;
# on synthetic data they can be checked against the planted salient patches.

import numpy as np

from conceptmil.evalkit import concept_table, encode_slides
from conceptmil.model import DualMIL
from conceptmil.pretrainer import train

from _setup import MODEL, TRAIN, load, test_rows

ds, _, train_slides, eval_slides = load()
model = train(train_slides, DualMIL(MODEL), TRAIN).model
emb = encode_slides(model, eval_slides)

for i in test_rows(emb)[[0, -1]]:
    sid = emb.slide_ids[i]
    print(f"\n{sid} (class {emb.labels[i]})")
    for name, value in concept_table(emb.concept[i], ds.concepts, top=3):
        print(f"  {value:+.3f}  {name}")
    picked = emb.selected[i]
    planted = set(ds.salient[sid])
    print(f"  Top-K patches {picked.tolist()}, {sum(int(j) in planted for j in picked)}/{len(picked)} planted")
    print(f"  concept weights beta: {np.round(emb.betas[i], 2).tolist()}")
