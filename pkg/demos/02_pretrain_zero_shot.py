# Contrastive pretraining, then label-free prediction.
#
# The deep branch (attention over projected patches) and the concept branch
# (Top-K patches -> concept prior rows -> per-concept weights) are aligned
# with a symmetric InfoNCE loss. No labels are used. Afterwards each slide's
# pooled concept activations are summed per class to give P(class).

import time

import numpy as np

from conceptmil.evalkit import EvalProtocol, concept_topj_accuracy, encode_slides, run_protocol
from conceptmil.model import DualMIL
from conceptmil.pretrainer import train

from _setup import MODEL, TRAIN, load, test_rows

ds, _, train_slides, eval_slides = load()

t0 = time.perf_counter()
result = train(train_slides, DualMIL(MODEL), TRAIN)
print(f"trained {TRAIN.epochs} epochs on {len(train_slides)} slides in {time.perf_counter() - t0:.1f}s")
print("epoch-mean loss every 5 epochs:", np.round(result.epoch_losses[::5], 3).tolist())

for tag, model in (("untrained", DualMIL(MODEL)), ("pretrained", result.model)):
    emb = encode_slides(model, eval_slides)
    test = test_rows(emb)
    report = run_protocol(emb, ds.concepts, EvalProtocol("zero"))
    top1 = concept_topj_accuracy(emb.concept[test], emb.labels[test], ds.concepts, 1)
    hits = np.mean([np.isin(emb.selected[i], ds.salient[emb.slide_ids[i]]).mean() for i in test])
    print(f"{tag:>10}: zero-shot AUC {report['heads']['zero']['mean_auc']:.3f}, "
          f"top-1 concept accuracy {top1:.3f}, Top-K picks that are salient {hits:.2f}")

sid, probs = next(iter(report["probabilities"].items()))
print(f"example: {sid} -> P(class) = {np.round(probs, 3).tolist()}")
