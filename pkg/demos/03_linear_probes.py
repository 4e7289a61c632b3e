# Few-label linear probes on frozen slide embeddings.
#
# Three heads: a logistic probe on the deep embedding, one on the concept
# embedding, and their probability average. k labelled slides per class are
# drawn 10 times; AUC is measured on the held-out split.

from conceptmil.evalkit import EvalProtocol, encode_slides, run_protocol
from conceptmil.model import DualMIL
from conceptmil.pretrainer import train

from _setup import MODEL, TRAIN, load

ds, _, train_slides, eval_slides = load()
model = train(train_slides, DualMIL(MODEL), TRAIN).model
emb = encode_slides(model, eval_slides)

for k in (1, 5, 10):
    report = run_protocol(emb, ds.concepts, EvalProtocol("few_k", k=k, repetitions=10, seed=0))
    row = "  ".join(f"{h} {v['mean_auc']:.3f}+/-{v['std_auc']:.3f}" for h, v in report["heads"].items())
    print(f"k={k:>2}: {row}")

full = run_protocol(emb, ds.concepts, EvalProtocol("full", folds=5, seed=0))
print("5-fold, all labels:", {h: round(v["mean_auc"], 3) for h, v in full["heads"].items()})
