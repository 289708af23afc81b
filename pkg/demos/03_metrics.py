"""
Scoring hierarchical predictions
================================

hIoU gives discounted credit for correct superclasses. The calibration
metrics look only at the leaf argmax and its confidence.
"""

import numpy as np

from hmcseg.hierarchy import builtin_semantickitti
from hmcseg.metrics import cer, evaluate, hiou, miou, tally

h = builtin_semantickitti()
car, truck, vehicle, dynamic, road = (h.id(n) for n in ("car", "truck", "vehicle", "dynamic", "road"))

# Five car points: two right, one lifted to "vehicle", one lifted to "dynamic",
# one mistaken for road. Superclass answers count as misses for the leaf but
# earn alpha**level credit.
gts = [car] * 5
preds = [car, car, vehicle, dynamic, road]
t = tally(preds, gts, h)
print("TP", t.tp[car], "FN", t.fn[car], "TS by level", t.ts[car].tolist())
for a in (0.0, 0.5, 1.0):
    print(f"hIoU@{a:g} for car: {hiou(t, a).per_class[car]:.3f}")
print("mIoU over classes present:", round(miou(t).mean, 3))
print("critical errors (static/dynamic confusions):", cer(preds, gts, h))

# A noisy flat classifier on random data, scored end to end. mIoU scores the
# raw leaf argmax; hIoU scores the lifted predictions, so low-confidence
# points cost leaf credit there and earn it back only as alpha grows.
rng = np.random.default_rng(0)
n = 5000
labels = rng.integers(0, h.leaf_count, n)
logits = rng.normal(size=(n, h.leaf_count))
logits[np.arange(n), labels] += rng.uniform(0, 5, n)
report = evaluate(logits, labels, h, seed=0)
for key in ("mIoU", "hIoU@0.5", "hIoU@1", "CER", "ECE", "AUSE_BS", "AUSE_mIoU", "uIoU"):
    print(f"{key:10s} {report.scalars[key]:.4f}")

# Curves are plain columns, ready for a plotting tool of your choice.
rel = report.curves["reliability"]
for c, acc, conf in zip(rel["bin_center"][:5], rel["accuracy"][:5], rel["confidence"][:5]):
    print(f"bin {c:.3f}: accuracy {acc:.3f}, confidence {conf:.3f}")
