"""Voxel-wise and lesion-wise metrics on a hand-built example.

The reference has three lesions. The prediction finds two of them (one only
partly), misses the third and adds one false positive.
"""
import numpy as np

from stageunlearn.metrics import evaluate_case, label_components, rank_score

ref = np.zeros((24, 24, 24), np.uint8)
ref[2:6, 2:6, 2:6] = 1
ref[10:14, 10:14, 10:14] = 1
ref[18:21, 2:5, 18:21] = 1

pred = np.zeros_like(ref)
pred[2:6, 2:6, 2:6] = 1
pred[11:13, 10:14, 10:14] = 1
pred[18:22, 18:22, 2:6] = 1

print("reference lesions:", label_components(ref).count)
print("predicted lesions:", label_components(pred).count)
for name, value in evaluate_case(pred, ref).items():
    print(f"  {name:5s} {value:.3f}")

# ranking three made-up methods on the five metrics
table = rank_score({
    "a": {"dsc": 0.80, "tpr": 0.78, "ltpr": 0.70, "lfdr": 0.20, "rve": 0.15},
    "b": {"dsc": 0.78, "tpr": 0.82, "ltpr": 0.72, "lfdr": 0.30, "rve": 0.20},
    "c": {"dsc": 0.70, "tpr": 0.70, "ltpr": 0.60, "lfdr": 0.25, "rve": 0.30},
})
for name, rs in sorted(table.rs.items(), key=lambda kv: kv[1]):
    print(f"method {name}: RS {rs:.2f}")
