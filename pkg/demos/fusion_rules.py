"""Walk through each redundancy-fusion rule with small hand-built inputs.

Every rule answers the same question: several imperfect tools looked at
the same image, so what single output do we trust? Run this script to
see each rule absorb one deliberately bad input.
"""

import numpy as np

from sonagent.core import Mask
from sonagent.fusion import (
    agreement_fusion,
    consistency_weighted,
    label_majority_vote,
    median_outlier_correct,
    pixel_majority_vote,
)


def show(title):
    print()
    print(title)
    print("-" * len(title))


# Three 8x8 segmenters, one of which hallucinated an extra blob in the
# corner. Pixel-wise majority keeps only pixels at least two tools agree on.
show("pixel_majority_vote")
base = np.zeros((8, 8), dtype=bool)
base[2:6, 2:6] = True
bad = base.copy()
bad[0, 6:8] = True  # the hallucinated blob
masks = [Mask(width=8, height=8, data=m, spacing_mm_per_px=0.5)
         for m in (base, base, bad)]
fused = pixel_majority_vote(masks)
print("tool areas  :", [int(m.data.sum()) for m in masks])
print("fused area  :", int(fused.data.sum()), "(the stray pixels are gone)")

# Four plane classifiers vote on a label; plurality wins, ties go to the
# alphabetically first label so reruns never flip the answer.
show("label_majority_vote")
labels = ["head", "head", "abdomen", "head"]
print("votes       :", labels)
print("fused label :", label_majority_vote(labels))
print("tie case    :", label_majority_vote(["femur", "head", "head", "femur"]))

# agreement_fusion also reports HOW MANY tools agreed, and breaks count
# ties by a fixed tool-priority order instead of alphabetically.
show("agreement_fusion")
outputs = [("clf-a", "trans-thalamic", 0.91),
           ("clf-b", "trans-ventricular", 0.88),
           ("clf-c", "trans-thalamic", 0.84),
           ("clf-d", "trans-ventricular", 0.80)]
priority = ["clf-b", "clf-a", "clf-c", "clf-d"]
label, count = agreement_fusion(outputs, priority)
print("outputs     :", [(t, l) for t, l, _ in outputs])
print("priority    :", priority)
print(f"fused       : {label} (agreement {count}; clf-b outranks clf-a)")

# Scalar rule one: replace anything further than delta from the median by
# the median itself, then average. One wild angle gets pulled back in.
show("median_outlier_correct")
angles = [62.0, 62.3, 112.3]
fused, corrected = median_outlier_correct(angles, delta=15.0)
print("inputs      :", angles)
print("corrected   :", corrected)
print(f"fused       : {fused:.4f} (the 112.3 outlier was snapped to the median)")

# Scalar rule two: keep every value but weight it by 1/(eps + distance
# from the median), so near-consensus values dominate smoothly.
show("consistency_weighted")
weeks = [20.0, 20.0, 30.0]
print("inputs      :", weeks)
print(f"fused       : {consistency_weighted(weeks, epsilon=0.5):.6f}")
print("plain mean  :", sum(weeks) / len(weeks))
