"""
Entropy-based distillation of a training set
============================================

Balance the classes by taking the first n ids of each, score every sample
with a trained model, then per class drop the most uncertain few and keep
a fixed number of the next most uncertain.
"""

import numpy as np

from colora.data import balance_by_first_n, distill, make_blobs_task
from colora.model import HeadSpec, build_tiny_vgg
from colora.trainer import TrainConfig, train

data = make_blobs_task(300, 60, 60, num_classes=4, seed=0)
print("class counts before balancing", data.train.class_counts(4))

balanced = balance_by_first_n(data.train, "min", num_classes=4)
print("after balancing", balanced.class_counts(4), "ids sorted:", balanced.ids == sorted(balanced.ids))

g = build_tiny_vgg((16, 16, 1), [8, 16], HeadSpec(8, 8, 4), seed=0)
train(g, data.replace(train=balanced), TrainConfig(epochs=10, batch_size=16, lr=3e-3))

per_class = int(balanced.class_counts(4).min())
kept, report = distill(balanced, g, discard_top=3, keep=per_class - 10)
print("retained", len(kept), "discarded", len(report.discarded))

# sorted entropies per class: the discarded samples sit at the head of each list
for c, rows in report.entropies.items():
    h = np.array([e for _, e in rows])
    print(f"class {c}: max {h.max():.3f}  discarded from {h[2]:.3f} up  median {np.median(h):.3f}")
