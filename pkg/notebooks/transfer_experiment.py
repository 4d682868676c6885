"""
Adapting a pretrained backbone to a shifted task
================================================

Pretrain a small VGG-style network on oriented stripes, then fine-tune it
four ways on a target domain where the orientations are rotated, the
period is shorter and the contrast is inverted.  Every arm starts from the
same source weights with a fresh output layer.  Takes about a minute.
"""

import numpy as np

from colora.data import make_shapes_task
from colora.model import HeadSpec, build_tiny_vgg
from colora.plotting import Series, line_plot
from colora.trainer import TrainConfig, pretrain_transfer_protocol

source = make_shapes_task("source", 400, 100, 200, seed=0)
target = make_shapes_task("target", 200, 100, 200, seed=0, noise=0.35)


def make_graph(seed):
    return build_tiny_vgg((16, 16, 1), [32, 64], HeadSpec(16, 16, 4), seed=seed)


rows = pretrain_transfer_protocol(
    source, target, make_graph,
    TrainConfig(epochs=6, batch_size=16, lr=3e-3, merge_interval=1, seed=0),
    source_cfg=TrainConfig(epochs=4, batch_size=16, lr=3e-3, merge_interval=0, seed=0),
)

print(f"{'arm':<12} {'best test':>9} {'macro AUC':>9} {'trainable':>9} {'epoch s':>8}")
for r in rows:
    print(f"{r['arm']:<12} {r['test_accuracy']:>9.3f} {r['macro_auc']:>9.3f} "
          f"{r['trainable_fraction']:>9.3f} {r['epoch_seconds']:>8.3f}")

# test accuracy per epoch, one line per arm
series = [Series(r["arm"], np.arange(1, len(r["history"].seconds) + 1), r["history"].accuracy["test"])
          for r in rows]
with open("transfer_accuracy.svg", "w") as fh:
    fh.write(line_plot(series, "target test accuracy", "epoch", "accuracy", ylim=(0, 1)))
print("wrote transfer_accuracy.svg")
