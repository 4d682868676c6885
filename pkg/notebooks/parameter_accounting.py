"""
Counting trainable parameters
=============================

Per convolution with kernel h x w, C inputs and T filters, full fine-tuning
trains hwCT weights, a 1x1 adapter trains a T x T matrix plus two norm
scalars, and CoLoRA trains hwT + CT (pointwise first) or hwC + CT
(depthwise first).
"""

from colora.adapters import Order
from colora.model import (
    HeadSpec,
    build_tiny_vgg,
    colora_trainable_count,
    count_params,
    inject_cnn_adapter,
    inject_colora,
    table1_counts,
)

# a few VGG-like layer shapes
for C, T in [(64, 64), (64, 128), (128, 256), (512, 512)]:
    c = table1_counts(3, 3, C, T)
    print(f"3x3 {C:>3}->{T:<3}  full {c['original']:>9,}  adapter {c['adapter']:>7,}  "
          f"colora {c['colora']:>7,}  ({c['colora'] / c['original']:.1%} of full)")

# the order flag matters whenever C != T
print("pw->dw", colora_trainable_count(3, 3, 64, 128, Order.PW_THEN_DW),
      "dw->pw", colora_trainable_count(3, 3, 64, 128, Order.DW_THEN_PW))

# whole models: the head stays trainable in every adapted arm
g = build_tiny_vgg((16, 16, 1), [32, 64], HeadSpec(16, 16, 4))
for label, model in [("full", g),
                     ("cnn adapter", inject_cnn_adapter(g, "all")),
                     ("colora", inject_colora(g, "all"))]:
    rep = count_params(model)
    print(f"{label:<12} trainable {rep.trainable:>7,} of {rep.total:>7,}  ({rep.trainable_fraction:.3f})")

print()
print(count_params(inject_colora(g, "all")).to_csv())
