"""The two full-scale FCN variants and the reduced desk model.

Builds the VGG-16-derived network in its original two-skip form and in the
three-skip form, verifies the exact published parameter counts, and shows
that splitting the final upsampling kernel makes the three-skip variant
slightly smaller despite the extra scoring layer.
"""

import numpy as np

from mapseg.net import (
    build_desk_network,
    build_network,
    count_parameters,
    net_forward,
)

for variant, expected in (("fcn_2skip_original", 134_277_737), ("fcn_3skip_ours", 134_276_540)):
    net = build_network(variant, class_count=3, input_size=512, init="zeros")
    n = count_parameters(net)
    status = "ok" if n == expected else "MISMATCH"
    print(f"{variant:22s} parameters: {n:,}  (expected {expected:,})  {status}")

two = build_network("fcn_2skip_original", init="zeros")
three = build_network("fcn_3skip_ours", init="zeros")
print(f"\nthird skip connection reduces the count by {count_parameters(two) - count_parameters(three):,}")

print("\nper-layer parameter tensors of the three-skip variant (last 8):")
for name, shape in list(three.param_shapes().items())[-8:]:
    print(f"  {name:28s} {shape}")

# The desk-scale family keeps the same topology at a trainable size.
desk = build_desk_network(64)
print(f"\ndesk model parameters: {count_parameters(desk):,}")
x = np.random.default_rng(0).normal(size=(3, 64, 64))
probs, _ = net_forward(desk, x)
print(f"desk forward: input (3, 64, 64) -> probabilities {probs.shape}, "
      f"per-pixel sum max deviation {abs(probs.sum(axis=0) - 1).max():.2e}")
probs2, _ = net_forward(desk, np.random.default_rng(1).normal(size=(3, 128, 128)))
print(f"fully convolutional: (3, 128, 128) -> {probs2.shape}")
