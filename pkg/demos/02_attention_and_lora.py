"""
Attention sharing and low-rank adapters
=======================================

The two building blocks of the image editor, on random matrices.
"""

import numpy as np

from splatedit.attention import persona_blend_attention, reference_concat_attention, sdp_attention
from splatedit.lora import AdaptedLinear, LowRankDelta, init_delta, merge_delta

rng = np.random.default_rng(0)
Q, K, V = (rng.normal(size=(6, 8)) for _ in range(3))

# Attending to a reference that is an exact copy of yourself changes nothing:
# the softmax weights are split evenly between each key and its duplicate.
plain = sdp_attention(Q, K, V)
print("self-reference change:", np.abs(reference_concat_attention(Q, K, V, K, V) - plain).max())

# A different reference does change the output.
K_ref, V_ref = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
print("other reference change:",
      np.abs(reference_concat_attention(Q, K, V, K_ref, V_ref) - plain).max().round(3))

# Persona blending interpolates between own attention (lambda = 1) and the
# mean attention against a bank of recorded keys/values (lambda = 0).
bank = [(rng.normal(size=(6, 8)), rng.normal(size=(6, 8))) for _ in range(4)]
for lam in (1.0, 0.55, 0.0):
    out = persona_blend_attention(Q, K, V, bank, lam)
    print(f"lambda {lam}: distance from own attention {np.abs(out - plain).max():.3f}")

# A freshly initialised adapter (B = 0) leaves the layer untouched ...
W = rng.normal(size=(5, 8))
layer = AdaptedLinear(W, np.zeros(5), init_delta(8, 5, 2, seed=0))
x = rng.normal(size=8)
print("fresh adapter is a no-op:", np.array_equal(layer(x), W @ x))

# ... and a trained one merges into a dense weight of rank-r difference.
layer.delta = LowRankDelta(rng.normal(size=(2, 8)), rng.normal(size=(5, 2)), 1.0)
print("singular values of the merged update:",
      np.linalg.svd(merge_delta(layer) - W, compute_uv=False).round(6))
