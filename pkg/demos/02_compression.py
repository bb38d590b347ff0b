"""Squeezing a gradient into a handful of sorted centers.

A 1-D k-means summary keeps the shape of a gradient's value distribution while
discarding which coordinate each value came from.  This prints how much of the
spread survives at several rates.
"""

import numpy as np

from fedsel.compression import CompressionSpec, compress, kmeans_1d, within_group_sse

rng = np.random.default_rng(3)
grad = np.concatenate([rng.normal(0, 0.05, 180), rng.normal(1.5, 0.2, 20)])
print(f"gradient: d={grad.size}, norm {np.linalg.norm(grad):.3f}, total SSE about its mean "
      f"{((grad - grad.mean()) ** 2).sum():.3f}\n")
for rate in (0.01, 0.02, 0.05, 0.1, 0.5, 1.0):
    feat = compress(grad, CompressionSpec(rate))
    sse = within_group_sse(grad, feat.centers)
    print(f"R={rate:<5g} d'={feat.d_prime:<4d} iterations={feat.n_iter:<3d} residual SSE={sse:9.5f}"
          f"  ||centers||={feat.centers_norm:.3f}")

_, history, _ = kmeans_1d(grad, 4)
print("\nSSE per Lloyd pass at d'=4:", " ".join(f"{h:.4f}" for h in history))
print("two-blob example:", compress(np.array([0.1, 0.11, 5.0, 5.1]), CompressionSpec(0.5)).centers)
