"""How skewed is a Dirichlet label split?

Partitions one synthetic dataset across 100 clients at several concentration
values and prints how dominated each client is by its most common label.
"""

import numpy as np

from fedsel.dataset import PartitionSpec, label_histogram, max_label_share, partition, synth_classification

data = synth_classification(6000, 20, 10, 1.5, seed=0)
print(f"{len(data)} samples, {data.n_classes} classes, 100 clients\n")
print(f"{'alpha':>8}  {'max-label share':>15}  {'labels per client':>17}  {'shard sizes':>13}")
for alpha in (0.01, 0.1, 1.0, 10.0, 100.0):
    shards = partition(data, PartitionSpec(100, "dirichlet", alpha, seed=1))
    hist = label_histogram(shards)
    sizes = [s.n_samples for s in shards]
    print(f"{alpha:>8g}  {max_label_share(shards).mean():>15.3f}  {np.mean((hist > 0).sum(1)):>17.2f}"
          f"  {min(sizes):>5}..{max(sizes):<6}")

iid = partition(data, PartitionSpec(100, "iid", seed=1))
print(f"\n{'iid':>8}  {max_label_share(iid).mean():>15.3f}")
