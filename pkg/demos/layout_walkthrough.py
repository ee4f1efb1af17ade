"""Walk through one training layout on the desk configuration.

Run: python demos/layout_walkthrough.py [seed]
"""

import sys

import numpy as np

from arclust.config import DESK
from arclust.layout import partition_table, sample_layout

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = DESK
scheme = cfg.scheme
print(f"token grid {cfg.grid}, cluster shape {cfg.cluster}: "
      f"{scheme.num_clusters} clusters of {scheme.cluster_size} tokens")

table = partition_table(scheme)
for cid in range(scheme.num_clusters):
    print(f"  cluster {cid} at {scheme.cluster_triple(cid)} holds tokens {table[cid].tolist()}")

plan = sample_layout(scheme, cfg.policy, cfg.mask_ratio, seed, 0, 0)
print(f"\nprediction order: {plan.order.tolist()}")
print(f"the last cluster ({plan.order[-1]}) is dropped; the first ({plan.order[0]}) is context only")
for pos, (cid, vis) in enumerate(zip(plan.kept_clusters, plan.visible_tokens)):
    print(f"  position {pos}: cluster {cid} keeps tokens {vis.tolist()}")

print(f"\nencoder length {plan.enc_len}, decoder queries {plan.dec_len}")

# Rows are queries, columns keys; '#' marks allowed attention.
def show(mask):
    for row in mask:
        print("  " + "".join("#" if v else "." for v in row))

print("\nencoder mask (block causal):")
show(plan.enc_mask)
print("\ncross mask, first query of each target cluster (strictly earlier clusters only):")
first_rows = np.flatnonzero(np.diff(plan.dec_pos, prepend=-1))
show(plan.cross_mask[first_rows])
