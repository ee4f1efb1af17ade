"""Compare attention cost of cluster-autoregressive pretraining with a masked-autoencoder baseline.

Run: python demos/cost_comparison.py
"""

from arclust.config import PAPER, PAPER_MAE
from arclust.costmodel import CostConfig, cost_report

ar = cost_report(CostConfig.from_train(PAPER, "ar"))
mae = cost_report(CostConfig.from_train(PAPER_MAE, "mae"))

print("sequence lengths (enc_q, enc_kv, dec_q, dec_kv)")
for r in (ar, mae):
    print(f"  {r.name:4s} {r.enc_q:5d} {r.enc_kv:5d} {r.dec_q:5d} {r.dec_kv:5d}")

# The encoder sees more tokens in the autoregressive setup, but decoder
# queries only attend to the short encoder output, never to each other.
print()
print(f"decoder map entries per layer: ar {ar.dec_map_entries_per_layer:,}  mae {mae.dec_map_entries_per_layer:,}"
      f"  ratio {ar.dec_map_entries_per_layer / mae.dec_map_entries_per_layer:.3f}")
print(f"total attention FLOPs:         ar {ar.attn_flops:.3e}  mae {mae.attn_flops:.3e}"
      f"  ratio {ar.attn_flops / mae.attn_flops:.3f}")
print(f"total attention map entries:   ar {ar.attn_map_entries:.3e}  mae {mae.attn_map_entries:.3e}"
      f"  ratio {ar.attn_map_entries / mae.attn_map_entries:.3f}")
