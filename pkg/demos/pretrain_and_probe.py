"""Pretrain the desk model briefly, then compare linear probes on pretrained and random encoders.

Run: python demos/pretrain_and_probe.py [steps]

With the default 200 steps this takes about a minute on one core.
"""

import sys

from arclust.config import DESK
from arclust.diagnostics import attention_rank_report
from arclust.model import Net
from arclust.trainer import initial_checkpoint, load_corpus, pretrain_loop, probe_finetune

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = DESK.replace(steps=steps, seed=0)
corpus = load_corpus(cfg)
print(f"{len(corpus.labels)} videos, {len(corpus.train_indices)} train / {len(corpus.test_indices)} held out")

ckpt, rows = pretrain_loop(cfg, corpus=corpus)
for r in rows[:: max(1, len(rows) // 10)] + rows[-1:]:
    print(f"step {r.step:4d}  loss {r.loss:.4f}  lr {r.lr:.2e}")

pre = probe_finetune(ckpt, "linear", corpus)
rnd = probe_finetune(initial_checkpoint(cfg), "linear", corpus)
print(f"\nlinear probe held-out accuracy: pretrained {pre.accuracy:.3f}, random init {rnd.accuracy:.3f}")

# Mean numerical rank of full-attention maps per encoder layer.
_, rec = Net(cfg.model_config(), ckpt.params).features(corpus.cubes[:4], record=True)
print("\n" + attention_rank_report(rec).csv(), end="")
