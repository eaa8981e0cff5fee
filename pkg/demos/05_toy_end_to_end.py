"""Synthetic shapes -> tokenizer -> three training stages -> a generated and an edited image.

Takes a few CPU minutes at the defaults; pass a smaller step count to
rush it, e.g. ``python demos/05_toy_end_to_end.py 100``.
"""
import sys
from pathlib import Path

import numpy as np

from hiergen.data import caption_for, synthetic_dataset
from hiergen.imageio import write_image
from hiergen.pipeline import Bundle, caption_score, generate, infill_edit, write_run
from hiergen.sampling import SamplerConfig
from hiergen.tokenizer import decode_tokens
from hiergen.training import TrainConfig, build_tokenizer, encode_corpus, finetune_sr, pretrain_coglm

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
out = Path("demo_out")

splits = synthetic_dataset(2000, seed=0)
print(len(splits.train), "train pairs,", len(splits.val), "held out; e.g.", splits.train[0].captions)
cb, vocab = build_tokenizer(splits.train)
train = encode_corpus(splits.train, cb, vocab)
val = encode_corpus(splits.val, cb, vocab)

coglm, log = pretrain_coglm(train, vocab, TrainConfig(steps=steps))
print(f"pretraining loss {log.losses[0]:.3f} -> {log.losses[-1]:.3f}")
sr_steps = max(10, steps // 5)
direct, _ = finetune_sr(coglm, "direct", train, vocab, TrainConfig(steps=sr_steps, batch_size=4, warmup=10))
iterative, _ = finetune_sr(coglm, "iterative", train, vocab, TrainConfig(steps=sr_steps, batch_size=4, warmup=10))
bundle = Bundle(cb, vocab, coglm, direct, iterative)

# caption score: the true caption should be less surprising than a wrong one
rec = val.records[0]
print("true caption", caption_for(rec), caption_score(val.low[0], caption_for(rec), bundle))
print("wrong caption", caption_for(val.records[1]), caption_score(val.low[0], caption_for(val.records[1]), bundle))

res = generate("red circle above blue square", bundle, n_candidates=8, seed=7)
print("candidate ranking", res.ranking, "scores", np.round(res.scores, 2))
print("wrote", write_run(res, out))

# repaint the middle of a held-out image with a different caption
edited = infill_edit(val.low[0], (2, 2, 6, 6), "green triangle", bundle, sampler=SamplerConfig(k=2), seed=1)
write_image(out / "before.png", decode_tokens(val.low[0], cb))
write_image(out / "after.png", decode_tokens(edited, cb))
print("wrote", out / "before.png", out / "after.png")
