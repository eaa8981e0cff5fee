"""Windowed attention against the dense masked version, then the timing harness."""
import sys

import numpy as np

from hiergen.local_attention import (WindowSpec, benchmark, dense_masked_attention, local_attention_2d,
                                     local_window_mask, speed_and_memory_ratios, write_benchmark_csv)

rng = np.random.default_rng(0)
q, k, v = (rng.standard_normal((16, 16, 32)).astype(np.float32) for _ in range(3))
win = local_attention_2d(q, k, v, WindowSpec((5, 5)))
dense = dense_masked_attention(q.reshape(-1, 32), k.reshape(-1, 32), v.reshape(-1, 32),
                               local_window_mask(16, 16, 5, 5))
print("max |windowed - dense| =", float(np.abs(win.reshape(-1, 32) - dense).max()))

rows = benchmark(grid_sizes=(24, 48), window=9, repetitions=3)
write_benchmark_csv(rows, sys.stdout)
for g, (speed, mem) in speed_and_memory_ratios(rows).items():
    print(f"{g}x{g}: {speed:.1f}x faster, {mem:.1%} of the dense peak")
