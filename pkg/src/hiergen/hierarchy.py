"""Direct and iterative (LoPAR) super-resolution over image-token grids.

Direct SR maps an N x N grid to a (scale*N)^2 grid in one forward: the
decoder sees only [MASK] tokens and reaches the low-resolution grid through
cross-resolution local attention, and every output cell is sampled
independently from its own marginal.

Iterative SR keeps a fixed subset of cells and regenerates the rest in a few
parallel iterations. The default plan assigns masked cell (r, c) to
iteration ``(r + c) mod 6``, so orthogonal neighbours never share an
iteration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .coglm import ROLE_IMAGE
from .local_attention import (WindowSpec, cross_resolution_local_attention, cross_resolution_mask,
                              local_attention_2d, local_window_mask)
from .model import ModelInput, ModelParams, forward
from .sampling import SamplerConfig, draw, final_distribution, softmax
from .tokenizer import TextVocab

KEPT = -1
SR_SCALE = 3
DEFAULT_SIGMA = 6
COMPRESSED_ITERATIONS = 6
SR_WINDOW = (9, 9)


class StageError(RuntimeError):
    pass


def require_stage(params: ModelParams, stage: str) -> None:
    got = params.meta.get("stage")
    if got != stage:
        raise StageError(f"expected {stage!r} parameters, checkpoint is {got!r}")
    if not params.meta.get("trained", False):
        raise StageError(f"{stage!r} parameters are flagged as untrained")


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def window_coords(i: int, width: int, sigma: int) -> tuple[int, int]:
    """Row/column of 1-indexed raster position ``i`` inside its sigma x sigma window."""
    return ((i - 1) // width) % sigma, ((i - 1) % width) % sigma


@dataclass(frozen=True)
class LoParSchedule:
    plan: np.ndarray  # (H, W): KEPT or iteration index
    sigma: int
    n_iterations: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape

    @property
    def kept(self) -> np.ndarray:
        return self.plan == KEPT

    def cells(self, t: int) -> np.ndarray:
        """Raster indices of the cells generated at iteration ``t``."""
        return np.flatnonzero(self.plan.reshape(-1) == t)

    def nonempty_iterations(self) -> list[int]:
        return [t for t in range(self.n_iterations) if len(self.cells(t))]

    def adjacent_conflicts(self) -> int:
        """Orthogonally adjacent masked pairs that share an iteration."""
        p = self.plan
        h = (p[:, 1:] == p[:, :-1]) & (p[:, 1:] != KEPT)
        v = (p[1:, :] == p[:-1, :]) & (p[1:, :] != KEPT)
        return int(h.sum() + v.sum())

    def to_json(self) -> str:
        return json.dumps({"sigma": self.sigma, "iterations": self.n_iterations,
                           "shape": list(self.shape), "plan": self.plan.tolist()})

    @classmethod
    def from_json(cls, s: str) -> "LoParSchedule":
        d = json.loads(s)
        return cls(np.array(d["plan"], dtype=np.int64), d["sigma"], d["iterations"])


def build_lopar_schedule(h: int, w: int, sigma: int = DEFAULT_SIGMA, keep_pattern: str = "grid",
                         compressed: bool = True, seed: int = 0) -> LoParSchedule:
    """Kept cells plus an iteration index for every other cell.

    ``grid`` keeps cells with even row and even column inside each sigma x
    sigma tile; ``seeded_random`` keeps sigma^2 // 4 random cells per tile.
    The compressed plan has 6 iterations; the uncompressed plan groups cells
    by their in-window diagonal ``row + col`` into 2*sigma - 1 iterations.
    """
    if sigma < 1 or h % sigma or w % sigma:
        raise ValueError(f"sigma={sigma} must divide grid {h}x{w}")
    r, c = np.mgrid[0:h, 0:w]
    if keep_pattern == "grid":
        kept = ((r % sigma) % 2 == 0) & ((c % sigma) % 2 == 0)
    elif keep_pattern == "seeded_random":
        rng = np.random.default_rng(seed)
        kept = np.zeros((h, w), dtype=bool)
        quota = sigma * sigma // 4
        for ty in range(0, h, sigma):
            for tx in range(0, w, sigma):
                pick = rng.choice(sigma * sigma, size=quota, replace=False)
                kept[ty + pick // sigma, tx + pick % sigma] = True
    else:
        raise ValueError(f"unknown keep pattern {keep_pattern!r}")
    if compressed:
        it = (r + c) % COMPRESSED_ITERATIONS
        n_it = COMPRESSED_ITERATIONS
    else:
        it = (r % sigma) + (c % sigma)
        n_it = 2 * sigma - 1
    plan = np.where(kept, KEPT, it).astype(np.int64)
    return LoParSchedule(plan, sigma, n_it)


# ---------------------------------------------------------------------------
# Model plumbing
# ---------------------------------------------------------------------------

def grid_input(grids: np.ndarray, stream: int = 0) -> ModelInput:
    """Image-only input for a batch of (H, W) grids."""
    grids = np.asarray(grids)
    b, h, w = grids.shape
    s = h * w
    r = np.tile(np.arange(s) // w, (b, 1))
    c = np.tile(np.arange(s) % w, (b, 1))
    return ModelInput(grids.reshape(b, s).astype(np.int64), np.full((b, s), ROLE_IMAGE, np.int8),
                      np.full((b, s), -1, np.int64), r, c, None,
                      np.full(s, stream, np.int64) if stream else None)


def local_attention_fn(h: int, w: int, window=SR_WINDOW, workers: int = 1):
    spec = WindowSpec(tuple(window))

    def fn(q, k, v):
        b, nh, s, dh = q.shape
        o = local_attention_2d(q.reshape(b, nh, h, w, dh), k.reshape(b, nh, h, w, dh),
                               v.reshape(b, nh, h, w, dh), spec, workers)
        return o.reshape(b, nh, s, dh)
    return fn


def sr_input(low: np.ndarray, mask_id: int, scale: int = SR_SCALE) -> ModelInput:
    """[encoder low-res cells (stream 0), decoder [MASK] cells (stream 1)]."""
    low = np.asarray(low)
    if low.ndim == 2:
        low = low[None]
    b, n, m = low.shape
    enc = grid_input(low)
    dec = grid_input(np.full((b, n * scale, m * scale), mask_id))
    cat = lambda a, d: np.concatenate([a, d], axis=1)
    stream = np.concatenate([np.zeros(n * m, np.int64), np.ones(n * m * scale * scale, np.int64)])
    return ModelInput(cat(enc.tokens, dec.tokens), cat(enc.roles, dec.roles), cat(enc.pos1d, dec.pos1d),
                      cat(enc.row, dec.row), cat(enc.col, dec.col), None, stream)


def sr_dense_mask(n: int, m: int, scale: int = SR_SCALE, window=SR_WINDOW) -> np.ndarray:
    """(S, S) mask for [encoder, decoder] ordering: encoder cells see the whole
    encoder grid, decoder cells see their cross-resolution local windows."""
    se = n * m
    hd, wd = n * scale, m * scale
    sd = hd * wd
    mask = np.zeros((se + sd, se + sd), dtype=bool)
    mask[:se, :se] = True
    cross = cross_resolution_mask(hd, wd, n, m, *window)
    mask[se:, se:] = cross[:, :sd]
    mask[se:, :se] = cross[:, sd:]
    return mask


def sr_attention_fn(n: int, m: int, scale: int = SR_SCALE, window=SR_WINDOW, workers: int = 1):
    spec = WindowSpec(tuple(window), cross_scale=scale)
    se = n * m
    hd, wd = n * scale, m * scale

    def fn(q, k, v):
        b, nh, s, dh = q.shape
        qe, ke, ve = q[:, :, :se], k[:, :, :se], v[:, :, :se]
        sc = (qe @ ke.transpose(0, 1, 3, 2)) / np.sqrt(dh)
        enc = softmax(sc).astype(q.dtype) @ ve
        g = lambda a, hh, ww: a.reshape(b, nh, hh, ww, dh)
        dec = cross_resolution_local_attention(g(q[:, :, se:], hd, wd), g(k[:, :, se:], hd, wd),
                                               g(v[:, :, se:], hd, wd), g(ke, n, m), g(ve, n, m), spec,
                                               workers)
        return np.concatenate([enc, dec.reshape(b, nh, hd * wd, dh)], axis=2)
    return fn


def restrict_to_image(logits: np.ndarray, n_image: int) -> np.ndarray:
    return softmax(logits[..., :n_image])


# ---------------------------------------------------------------------------
# Direct SR
# ---------------------------------------------------------------------------

def direct_sr_probs(low: np.ndarray, params: ModelParams, vocab: TextVocab, scale: int = SR_SCALE,
                    window=SR_WINDOW, attention: str = "kernel", workers: int = 1) -> np.ndarray:
    """Per-cell image-token distributions ``(B, scale*N, scale*N, K)``."""
    require_stage(params, "direct")
    low = np.asarray(low)
    single = low.ndim == 2
    if single:
        low = low[None]
    b, n, m = low.shape
    inp = sr_input(low, vocab.mask, scale)
    if attention == "kernel":
        logits = forward(params, inp, attention_fn=sr_attention_fn(n, m, scale, window, workers))
    else:
        inp.mask = sr_dense_mask(n, m, scale, window)
        logits = forward(params, inp)
    probs = restrict_to_image(logits[:, n * m:], vocab.offset).reshape(b, n * scale, m * scale, -1)
    return probs[0] if single else probs


def sample_marginals(probs: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    """One independent draw per cell from ``probs[..., K]`` (argmax when temperature is 0)."""
    p = np.asarray(probs, dtype=np.float64)
    if temperature == 0:
        return p.argmax(-1)
    if temperature != 1:
        lp = np.log(np.maximum(p, 1e-300)) / temperature
        p = softmax(lp)
    flat = p.reshape(-1, p.shape[-1])
    cum = np.cumsum(flat, axis=1)
    u = rng.random(len(flat)) * cum[:, -1]
    idx = (cum <= u[:, None]).sum(axis=1)
    idx = np.minimum(idx, flat.shape[1] - 1)
    return idx.reshape(p.shape[:-1])


def direct_sr(low: np.ndarray, params: ModelParams, vocab: TextVocab, seed: int = 0,
              temperature: float = 1.0, attention: str = "kernel", workers: int = 1) -> np.ndarray:
    probs = direct_sr_probs(low, params, vocab, attention=attention, workers=workers)
    return sample_marginals(probs, np.random.default_rng(seed), temperature)


# ---------------------------------------------------------------------------
# Iterative SR
# ---------------------------------------------------------------------------

@dataclass
class IterativeResult:
    grid: np.ndarray
    n_forwards: int


def iterative_sr(high: np.ndarray, params: ModelParams, vocab: TextVocab, schedule: LoParSchedule,
                 sampler: SamplerConfig = SamplerConfig(), codebook=None, seed: int = 0,
                 window=SR_WINDOW, attention: str = "kernel", cell_order=None,
                 workers: int = 1) -> IterativeResult:
    """Regenerate every non-kept cell, one model forward per non-empty iteration.

    All cells of an iteration are sampled from the same snapshot with their
    own generator seeded by ``(seed, iteration, cell)``, so the order in which
    they are visited (``cell_order``, a permutation hook) cannot matter.
    """
    require_stage(params, "iterative")
    high = np.asarray(high, dtype=np.int64)
    if high.shape != schedule.shape:
        raise ValueError(f"grid {high.shape} does not match schedule {schedule.shape}")
    h, w = high.shape
    n_image = vocab.offset
    flat_plan = schedule.plan.reshape(-1)
    cur = np.where(flat_plan == KEPT, high.reshape(-1), vocab.mask)
    attn_fn = local_attention_fn(h, w, window, workers) if attention == "kernel" else None
    dense_mask = None if attn_fn else local_window_mask(h, w, *window)
    n_forwards = 0
    for t in schedule.nonempty_iterations():
        inp = grid_input(cur.reshape(1, h, w))
        inp.mask = dense_mask
        logits = forward(params, inp, attention_fn=attn_fn)[0]
        n_forwards += 1
        snapshot = cur.copy()
        cells = schedule.cells(t)
        if cell_order is not None:
            cells = cell_order(cells)
        probs = softmax(logits[cells, :n_image])
        for j, cell in enumerate(cells):
            rng = np.random.default_rng([seed, t, int(cell)])
            cur[cell] = draw(final_distribution(probs[j], sampler, codebook), rng)
        assert np.array_equal(np.delete(cur, cells), np.delete(snapshot, cells))
    return IterativeResult(cur.reshape(h, w), n_forwards)
