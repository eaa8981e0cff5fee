"""Tokenizer building, CogLM pretraining and the two super-resolution finetunes.

All three phases share one Adam loop over hand-derived gradients. Configs are
plain JSON objects whose keys mirror :class:`TrainConfig`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .coglm import (MASK_AND_CAPTION, TEXT_TO_IMAGE, build_attention_mask, layout_sequence,
                    region_targets, sample_mask_regions, with_bos)
from .data import LANGUAGES, SyntheticPair, all_records, caption_for, vocabulary_words
from .hierarchy import SR_SCALE, SR_WINDOW, StageError, grid_input, sr_dense_mask, sr_input
from .local_attention import local_window_mask
from .model import ModelConfig, ModelInput, ModelParams, attn_names, loss_and_grads, make_input
from .tokenizer import (Codebook, TextVocab, build_image_codebook, cluster_codebook, encode_image,
                        extract_patches)

SR_MASK_RATIOS = (0.2, 0.4, 0.6, 0.8, 0.9)


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 50
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------------------
# Tokenizer and corpus
# ---------------------------------------------------------------------------

@dataclass
class EncodedCorpus:
    low: np.ndarray                      # (N, n, n) image ids
    high: np.ndarray                     # (N, 3n, 3n)
    captions: dict[str, list[np.ndarray]]
    records: list

    def __len__(self):
        return len(self.low)


def build_tokenizer(pairs: list[SyntheticPair], k: int = 512, n_clusters: int = 16, patch_size: int = 8,
                    n_patches: int = 20000, seed: int = 0) -> tuple[Codebook, TextVocab]:
    """Codebook from deduplicated low- and high-resolution training patches."""
    pats = []
    for p in pairs:
        pats.append(extract_patches(p.low_u8, patch_size))
        pats.append(extract_patches(p.high_u8, patch_size))
    allp = np.ascontiguousarray(np.concatenate(pats).astype(np.uint8))
    # dedupe on raw row bytes (much faster than a row-wise lexicographic unique)
    _, first = np.unique(allp.view(np.dtype((np.void, allp.shape[1]))).ravel(), return_index=True)
    uniq = allp[np.sort(first)]
    rng = np.random.default_rng(seed)
    if len(uniq) > n_patches:
        uniq = uniq[np.sort(rng.choice(len(uniq), n_patches, replace=False))]
    cb = build_image_codebook(uniq / 255.0, k=k, seed=seed)
    cb = cluster_codebook(cb, n_clusters, seed=seed)
    return cb, TextVocab(vocabulary_words(), offset=cb.size)


def encode_corpus(pairs: list[SyntheticPair], cb: Codebook, vocab: TextVocab) -> EncodedCorpus:
    low = np.stack([encode_image(p.low, cb) for p in pairs])
    high = np.stack([encode_image(p.high, cb) for p in pairs])
    caps = {lang: [np.asarray(vocab.encode(p.captions[lang]), np.int64) for p in pairs] for lang in LANGUAGES}
    return EncodedCorpus(low, high, caps, [p.record for p in pairs])


def random_token_corpus(vocab: TextVocab, n: int, rng: np.random.Generator, side: int = 8) -> EncodedCorpus:
    """Uniform random image grids with grammatical captions; for gradient checks and smoke tests."""
    recs = all_records()
    picks = [recs[int(i)] for i in rng.integers(len(recs), size=n)]
    caps = {lang: [np.asarray(vocab.encode(caption_for(r, lang)), np.int64) for r in picks] for lang in LANGUAGES}
    low = rng.integers(0, vocab.offset, size=(n, side, side))
    high = rng.integers(0, vocab.offset, size=(n, 3 * side, 3 * side))
    return EncodedCorpus(low, high, caps, picks)


def desk_model_config(vocab: TextVocab, **overrides) -> ModelConfig:
    return ModelConfig(**{"vocab_size": vocab.size, "d_model": 64, "n_heads": 4, "n_layers": 2,
                          "max_text_len": 32, "max_grid": 24, **overrides})


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items() if k not in params.frozen}
        self.v = {k: np.zeros_like(v) for k, v in self.m.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict, lr: float) -> float:
        """Apply one update in place and return the pre-clip global gradient norm."""
        c = self.cfg
        norm = math.sqrt(sum(float((grads[k].astype(np.float64) ** 2).sum()) for k in self.m))
        scale = min(1.0, c.grad_clip / (norm + 1e-12)) if c.grad_clip else 1.0
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        corr = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k in self.m:
            g = grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = lr * corr * self.m[k] / (np.sqrt(self.v[k]) + c.eps)
            params.tensors[k] -= upd.astype(params.tensors[k].dtype)
        return norm


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def write_csv(self, path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def _train_loop(params: ModelParams, cfg: TrainConfig, make_batch, stage: str, extra_log=None) -> TrainLog:
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg)
    log = TrainLog()
    for step in range(cfg.steps):
        inp, targets, weights = make_batch(rng)
        lr = cfg.lr_at(step)
        try:
            loss, grads = loss_and_grads(params, inp, targets, weights)
        except FloatingPointError as e:
            raise TrainingDivergence(f"{stage}: step {step}, lr {lr:.3g}: {e}") from e
        if not math.isfinite(loss):
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            raise TrainingDivergence(f"{stage}: loss {loss} at step {step} (lr {lr:.3g}); "
                                     f"non-finite gradients in {bad[:5]}")
        gnorm = opt.step(params, grads, lr)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "loss": loss, "lr": lr, "grad_norm": gnorm}
            if extra_log:
                row.update(extra_log())
            log.rows.append(row)
    return log


# ---------------------------------------------------------------------------
# CogLM pretraining
# ---------------------------------------------------------------------------

def draw_strategy(rng: np.random.Generator) -> str:
    return TEXT_TO_IMAGE if rng.random() < 0.5 else MASK_AND_CAPTION


def coglm_example(corpus: EncodedCorpus, i: int, strategy: str, language: str, vocab: TextVocab,
                  rng: np.random.Generator):
    """One [BOS]-prefixed sequence with sampled regions, plus (pred, target) slots."""
    seq = layout_sequence(corpus.captions[language][i], corpus.low[i], strategy, language, vocab)
    regions = sample_mask_regions(seq, strategy, rng)
    seq = with_bos(seq, vocab)
    regions = regions.shifted(1)
    pred, tgt = region_targets(regions)
    heads = {l - 1 for l, _ in regions}
    if heads & set(tgt.tolist()):
        raise AssertionError("a region's first token was used as a target")
    return seq, regions, pred, tgt


def coglm_batch(corpus: EncodedCorpus, idx, vocab: TextVocab, rng: np.random.Generator, strategies=None):
    seqs, masks, preds, tgts, strat = [], [], [], [], []
    for j, i in enumerate(idx):
        s = strategies[j] if strategies is not None else draw_strategy(rng)
        lang = LANGUAGES[int(rng.integers(len(LANGUAGES)))]
        seq, regions, pred, tgt = coglm_example(corpus, int(i), s, lang, vocab, rng)
        seqs.append(seq)
        masks.append(build_attention_mask(len(seq), regions))
        preds.append(pred)
        tgts.append(seq.tokens[tgt])
        strat.append(s)
    inp = make_input(seqs, masks, vocab.pad)
    targets = np.zeros(inp.shape, np.int64)
    weights = np.zeros(inp.shape)
    for b, (p, t) in enumerate(zip(preds, tgts)):
        targets[b, p] = t
        weights[b, p] = 1.0 / (len(p) * len(idx))
    return inp, targets, weights, strat


def pretrain_coglm(corpus: EncodedCorpus, vocab: TextVocab, cfg: TrainConfig = TrainConfig(),
                   params: ModelParams | None = None, model_config: ModelConfig | None = None):
    """Region-restricted next-token training with a 50/50 strategy mix.

    Returns the trained parameters and the training log (step, loss, lr,
    gradient norm and cumulative strategy counts).
    """
    if params is None:
        params = ModelParams.init(model_config or desk_model_config(vocab), seed=cfg.seed)
    else:
        params = params.copy()
    counts = {TEXT_TO_IMAGE: 0, MASK_AND_CAPTION: 0}

    def make_batch(rng):
        idx = rng.integers(len(corpus), size=cfg.batch_size)
        inp, targets, weights, strat = coglm_batch(corpus, idx, vocab, rng)
        for s in strat:
            counts[s] += 1
        return inp, targets, weights

    log = _train_loop(params, cfg, make_batch, "coglm",
                      lambda: {"n_text_to_image": counts[TEXT_TO_IMAGE],
                               "n_mask_and_caption": counts[MASK_AND_CAPTION]})
    params.meta = {"stage": "coglm", "trained": True, "steps": cfg.steps, "config": cfg.to_dict()}
    return params, log


# ---------------------------------------------------------------------------
# Super-resolution finetuning
# ---------------------------------------------------------------------------

def direct_trainable(params: ModelParams) -> set[str]:
    return {n for l in range(params.config.n_layers) for n in attn_names(l, 1)}


def direct_batch(corpus: EncodedCorpus, idx, vocab: TextVocab):
    low, high = corpus.low[idx], corpus.high[idx]
    b, n, _ = low.shape
    inp = sr_input(low, vocab.mask, SR_SCALE)
    inp.mask = sr_dense_mask(n, n, SR_SCALE, SR_WINDOW)
    s_enc = n * n
    targets = np.zeros(inp.shape, np.int64)
    weights = np.zeros(inp.shape)
    targets[:, s_enc:] = high.reshape(b, -1)
    weights[:, s_enc:] = 1.0 / (high[0].size * b)
    return inp, targets, weights


def iterative_batch(corpus: EncodedCorpus, idx, vocab: TextVocab, rng: np.random.Generator):
    high = corpus.high[idx]
    b, h, w = high.shape
    ratios = rng.choice(SR_MASK_RATIOS, size=b)
    tokens = high.reshape(b, -1).copy()
    weights = np.zeros(tokens.shape)
    for j, r in enumerate(ratios):
        # floor keeps at least 10% of the grid as context at the 0.9 ratio
        m = rng.choice(h * w, size=max(1, int(r * h * w + 1e-9)), replace=False)
        tokens[j, m] = vocab.mask
        weights[j, m] = 1.0 / (len(m) * b)
    inp = grid_input(tokens.reshape(b, h, w))
    inp.mask = local_window_mask(h, w, *SR_WINDOW)
    return inp, high.reshape(b, -1), weights, ratios


def finetune_sr(params: ModelParams, stage: str, corpus: EncodedCorpus, vocab: TextVocab,
                cfg: TrainConfig = TrainConfig(steps=120, batch_size=4, lr=2e-3, warmup=10)):
    """``direct``: two attention streams, only decoder attention trainable.
    ``iterative``: masked-cell prediction under 9x9 local attention."""
    if params.meta.get("stage") != "coglm" or not params.meta.get("trained"):
        raise StageError(f"finetune_sr needs trained coglm parameters, got stage {params.meta.get('stage')!r}")
    ratios_seen: list[float] = []
    if stage == "direct":
        p = params.with_streams(2)
        p.frozen = set(p.tensors) - direct_trainable(p)

        def make_batch(rng):
            return direct_batch(corpus, rng.integers(len(corpus), size=cfg.batch_size), vocab)
    elif stage == "iterative":
        p = params.copy()
        p.frozen = set()

        def make_batch(rng):
            inp, t, w, r = iterative_batch(corpus, rng.integers(len(corpus), size=cfg.batch_size), vocab, rng)
            ratios_seen.extend(r.tolist())
            return inp, t, w
    else:
        raise ValueError(f"unknown stage {stage!r}")
    log = _train_loop(p, cfg, make_batch, stage)
    p.meta = {"stage": stage, "trained": True, "steps": cfg.steps, "config": cfg.to_dict()}
    if stage == "iterative":
        p.meta["mask_ratios"] = sorted(set(ratios_seen))
    return p, log
