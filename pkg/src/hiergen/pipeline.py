"""End-to-end generation: low-resolution AR sampling, caption-score selection,
direct SR, iterative SR and decoding, plus text-guided infilling."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax

from .coglm import (ALL_AT_ONCE, MASK_AND_CAPTION, TEXT_TO_IMAGE, MaskRegionSet, TokenSequence,
                    build_attention_mask, cells_to_regions, layout_sequence, prepare_infill, with_bos)
from .hierarchy import build_lopar_schedule, direct_sr, iterative_sr, require_stage
from .imageio import write_image
from .model import ModelParams, load_params, make_input, forward, save_params
from .sampling import SamplerConfig, draw, final_distribution, softmax
from .tokenizer import Codebook, TextVocab, decode_tokens, load_codebook, save_codebook

STAGES = ("coglm", "direct", "iterative")
_FILES = {"coglm": "coglm.ckpt", "direct": "direct.ckpt", "iterative": "iterative.ckpt"}


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class Bundle:
    codebook: Codebook
    vocab: TextVocab
    coglm: ModelParams | None = None
    direct: ModelParams | None = None
    iterative: ModelParams | None = None

    def stage(self, name: str) -> ModelParams:
        p = getattr(self, name)
        if p is None:
            raise MissingCheckpoint(f"no {name} checkpoint loaded")
        require_stage(p, name)
        return p

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_codebook(self.codebook, d / "codebook.bin")
        (d / "vocab.json").write_text(json.dumps(self.vocab.to_dict()))
        for s in STAGES:
            if getattr(self, s) is not None:
                save_params(getattr(self, s), d / _FILES[s])

    @classmethod
    def load(cls, directory, require=()) -> "Bundle":
        d = Path(directory)
        for f in ("codebook.bin", "vocab.json"):
            if not (d / f).exists():
                raise MissingCheckpoint(f"tokenizer file {d / f} not found")
        b = cls(load_codebook(d / "codebook.bin"), TextVocab.from_dict(json.loads((d / "vocab.json").read_text())))
        for s in STAGES:
            path = d / _FILES[s]
            if path.exists():
                setattr(b, s, load_params(path))
            elif s in require:
                raise MissingCheckpoint(f"missing {s} checkpoint: {path}")
        return b


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Low-resolution generation
# ---------------------------------------------------------------------------

def _t2i_prefix(text_ids, grid_side: int, vocab: TextVocab, language: str) -> TokenSequence:
    placeholder = np.zeros((grid_side, grid_side), np.int64)
    return with_bos(layout_sequence(text_ids, placeholder, TEXT_TO_IMAGE, language, vocab), vocab)


def _image_regions(seq: TokenSequence) -> MaskRegionSet:
    img = seq.image_slice
    return MaskRegionSet(((img.start, img.stop),))  # [BOI] .. last cell, 1-indexed


def _decode_slots(params: ModelParams, seqs: list[TokenSequence], regions: MaskRegionSet, slots,
                  rngs, sampler: SamplerConfig, cb: Codebook, upweight: float) -> list[np.ndarray]:
    """Sample ``slots`` (0-indexed) left to right; slot j reads the logits at j - 1."""
    vocab_k = cb.size
    mask = build_attention_mask(len(seqs[0]), regions)
    tokens = np.stack([s.tokens for s in seqs])
    template = seqs[0]
    for j in slots:
        inp = make_input([template.with_tokens(t) for t in tokens], [mask] * len(tokens), pad_id=0)
        logits = forward(params, inp, upweight)[:, j - 1, :vocab_k]
        probs = softmax(logits)
        for b in range(len(tokens)):
            tokens[b, j] = draw(final_distribution(probs[b], sampler, cb), rngs[b])
    return list(tokens)


def generate_low_res(text: str, bundle: Bundle, n_candidates: int = 16, sampler: SamplerConfig = SamplerConfig(),
                     upweight: float = 0.0, seed: int = 0, language: str = "en", grid_side: int = 8) -> np.ndarray:
    """``(n_candidates, n, n)`` grids; candidate ``i`` draws from ``default_rng([seed, i])``."""
    params = bundle.stage("coglm")
    ids = bundle.vocab.encode(text)
    if not ids:
        raise ValueError("empty text")
    seq = _t2i_prefix(ids, grid_side, bundle.vocab, language)
    img = seq.image_slice
    rngs = [np.random.default_rng([seed, i]) for i in range(n_candidates)]
    out = _decode_slots(params, [seq] * n_candidates, _image_regions(seq), range(img.start, img.stop),
                        rngs, sampler, bundle.codebook, upweight)
    return np.stack([t[img].reshape(grid_side, grid_side) for t in out])


def caption_score(grid, text: str, bundle: Bundle, language: str = "en") -> float:
    """Perplexity of ``text`` given the image, under the captioning layout.

    The next-token distribution is restricted to content words, so a model
    with uniform output scores exactly the content vocabulary size.
    """
    return float(caption_scores(np.asarray(grid)[None], text, bundle, language)[0])


def caption_scores(grids, text: str, bundle: Bundle, language: str = "en") -> np.ndarray:
    params = bundle.stage("coglm")
    vocab = bundle.vocab
    ids = vocab.encode(text)
    if not ids:
        raise ValueError("empty text")
    seqs = [with_bos(layout_sequence(ids, g, MASK_AND_CAPTION, language, vocab), vocab) for g in grids]
    sep = seqs[0].separator_index  # 0-indexed; region runs from the separator to the end
    regions = MaskRegionSet(((sep + 1, len(seqs[0])),))
    mask = build_attention_mask(len(seqs[0]), regions)
    logits = forward(params, make_input(seqs, [mask] * len(seqs), vocab.pad))
    content = vocab.content_ids
    pred = np.arange(sep, len(seqs[0]) - 1)
    lp = log_softmax(logits[:, pred][:, :, content].astype(np.float64), axis=-1)
    tgt = np.searchsorted(content, np.asarray(ids))
    nll = -lp[:, np.arange(len(ids)), tgt].mean(axis=1)
    return np.exp(nll)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class GenerationResult:
    images: list[np.ndarray]          # (H, W, 3) float in [0, 1], best first
    high_grids: list[np.ndarray]
    low_grids: np.ndarray             # every candidate, generation order
    scores: np.ndarray | None         # caption perplexity per candidate
    ranking: list[int]                # candidate indices, best first
    config: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {"config": self.config, "config_hash": config_hash(self.config),
                "seed": self.config.get("seed"), "ranking": self.ranking,
                "scores": None if self.scores is None else [float(s) for s in self.scores]}


def rank_candidates(scores: np.ndarray) -> list[int]:
    """Ascending score; ties keep candidate order."""
    return [int(i) for i in np.argsort(np.asarray(scores), kind="stable")]


def upscale(low: np.ndarray, bundle: Bundle, sampler: SamplerConfig, seed: int, workers: int = 1) -> np.ndarray:
    """Direct SR followed by iterative LoPAR refinement."""
    high = direct_sr(low, bundle.stage("direct"), bundle.vocab, seed=seed, temperature=sampler.temperature,
                     workers=workers)
    sched = build_lopar_schedule(*high.shape)
    return iterative_sr(high, bundle.stage("iterative"), bundle.vocab, sched, sampler,
                        bundle.codebook, seed=seed, workers=workers).grid


def generate(text: str, bundle: Bundle, n_candidates: int = 16, keep: int = 1,
             sampler: SamplerConfig = SamplerConfig(), upweight: float = 0.0, seed: int = 0,
             post_select: bool = True, language: str = "en", workers: int = 1) -> GenerationResult:
    for s in STAGES:
        bundle.stage(s)
    if not 1 <= keep <= n_candidates:
        raise ValueError("keep must lie in [1, n_candidates]")
    low = generate_low_res(text, bundle, n_candidates, sampler, upweight, seed, language)
    scores = None
    ranking = list(range(n_candidates))
    if post_select and n_candidates > 1:
        scores = caption_scores(low, text, bundle, language)
        ranking = rank_candidates(scores)
    highs, images = [], []
    for i in ranking[:keep]:
        hg = upscale(low[i], bundle, sampler, seed=seed * 1000 + i, workers=workers)
        highs.append(hg)
        images.append(decode_tokens(hg, bundle.codebook))
    cfg = {"text": text, "n_candidates": n_candidates, "keep": keep, "sampler": asdict(sampler),
           "upweight": upweight, "seed": seed, "post_select": post_select, "language": language}
    return GenerationResult(images, highs, low, scores, ranking, cfg)


def write_run(result: GenerationResult, out_dir, fmt: str = "png") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rank, img in enumerate(result.images):
        p = out / f"image_{rank:02d}.{fmt}"
        write_image(p, img)
        paths.append(p)
    man = result.manifest()
    man["images"] = [p.name for p in paths]
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    return paths


# ---------------------------------------------------------------------------
# Infilling
# ---------------------------------------------------------------------------

def rect_cells(shape, rect) -> np.ndarray:
    """Boolean cell mask of ``rect = (row0, col0, row1, col1)``, end-exclusive."""
    r0, c0, r1, c1 = rect
    h, w = shape
    if not (0 <= r0 <= r1 <= h and 0 <= c0 <= c1 <= w):
        raise ValueError(f"rectangle {rect} lies outside the {h}x{w} grid")
    if r1 == r0 or c1 == c0:
        raise ValueError("empty infill region")
    m = np.zeros(shape, dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def infill_edit(grid, rect, text: str, bundle: Bundle, mode: str = ALL_AT_ONCE,
                sampler: SamplerConfig = SamplerConfig(), upweight: float = 0.0, seed: int = 0,
                language: str = "en", cells: np.ndarray | None = None) -> np.ndarray:
    """Regenerate the cells of ``rect`` (or an explicit boolean ``cells`` mask)
    conditioned on the text and every untouched cell; returns the new grid.

    Cells are decoded in raster order with ``default_rng([seed, 0])``, so a
    full-grid rectangle reproduces candidate 0 of :func:`generate_low_res`.
    """
    params = bundle.stage("coglm")
    grid = np.asarray(grid, dtype=np.int64)
    target = rect_cells(grid.shape, rect) if cells is None else np.asarray(cells, dtype=bool)
    if not target.any():
        raise ValueError("empty infill region")
    ids = bundle.vocab.encode(text)
    if not ids:
        raise ValueError("empty text")
    seq = with_bos(layout_sequence(ids, grid, TEXT_TO_IMAGE, language, bundle.vocab), bundle.vocab)
    img = seq.image_slice
    regions = MaskRegionSet(tuple(cells_to_regions(target, img.start + 1)))
    passes = prepare_infill(seq, regions, mode, bundle.vocab)
    rng = np.random.default_rng([seed, 0])
    tokens = seq.tokens.copy()
    fill_slots = set(np.flatnonzero(np.concatenate([np.zeros(img.start, bool), target.reshape(-1)])))
    for ps in passes:
        todo = [p - 1 for p in ps.fill if p - 1 in fill_slots]
        (tokens,) = _decode_slots(params, [seq.with_tokens(tokens)], ps.regions, todo, [rng], sampler,
                                  bundle.codebook, upweight)
    out = tokens[img].reshape(grid.shape)
    assert np.array_equal(out[~target], grid[~target])
    return out
