"""Sequence layout, mask regions, the region attention mask and the region loss.

Positions inside a :class:`MaskRegionSet` are 1-indexed and inclusive, so a
region ``(l, r)`` covers sequence slots ``l-1 .. r-1`` of a numpy array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax

from .tokenizer import TextVocab

ROLE_PAD, ROLE_TEXT, ROLE_SEP, ROLE_IMAGE, ROLE_SPECIAL = 0, 1, 2, 3, 4

TEXT_TO_IMAGE = "text_to_image"
MASK_AND_CAPTION = "mask_and_caption"
STRATEGIES = (TEXT_TO_IMAGE, MASK_AND_CAPTION)

PATCH_SIDE = 4
MASK_FRACTION = 0.75


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    roles: np.ndarray
    grid_shape: tuple[int, int]
    language: str = "en"
    strategy: str = TEXT_TO_IMAGE

    def __len__(self):
        return len(self.tokens)

    @property
    def image_slice(self) -> slice:
        idx = np.flatnonzero(self.roles == ROLE_IMAGE)
        return slice(int(idx[0]), int(idx[-1]) + 1)

    @property
    def separator_index(self) -> int:
        return int(np.flatnonzero(self.roles == ROLE_SEP)[0])

    @property
    def text_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == ROLE_TEXT)

    def image_grid(self) -> np.ndarray:
        return self.tokens[self.image_slice].reshape(self.grid_shape)

    def with_tokens(self, tokens) -> "TokenSequence":
        return replace(self, tokens=np.asarray(tokens, dtype=np.int64))


def layout_sequence(text_ids, image_grid, strategy: str, language: str, vocab: TextVocab,
                    text_budget: int | None = None) -> TokenSequence:
    """``text_to_image`` -> [text, BOI, image]; ``mask_and_caption`` -> [image, BOE|BOC, text]."""
    text_ids = np.asarray(text_ids, dtype=np.int64).reshape(-1)
    grid = np.asarray(image_grid, dtype=np.int64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"image grid must be N x N, got {grid.shape}")
    if text_budget is not None and len(text_ids) > text_budget:
        raise ValueError(f"text of {len(text_ids)} tokens exceeds budget {text_budget}")
    img = grid.reshape(-1)
    t_role = np.full(len(text_ids), ROLE_TEXT, np.int8)
    i_role = np.full(len(img), ROLE_IMAGE, np.int8)
    sep_role = np.array([ROLE_SEP], np.int8)
    if strategy == TEXT_TO_IMAGE:
        tokens = np.concatenate([text_ids, [vocab.boi], img])
        roles = np.concatenate([t_role, sep_role, i_role])
    elif strategy == MASK_AND_CAPTION:
        tokens = np.concatenate([img, [vocab.separator(language)], text_ids])
        roles = np.concatenate([i_role, sep_role, t_role])
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return TokenSequence(tokens.astype(np.int64), roles, grid.shape, language, strategy)


def with_bos(seq: TokenSequence, vocab: TextVocab) -> TokenSequence:
    return replace(seq, tokens=np.concatenate([[vocab.bos], seq.tokens]).astype(np.int64),
                   roles=np.concatenate([np.array([ROLE_SPECIAL], np.int8), seq.roles]))


# ---------------------------------------------------------------------------
# Mask regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskRegionSet:
    regions: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        regs = tuple((int(l), int(r)) for l, r in self.regions)
        object.__setattr__(self, "regions", regs)
        for (l, r) in regs:
            if l < 1 or r < l:
                raise ValueError(f"invalid region [{l}, {r}]")
        for (l0, r0), (l1, r1) in zip(regs, regs[1:]):
            if not r0 < l1:
                raise ValueError(f"regions [{l0},{r0}] and [{l1},{r1}] overlap or are unsorted")

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def validate(self, length: int) -> None:
        if self.regions and self.regions[-1][1] > length:
            raise ValueError(f"region {self.regions[-1]} exceeds sequence length {length}")

    def membership(self, length: int) -> np.ndarray:
        """Boolean array over 0-indexed slots: True inside some region."""
        self.validate(length)
        m = np.zeros(length, dtype=bool)
        for l, r in self.regions:
            m[l - 1:r] = True
        return m

    def n_targets(self) -> int:
        return sum(r - l for l, r in self.regions)

    def shifted(self, k: int) -> "MaskRegionSet":
        return MaskRegionSet(tuple((l + k, r + k) for l, r in self.regions))

    def to_json(self) -> str:
        return json.dumps([list(p) for p in self.regions])

    @classmethod
    def from_json(cls, s: str) -> "MaskRegionSet":
        return cls(tuple(tuple(p) for p in json.loads(s)))


def cells_to_regions(cell_mask: np.ndarray, image_start: int) -> list[tuple[int, int]]:
    """Maximal per-row runs of a 2D cell mask as 1-indexed sequence intervals.

    ``image_start`` is the 1-indexed sequence position of cell (0, 0).
    """
    cell_mask = np.asarray(cell_mask, dtype=bool)
    h, w = cell_mask.shape
    out = []
    for row in range(h):
        r = cell_mask[row]
        c = 0
        while c < w:
            if r[c]:
                e = c
                while e + 1 < w and r[e + 1]:
                    e += 1
                base = image_start + row * w
                out.append((base + c, base + e))
                c = e + 1
            else:
                c += 1
    return out


def sample_patch_mask(n: int, rng: np.random.Generator, patch: int = PATCH_SIDE,
                      fraction: float = MASK_FRACTION) -> np.ndarray:
    """Union of random ``patch`` x ``patch`` squares (clipped at the border) covering
    at least ``fraction`` of an n x n grid. Corners are drawn without replacement."""
    mask = np.zeros((n, n), dtype=bool)
    target = int(np.ceil(fraction * n * n))
    for corner in rng.permutation(n * n):
        y, x = divmod(int(corner), n)
        mask[y:y + patch, x:x + patch] = True
        if mask.sum() >= target:
            break
    return mask


def sample_mask_regions(seq: TokenSequence, strategy: str | None = None,
                        seed: int | np.random.Generator = 0) -> MaskRegionSet:
    strategy = strategy or seq.strategy
    if strategy != seq.strategy:
        raise ValueError(f"strategy {strategy!r} does not match sequence layout {seq.strategy!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    img = seq.image_slice
    sep = seq.separator_index
    if strategy == TEXT_TO_IMAGE:
        # the separator opens the region so the first image token is predicted
        return MaskRegionSet(((sep + 1, img.stop),))
    n = seq.grid_shape[0]
    cells = sample_patch_mask(n, rng)
    regs = cells_to_regions(cells, img.start + 1)
    regs.append((sep + 1, len(seq)))
    return MaskRegionSet(tuple(regs))


def build_attention_mask(length: int, regions: MaskRegionSet) -> np.ndarray:
    """A[i, j] is True when slot i may attend to slot j.

    Context slots (outside every region) are visible to all; a slot inside a
    region is visible only to region slots at or after it.
    """
    inside = regions.membership(length)
    causal = np.tri(length, dtype=bool)
    return (~inside)[None, :] | (inside[:, None] & inside[None, :] & causal)


def region_targets(regions: MaskRegionSet) -> tuple[np.ndarray, np.ndarray]:
    """0-indexed (prediction slot, target slot) pairs: slot i predicts slot i+1."""
    pred = [np.arange(l - 1, r - 1) for l, r in regions]
    pred = np.concatenate(pred) if pred else np.zeros(0, np.int64)
    return pred.astype(np.int64), pred.astype(np.int64) + 1


def coglm_loss(logits: np.ndarray, seq, regions: MaskRegionSet) -> float:
    """Mean next-token NLL over the second-to-last tokens of every region."""
    tokens = seq.tokens if isinstance(seq, TokenSequence) else np.asarray(seq)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] != len(tokens):
        raise ValueError("logits are not aligned with the sequence")
    regions.validate(len(tokens))
    pred, tgt = region_targets(regions)
    if len(pred) == 0:
        raise ValueError("no targets: every region has length 1")
    lp = log_softmax(logits[pred], axis=-1)
    return float(-lp[np.arange(len(pred)), tokens[tgt]].sum() / regions.n_targets())


# ---------------------------------------------------------------------------
# Infilling
# ---------------------------------------------------------------------------

ALL_AT_ONCE = "all_at_once"
REGION_BY_REGION = "region_by_region"


@dataclass(frozen=True)
class InfillPass:
    """One decoding pass: attention regions plus the slots to generate (1-indexed)."""
    seq: TokenSequence
    regions: MaskRegionSet
    fill: tuple[int, ...]


def _extend(regs: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for l, r in regs:
        l = l - 1
        if out and l <= out[-1][1]:
            out[-1] = (out[-1][0], r)
        else:
            out.append((l, r))
    return out


def prepare_infill(seq: TokenSequence, regions: MaskRegionSet, mode: str = ALL_AT_ONCE,
                   vocab: TextVocab | None = None) -> list[InfillPass]:
    """Move the context token preceding each region into it.

    Training never predicts a region's first token, so at inference the slot
    before a region becomes that region's unpredicted head. ``all_at_once``
    shifts every region in one pass (the moved tokens are hidden from earlier
    regions); ``region_by_region`` yields one pass per region, keeping every
    already-known token as context.
    """
    regions.validate(len(seq))
    if regions.regions and regions.regions[0][0] == 1:
        if vocab is None:
            raise ValueError("a region starts the sequence; pass vocab so [BOS] can be prepended")
        seq = with_bos(seq, vocab)
        regions = regions.shifted(1)
    regs = list(regions.regions)
    if mode == ALL_AT_ONCE:
        fill = tuple(p for l, r in regs for p in range(l, r + 1))
        return [InfillPass(seq, MaskRegionSet(tuple(_extend(regs))), fill)]
    if mode == REGION_BY_REGION:
        passes = []
        for u, (l, r) in enumerate(regs):
            active = [(l - 1, r)] + [g for g in regs[u + 1:]]
            passes.append(InfillPass(seq, MaskRegionSet(tuple(active)), tuple(range(l, r + 1))))
        return passes
    raise ValueError(f"unknown infill mode {mode!r}")
