"""Procedural captioned scenes: one or two coloured shapes on a plain background.

Each scene is rendered at 192 px and box-downsampled 3x to 64 px, giving a
low-resolution image and its high-resolution counterpart from one record.
Captions follow a small grammar in two word sets, ``en`` and a pinyin-style
``zh``, and parse back into the record they describe.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

HIGH_PX = 192
LOW_PX = 64
SR_FACTOR = HIGH_PX // LOW_PX

COLORS = {"red": (220, 40, 40), "green": (40, 180, 60), "blue": (40, 70, 220), "yellow": (235, 210, 40)}
BACKGROUNDS = {"black": (15, 15, 15), "white": (240, 240, 240), "gray": (128, 128, 128),
               "purple": (110, 50, 140)}
SHAPES = ("circle", "square", "triangle")
RELATIONS = ("above", "below", "left of", "right of")

LEXICON = {
    "en": {**{c: c for c in COLORS}, **{s: s for s in SHAPES}, **{r: r for r in RELATIONS}},
    "zh": {"red": "hong", "green": "lv", "blue": "lan", "yellow": "huang",
           "circle": "yuan", "square": "fang", "triangle": "sanjiao",
           "above": "zai shangmian", "below": "zai xiamian", "left of": "zai zuobian",
           "right of": "zai youbian"},
}
LANGUAGES = tuple(LEXICON)

# where the first object sits relative to the second, as (dy, dx) in units of the offset
_REL_OFFSET = {"above": (-1, 0), "below": (1, 0), "left of": (0, -1), "right of": (0, 1)}


@dataclass(frozen=True)
class SceneRecord:
    background: str
    objects: tuple[tuple[str, str], ...]  # (color, shape)
    relation: str | None = None


@dataclass(frozen=True)
class SyntheticPair:
    record: SceneRecord
    high_u8: np.ndarray   # (192, 192, 3) uint8
    low_u8: np.ndarray    # (64, 64, 3) uint8
    captions: dict        # language -> caption

    @property
    def high(self) -> np.ndarray:
        return self.high_u8 / 255.0

    @property
    def low(self) -> np.ndarray:
        return self.low_u8 / 255.0

    def caption(self, language: str = "en") -> str:
        return self.captions[language]


def caption_for(record: SceneRecord, language: str = "en") -> str:
    lex = LEXICON[language]
    (c0, s0), *rest = record.objects
    words = [lex[c0], lex[s0]]
    if rest:
        c1, s1 = rest[0]
        words += [lex[record.relation], lex[c1], lex[s1]]
    return " ".join(words)


def parse_caption(caption: str, language: str = "en") -> tuple[tuple[tuple[str, str], ...], str | None]:
    """Inverse of :func:`caption_for` (the background is not part of a caption)."""
    inv = {v: k for k, v in LEXICON[language].items()}
    words = caption.split()
    out, i = [], 0
    phrases = sorted(inv, key=lambda p: -len(p.split()))
    while i < len(words):
        for p in phrases:
            n = len(p.split())
            if words[i:i + n] == p.split():
                out.append(inv[p])
                i += n
                break
        else:
            raise ValueError(f"cannot parse {caption!r} at {words[i]!r}")
    if len(out) == 2 and out[0] in COLORS and out[1] in SHAPES:
        return ((out[0], out[1]),), None
    if len(out) == 5 and out[2] in RELATIONS:
        return ((out[0], out[1]), (out[3], out[4])), out[2]
    raise ValueError(f"caption {caption!r} does not follow the grammar")


def vocabulary_words() -> list[str]:
    words = []
    for lang in LANGUAGES:
        for phrase in LEXICON[lang].values():
            words.extend(phrase.split())
    return list(dict.fromkeys(words))


def all_records() -> list[SceneRecord]:
    objs = list(itertools.product(COLORS, SHAPES))
    out = []
    for bg in BACKGROUNDS:
        out += [SceneRecord(bg, (o,)) for o in objs]
        for a, b in itertools.permutations(objs, 2):
            out += [SceneRecord(bg, (a, b), rel) for rel in RELATIONS]
    return out


@functools.lru_cache(maxsize=4)
def _pixel_centres(size: int):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return yy, xx


def _draw_shape(img: np.ndarray, shape: str, cy: float, cx: float, radius: float, color) -> None:
    yy, xx = _pixel_centres(img.shape[0])
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        inside = dy * dy + dx * dx <= radius * radius
    elif shape == "square":
        inside = (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    else:  # upward triangle
        top, base = cy - radius, cy + radius * 0.8
        half = (yy - top) / (base - top) * radius
        inside = (yy >= top) & (yy <= base) & (np.abs(dx) <= half)
    img[inside] = np.asarray(color, dtype=np.float64) / 255.0


def render(record: SceneRecord, rng: np.random.Generator, size: int = HIGH_PX) -> np.ndarray:
    img = np.empty((size, size, 3))
    img[:] = np.asarray(BACKGROUNDS[record.background]) / 255.0
    jitter = size / 16
    if len(record.objects) == 1:
        r = size * rng.uniform(0.2, 0.28)
        cy, cx = size / 2 + rng.uniform(-jitter, jitter, size=2)
        _draw_shape(img, record.objects[0][1], cy, cx, r, COLORS[record.objects[0][0]])
        return img
    dy, dx = _REL_OFFSET[record.relation]
    off = size / 4
    r = size * rng.uniform(0.14, 0.18)
    base = size / 2 + rng.uniform(-jitter / 2, jitter / 2, size=2)
    centers = [(base[0] + dy * off, base[1] + dx * off), (base[0] - dy * off, base[1] - dx * off)]
    for (color, shape), (cy, cx) in zip(record.objects, centers):
        _draw_shape(img, shape, cy, cx, r, COLORS[color])
    return img


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = img.shape
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def make_pair(record: SceneRecord, rng: np.random.Generator) -> SyntheticPair:
    high = render(record, rng)
    low = box_downsample(high, SR_FACTOR)
    q = lambda a: np.round(a * 255.0).astype(np.uint8)
    return SyntheticPair(record, q(high), q(low), {lang: caption_for(record, lang) for lang in LANGUAGES})


@dataclass(frozen=True)
class SyntheticSplits:
    train: list[SyntheticPair]
    val: list[SyntheticPair]


def synthetic_dataset(n: int, seed: int = 0, val_fraction: float = 0.1,
                      single_fraction: float = 0.3) -> SyntheticSplits:
    """``n`` pairs split so that no scene record occurs in both train and val.

    Records are partitioned first; pairs then draw records from their own
    side. About ``single_fraction`` of scenes hold a single shape. The first
    object's colour and shape cycle through every class so class counts stay
    balanced.
    """
    if n < 2:
        raise ValueError("need at least two pairs")
    rng = np.random.default_rng(seed)
    records = all_records()
    singles = [r for r in records if len(r.objects) == 1]
    doubles = [r for r in records if len(r.objects) == 2]
    parts = {}
    for name, pool in (("single", singles), ("double", doubles)):
        perm = rng.permutation(len(pool))
        n_val = max(1, int(round(val_fraction * len(pool))))
        parts[name] = ([pool[i] for i in perm[n_val:]], [pool[i] for i in perm[:n_val]])
    n_val = max(1, int(round(val_fraction * n)))
    firsts = list(itertools.product(COLORS, SHAPES))
    by_lead = {(kind, side, f): [r for r in parts[kind][side] if r.objects[0] == f] or parts[kind][side]
               for kind in parts for side in (0, 1) for f in firsts}
    out = []
    for side, count in ((0, n - n_val), (1, n_val)):
        pairs = []
        for i in range(count):
            kind = "single" if rng.random() < single_fraction else "double"
            lead = by_lead[kind, side, firsts[i % len(firsts)]]
            pairs.append(make_pair(lead[rng.integers(len(lead))], rng))
        out.append(pairs)
    return SyntheticSplits(out[0], out[1])
