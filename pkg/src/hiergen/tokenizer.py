"""Image patch codebook, text vocabulary and codebook clustering.

The image tokenizer is a k-means codebook over raw P x P x 3 pixel patches.
Token ids ``[0, K)`` are image tokens; text words and special tokens are
appended after them so a single id space covers the whole sequence.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CODEBOOK_MAGIC = b"HGCB"
CODEBOOK_VERSION = 1

DEFAULT_PATCH = 8
DEFAULT_K = 512
DEFAULT_CLUSTERS = 16


class CodebookError(ValueError):
    pass


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    xx = np.einsum("ij,ij->i", x, x)[:, None]
    cc = np.einsum("ij,ij->i", c, c)[None, :]
    d = xx + cc - 2.0 * (x @ c.T)
    np.maximum(d, 0.0, out=d)
    return d


def nearest_centroid(x: np.ndarray, centroids: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Index of the nearest centroid for each row of ``x``; ties go to the lowest id.

    Distances are computed with the expansion ``|x|^2 + |c|^2 - 2 x.c`` and any
    row whose best candidates are within rounding distance of each other is
    re-resolved with exact squared differences.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    out = np.empty(len(x), dtype=np.int64)
    cmax = float(np.einsum("ij,ij->i", c, c).max()) if len(c) else 0.0
    for s in range(0, len(x), chunk):
        xs = x[s:s + chunk]
        d = _sq_dists(xs, c)
        best = d.argmin(axis=1)
        m = d[np.arange(len(xs)), best]
        tol = 1e-9 * (np.einsum("ij,ij->i", xs, xs) + cmax) + 1e-12
        cand = d <= (m + tol)[:, None]
        ambiguous = np.flatnonzero(cand.sum(axis=1) > 1)
        for r in ambiguous:
            ids = np.flatnonzero(cand[r])
            exact = ((c[ids] - xs[r]) ** 2).sum(axis=1)
            best[r] = ids[np.argmin(exact)]
        out[s:s + chunk] = best
    return out


def kmeans_plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding; returns ``k`` rows of ``x`` (as a copy)."""
    n = len(x)
    xx = np.einsum("ij,ij->i", x, x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise CodebookError(f"only {len(chosen)} distinct points, need {k}")
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        idx = min(idx, n - 1)
        while d2[idx] <= 0.0:  # guard against landing on a zero-weight point at a boundary
            idx -= 1
        chosen.append(idx)
        nd = xx + xx[idx] - 2.0 * (x @ x[idx])
        np.maximum(nd, 0.0, out=nd)
        nd[idx] = 0.0
        d2 = np.minimum(d2, nd)
    return x[chosen].copy()


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    errors: list[float] = field(default_factory=list)  # SSE after each assignment step
    n_iter: int = 0


def lloyd_kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 50, tol: float = 1e-6,
                 init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding.

    Stops after ``max_iter`` updates or when the largest centroid shift drops
    below ``tol`` relative to the data scale. Empty clusters are re-seeded on
    the point currently farthest from its centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    c = kmeans_plusplus_init(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    scale = max(float(np.abs(x).max()), 1e-12)
    errors: list[float] = []
    labels = nearest_centroid(x, c)
    it = 0
    for it in range(1, max_iter + 1):
        d = ((x - c[labels]) ** 2).sum(axis=1)
        errors.append(float(d.sum()))
        new = np.stack([np.bincount(labels, weights=x[:, j], minlength=k) for j in range(x.shape[1])], axis=1)
        counts = np.bincount(labels, minlength=k)
        taken: set[int] = set()
        order = np.argsort(-d, kind="stable")
        for j in np.flatnonzero(counts == 0):
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[j] = x[far]
        nz = counts > 0
        new[nz] /= counts[nz, None]
        shift = float(np.abs(new - c).max())
        c = new
        labels = nearest_centroid(x, c)
        if shift <= tol * scale:
            break
    errors.append(float(((x - c[labels]) ** 2).sum()))
    return KMeansResult(c, labels, errors, it)


# ---------------------------------------------------------------------------
# Codebook
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Codebook:
    patch_size: int
    centroids: np.ndarray  # (K, P*P*3), float64 in [0, 1]
    cluster_of: np.ndarray | None = None  # (K,) int
    n_clusters: int = 0

    def __post_init__(self):
        c = self.centroids
        if c.ndim != 2 or len(c) < 1 or c.shape[1] != 3 * self.patch_size ** 2:
            raise CodebookError(f"bad centroid array shape {c.shape} for P={self.patch_size}")
        if not np.all(np.isfinite(c)):
            raise CodebookError("non-finite centroid")
        if self.cluster_of is not None:
            co = self.cluster_of
            if co.shape != (len(c),) or co.min() < 0 or co.max() >= self.n_clusters:
                raise CodebookError("cluster_of must map every token into [0, n_clusters)")

    @property
    def size(self) -> int:
        return len(self.centroids)

    def clusters(self) -> list[np.ndarray]:
        """Token ids of each cluster, in cluster-id order."""
        if self.cluster_of is None:
            raise CodebookError("codebook has no cluster partition")
        return [np.flatnonzero(self.cluster_of == j) for j in range(self.n_clusters)]


def extract_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an (H, W, 3) image into raster-ordered flattened patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise CodebookError(f"expected an H x W x 3 image, got {image.shape}")
    h, w, _ = image.shape
    p = patch_size
    if h % p or w % p:
        raise CodebookError(f"image {h}x{w} not divisible by patch size {p}")
    g = image.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    return g.reshape(-1, p * p * 3)


def build_image_codebook(patches: np.ndarray, k: int = DEFAULT_K, seed: int = 0,
                         max_iter: int = 50, tol: float = 1e-6) -> Codebook:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 4:
        p = patches.shape[1]
        patches = patches.reshape(len(patches), -1)
    else:
        p = int(round(np.sqrt(patches.shape[1] / 3)))
    if patches.shape[1] != p * p * 3:
        raise CodebookError(f"patch vectors of width {patches.shape[1]} are not P*P*3")
    if not np.all(np.isfinite(patches)):
        raise CodebookError("non-finite pixel values")
    if patches.min() < 0.0 or patches.max() > 1.0:
        raise CodebookError("pixel values must lie in [0, 1]")
    n_distinct = len(np.unique(patches, axis=0))
    if n_distinct < k:
        raise CodebookError(f"{n_distinct} distinct patches, fewer than K={k}")
    res = lloyd_kmeans(patches, k, seed=seed, max_iter=max_iter, tol=tol)
    return Codebook(p, res.centroids)


def encode_image(image: np.ndarray, cb: Codebook) -> np.ndarray:
    h, w = np.shape(image)[:2]
    p = cb.patch_size
    ids = nearest_centroid(extract_patches(image, p), cb.centroids)
    return ids.reshape(h // p, w // p)


def decode_tokens(grid: np.ndarray, cb: Codebook) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.size and (grid.min() < 0 or grid.max() >= cb.size):
        raise CodebookError(f"token id out of range [0, {cb.size})")
    p = cb.patch_size
    gh, gw = grid.shape
    patches = cb.centroids[grid.reshape(-1)].reshape(gh, gw, p, p, 3)
    return patches.transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, 3)


def cluster_codebook(cb: Codebook, n_clusters: int = DEFAULT_CLUSTERS, seed: int = 0) -> Codebook:
    """Partition the codebook's token vectors into ``n_clusters`` k-means clusters."""
    if n_clusters > cb.size:
        raise CodebookError(f"n_clusters={n_clusters} exceeds K={cb.size}")
    if n_clusters < 1:
        raise CodebookError("n_clusters must be positive")
    if n_clusters == cb.size:
        labels = np.arange(cb.size)
    else:
        labels = lloyd_kmeans(cb.centroids, n_clusters, seed=seed).labels
    return Codebook(cb.patch_size, cb.centroids, labels.astype(np.int64), n_clusters)


def save_codebook(cb: Codebook, path) -> None:
    """Little-endian layout: magic, u32 version, u32 P, u32 K, u32 n_clusters,
    K*P*P*3 float64 centroids, then K int32 cluster ids when n_clusters > 0."""
    nc = cb.n_clusters if cb.cluster_of is not None else 0
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<IIII", CODEBOOK_VERSION, cb.patch_size, cb.size, nc))
        f.write(np.ascontiguousarray(cb.centroids, dtype="<f8").tobytes())
        if nc:
            f.write(np.ascontiguousarray(cb.cluster_of, dtype="<i4").tobytes())


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:4] != CODEBOOK_MAGIC:
        raise CodebookError(f"{path}: not a codebook file")
    version, p, k, nc = struct.unpack_from("<IIII", data, 4)
    if version != CODEBOOK_VERSION:
        raise CodebookError(f"unsupported codebook version {version}")
    off = 20
    n = k * p * p * 3
    cent = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(k, -1).astype(np.float64)
    off += 8 * n
    cluster_of = None
    if nc:
        cluster_of = np.frombuffer(data, dtype="<i4", count=k, offset=off).astype(np.int64)
    return Codebook(p, cent, cluster_of, nc)


# ---------------------------------------------------------------------------
# Text vocabulary
# ---------------------------------------------------------------------------

SPECIALS = ("[BOI]", "[BOE]", "[BOC]", "[MASK]", "[BOS]", "[PAD]")


class TextVocab:
    """Word-level vocabulary placed after ``offset`` image ids, followed by specials."""

    def __init__(self, words, offset: int):
        words = list(dict.fromkeys(words))
        if any(w in SPECIALS for w in words):
            raise ValueError("content words may not collide with special tokens")
        self.words = words
        self.offset = int(offset)
        self._to_id = {w: self.offset + i for i, w in enumerate(words)}
        base = self.offset + len(words)
        self.special = {name: base + i for i, name in enumerate(SPECIALS)}
        self.boi, self.boe, self.boc, self.mask, self.bos, self.pad = (self.special[s] for s in SPECIALS)

    def __len__(self):
        return len(self.words)

    @property
    def size(self) -> int:
        """Total id-space size: image ids + words + specials."""
        return self.offset + len(self.words) + len(SPECIALS)

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + len(self.words))

    def separator(self, language: str) -> int:
        if language == "en":
            return self.boe
        if language == "zh":
            return self.boc
        raise ValueError(f"unknown language {language!r}")

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        inv = {v: k for k, v in self._to_id.items()}
        inv.update({v: k for k, v in self.special.items()})
        return " ".join(inv[int(i)] for i in ids)

    def to_dict(self) -> dict:
        return {"words": self.words, "offset": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "TextVocab":
        return cls(d["words"], d["offset"])
