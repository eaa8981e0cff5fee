"""Truncated sampling: top-k, top-p and cluster-level top-k.

Every sampler reduces to a final distribution over token ids and one uniform
draw inverted through its cumulative sum in token-id order, so two samplers
with equal final distributions and equal seeds return equal tokens.

``temperature == 0`` is accepted as the deterministic limit (argmax).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import Codebook

MODES = ("topk", "topp", "cluster")


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    mode: str = "cluster"
    k: int = 4
    p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")


def _check(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be a finite non-negative vector")
    total = p.sum()
    if total <= 0:
        raise ValueError("all-zero probability vector")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {total}, not 1")
    return p / total


def _temper(w: np.ndarray, temperature: float) -> np.ndarray:
    """``w ** (1/T)`` renormalized; T == 0 keeps only the maxima (lowest index on ties)."""
    out = np.zeros_like(w)
    pos = w > 0
    if not pos.any():
        return out
    if temperature == 0:
        out[int(np.argmax(w))] = 1.0
        return out
    if temperature == 1:
        return w / w.sum()
    lw = np.log(w[pos]) / temperature
    e = np.exp(lw - lw.max())
    out[pos] = e / e.sum()
    return out


def _top_k_mask(w: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-w, kind="stable")
    keep = np.zeros(len(w), dtype=bool)
    keep[order[:k]] = True
    return keep


def _top_p_mask(w: np.ndarray, p: float) -> np.ndarray:
    order = np.argsort(-w, kind="stable")
    cum = np.cumsum(w[order])
    n = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    keep = np.zeros(len(w), dtype=bool)
    keep[order[:min(n, len(w))]] = True
    return keep


def truncated_distribution(probs, cfg: SamplerConfig) -> np.ndarray:
    """Final token distribution of top-k / top-p sampling."""
    p = _temper(_check(probs), cfg.temperature)
    if cfg.mode == "topk":
        keep = _top_k_mask(p, cfg.k)
    elif cfg.mode == "topp":
        keep = _top_p_mask(p, cfg.p)
    else:
        raise ValueError("cluster mode needs cluster_distribution")
    out = np.where(keep, p, 0.0)
    return out / out.sum()


def _cluster_ids(cb) -> np.ndarray:
    co = cb.cluster_of if isinstance(cb, Codebook) else np.asarray(cb)
    if co is None:
        raise ValueError("codebook has no cluster partition")
    return np.asarray(co, dtype=np.int64)


def cluster_distribution(probs, cb, cfg: SamplerConfig) -> np.ndarray:
    """Token distribution of cluster sampling.

    Cluster masses are per-cluster probability sums; the top ``cfg.k``
    clusters survive (lower id on equal mass) and are sampled in proportion to
    their tempered mass, then a token inside the chosen cluster in proportion
    to its tempered probability. Tokens beyond ``len(cluster_of)`` (non-image
    ids) get zero mass.
    """
    p = _check(probs)
    cluster_of = _cluster_ids(cb)
    k_tok = len(cluster_of)
    if len(p) < k_tok:
        raise ValueError("probability vector shorter than the codebook")
    n_c = int(cluster_of.max()) + 1
    pt = p[:k_tok]
    mass = np.bincount(cluster_of, weights=pt, minlength=n_c)
    keep = _top_k_mask(mass, cfg.k) & (mass > 0)
    cmass = _temper(np.where(keep, mass, 0.0), cfg.temperature)
    out = np.zeros_like(p)
    if cfg.temperature == 1:
        # untempered within-cluster weights are the raw probabilities
        kept_tok = keep[cluster_of]
        out[:k_tok][kept_tok] = pt[kept_tok] / mass[keep].sum()
        return out
    for c in np.flatnonzero(cmass > 0):
        members = np.flatnonzero(cluster_of == c)
        out[members] = cmass[c] * _temper(pt[members], cfg.temperature)
    return out


def draw(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw in token-id order."""
    cum = np.cumsum(dist)
    u = rng.random() * cum[-1]
    i = int(np.searchsorted(cum, u, side="right"))
    i = min(i, len(dist) - 1)
    while dist[i] <= 0:
        i -= 1
    return i


def _rng(cfg: SamplerConfig, rng):
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def truncated_sample(probs, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> int:
    return draw(truncated_distribution(probs, cfg), _rng(cfg, rng))


def cluster_sample(probs, cb, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> int:
    return draw(cluster_distribution(probs, cb, cfg), _rng(cfg, rng))


def final_distribution(probs, cfg: SamplerConfig, cb=None) -> np.ndarray:
    if cfg.mode == "cluster":
        if cb is None:
            raise ValueError("cluster sampling needs a clustered codebook")
        return cluster_distribution(probs, cb, cfg)
    return truncated_distribution(probs, cfg)


def sample(probs, cfg: SamplerConfig, cb=None, rng: np.random.Generator | None = None) -> int:
    return draw(final_distribution(probs, cfg, cb), _rng(cfg, rng))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
