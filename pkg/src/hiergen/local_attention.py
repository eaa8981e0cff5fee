"""Windowed 2D attention kernels with dense masked-attention references.

Three kernels share one memory discipline: no S x S matrix is ever formed.
Each query cell scans its (border-clipped) window twice, once to find the
score maximum and once to accumulate ``exp(s - max)`` weighted values, so the
scratch space is one window of scores and one value row per worker.

* :func:`local_attention_2d`: centered ``kh x kw`` window.
* :func:`local_attention_2d_causal`: same window restricted to raster index <= query.
* :func:`cross_resolution_local_attention`: decoder window plus the encoder
  window around ``(r // scale, c // scale)`` of extent ``ceil(k / scale)``,
  normalized jointly.
"""
from __future__ import annotations

import csv
import math
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

DEFAULT_WINDOW = (9, 9)


@dataclass(frozen=True)
class WindowSpec:
    kernel: tuple[int, int] = DEFAULT_WINDOW
    causal: bool = False
    cross_scale: int | None = None

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"window extents must be odd and >= 1, got {self.kernel}")

    def encoder_extent(self, scale: int) -> tuple[int, int]:
        return math.ceil(self.kernel[0] / scale), math.ceil(self.kernel[1] / scale)


# ---------------------------------------------------------------------------
# numba kernels (one head, rows y0..y1 of the query grid)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True, fastmath=True)
def _dot(a, b, d):
    s = a[0] - a[0]
    for t in range(d):
        s += a[t] * b[t]
    return s


@njit(cache=True, nogil=True, fastmath=True)
def _local_rows(q, k, v, out, scores, acc, scale, kh, kw, causal, y0, y1):
    h, w, d = q.shape
    ry = kh // 2
    rx = kw // 2
    zero = scale - scale
    for y in range(y0, y1):
        ya = max(0, y - ry)
        yb = y + 1 if causal else min(h, y + ry + 1)
        for x in range(w):
            xa = max(0, x - rx)
            xb = min(w, x + rx + 1)
            qv = q[y, x]
            m = np.float32(-np.inf)
            n = 0
            for yy in range(ya, yb):
                xe = x + 1 if (causal and yy == y) else xb
                for xx in range(xa, xe):
                    s = _dot(qv, k[yy, xx], d) * scale
                    scores[n] = s
                    n += 1
                    if s > m:
                        m = s
            for t in range(d):
                acc[t] = zero
            tot = zero
            n = 0
            for yy in range(ya, yb):
                xe = x + 1 if (causal and yy == y) else xb
                for xx in range(xa, xe):
                    e = np.exp(scores[n] - m)
                    n += 1
                    tot += e
                    vv = v[yy, xx]
                    for t in range(d):
                        acc[t] += e * vv[t]
            inv = (zero + 1) / tot
            for t in range(d):
                out[y, x, t] = acc[t] * inv


@njit(cache=True, nogil=True, fastmath=True)
def _cross_rows(q, kd, vd, ke, ve, out, scores, acc, sc, kh, kw, eh, ew, scale_f, y0, y1):
    h, w, d = q.shape
    he, we = ke.shape[0], ke.shape[1]
    ry = kh // 2
    rx = kw // 2
    ey_lo = (eh - 1) // 2
    ex_lo = (ew - 1) // 2
    zero = sc - sc
    for y in range(y0, y1):
        ya = max(0, y - ry)
        yb = min(h, y + ry + 1)
        cy = y // scale_f
        eya = max(0, cy - ey_lo)
        eyb = min(he, cy - ey_lo + eh)
        for x in range(w):
            xa = max(0, x - rx)
            xb = min(w, x + rx + 1)
            cx = x // scale_f
            exa = max(0, cx - ex_lo)
            exb = min(we, cx - ex_lo + ew)
            qv = q[y, x]
            m = np.float32(-np.inf)
            n = 0
            for yy in range(ya, yb):
                for xx in range(xa, xb):
                    s = _dot(qv, kd[yy, xx], d) * sc
                    scores[n] = s
                    n += 1
                    if s > m:
                        m = s
            for yy in range(eya, eyb):
                for xx in range(exa, exb):
                    s = _dot(qv, ke[yy, xx], d) * sc
                    scores[n] = s
                    n += 1
                    if s > m:
                        m = s
            for t in range(d):
                acc[t] = zero
            tot = zero
            n = 0
            for yy in range(ya, yb):
                for xx in range(xa, xb):
                    e = np.exp(scores[n] - m)
                    n += 1
                    tot += e
                    vv = vd[yy, xx]
                    for t in range(d):
                        acc[t] += e * vv[t]
            for yy in range(eya, eyb):
                for xx in range(exa, exb):
                    e = np.exp(scores[n] - m)
                    n += 1
                    tot += e
                    vv = ve[yy, xx]
                    for t in range(d):
                        acc[t] += e * vv[t]
            inv = (zero + 1) / tot
            for t in range(d):
                out[y, x, t] = acc[t] * inv


def _row_chunks(h: int, workers: int) -> list[tuple[int, int]]:
    n = max(1, min(workers, h))
    bounds = np.linspace(0, h, n + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run(jobs, workers: int) -> None:
    if workers <= 1 or len(jobs) == 1:
        for job in jobs:
            job()
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda f: f(), jobs))


def _prep(*arrays):
    dt = np.result_type(*arrays)
    if dt not in (np.float32, np.float64):
        dt = np.dtype(np.float64)
    return [np.ascontiguousarray(a, dtype=dt) for a in arrays]


def _local(q, k, v, spec: WindowSpec, causal: bool, workers: int) -> np.ndarray:
    q, k, v = _prep(q, k, v)
    if q.shape != k.shape or q.shape != v.shape or q.ndim < 3:
        raise ValueError("q, k, v must share a (..., H, W, d) shape")
    kh, kw = spec.kernel
    lead = q.shape[:-3]
    h, w, d = q.shape[-3:]
    qf, kf, vf = (a.reshape(-1, h, w, d) for a in (q, k, v))
    out = np.empty_like(qf)
    scale = q.dtype.type(1.0 / np.sqrt(d))
    jobs = []
    for i in range(len(qf)):
        for y0, y1 in _row_chunks(h, workers):
            scratch = np.empty(kh * kw, dtype=q.dtype)
            acc = np.empty(d, dtype=q.dtype)
            jobs.append(lambda i=i, y0=y0, y1=y1, sc=scratch, acc=acc:
                        _local_rows(qf[i], kf[i], vf[i], out[i], sc, acc, scale, kh, kw, causal, y0, y1))
    _run(jobs, workers)
    return out.reshape(lead + (h, w, d))


def local_attention_2d(q, k, v, spec: WindowSpec = WindowSpec(), workers: int = 1) -> np.ndarray:
    """Non-causal windowed attention over ``(..., H, W, d)`` grids."""
    if spec.causal or spec.cross_scale:
        raise ValueError("use local_attention_2d_causal / cross_resolution_local_attention")
    return _local(q, k, v, spec, False, workers)


def local_attention_2d_causal(q, k, v, spec: WindowSpec = WindowSpec(causal=True), workers: int = 1) -> np.ndarray:
    """Windowed attention restricted to keys at or before the query in raster order."""
    return _local(q, k, v, spec, True, workers)


def cross_resolution_local_attention(qd, kd, vd, ke, ve, spec: WindowSpec, workers: int = 1) -> np.ndarray:
    """Decoder queries over their local decoder window and the matching encoder window."""
    qd, kd, vd, ke, ve = _prep(qd, kd, vd, ke, ve)
    if not (qd.shape == kd.shape == vd.shape) or ke.shape != ve.shape:
        raise ValueError("decoder q/k/v and encoder k/v must share shapes")
    hd, wd, d = qd.shape[-3:]
    he, we = ke.shape[-3:-1]
    if hd % he or wd % we or hd // he != wd // we:
        raise ValueError(f"decoder grid {hd}x{wd} is not an integer multiple of encoder grid {he}x{we}")
    scale = hd // he
    if spec.cross_scale is not None and spec.cross_scale != scale:
        raise ValueError(f"spec scale {spec.cross_scale} does not match grids (scale {scale})")
    kh, kw = spec.kernel
    eh, ew = spec.encoder_extent(scale)
    lead = qd.shape[:-3]
    qf, kdf, vdf = (a.reshape(-1, hd, wd, d) for a in (qd, kd, vd))
    kef, vef = (a.reshape(-1, he, we, d) for a in (ke, ve))
    if len(kef) != len(qf):
        raise ValueError("decoder and encoder leading dimensions differ")
    out = np.empty_like(qf)
    sc_val = qd.dtype.type(1.0 / np.sqrt(d))
    jobs = []
    for i in range(len(qf)):
        for y0, y1 in _row_chunks(hd, workers):
            scratch = np.empty(kh * kw + eh * ew, dtype=qd.dtype)
            acc = np.empty(d, dtype=qd.dtype)
            jobs.append(lambda i=i, y0=y0, y1=y1, sc=scratch, acc=acc:
                        _cross_rows(qf[i], kdf[i], vdf[i], kef[i], vef[i], out[i], sc, acc,
                                    sc_val, kh, kw, eh, ew, scale, y0, y1))
    _run(jobs, workers)
    return out.reshape(lead + (hd, wd, d))


# ---------------------------------------------------------------------------
# Dense references
# ---------------------------------------------------------------------------

def local_window_mask(h: int, w: int, kh: int, kw: int, causal: bool = False) -> np.ndarray:
    """(HW, HW) mask: key within the centered window (and not later in raster order if causal)."""
    r = np.arange(h * w) // w
    c = np.arange(h * w) % w
    m = (np.abs(r[:, None] - r[None, :]) <= kh // 2) & (np.abs(c[:, None] - c[None, :]) <= kw // 2)
    if causal:
        m &= np.tri(h * w, dtype=bool)
    return m


def cross_resolution_mask(hd: int, wd: int, he: int, we: int, kh: int, kw: int) -> np.ndarray:
    """(HdWd, HdWd + HeWe) mask over decoder keys followed by encoder keys."""
    scale = hd // he
    eh, ew = math.ceil(kh / scale), math.ceil(kw / scale)
    dec = local_window_mask(hd, wd, kh, kw)
    r = np.arange(hd * wd) // wd // scale
    c = np.arange(hd * wd) % wd // scale
    er = np.arange(he * we) // we
    ec = np.arange(he * we) % we
    dy = er[None, :] - r[:, None]
    dx = ec[None, :] - c[:, None]
    enc = (dy >= -((eh - 1) // 2)) & (dy <= eh // 2) & (dx >= -((ew - 1) // 2)) & (dx <= ew // 2)
    return np.concatenate([dec, enc], axis=1)


def dense_masked_attention(q, k, v, mask) -> np.ndarray:
    """Reference softmax attention over flattened ``(..., S, d)`` arrays with a boolean mask."""
    d = q.shape[-1]
    s = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    s = np.where(mask, s, -np.inf)
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(-1, keepdims=True)) @ v


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("grid", "window", "variant", "mean_ms", "p95_ms", "peak_bytes", "workers")


def _dense_bench_call(q, k, v, add):
    d = q.shape[-1]
    s = q @ k.T
    s *= np.float32(1.0 / np.sqrt(d))
    s += add
    s -= s.max(-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(-1, keepdims=True)
    return s @ v


def _measure(fn, repetitions: int):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return float(np.mean(times)), float(np.percentile(times, 95)), int(peak)


def benchmark(grid_sizes=(48,), window: int = 9, repetitions: int = 5, workers: int = 1,
              head_dim: int = 64, seed: int = 0) -> list[dict]:
    """Time and peak traced allocation of windowed vs dense masked attention.

    One head of float32 ``q, k, v`` per grid size; the dense baseline gets its
    additive band mask precomputed, so only the attention itself is measured.
    """
    rng = np.random.default_rng(seed)
    spec = WindowSpec((window, window))
    rows = []
    for g in grid_sizes:
        q, k, v = (rng.standard_normal((g, g, head_dim)).astype(np.float32) for _ in range(3))
        add = np.where(local_window_mask(g, g, window, window), 0.0, -1e9).astype(np.float32)
        qf, kf, vf = (a.reshape(-1, head_dim) for a in (q, k, v))
        variants = {
            "windowed": lambda: local_attention_2d(q, k, v, spec, workers=workers),
            "dense": lambda: _dense_bench_call(qf, kf, vf, add),
        }
        for name, fn in variants.items():
            mean_ms, p95_ms, peak = _measure(fn, repetitions)
            rows.append({"grid": g, "window": window, "variant": name, "mean_ms": round(mean_ms, 4),
                         "p95_ms": round(p95_ms, 4), "peak_bytes": peak, "workers": workers})
    return rows


def write_benchmark_csv(rows: list[dict], path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    finally:
        if own:
            f.close()


def speed_and_memory_ratios(rows: list[dict]) -> dict[int, tuple[float, float]]:
    """Per grid: (dense / windowed time, windowed / dense peak bytes)."""
    by = {}
    for r in rows:
        by.setdefault(r["grid"], {})[r["variant"]] = r
    return {g: (v["dense"]["mean_ms"] / v["windowed"]["mean_ms"],
                v["windowed"]["peak_bytes"] / max(v["dense"]["peak_bytes"], 1)) for g, v in by.items()}
