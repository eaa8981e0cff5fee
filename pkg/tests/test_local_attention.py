import csv
import io
import math

import numpy as np
import pytest

from hiergen.local_attention import (BENCH_COLUMNS, WindowSpec, benchmark, cross_resolution_local_attention,
                                     local_attention_2d, local_attention_2d_causal, speed_and_memory_ratios,
                                     write_benchmark_csv)


def oracle(q, k, v, allowed):
    """Dense softmax attention in float64 with a boolean mask, one query at a time."""
    q, k, v = (np.asarray(a, np.float64) for a in (q, k, v))
    out = np.zeros_like(q)
    for i in range(len(q)):
        keys = np.flatnonzero(allowed[i])
        s = k[keys] @ q[i] / math.sqrt(q.shape[1])
        e = np.exp(s - s.max())
        out[i] = (e / e.sum()) @ v[keys]
    return out


def band(h, w, kh, kw, causal=False):
    m = np.zeros((h * w, h * w), bool)
    for i in range(h * w):
        for j in range(h * w):
            ri, ci, rj, cj = i // w, i % w, j // w, j % w
            m[i, j] = abs(ri - rj) <= kh // 2 and abs(ci - cj) <= kw // 2 and (not causal or j <= i)
    return m


def joint_mask(hd, wd, he, we, kh, kw):
    s = hd // he
    eh, ew = math.ceil(kh / s), math.ceil(kw / s)
    enc = np.zeros((hd * wd, he * we), bool)
    for i in range(hd * wd):
        cr, cc = (i // wd) // s, (i % wd) // s
        for dr in range(-((eh - 1) // 2), eh // 2 + 1):
            for dc in range(-((ew - 1) // 2), ew // 2 + 1):
                if 0 <= cr + dr < he and 0 <= cc + dc < we:
                    enc[i, (cr + dr) * we + cc + dc] = True
    return np.concatenate([band(hd, wd, kh, kw), enc], axis=1)


def grids(seed, h, w, d=8, n=3):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((h, w, d)).astype(np.float32) for _ in range(n)]


@pytest.mark.parametrize("seed", range(5))
def test_local_matches_dense_oracle(seed):
    q, k, v = grids(seed, 12, 12)
    got = local_attention_2d(q, k, v, WindowSpec((3, 3)))
    want = oracle(*(a.reshape(-1, 8) for a in (q, k, v)), band(12, 12, 3, 3))
    assert np.abs(got.reshape(-1, 8) - want).max() <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_causal_matches_dense_oracle(seed):
    q, k, v = grids(seed, 10, 10)
    got = local_attention_2d_causal(q, k, v, WindowSpec((5, 3), causal=True))
    want = oracle(*(a.reshape(-1, 8) for a in (q, k, v)), band(10, 10, 5, 3, causal=True))
    assert np.abs(got.reshape(-1, 8) - want).max() <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_cross_matches_joint_oracle(seed):
    qd, kd, vd = grids(seed, 8, 8)
    ke, ve = grids(seed + 100, 4, 4, n=2)
    got = cross_resolution_local_attention(qd, kd, vd, ke, ve, WindowSpec((3, 3), cross_scale=2))
    keys = np.concatenate([kd.reshape(-1, 8), ke.reshape(-1, 8)])
    vals = np.concatenate([vd.reshape(-1, 8), ve.reshape(-1, 8)])
    want = oracle(qd.reshape(-1, 8), keys, vals, joint_mask(8, 8, 4, 4, 3, 3))
    assert np.abs(got.reshape(-1, 8) - want).max() <= 1e-5


def test_desk_and_large_cross_geometry():
    qd, kd, vd = grids(1, 24, 24, d=4)
    ke, ve = grids(2, 8, 8, d=4, n=2)
    got = cross_resolution_local_attention(qd, kd, vd, ke, ve, WindowSpec((9, 9)))
    keys = np.concatenate([kd.reshape(-1, 4), ke.reshape(-1, 4)])
    vals = np.concatenate([vd.reshape(-1, 4), ve.reshape(-1, 4)])
    want = oracle(qd.reshape(-1, 4), keys, vals, joint_mask(24, 24, 8, 8, 9, 9))
    assert np.abs(got.reshape(-1, 4) - want).max() <= 1e-5
    qd, kd, vd = grids(3, 60, 60, d=4)
    ke, ve = grids(4, 20, 20, d=4, n=2)
    out = cross_resolution_local_attention(qd, kd, vd, ke, ve, WindowSpec((9, 9)))
    assert out.shape == (60, 60, 4) and np.isfinite(out).all()


def test_window_covering_grid_is_global_attention():
    q, k, v = grids(7, 5, 6)
    got = local_attention_2d(q, k, v, WindowSpec((9, 11)))
    want = oracle(*(a.reshape(-1, 8) for a in (q, k, v)), np.ones((30, 30), bool))
    assert np.abs(got.reshape(-1, 8) - want).max() <= 1e-5


def test_single_row_causal_is_standard_causal_attention():
    q, k, v = grids(8, 1, 7)
    got = local_attention_2d_causal(q, k, v, WindowSpec((1, 13), causal=True))
    want = oracle(q[0], k[0], v[0], np.tri(7, dtype=bool))
    assert np.abs(got[0] - want).max() <= 1e-5


def test_top_left_cell_attends_only_to_itself():
    q, k, v = grids(9, 6, 6)
    out = local_attention_2d_causal(q, k, v, WindowSpec((5, 5), causal=True))
    np.testing.assert_allclose(out[0, 0], v[0, 0], atol=1e-6)


def test_uniform_keys_give_value_average():
    rng = np.random.default_rng(0)
    qd = rng.standard_normal((4, 4, 3)).astype(np.float32)
    kd = np.zeros((4, 4, 3), np.float32)
    vd = np.ones((4, 4, 3), np.float32)
    ke = np.zeros((2, 2, 3), np.float32)
    ve = rng.standard_normal((2, 2, 3)).astype(np.float32)
    out = cross_resolution_local_attention(qd, kd, vd, ke, ve, WindowSpec((3, 3)))
    m = joint_mask(4, 4, 2, 2, 3, 3)
    vals = np.concatenate([vd.reshape(-1, 3), ve.reshape(-1, 3)])
    want = np.stack([vals[m[i]].mean(0) for i in range(16)])
    np.testing.assert_allclose(out.reshape(-1, 3), want, atol=1e-6)


def test_border_rows_still_normalize():
    # with constant values the output equals the value whatever the clipped window size
    q, k, _ = grids(10, 7, 7)
    v = np.full((7, 7, 8), 2.5, np.float32)
    np.testing.assert_allclose(local_attention_2d(q, k, v, WindowSpec((5, 5))), 2.5, atol=1e-5)


@pytest.mark.parametrize("kernel", [(2, 3), (3, 4), (0, 1)])
def test_even_or_empty_kernels_rejected(kernel):
    with pytest.raises(ValueError):
        WindowSpec(kernel)


def test_non_integer_scale_rejected():
    qd, kd, vd = grids(0, 9, 9)
    ke, ve = grids(1, 4, 4, n=2)
    with pytest.raises(ValueError):
        cross_resolution_local_attention(qd, kd, vd, ke, ve, WindowSpec((3, 3)))


def test_workers_do_not_change_results():
    q, k, v = grids(11, 16, 16)
    a = local_attention_2d(q, k, v, WindowSpec((5, 5)), workers=1)
    b = local_attention_2d(q, k, v, WindowSpec((5, 5)), workers=4)
    np.testing.assert_array_equal(a, b)


def test_benchmark_report_and_memory_scaling():
    rows = benchmark(grid_sizes=(16, 32), window=5, repetitions=1, head_dim=16)
    buf = io.StringIO()
    write_benchmark_csv(rows, buf)
    parsed = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert tuple(parsed[0]) == BENCH_COLUMNS and len(parsed) == 4
    ratios = speed_and_memory_ratios(rows)
    assert ratios[32][1] < ratios[16][1]
