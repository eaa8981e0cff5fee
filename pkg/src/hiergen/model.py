"""Dense numpy transformer with Sandwich-LayerNorm blocks and hand-written backprop.

One sequence may mix several "streams": every position selects which set of
attention projections it uses (stream 0 is the base model, stream 1 the
super-resolution decoder). Normalization, FFN, embeddings and the output head
are always shared.

Block layout (per sublayer ``f``)::

    h = h + LN_out(f(LN_in(h)))
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .coglm import ROLE_IMAGE, ROLE_PAD, ROLE_SEP, ROLE_SPECIAL, ROLE_TEXT

MASKED_SCORE = -1e9
LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"HGCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    max_text_len: int = 32
    max_grid: int = 24
    n_streams: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class UpweightConfig:
    """Constant added to every image-query -> text-key attention score."""
    c: float = 0.0

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("upweight constant must be non-negative")


def attn_names(layer: int, stream: int) -> list[str]:
    p = f"layers.{layer}.attn.{stream}."
    return [p + n for n in ("wqkv", "bqkv", "wo", "bo")]


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_model * cfg.ffn_mult, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "text_pos": (cfg.max_text_len, d),
        "img_row": (cfg.max_grid, d),
        "img_col": (cfg.max_grid, d),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for ln in ("ln_attn_in", "ln_attn_out", "ln_ffn_in", "ln_ffn_out"):
            shapes[p + ln + ".g"] = (d,)
            shapes[p + ln + ".b"] = (d,)
        for s in range(cfg.n_streams):
            wqkv, bqkv, wo, bo = attn_names(l, s)
            shapes[wqkv], shapes[bqkv], shapes[wo], shapes[bo] = (d, 3 * d), (3 * d,), (d, d), (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in tensor_shapes(config).items():
            if name.endswith(".g"):
                t = np.ones(shape)
            elif len(shape) == 1:
                t = np.zeros(shape)
            else:
                t = rng.normal(0.0, std, size=shape)
            tensors[name] = t.astype(dtype)
        return cls(config, tensors, set(), {"stage": "coglm", "trained": False})

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                           set(self.frozen), dict(self.meta))

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def check(self) -> None:
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.tensors):
            raise ValueError("tensor set does not match config")
        for k, shp in expected.items():
            if self.tensors[k].shape != shp:
                raise ValueError(f"{k}: shape {self.tensors[k].shape} != {shp}")
            if not np.all(np.isfinite(self.tensors[k])):
                raise ValueError(f"{k}: non-finite values")

    def with_streams(self, n_streams: int) -> "ModelParams":
        """Add attention stream copies initialized from stream 0."""
        cfg = ModelConfig(**{**asdict(self.config), "n_streams": n_streams})
        tensors = dict((k, v.copy()) for k, v in self.tensors.items())
        for l in range(cfg.n_layers):
            for s in range(self.config.n_streams, n_streams):
                for src, dst in zip(attn_names(l, 0), attn_names(l, s)):
                    tensors[dst] = tensors[src].copy()
        return ModelParams(cfg, tensors, set(self.frozen), dict(self.meta))


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

@dataclass
class ModelInput:
    tokens: np.ndarray          # (B, S) int
    roles: np.ndarray           # (B, S) int8
    pos1d: np.ndarray           # (B, S) index into text_pos, -1 if unused
    row: np.ndarray             # (B, S) index into img_row, -1 if unused
    col: np.ndarray             # (B, S)
    mask: np.ndarray | None     # (B, S, S) or (S, S) bool; None with an attention backend
    stream: np.ndarray | None = None  # (S,) attention stream per position

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def position_indices(roles: np.ndarray, grid_shape: tuple[int, int] | None) -> tuple[np.ndarray, ...]:
    """1D text positions ([BOS]=0, separator=1, text 2..) and 2D image coordinates."""
    roles = np.asarray(roles)
    s = len(roles)
    pos1d = np.full(s, -1, np.int64)
    row = np.full(s, -1, np.int64)
    col = np.full(s, -1, np.int64)
    pos1d[roles == ROLE_SPECIAL] = 0
    pos1d[roles == ROLE_SEP] = 1
    t = np.flatnonzero(roles == ROLE_TEXT)
    pos1d[t] = 2 + np.arange(len(t))
    im = np.flatnonzero(roles == ROLE_IMAGE)
    if len(im):
        w = grid_shape[1]
        k = np.arange(len(im))
        row[im] = k // w
        col[im] = k % w
    return pos1d, row, col


def make_input(seqs, masks, pad_id: int) -> ModelInput:
    """Batch TokenSequences (right-padded) with their per-sequence masks.

    Padding slots see only themselves and are hidden from every other query.
    """
    seqs = list(seqs)
    b = len(seqs)
    s = max(len(q) for q in seqs)
    tokens = np.full((b, s), pad_id, np.int64)
    roles = np.full((b, s), ROLE_PAD, np.int8)
    pos1d = np.full((b, s), -1, np.int64)
    row = np.full((b, s), -1, np.int64)
    col = np.full((b, s), -1, np.int64)
    mask = np.zeros((b, s, s), dtype=bool)
    idx = np.arange(s)
    for i, (q, m) in enumerate(zip(seqs, masks)):
        n = len(q)
        tokens[i, :n] = q.tokens
        roles[i, :n] = q.roles
        pos1d[i, :n], row[i, :n], col[i, :n] = position_indices(q.roles, q.grid_shape)
        mask[i, :n, :n] = m
        mask[i, idx[n:], idx[n:]] = True
    return ModelInput(tokens, roles, pos1d, row, col, mask)


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def _ln_bwd(dy, cache):
    xh, rstd, g = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(0)
    db = dy.reshape(-1, xh.shape[-1]).sum(0)
    dxh = dy * g
    n = xh.shape[-1]
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _wgrad(x, dy):
    """Weight gradient ``sum_{b,s} x[b,s,:]^T dy[b,s,:]`` as one matmul."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(-1, keepdims=True)
    return s


def _split_heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _stream_groups(stream, n_streams, s):
    if stream is None or n_streams == 1:
        return [(0, slice(None))]
    stream = np.asarray(stream)
    return [(k, np.flatnonzero(stream == k)) for k in range(n_streams) if np.any(stream == k)]


def _proj_fwd(x, params, names, groups, out_dim):
    """Per-stream affine map; ``names`` maps stream -> (w, b)."""
    if len(groups) == 1 and isinstance(groups[0][1], slice):
        w, b = names(groups[0][0])
        return x @ params[w] + params[b]
    y = np.empty(x.shape[:-1] + (out_dim,), dtype=x.dtype)
    for k, idx in groups:
        w, b = names(k)
        y[:, idx] = x[:, idx] @ params[w] + params[b]
    return y


def _proj_bwd(dy, x, params, names, groups, grads):
    if len(groups) == 1 and isinstance(groups[0][1], slice):
        groups_ = [(groups[0][0], slice(None))]
    else:
        groups_ = groups
    dx = np.empty(x.shape, dtype=dy.dtype)
    for k, idx in groups_:
        w, b = names(k)
        xs, dys = x[:, idx], dy[:, idx]
        grads[w] += _wgrad(xs, dys)
        grads[b] += dys.sum((0, 1))
        dx[:, idx] = dys @ params[w].T
    return dx


def upweight_bias(roles: np.ndarray, c: float, dtype) -> np.ndarray | None:
    """(B, 1, S, S) additive bias for image-query -> text-key scores, or None when c == 0."""
    if c == 0:
        return None
    q_img = roles == ROLE_IMAGE
    k_txt = roles == ROLE_TEXT
    return (c * (q_img[:, :, None] & k_txt[:, None, :]))[:, None].astype(dtype)


AttentionFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward(params: ModelParams, inp: ModelInput, upweight: UpweightConfig | float = 0.0,
            attention_fn: AttentionFn | None = None, return_attn: bool = False, keep_cache: bool = False):
    """Logits ``(B, S, V)``.

    With ``attention_fn`` the dense masked softmax is replaced by a kernel
    taking per-head ``q, k, v`` of shape ``(B, H, S, dh)``; the cache is then
    unavailable.
    """
    cfg = params.config
    p = params.tensors
    dt = params.dtype
    c = upweight.c if isinstance(upweight, UpweightConfig) else float(upweight)
    if c < 0:
        raise ValueError("upweight constant must be non-negative")
    b, s = inp.tokens.shape
    for name in ("roles", "pos1d", "row", "col"):
        if getattr(inp, name).shape != (b, s):
            raise ValueError(f"input field {name} has shape {getattr(inp, name).shape}, expected {(b, s)}")
    if attention_fn is None:
        if inp.mask is None:
            raise ValueError("a dense forward needs an attention mask")
        if inp.mask.shape[-2:] != (s, s):
            raise ValueError(f"mask shape {inp.mask.shape} does not match sequence length {s}")
    if inp.stream is not None:
        if len(inp.stream) != s:
            raise ValueError("stream array length differs from sequence length")
        if inp.stream.min() < 0 or inp.stream.max() >= cfg.n_streams:
            raise ValueError(f"stream ids must lie in [0, {cfg.n_streams})")
    if inp.tokens.max() >= cfg.vocab_size or inp.tokens.min() < 0:
        raise ValueError("token id outside vocabulary")

    h_heads = cfg.n_heads
    d = cfg.d_model
    dh = cfg.head_dim
    scale = dt.type(1.0 / np.sqrt(dh))
    groups = _stream_groups(inp.stream, cfg.n_streams, s)

    t1 = inp.pos1d >= 0
    ir = inp.row >= 0
    ic = inp.col >= 0
    x = p["tok_emb"][inp.tokens].copy()
    x += p["text_pos"][np.where(t1, inp.pos1d, 0)] * t1[..., None]
    x += p["img_row"][np.where(ir, inp.row, 0)] * ir[..., None]
    x += p["img_col"][np.where(ic, inp.col, 0)] * ic[..., None]

    if attention_fn is None:
        m = inp.mask if inp.mask.ndim == 3 else inp.mask[None]
        add = np.where(m, dt.type(0.0), dt.type(MASKED_SCORE))[:, None]
        up = upweight_bias(inp.roles, c, dt)
        if up is not None:
            add = add + up
    layer_caches = []
    attn_maps = []
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        lc = {}
        a, lc["ln1"] = _ln_fwd(x, p[pre + "ln_attn_in.g"], p[pre + "ln_attn_in.b"])
        lc["a"] = a
        qkv = _proj_fwd(a, p, lambda k: (f"{pre}attn.{k}.wqkv", f"{pre}attn.{k}.bqkv"), groups, 3 * d)
        q, k_, v = (_split_heads(qkv[..., i * d:(i + 1) * d], h_heads) for i in range(3))
        if attention_fn is None:
            sc = (q @ k_.transpose(0, 1, 3, 2)) * scale + add
            pr = _softmax(sc)
            o = pr @ v
            lc["qkv"] = (q, k_, v, pr)
            if return_attn:
                attn_maps.append(pr)
        else:
            o = attention_fn(q, k_, v).astype(dt, copy=False)
        om = _merge_heads(o)
        lc["om"] = om
        y = _proj_fwd(om, p, lambda k: (f"{pre}attn.{k}.wo", f"{pre}attn.{k}.bo"), groups, d)
        yn, lc["ln2"] = _ln_fwd(y, p[pre + "ln_attn_out.g"], p[pre + "ln_attn_out.b"])
        x = x + yn
        f_in, lc["ln3"] = _ln_fwd(x, p[pre + "ln_ffn_in.g"], p[pre + "ln_ffn_in.b"])
        lc["f_in"] = f_in
        hid = f_in @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
        act, lc["gelu"] = _gelu_fwd(hid)
        lc["act"] = act
        f_out = act @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        fn, lc["ln4"] = _ln_fwd(f_out, p[pre + "ln_ffn_out.g"], p[pre + "ln_ffn_out.b"])
        x = x + fn
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activations after layer {l}")
        layer_caches.append(lc)
    xf, lnf = _ln_fwd(x, p["ln_f.g"], p["ln_f.b"])
    logits = xf @ p["head.w"] + p["head.b"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    out = [logits]
    if keep_cache:
        if attention_fn is not None:
            raise ValueError("backward needs the dense attention path")
        out.append({"inp": inp, "groups": groups, "layers": layer_caches, "lnf": lnf, "xf": xf,
                    "scale": scale})
    if return_attn:
        out.append(attn_maps)
    return out[0] if len(out) == 1 else tuple(out)


def backward(params: ModelParams, dlogits: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of every tensor; frozen tensors get exact zeros."""
    cfg = params.config
    p = params.tensors
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    inp = cache["inp"]
    groups = cache["groups"]
    scale = cache["scale"]
    hh = cfg.n_heads

    grads["head.w"] += _wgrad(cache["xf"], dlogits)
    grads["head.b"] += dlogits.sum((0, 1))
    dxf = dlogits @ p["head.w"].T
    dx, dg, db = _ln_bwd(dxf, cache["lnf"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}."
        lc = cache["layers"][l]
        # FFN sublayer
        dfo, dg, db = _ln_bwd(dx, lc["ln4"])
        grads[pre + "ln_ffn_out.g"] += dg
        grads[pre + "ln_ffn_out.b"] += db
        grads[pre + "ffn.w2"] += _wgrad(lc["act"], dfo)
        grads[pre + "ffn.b2"] += dfo.sum((0, 1))
        dact = dfo @ p[pre + "ffn.w2"].T
        dhid = _gelu_bwd(dact, lc["gelu"])
        grads[pre + "ffn.w1"] += _wgrad(lc["f_in"], dhid)
        grads[pre + "ffn.b1"] += dhid.sum((0, 1))
        dfin = dhid @ p[pre + "ffn.w1"].T
        d3, dg, db = _ln_bwd(dfin, lc["ln3"])
        grads[pre + "ln_ffn_in.g"] += dg
        grads[pre + "ln_ffn_in.b"] += db
        dx = dx + d3
        # attention sublayer
        dy, dg, db = _ln_bwd(dx, lc["ln2"])
        grads[pre + "ln_attn_out.g"] += dg
        grads[pre + "ln_attn_out.b"] += db
        dom = _proj_bwd(dy, lc["om"], p, lambda k: (f"{pre}attn.{k}.wo", f"{pre}attn.{k}.bo"), groups, grads)
        q, k_, v, pr = lc["qkv"]
        do = _split_heads(dom, hh)
        dv = pr.transpose(0, 1, 3, 2) @ do
        dpr = do @ v.transpose(0, 1, 3, 2)
        dsc = pr * (dpr - (dpr * pr).sum(-1, keepdims=True))
        dq = (dsc @ k_) * scale
        dk = (dsc.transpose(0, 1, 3, 2) @ q) * scale
        dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        da = _proj_bwd(dqkv, lc["a"], p, lambda k: (f"{pre}attn.{k}.wqkv", f"{pre}attn.{k}.bqkv"), groups, grads)
        d1, dg, db = _ln_bwd(da, lc["ln1"])
        grads[pre + "ln_attn_in.g"] += dg
        grads[pre + "ln_attn_in.b"] += db
        dx = dx + d1

    t1 = inp.pos1d >= 0
    ir = inp.row >= 0
    ic = inp.col >= 0
    np.add.at(grads["tok_emb"], inp.tokens, dx)
    np.add.at(grads["text_pos"], inp.pos1d[t1], dx[t1])
    np.add.at(grads["img_row"], inp.row[ir], dx[ir])
    np.add.at(grads["img_col"], inp.col[ic], dx[ic])
    for name in params.frozen:
        grads[name][...] = 0
    return grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def weighted_token_nll(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """``sum(w * -log p(target))`` and its logit gradient.

    ``targets``/``weights`` are ``(B, S)``; slots with zero weight are ignored.
    """
    b, s, v = logits.shape
    sel = weights != 0
    z = logits[sel]
    z = z - z.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1))
    tgt = targets[sel]
    nll = lse - z[np.arange(len(tgt)), tgt]
    w = weights[sel]
    loss = float((w * nll).sum())
    pz = np.exp(z - lse[:, None])
    pz[np.arange(len(tgt)), tgt] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[sel] = pz * w[:, None]
    return loss, dlogits


def loss_and_grads(params: ModelParams, inp: ModelInput, targets, weights, upweight=0.0):
    logits, cache = forward(params, inp, upweight, keep_cache=True)
    loss, dl = weighted_token_nll(logits, targets, weights)
    return loss, backward(params, dl.astype(params.dtype), cache)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def attention_upweight_mass(params: ModelParams, inp: ModelInput, cs) -> np.ndarray:
    """Attention mass on text keys from image queries, per ``c`` (rows) and layer (cols).

    Mass is summed over text keys and averaged over image queries, heads and batch.
    """
    out = np.zeros((len(cs), params.config.n_layers))
    q_img = inp.roles == ROLE_IMAGE
    k_txt = (inp.roles == ROLE_TEXT).astype(np.float64)
    for i, c in enumerate(cs):
        _, maps = forward(params, inp, float(c), return_attn=True)
        for l, pr in enumerate(maps):
            mass = np.einsum("bhqk,bk->bhq", pr.astype(np.float64), k_txt)
            out[i, l] = mass.mean(1)[q_img].mean()
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    per_tensor: dict[str, float]


def grad_check(params: ModelParams, inp: ModelInput, targets, weights, epsilon: float = 1e-5,
               n_coords: int = 240, seed: int = 0, upweight: float = 0.0,
               abs_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    Coordinates are spread over every trainable tensor; embedding tables are
    sampled only on rows the batch actually touches. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    p64 = params.astype(np.float64)
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(p64, inp, targets, weights, upweight)

    used_rows = {
        "tok_emb": np.unique(inp.tokens),
        "text_pos": np.unique(inp.pos1d[inp.pos1d >= 0]),
        "img_row": np.unique(inp.row[inp.row >= 0]),
        "img_col": np.unique(inp.col[inp.col >= 0]),
    }
    stream_ids = set(np.unique(inp.stream).tolist()) if inp.stream is not None else {0}
    names = []
    for n in p64.tensors:
        if n in p64.frozen:
            continue
        if ".attn." in n and int(n.split(".")[3]) not in stream_ids:
            continue
        if n in used_rows and len(used_rows[n]) == 0:
            continue
        names.append(n)
    per = max(2, int(np.ceil(n_coords / len(names))))
    worst: dict[str, float] = {}
    total = 0
    for n in names:
        t = p64.tensors[n]
        for _ in range(per):
            if n in used_rows:
                idx = (int(rng.choice(used_rows[n])), int(rng.integers(t.shape[1])))
            else:
                idx = tuple(int(rng.integers(dim)) for dim in t.shape)
            old = t[idx]
            t[idx] = old + epsilon
            lp, _ = weighted_token_nll(forward(p64, inp, upweight), targets, weights)
            t[idx] = old - epsilon
            lm, _ = weighted_token_nll(forward(p64, inp, upweight), targets, weights)
            t[idx] = old
            num = (lp - lm) / (2 * epsilon)
            ana = grads[n][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst[n] = max(worst.get(n, 0.0), rel)
            total += 1
    return GradCheckReport(max(worst.values()), total, worst)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """Binary container: magic, u32 version, u32 header length, JSON header
    (config, meta, ordered tensor table with dtype/shape/frozen), then raw
    little-endian tensor payloads in table order."""
    table = [{"name": k, "dtype": np.dtype(v.dtype).newbyteorder("<").str, "shape": list(v.shape),
              "frozen": k in params.frozen} for k, v in params.tensors.items()]
    header = json.dumps({"config": asdict(params.config), "meta": params.meta, "tensors": table},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for entry in table:
            f.write(np.ascontiguousarray(params.tensors[entry["name"]], dtype=entry["dtype"]).tobytes())


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    tensors = {}
    frozen = set()
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=n, offset=off).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
        off += n * dt.itemsize
        if e["frozen"]:
            frozen.add(e["name"])
    params = ModelParams(ModelConfig(**header["config"]), tensors, frozen, header["meta"])
    params.check()
    return params
