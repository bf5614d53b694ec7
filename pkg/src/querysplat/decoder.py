"""Query-token Gaussian decoder.

A small trainable patch encoder embeds every view's patches; N learnable
query tokens are concatenated with all view tokens and refined through L
pre-norm self-attention blocks; a single linear head maps each refined query
to 14 raw Gaussian parameters (3 position + 3 log-scale + 4 quaternion +
1 opacity + 3 color). Decoding also captures an AttentionTrace (per-layer
Q/K activations and the query-row attention weights) that the feature
decoder later replays frozen.

The whole model is one expression graph built once per (config, V) and
re-evaluated against weight/input bindings.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .raster import GaussianSet

LOG_SCALE_MIN = -8.0
LOG_SCALE_MAX = 2.0
RAW_DIM = 14


@dataclass
class DecoderConfig:
    n_queries: int = 64
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    patch: int = 8
    v_max: int = 8
    grid_h: int = 8
    grid_w: int = 8
    pos_scale: float = 8.8
    init_depth: float = 2.6

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must be divisible by n_heads")

    @property
    def tokens_per_view(self) -> int:
        return self.grid_h * self.grid_w


def init_weights(cfg: DecoderConfig, seed: int = 0) -> dict:
    """Fresh float32 weights; head bias places Gaussians near the scene depth."""
    rng = np.random.default_rng(seed)
    d = cfg.dim
    pdim = cfg.patch * cfg.patch * 3

    def nrm(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    w = {
        "enc.patch_w": nrm(pdim, d),
        "enc.patch_b": np.zeros(d, dtype=np.float32),
        "enc.pos": nrm(cfg.tokens_per_view, d),
        "enc.view": nrm(cfg.v_max, d),
        "queries": nrm(cfg.n_queries, d),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        w[p + "ln1_g"] = np.ones(d, dtype=np.float32)
        w[p + "ln1_b"] = np.zeros(d, dtype=np.float32)
        w[p + "wq"] = nrm(d, d)
        w[p + "wk"] = nrm(d, d)
        w[p + "wv"] = nrm(d, d)
        w[p + "wo"] = nrm(d, d)
        w[p + "ln2_g"] = np.ones(d, dtype=np.float32)
        w[p + "ln2_b"] = np.zeros(d, dtype=np.float32)
        w[p + "mlp_w1"] = nrm(d, 4 * d)
        w[p + "mlp_b1"] = np.zeros(4 * d, dtype=np.float32)
        w[p + "mlp_w2"] = nrm(4 * d, d)
        w[p + "mlp_b2"] = np.zeros(d, dtype=np.float32)
    w["final_ln_g"] = np.ones(d, dtype=np.float32)
    w["final_ln_b"] = np.zeros(d, dtype=np.float32)
    w["head_w"] = nrm(d, RAW_DIM)
    head_b = np.zeros(RAW_DIM, dtype=np.float32)
    head_b[2] = np.arctanh(min(cfg.init_depth / cfg.pos_scale, 0.95))
    head_b[3:6] = np.log(0.15)
    w["head_b"] = head_b
    return w


def weight_names(cfg: DecoderConfig) -> list:
    """Canonical checkpoint block order."""
    return list(init_weights(cfg, 0).keys())


def encoder_param_names(weights: dict) -> list:
    return [k for k in weights if k.startswith("enc.")]


def attention_param_names(weights: dict) -> list:
    """Parameters that define the attention weights (frozen in the feature decoder)."""
    return [k for k in weights if k.split(".")[-1] in ("wq", "wk") or k.startswith("enc.") or k == "queries"]


# -- graph construction -------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(V, H, W, 3) -> (V*h*w, patch*patch*3) rows in view-major, row-major cell order."""
    v, H, W, c = images.shape
    if H % patch or W % patch:
        raise ValueError("image size must be divisible by the patch size")
    h, w = H // patch, W // patch
    x = images.reshape(v, h, patch, w, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(v * h * w, patch * patch * c)
    return np.ascontiguousarray(x)


def _build_encoder(g: ad.Graph, cfg: DecoderConfig, n_views: int):
    """Patch embedding + positional and view-index embeddings; returns the (V*h*w, d) node."""
    hw = cfg.tokens_per_view
    pdim = cfg.patch * cfg.patch * 3
    patches = g.leaf("patches", (n_views * hw, pdim))
    pw = g.leaf("enc.patch_w", (pdim, cfg.dim))
    pb = g.leaf("enc.patch_b", (cfg.dim,))
    pos = g.leaf("enc.pos", (hw, cfg.dim))
    vemb = g.leaf("enc.view", (cfg.v_max, cfg.dim))
    ones = g.leaf("const.ones_hw", (hw, 1))

    f = g.add(g.matmul(patches, pw), pb)
    f = g.add(f, g.concat([pos] * n_views, axis=0))
    view_rows = [g.matmul(ones, g.slice(vemb, (v, 0), (v + 1, cfg.dim))) for v in range(n_views)]
    f = g.add(f, g.concat(view_rows, axis=0))
    return f


def _affine_ln(g, x, gain, bias):
    return g.add(g.mul(g.layer_norm(x), gain), bias)


def _build_decoder_graph(cfg: DecoderConfig, n_views: int):
    if n_views < 1 or n_views > cfg.v_max:
        raise ValueError(f"n_views must be in [1, {cfg.v_max}]")
    g = ad.Graph()
    f = _build_encoder(g, cfg, n_views)
    d, nh = cfg.dim, cfg.n_heads
    dh = d // nh
    n = cfg.n_queries
    T = n + n_views * cfg.tokens_per_view

    q = g.leaf("queries", (n, d))
    x = g.concat([q, f], axis=0)

    attn_nodes = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        ln1 = _affine_ln(g, x, g.leaf(p + "ln1_g", (d,)), g.leaf(p + "ln1_b", (d,)))
        qs = g.matmul(ln1, g.leaf(p + "wq", (d, d)))
        ks = g.matmul(ln1, g.leaf(p + "wk", (d, d)))
        vs = g.matmul(ln1, g.leaf(p + "wv", (d, d)))
        heads, a_nodes = [], []
        for hidx in range(nh):
            c0, c1 = hidx * dh, (hidx + 1) * dh
            qh = g.slice(qs, (0, c0), (T, c1))
            kh = g.slice(ks, (0, c0), (T, c1))
            vh = g.slice(vs, (0, c0), (T, c1))
            logits = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / np.sqrt(dh))
            a = g.softmax(logits)
            a_nodes.append(a)
            heads.append(g.matmul(a, vh))
        attn_out = g.matmul(g.concat(heads, axis=1), g.leaf(p + "wo", (d, d)))
        x = g.add(x, attn_out)
        ln2 = _affine_ln(g, x, g.leaf(p + "ln2_g", (d,)), g.leaf(p + "ln2_b", (d,)))
        h1 = g.relu(g.add(g.matmul(ln2, g.leaf(p + "mlp_w1", (d, 4 * d))), g.leaf(p + "mlp_b1", (4 * d,))))
        mlp = g.add(g.matmul(h1, g.leaf(p + "mlp_w2", (4 * d, d))), g.leaf(p + "mlp_b2", (d,)))
        x = g.add(x, mlp)
        attn_nodes.append({"a": a_nodes, "q": qs, "k": ks})

    xn = _affine_ln(g, x, g.leaf("final_ln_g", (d,)), g.leaf("final_ln_b", (d,)))
    qbar = g.slice(xn, (0, 0), (n, d))
    raw = g.add(g.matmul(qbar, g.leaf("head_w", (d, RAW_DIM))), g.leaf("head_b", (RAW_DIM,)))
    return {"graph": g, "raw": raw, "encoded": f, "attn": attn_nodes, "n_views": n_views}


_GRAPH_CACHE: dict = {}
_ENC_CACHE: dict = {}


def decoder_graph(cfg: DecoderConfig, n_views: int):
    key = (id(type(cfg)), tuple(sorted(vars(cfg).items())), n_views)
    if key not in _GRAPH_CACHE:
        _GRAPH_CACHE[key] = _build_decoder_graph(cfg, n_views)
    return _GRAPH_CACHE[key]


def bind_inputs(cfg: DecoderConfig, weights: dict, images: np.ndarray) -> dict:
    v = images.shape[0]
    b = dict(weights)
    b["patches"] = patchify(np.asarray(images, dtype=np.float32), cfg.patch)
    b["const.ones_hw"] = np.ones((cfg.tokens_per_view, 1), dtype=np.float32)
    return b


# -- attention trace ----------------------------------------------------------


@dataclass
class AttentionTrace:
    """Per-layer attention state captured during Gaussian decoding.

    Token order along key axes: [N query tokens] + per view v (row-major
    grid cells). `rows` stores softmax rows of the query tokens per head;
    `q`/`k` are the full projected activations needed to rebuild any row.
    """

    n_queries: int
    n_heads: int
    n_views: int
    grid: tuple
    layers: list = field(default_factory=list)  # [{"q": (T,d), "k": (T,d), "rows": (nh, N, T)}]

    @property
    def tokens(self) -> int:
        return self.layers[0]["q"].shape[0]

    def full_attention(self, layer: int) -> np.ndarray:
        """Recompute the full (n_heads, T, T) softmax weights from stored Q, K."""
        q, k = self.layers[layer]["q"], self.layers[layer]["k"]
        d = q.shape[1]
        dh = d // self.n_heads
        out = np.empty((self.n_heads, q.shape[0], q.shape[0]), dtype=q.dtype)
        for h in range(self.n_heads):
            logits = (q[:, h * dh : (h + 1) * dh] @ k[:, h * dh : (h + 1) * dh].T) / np.sqrt(dh).astype(q.dtype)
            m = logits.max(axis=-1, keepdims=True)
            e = np.exp(logits - m)
            out[h] = e / e.sum(axis=-1, keepdims=True)
        return out

    def view_logits(self, gaussian_index: int, layer: int, view: int) -> np.ndarray:
        """Head-averaged raw logits of one query row against one view's keys."""
        q, k = self.layers[layer]["q"], self.layers[layer]["k"]
        d = q.shape[1]
        dh = d // self.n_heads
        h_cells = self.grid[0] * self.grid[1]
        lo = self.n_queries + view * h_cells
        acc = np.zeros(h_cells, dtype=np.float64)
        for h in range(self.n_heads):
            qi = q[gaussian_index, h * dh : (h + 1) * dh]
            kv = k[lo : lo + h_cells, h * dh : (h + 1) * dh]
            acc += kv @ qi
        return (acc / self.n_heads).reshape(self.grid)


def decode_gaussians(images: np.ndarray, weights: dict, cfg: DecoderConfig):
    """Full decode: images -> (raw GaussianSet, AttentionTrace).

    The Gaussian count equals cfg.n_queries for any number of views.
    """
    v = images.shape[0]
    bundle = decoder_graph(cfg, v)
    g = bundle["graph"]
    want = [bundle["raw"]]
    for lay in bundle["attn"]:
        want.extend(lay["a"])
        want.extend([lay["q"], lay["k"]])
    outs, _ = ad.eval_forward(g, bind_inputs(cfg, weights, images), want)
    raw = outs[bundle["raw"]]
    trace = AttentionTrace(cfg.n_queries, cfg.n_heads, v, (cfg.grid_h, cfg.grid_w))
    for lay in bundle["attn"]:
        rows = np.stack([outs[a][: cfg.n_queries] for a in lay["a"]], axis=0)
        trace.layers.append({"q": outs[lay["q"]], "k": outs[lay["k"]], "rows": rows})
    return head_to_gaussians(raw, cfg.pos_scale), trace


def encode_views(images: np.ndarray, weights: dict, cfg: DecoderConfig) -> np.ndarray:
    """Standalone patch encoding: (V, H, W, 3) -> (V, h, w, d)."""
    v = images.shape[0]
    key = (tuple(sorted(vars(cfg).items())), v)
    if key not in _ENC_CACHE:
        g = ad.Graph()
        node = _build_encoder(g, cfg, v)
        _ENC_CACHE[key] = (g, node)
    g, node = _ENC_CACHE[key]
    outs, _ = ad.eval_forward(g, bind_inputs(cfg, weights, images), [node])
    return outs[node].reshape(v, cfg.grid_h, cfg.grid_w, cfg.dim)


# -- head activation ----------------------------------------------------------


def head_to_gaussians(raw: np.ndarray, pos_scale: float, features: np.ndarray | None = None) -> GaussianSet:
    """Map raw (N, 14) head outputs into GaussianSet parameter space."""
    if raw.shape[1] != RAW_DIM:
        raise ValueError(f"expected (N, {RAW_DIM}) raw outputs")
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite head output")
    return GaussianSet(
        positions=pos_scale * np.tanh(raw[:, 0:3]),
        log_scales=np.clip(raw[:, 3:6], LOG_SCALE_MIN, LOG_SCALE_MAX),
        quaternions=raw[:, 6:10].copy(),
        opacity_logits=raw[:, 10].copy(),
        color_logits=raw[:, 11:14].copy(),
        features=features,
    )


def head_backward(raw: np.ndarray, gset_grads, pos_scale: float) -> np.ndarray:
    """Chain GaussianSet parameter gradients back to raw head outputs."""
    d_raw = np.zeros_like(raw)
    th = np.tanh(raw[:, 0:3])
    d_raw[:, 0:3] = gset_grads.positions * pos_scale * (1.0 - th * th)
    inside = (raw[:, 3:6] > LOG_SCALE_MIN) & (raw[:, 3:6] < LOG_SCALE_MAX)
    d_raw[:, 3:6] = gset_grads.log_scales * inside
    d_raw[:, 6:10] = gset_grads.quaternions
    d_raw[:, 10] = gset_grads.opacity_logits
    d_raw[:, 11:14] = gset_grads.color_logits
    return d_raw


def gaussian_head_activate(raw14: np.ndarray, pos_scale: float = 8.8) -> dict:
    """Activate one raw 14-vector into rendering-space Gaussian attributes."""
    raw14 = np.asarray(raw14, dtype=np.float64).reshape(RAW_DIM)
    if not np.all(np.isfinite(raw14)):
        raise ValueError("non-finite head output")
    q = raw14[6:10]
    norm = np.linalg.norm(q)
    quat = np.array([1.0, 0.0, 0.0, 0.0]) if norm < 1e-8 else q / norm
    return {
        "position": pos_scale * np.tanh(raw14[0:3]),
        "scale": np.exp(np.clip(raw14[3:6], LOG_SCALE_MIN, LOG_SCALE_MAX)),
        "quaternion": quat,
        "opacity": float(1.0 / (1.0 + np.exp(-raw14[10]))),
        "color": 1.0 / (1.0 + np.exp(-raw14[11:14])),
    }


def attention_heatmap(trace: AttentionTrace, gaussian_index: int, layer: int, view: int) -> np.ndarray:
    """Min-max normalized head-averaged attention logits over one view's grid.

    A constant logit map normalizes to all zeros.
    """
    if not (0 <= gaussian_index < trace.n_queries):
        raise IndexError("gaussian index out of range")
    if not (0 <= layer < len(trace.layers)):
        raise IndexError("layer out of range")
    if not (0 <= view < trace.n_views):
        raise IndexError("view out of range")
    m = trace.view_logits(gaussian_index, layer, view)
    lo, hi = m.min(), m.max()
    if hi - lo < 1e-12:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


# -- checkpoint format ---------------------------------------------------------


def save_decoder(path, cfg: DecoderConfig, weights: dict) -> None:
    """`c3g v1 N d L n_heads patch v_max` header + meta block + named weights."""
    with open(path, "wb") as fh:
        fh.write(
            f"c3g v1 {cfg.n_queries} {cfg.dim} {cfg.n_layers} {cfg.n_heads} {cfg.patch} {cfg.v_max}\n".encode()
        )
        fh.write(b"meta\n")
        ad.write_array(fh, np.array([cfg.grid_h, cfg.grid_w, cfg.pos_scale, cfg.init_depth], dtype=np.float64))
        for name in weight_names(cfg):
            fh.write(f"{name}\n".encode("utf-8"))
            ad.write_array(fh, weights[name].astype(np.float32))


def load_decoder(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").split()
        if len(header) != 8 or header[:2] != ["c3g", "v1"]:
            raise ValueError(f"bad c3g header: {header}")
        n, d, L, nh, patch, vmax = (int(x) for x in header[2:])
        name = fh.readline().decode("utf-8").strip()
        if name != "meta":
            raise ValueError("missing meta block")
        meta = ad.read_array(fh)
        cfg = DecoderConfig(
            n_queries=n,
            dim=d,
            n_layers=L,
            n_heads=nh,
            patch=patch,
            v_max=vmax,
            grid_h=int(meta[0]),
            grid_w=int(meta[1]),
            pos_scale=float(meta[2]),
            init_depth=float(meta[3]),
        )
        weights = {}
        for expected in weight_names(cfg):
            name = fh.readline().decode("utf-8").strip()
            if name != expected:
                raise ValueError(f"checkpoint block order mismatch: {name!r} != {expected!r}")
            weights[name] = ad.read_array(fh)
    return cfg, weights


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
