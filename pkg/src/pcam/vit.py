"""Minimal patch-embedding transformer with shared self/cross branches.

One parameter set drives three branches per forward: source self-attention,
target self-attention, and a cross branch whose queries come from an
evolving state (initialized from the target tokens) while keys/values come
from the source branch's same-layer input.  Per-layer post-block embeddings
and attention weights are recorded for rollout; the backward pass is
hand-derived and checked against central differences in the tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .numerics import ContractViolation, check_finite, load_matrix, save_matrix, softmax

LN_EPS = 1e-5
BRANCHES = ("ss", "tt", "st")


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 16
    channels: int = 1
    patch_side: int = 4
    embed_dim: int = 32
    n_heads: int = 2
    n_layers: int = 3
    n_classes: int = 4

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ContractViolation("patch side must divide image side")
        if self.embed_dim % self.n_heads != 0:
            raise ContractViolation("embed dim must be a multiple of head count")
        for v in (self.image_side, self.channels, self.patch_side, self.embed_dim,
                  self.n_heads, self.n_layers, self.n_classes):
            if v < 1:
                raise ContractViolation("all config counts must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Scaled-uniform (+-1/sqrt(fan_in)) init; layer-norm at identity.

    Every tensor is 2-D (vectors stored 1 x n) so checkpoints round-trip
    exactly through the matrix text format.
    """
    d = cfg.embed_dim
    pdim = cfg.patch_side * cfg.patch_side * cfg.channels

    def u(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, np.ndarray] = {}
    params["patch_w"] = u(pdim, pdim, d)
    params["patch_b"] = np.zeros((1, d))
    params["cls"] = u(d, 1, d)
    params["pos"] = u(d, cfg.n_tokens, d)
    for l in range(cfg.n_layers):
        p = f"blk{l}_"
        params[p + "ln1_g"] = np.ones((1, d))
        params[p + "ln1_b"] = np.zeros((1, d))
        for name in ("wq", "wk", "wv", "wo"):
            params[p + name] = u(d, d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + name] = np.zeros((1, d))
        params[p + "ln2_g"] = np.ones((1, d))
        params[p + "ln2_b"] = np.zeros((1, d))
        params[p + "w1"] = u(d, d, 2 * d)
        params[p + "b1"] = np.zeros((1, 2 * d))
        params[p + "w2"] = u(2 * d, 2 * d, d)
        params[p + "b2"] = np.zeros((1, d))
    params["ln_f_g"] = np.ones((1, d))
    params["ln_f_b"] = np.zeros((1, d))
    params["head_w"] = u(d, d, cfg.n_classes)
    params["head_b"] = np.zeros((1, cfg.n_classes))
    return params


# ---------------------------------------------------------------------------
# Primitive layers (forward + hand-derived backward)


def gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * phi


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(d_out, cache, g):
    xhat, inv = cache
    dg = (d_out * xhat).sum(axis=0)
    db = d_out.sum(axis=0)
    dxhat = d_out * g
    dx = inv * (dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def softmax_rows_backward(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    # rowwise Jacobian: dS = W * (dW - sum(dW * W))
    return weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Scaled dot-product attention; returns (output, weights).

    Scaling uses the key/query width, weights rows are softmax-normalized.
    """
    q = check_finite("attention Q", q)
    k = check_finite("attention K", k)
    v = check_finite("attention V", v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ContractViolation("attention expects 2-D Q, K, V")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ContractViolation(f"attention shape mismatch: {q.shape} {k.shape} {v.shape}")
    scores = q @ k.T / np.sqrt(q.shape[1])
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


# ---------------------------------------------------------------------------
# Patch embedding


def extract_patches(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Row-major grid of flattened P x P x C patches, shape (N, P*P*C)."""
    image = check_finite("image", image)
    if image.shape != (cfg.image_side, cfg.image_side, cfg.channels):
        raise ContractViolation(f"image shape {image.shape} does not match config")
    p, g = cfg.patch_side, cfg.grid_side
    patches = np.empty((cfg.n_patches, p * p * cfg.channels))
    for gr in range(g):
        for gc in range(g):
            patches[gr * g + gc] = image[gr * p:(gr + 1) * p, gc * p:(gc + 1) * p, :].ravel()
    return patches


def patchify(image: np.ndarray, cfg: ModelConfig, params: dict) -> np.ndarray:
    """Token sequence: [CLS; projected patches] + position embeddings."""
    patches = extract_patches(image, cfg)
    emb = patches @ params["patch_w"] + params["patch_b"]
    tokens = np.vstack([params["cls"], emb]) + params["pos"]
    return tokens


def _patchify_backward(d_tokens, patches, grads):
    grads["pos"] += d_tokens
    grads["cls"] += d_tokens[0]
    d_emb = d_tokens[1:]
    grads["patch_w"] += patches.T @ d_emb
    grads["patch_b"] += d_emb.sum(axis=0)


# ---------------------------------------------------------------------------
# Transformer block


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)  # (H, T, Dh)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def block_forward(z_q, z_kv, params, cfg, layer):
    """Pre-LN block: state + MSA(LN(state)), then + MLP(LN(.)).

    z_q is the branch's own state, z_kv supplies keys/values (same object
    for the self branches).  Returns the new state and a cache for backward.
    """
    p = f"blk{layer}_"
    same = z_kv is z_q
    u_q, ln1_cache_q = layer_norm(z_q, params[p + "ln1_g"], params[p + "ln1_b"])
    if same:
        u_kv, ln1_cache_kv = u_q, ln1_cache_q
    else:
        u_kv, ln1_cache_kv = layer_norm(z_kv, params[p + "ln1_g"], params[p + "ln1_b"])

    q = u_q @ params[p + "wq"] + params[p + "bq"]
    k = u_kv @ params[p + "wk"] + params[p + "bk"]
    v = u_kv @ params[p + "wv"] + params[p + "bv"]
    qh, kh, vh = (_split_heads(x, cfg.n_heads) for x in (q, k, v))
    scores = np.einsum("htd,hsd->hts", qh, kh) / np.sqrt(cfg.head_dim)
    weights = softmax(scores, axis=-1)                     # (H, Tq, Tkv)
    o = _merge_heads(np.einsum("hts,hsd->htd", weights, vh))
    attn_out = o @ params[p + "wo"] + params[p + "bo"]
    za = z_q + attn_out

    vn, ln2_cache = layer_norm(za, params[p + "ln2_g"], params[p + "ln2_b"])
    h1 = vn @ params[p + "w1"] + params[p + "b1"]
    a1 = gelu(h1)
    mlp = a1 @ params[p + "w2"] + params[p + "b2"]
    z_out = za + mlp

    cache = dict(same=same, u_q=u_q, u_kv=u_kv, ln1_cache_q=ln1_cache_q,
                 ln1_cache_kv=ln1_cache_kv, qh=qh, kh=kh, vh=vh, weights=weights,
                 o=o, vn=vn, ln2_cache=ln2_cache, h1=h1, a1=a1, layer=layer)
    return z_out, cache


def block_backward(d_out, cache, params, cfg, grads):
    """Adjoints of block_forward; returns (d_zq, d_zkv or None when shared)."""
    p = f"blk{cache['layer']}_"
    # MLP sublayer
    d_mlp = d_out
    d_za = d_out.copy()
    d_a1 = d_mlp @ params[p + "w2"].T
    grads[p + "w2"] += cache["a1"].T @ d_mlp
    grads[p + "b2"] += d_mlp.sum(axis=0)
    d_h1 = d_a1 * gelu_grad(cache["h1"])
    d_vn = d_h1 @ params[p + "w1"].T
    grads[p + "w1"] += cache["vn"].T @ d_h1
    grads[p + "b1"] += d_h1.sum(axis=0)
    d_za_ln, dg2, db2 = layer_norm_backward(d_vn, cache["ln2_cache"], params[p + "ln2_g"])
    grads[p + "ln2_g"] += dg2
    grads[p + "ln2_b"] += db2
    d_za += d_za_ln

    # attention sublayer
    d_attn_out = d_za
    d_zq = d_za.copy()
    d_o = d_attn_out @ params[p + "wo"].T
    grads[p + "wo"] += cache["o"].T @ d_attn_out
    grads[p + "bo"] += d_attn_out.sum(axis=0)
    d_oh = _split_heads(d_o, cfg.n_heads)
    d_weights = np.einsum("htd,hsd->hts", d_oh, cache["vh"])
    d_vh = np.einsum("hts,htd->hsd", cache["weights"], d_oh)
    d_scores = softmax_rows_backward(cache["weights"], d_weights) / np.sqrt(cfg.head_dim)
    d_qh = np.einsum("hts,hsd->htd", d_scores, cache["kh"])
    d_kh = np.einsum("hts,htd->hsd", d_scores, cache["qh"])
    d_q, d_k, d_v = (_merge_heads(x) for x in (d_qh, d_kh, d_vh))

    d_u_q = d_q @ params[p + "wq"].T
    grads[p + "wq"] += cache["u_q"].T @ d_q
    grads[p + "bq"] += d_q.sum(axis=0)
    d_u_kv = d_k @ params[p + "wk"].T + d_v @ params[p + "wv"].T
    grads[p + "wk"] += cache["u_kv"].T @ d_k
    grads[p + "bk"] += d_k.sum(axis=0)
    grads[p + "wv"] += cache["u_kv"].T @ d_v
    grads[p + "bv"] += d_v.sum(axis=0)

    if cache["same"]:
        d_u_q = d_u_q + d_u_kv
        dx, dg1, db1 = layer_norm_backward(d_u_q, cache["ln1_cache_q"], params[p + "ln1_g"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        d_zq += dx
        return d_zq, None
    dx_q, dg1, db1 = layer_norm_backward(d_u_q, cache["ln1_cache_q"], params[p + "ln1_g"])
    grads[p + "ln1_g"] += dg1
    grads[p + "ln1_b"] += db1
    d_zq += dx_q
    d_zkv, dg1k, db1k = layer_norm_backward(d_u_kv, cache["ln1_cache_kv"], params[p + "ln1_g"])
    grads[p + "ln1_g"] += dg1k
    grads[p + "ln1_b"] += db1k
    return d_zq, d_zkv


# ---------------------------------------------------------------------------
# Whole-model forward passes


@dataclass
class Features:
    f_s: np.ndarray
    f_t: np.ndarray
    f_st: np.ndarray


@dataclass
class AttentionStack:
    """Per-branch attention weights and post-block states for all layers."""
    weights: dict[str, list[np.ndarray]]   # branch -> [L] arrays (H, Tq, Tkv)
    states: dict[str, list[np.ndarray]]    # branch -> [L+1] arrays (T, D); index 0 = embeddings

    def patch_states(self, branch: str, layer: int) -> np.ndarray:
        """Patch rows (CLS excluded) of a post-block state; layer is 1-based."""
        return self.states[branch][layer][1:]


@dataclass
class ForwardTriple:
    cfg: ModelConfig
    features: Features
    stack: AttentionStack
    caches: list[dict[str, dict]] = field(repr=False, default_factory=list)
    patches_s: np.ndarray | None = field(repr=False, default=None)
    patches_t: np.ndarray | None = field(repr=False, default=None)


def forward_triple(params: dict, cfg: ModelConfig, x_s: np.ndarray, x_t: np.ndarray) -> ForwardTriple:
    """Run the three weight-shared branches, recording everything rollout and
    the backward pass need."""
    patches_s = extract_patches(x_s, cfg)
    patches_t = extract_patches(x_t, cfg)
    emb_s = np.vstack([params["cls"], patches_s @ params["patch_w"] + params["patch_b"]]) + params["pos"]
    emb_t = np.vstack([params["cls"], patches_t @ params["patch_w"] + params["patch_b"]]) + params["pos"]

    states = {"ss": [emb_s], "tt": [emb_t], "st": [emb_t]}
    weights: dict[str, list[np.ndarray]] = {b: [] for b in BRANCHES}
    caches: list[dict[str, dict]] = []
    zs, zt, zx = emb_s, emb_t, emb_t
    for l in range(cfg.n_layers):
        zx_new, cache_x = block_forward(zx, zs, params, cfg, l)   # cross reads source K/V pre-block
        zs_new, cache_s = block_forward(zs, zs, params, cfg, l)
        zt_new, cache_t = block_forward(zt, zt, params, cfg, l)
        zs, zt, zx = zs_new, zt_new, zx_new
        states["ss"].append(zs)
        states["tt"].append(zt)
        states["st"].append(zx)
        weights["ss"].append(cache_s["weights"])
        weights["tt"].append(cache_t["weights"])
        weights["st"].append(cache_x["weights"])
        caches.append({"ss": cache_s, "tt": cache_t, "st": cache_x})

    feats = Features(f_s=zs[0], f_t=zt[0], f_st=zx[0])
    return ForwardTriple(cfg=cfg, features=feats,
                         stack=AttentionStack(weights=weights, states=states),
                         caches=caches, patches_s=patches_s, patches_t=patches_t)


def backward_triple(fwd: ForwardTriple, params: dict,
                    state_adjoints: dict[str, list[np.ndarray | None]]) -> dict[str, np.ndarray]:
    """Backpropagate adjoints injected on post-block states of any branch.

    state_adjoints[branch][l] (l = 0..L, same indexing as stack.states) is a
    (T, D) array or None.  Returns parameter gradients.  Losses on features
    enter as adjoints on row 0 of the layer-L states; rollout terms enter on
    patch rows of every layer's states.
    """
    cfg = fwd.cfg
    L = cfg.n_layers
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    def inj(branch, l):
        a = state_adjoints.get(branch, [None] * (L + 1))[l]
        return np.zeros((cfg.n_tokens, cfg.embed_dim)) if a is None else a.copy()

    dzs, dzt, dzx = inj("ss", L), inj("tt", L), inj("st", L)
    for l in reversed(range(L)):
        cache = fwd.caches[l]
        dzx_in, dzs_from_cross = block_backward(dzx, cache["st"], params, cfg, grads)
        dzs_in, _ = block_backward(dzs, cache["ss"], params, cfg, grads)
        dzt_in, _ = block_backward(dzt, cache["tt"], params, cfg, grads)
        dzs = dzs_in + dzs_from_cross + inj("ss", l)
        dzt = dzt_in + inj("tt", l)
        dzx = dzx_in + inj("st", l)

    _patchify_backward(dzs, fwd.patches_s, grads)
    _patchify_backward(dzt + dzx, fwd.patches_t, grads)   # cross state starts from target tokens
    return grads


def forward_single(params: dict, cfg: ModelConfig, image: np.ndarray):
    """Plain single-branch forward (the inference path): states and features."""
    z = patchify(image, cfg, params)
    states = [z]
    weights = []
    for l in range(cfg.n_layers):
        z, cache = block_forward(z, z, params, cfg, l)
        states.append(z)
        weights.append(cache["weights"])
    return z[0], states, weights


def classify(f: np.ndarray, params: dict) -> np.ndarray:
    f = check_finite("feature", f)
    return f @ params["head_w"] + params["head_b"][0]


def head_features(f: np.ndarray, params: dict):
    """Normalized view of a feature vector for the classifier head.

    The raw CLS feature is unbounded (residual stream); normalizing the head
    input keeps logits at unit scale so from-scratch training cannot run
    away.  Pairing and rollout keep the raw feature.
    """
    out, cache = layer_norm(f[None, :], params["ln_f_g"], params["ln_f_b"])
    return out[0], cache


def head_features_backward(d_hf: np.ndarray, cache, params: dict, grads: dict) -> np.ndarray:
    dx, dg, db = layer_norm_backward(d_hf[None, :], cache, params["ln_f_g"])
    grads["ln_f_g"] += dg
    grads["ln_f_b"] += db
    return dx[0]


def logits_of(f: np.ndarray, params: dict) -> np.ndarray:
    """Head output for a raw feature: normalize, then the linear map."""
    hf, _ = head_features(f, params)
    return classify(hf, params)


def head_backward(f: np.ndarray, d_logits: np.ndarray, params: dict, grads: dict) -> np.ndarray:
    grads["head_w"] += np.outer(f, d_logits)
    grads["head_b"] += d_logits
    return d_logits @ params["head_w"].T


# ---------------------------------------------------------------------------
# Checkpoints: one matrix text file per tensor plus a manifest.


def save_checkpoint(out_dir: str, params: dict[str, np.ndarray]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="ascii") as fh:
        for name, tensor in params.items():
            save_matrix(os.path.join(out_dir, f"{name}.txt"), tensor)
            fh.write(f"{name} {tensor.shape[0]} {tensor.shape[1]}\n")


def load_checkpoint(in_dir: str) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    with open(os.path.join(in_dir, "manifest.txt"), "r", encoding="ascii") as fh:
        for line in fh:
            name, rows, cols = line.split()
            m = load_matrix(os.path.join(in_dir, f"{name}.txt"))
            if m.shape != (int(rows), int(cols)):
                raise ContractViolation(f"checkpoint tensor {name} has wrong shape")
            params[name] = m
    return params
