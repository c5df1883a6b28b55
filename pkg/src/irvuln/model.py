"""Transformer encoder classifier in plain numpy.

Row-vector convention throughout: an activation matrix has one row per token,
and a projection ``W`` of shape (d_in, d_out) maps it as ``X @ W``. Every
function accepts optional leading batch dimensions.

Block wiring is post-norm::

    A   = LayerNorm(E + MHA(E))
    out = LayerNorm(A + FFN(A)),   FFN(A) = relu(A W1 + b1) W2 + b2

The forward pass can record a cache, and :func:`backprop` consumes it to
produce exact gradients for every parameter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError, IdOutOfRange, OddDimension, ShapeMismatch

MASK_BIAS = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 256
    max_len: int = 512
    n_fc_layers: int = 1
    fc_hidden: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if f.name != "dropout_rate" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise OddDimension(f"d_model must be even for sinusoidal encoding, got {self.d_model}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "bert-like": dict(d_model=128, n_heads=4, n_layers=4, d_ff=256, max_len=512),
    "distilbert-like": dict(d_model=128, n_heads=4, n_layers=2, d_ff=256, max_len=512),
}


def preset_config(name: str, vocab_size: int, **overrides) -> ModelConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **base)


def dtype_for(precision: str):
    if precision in ("double", "float64"):
        return np.float64
    if precision in ("single", "float32"):
        return np.float32
    raise ConfigError(f"precision must be 'single' or 'double', got {precision!r}")


def block_param_names(i: int) -> list[str]:
    return [f"blocks.{i}.{n}" for n in (
        "w_q", "w_k", "w_v", "w_o", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
    )]


def head_param_names(j: int) -> list[str]:
    return [f"head.{j}.weight", f"head.{j}.bias"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        for name, shape in zip(block_param_names(i), [
            (d, d), (d, d), (d, d), (d, d), (d, f), (f,), (f, d), (d,), (d,), (d,), (d,), (d,),
        ]):
            shapes[name] = shape
    widths = [d] + [cfg.fc_hidden] * (cfg.n_fc_layers - 1) + [2]
    for j in range(cfg.n_fc_layers):
        w, b = head_param_names(j)
        shapes[w] = (widths[j], widths[j + 1])
        shapes[b] = (widths[j + 1],)
    return shapes


class TransformerModel:
    """Configuration plus an ordered name -> array mapping of all weights."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ShapeMismatch(f"parameter names/order do not match config: {list(params)[:4]}...")
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {expected[name]}")
        dtypes = {arr.dtype for arr in params.values()}
        if len(dtypes) != 1:
            raise ShapeMismatch(f"mixed parameter dtypes {dtypes}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, precision: str = "double") -> "TransformerModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit LayerNorm gains.

        The embedding table counts as fan_in 1.
        """
        dtype = dtype_for(precision)
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_gain"):
                arr = np.ones(shape)
            elif leaf.endswith("_bias") and leaf.startswith("ln"):
                arr = np.zeros(shape)
            else:
                if name == "embedding":
                    fan_in = 1
                elif len(shape) == 2:
                    fan_in = shape[0]
                else:
                    # bias: fan_in of the matching weight
                    fan_in = param_shapes(config)[name.replace("b_ff", "w_ff").replace("bias", "weight")][0]
                bound = 1.0 / math.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = arr.astype(dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def precision(self) -> str:
        return "double" if self.dtype == np.float64 else "single"

    def block(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def head(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [tuple(self.params[n] for n in head_param_names(j)) for j in range(self.config.n_fc_layers)]

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())


@lru_cache(maxsize=16)
def _pe_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table of shape (max_len, d_model), float64."""
    if d_model % 2:
        raise OddDimension(f"d_model must be even, got {d_model}")
    if max_len < 1 or d_model < 1:
        raise ConfigError("max_len and d_model must be positive")
    return _pe_table(max_len, d_model)


def embed(ids, mask, model: TransformerModel) -> np.ndarray:
    """Token embedding plus positional encoding. PAD rows are embedded too."""
    ids = np.asarray(ids)
    cfg = model.config
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IdOutOfRange(f"ids must lie in [0, {cfg.vocab_size}), got range [{ids.min()}, {ids.max()}]")
    T = ids.shape[-1]
    if T > cfg.max_len:
        raise ShapeMismatch(f"sequence length {T} exceeds max_len {cfg.max_len}")
    table = model.params["embedding"]
    return table[ids] + positional_encoding(cfg.max_len, cfg.d_model)[:T].astype(table.dtype)


def _mask_bias(mask, dtype) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask)
    return np.where(mask[..., None, :] > 0, 0.0, MASK_BIAS).astype(dtype)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _attention(Q, K, V, mask):
    if Q.shape[-2] != K.shape[-2] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"row counts differ: Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeMismatch(f"Q and K widths differ: {Q.shape[-1]} vs {K.shape[-1]}")
    scores = (Q @ np.swapaxes(K, -1, -2)) / math.sqrt(Q.shape[-1])
    bias = _mask_bias(mask, scores.dtype)
    if bias is not None:
        scores = scores + bias
    weights = softmax(scores)
    return weights @ V, weights


def attention(Q, K, V, mask=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k) + mask_bias) V.

    ``mask`` marks valid key positions with 1; its leading dimensions must
    broadcast against those of Q.
    """
    out, weights = _attention(np.asarray(Q), np.asarray(K), np.asarray(V), mask)
    return (out, weights) if return_weights else out


def _split_heads(X, n_heads):
    *lead, T, D = X.shape
    return np.swapaxes(X.reshape(*lead, T, n_heads, D // n_heads), -2, -3)


def _merge_heads(X):
    X = np.swapaxes(X, -2, -3)
    *lead, T, H, dk = X.shape
    return X.reshape(*lead, T, H * dk)


def _head_mask(mask):
    return None if mask is None else np.asarray(mask)[..., None, :]


def multi_head_attention(E, weights: dict, mask, n_heads: int) -> np.ndarray:
    """Project rows to Q/K/V, attend per head, concatenate, project by W_O."""
    if E.shape[-1] != weights["w_q"].shape[0]:
        raise ShapeMismatch(f"input width {E.shape[-1]} != d_model {weights['w_q'].shape[0]}")
    if E.shape[-1] % n_heads:
        raise ShapeMismatch(f"d_model {E.shape[-1]} not divisible by {n_heads} heads")
    q = _split_heads(E @ weights["w_q"], n_heads)
    k = _split_heads(E @ weights["w_k"], n_heads)
    v = _split_heads(E @ weights["w_v"], n_heads)
    ctx, _ = _attention(q, k, v, _head_mask(mask))
    return _merge_heads(ctx) @ weights["w_o"]


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_back(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def _encoder_block(E, w, mask, n_heads, dropout_rate=0.0, rng=None):
    if E.shape[-1] != w["w_q"].shape[0]:
        raise ShapeMismatch(f"input width {E.shape[-1]} != d_model {w['w_q'].shape[0]}")
    q = _split_heads(E @ w["w_q"], n_heads)
    k = _split_heads(E @ w["w_k"], n_heads)
    v = _split_heads(E @ w["w_v"], n_heads)
    ctx, probs = _attention(q, k, v, _head_mask(mask))
    ctx = _merge_heads(ctx)
    att, keep1 = _dropout(ctx @ w["w_o"], dropout_rate, rng)
    h1, ln1 = layer_norm(E + att, w["ln1_gain"], w["ln1_bias"])
    pre = h1 @ w["w_ff1"] + w["b_ff1"]
    z = np.maximum(pre, 0)
    ff, keep2 = _dropout(z @ w["w_ff2"] + w["b_ff2"], dropout_rate, rng)
    out, ln2 = layer_norm(h1 + ff, w["ln2_gain"], w["ln2_bias"])
    cache = dict(E=E, q=q, k=k, v=v, probs=probs, ctx=ctx, keep1=keep1, h1=h1, ln1=ln1,
                 pre=pre, z=z, keep2=keep2, ln2=ln2)
    return out, cache


def encoder_block(E, weights: dict, mask, n_heads: int, dropout_rate: float = 0.0, rng=None) -> np.ndarray:
    return _encoder_block(E, weights, mask, n_heads, dropout_rate, rng)[0]


def _encoder_block_back(dout, w, cache, n_heads):
    g = {}
    dr2, g["ln2_gain"], g["ln2_bias"] = _layer_norm_back(dout, w["ln2_gain"], cache["ln2"])
    dff = dr2 if cache["keep2"] is None else dr2 * cache["keep2"]
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    g["w_ff2"] = flat(cache["z"]).T @ flat(dff)
    g["b_ff2"] = flat(dff).sum(axis=0)
    dpre = (dff @ w["w_ff2"].T) * (cache["pre"] > 0)
    g["w_ff1"] = flat(cache["h1"]).T @ flat(dpre)
    g["b_ff1"] = flat(dpre).sum(axis=0)
    dh1 = dr2 + dpre @ w["w_ff1"].T
    dr1, g["ln1_gain"], g["ln1_bias"] = _layer_norm_back(dh1, w["ln1_gain"], cache["ln1"])
    datt = dr1 if cache["keep1"] is None else dr1 * cache["keep1"]
    g["w_o"] = flat(cache["ctx"]).T @ flat(datt)
    dctx = _split_heads(datt @ w["w_o"].T, n_heads)
    q, k, v, probs = cache["q"], cache["k"], cache["v"], cache["probs"]
    dprobs = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(probs, -1, -2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(q.shape[-1])
    dq = _merge_heads(dscores @ k)
    dk = _merge_heads(np.swapaxes(dscores, -1, -2) @ q)
    dv = _merge_heads(dv)
    E = flat(cache["E"])
    g["w_q"] = E.T @ flat(dq)
    g["w_k"] = E.T @ flat(dk)
    g["w_v"] = E.T @ flat(dv)
    dE = dr1 + dq @ w["w_q"].T + dk @ w["w_k"].T + dv @ w["w_v"].T
    return dE, g


def _stable_prob(logits):
    diff = logits[..., 1] - logits[..., 0]
    e = np.exp(-np.abs(diff))
    prob = np.where(diff >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # strictly inside (0, 1) even when the sigmoid saturates
    tiny = np.finfo(logits.dtype).tiny
    return np.clip(prob, tiny, np.nextafter(logits.dtype.type(1), logits.dtype.type(0))).astype(logits.dtype)


def _classify(H, head):
    width = H.shape[-1]
    for j, (w, b) in enumerate(head):
        if w.shape[0] != width or b.shape != (w.shape[1],):
            raise ShapeMismatch(f"head layer {j}: weight {w.shape}, bias {b.shape}, input width {width}")
        width = w.shape[1]
    if width != 2:
        raise ShapeMismatch("final head layer must output 2 logits")
    x = H[..., 0, :]
    acts = [x]
    for j, (w, b) in enumerate(head):
        x = x @ w + b
        if j < len(head) - 1:
            x = np.maximum(x, 0)
        acts.append(x)
    return x, _stable_prob(x), acts


def classify(H, head) -> tuple[np.ndarray, np.ndarray]:
    """Pool the CLS row and run the FC head. Returns (logits, p(vulnerable))."""
    logits, prob, _ = _classify(np.asarray(H), head)
    return logits, prob


def forward_cached(ids, mask, model: TransformerModel, rng=None):
    """Forward pass that also returns the cache needed by :func:`backprop`.

    Dropout is applied only when ``rng`` is given.
    """
    cfg = model.config
    rate = cfg.dropout_rate if rng is not None else 0.0
    ids = np.asarray(ids)
    x = embed(ids, mask, model)
    caches = []
    for i in range(cfg.n_layers):
        x, c = _encoder_block(x, model.block(i), mask, cfg.n_heads, rate, rng)
        caches.append(c)
    logits, prob, acts = _classify(x, model.head())
    return logits, prob, dict(ids=ids, blocks=caches, H=x, acts=acts)


def forward(ids, mask, model: TransformerModel) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic inference: (logits, p(vulnerable)) for one or a batch of sequences."""
    logits, prob, _ = forward_cached(ids, mask, model)
    return logits, prob


def backprop(dlogits, model: TransformerModel, cache) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d logits."""
    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    head = model.head()
    acts = cache["acts"]
    d = dlogits
    for j in reversed(range(len(head))):
        w, _ = head[j]
        a_in = acts[j]
        wn, bn = head_param_names(j)
        grads[wn] = a_in.reshape(-1, a_in.shape[-1]).T @ d.reshape(-1, d.shape[-1])
        grads[bn] = d.reshape(-1, d.shape[-1]).sum(axis=0)
        d = d @ w.T
        if j > 0:
            d = d * (acts[j] > 0)
    H = cache["H"]
    dH = np.zeros_like(H)
    dH[..., 0, :] = d
    for i in reversed(range(cfg.n_layers)):
        dH, g = _encoder_block_back(dH, model.block(i), cache["blocks"][i], cfg.n_heads)
        for k, v in g.items():
            grads[f"blocks.{i}.{k}"] = v
    demb = np.zeros_like(model.params["embedding"])
    np.add.at(demb, cache["ids"].reshape(-1), dH.reshape(-1, dH.shape[-1]))
    grads["embedding"] = demb
    return {name: grads[name].astype(model.dtype, copy=False) for name in model.params}


def with_head_depth(config: ModelConfig, depth: int) -> ModelConfig:
    return replace(config, n_fc_layers=depth)
