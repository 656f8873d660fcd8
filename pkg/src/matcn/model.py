"""MA-TCN trajectory encoder.

Hidden states are channel-first, (B, d, L), except inside self-attention
which works on (B, L, d).  Dense layers store weights as (in, out); the 1x1
convolutions store (out, in).

Forward pass for one batch of grid sequences::

    embed -> 1x1 conv -> channel attention
          -> N x [self-attention, conv residual, conv residual]
          -> time-wise attention per residual sub-block (2N vectors)
          -> profile-targeted attention across the 2N vectors -> Tr
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .preprocess import GridBatch
from .tensor import Tensor


@dataclass
class MaTcnConfig:
    d: int = 64
    n_heads: int = 8
    n_blocks: int = 4
    kernel_size: int = 10
    dilation_base: int = 2
    lat_vocab: int = 64
    lon_vocab: int = 64
    n_intervals: int = 288
    emb_lat: int = 16
    emb_lon: int = 16
    emb_interval: int = 8
    emb_velocity: int = 8
    ca_reduction: int = 4
    velocity_scale: float = 10.0
    disable_mhsa: bool = False
    disable_aggregation: bool = False

    def __post_init__(self):
        for name in ("d", "n_heads", "n_blocks", "kernel_size", "dilation_base", "lat_vocab", "lon_vocab",
                     "n_intervals", "ca_reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_k < 1:
            raise ValueError(f"d={self.d} is too small for {self.n_heads} heads")

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    @property
    def embed_width(self) -> int:
        return self.emb_lat + self.emb_lon + self.emb_interval + self.emb_velocity

    @property
    def ca_hidden(self) -> int:
        return max(1, self.d // self.ca_reduction)

    def dilation(self, level: int) -> int:
        """Dilation shared by both conv sub-blocks of the 1-based ``level``."""
        return self.dilation_base ** (level - 1)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def receptive_field(n_blocks: int, kernel_size: int, dilation_base: int) -> int:
    """Input steps visible to one output of the stacked causal convolutions.

    Two convolutions per level, dilation ``B**(l-1)`` at level ``l``:
    ``2 (B^N - 1)(K - 1) / (B - 1) + 1``, and ``2 N (K - 1) + 1`` when B = 1.
    """
    if n_blocks < 1 or kernel_size < 1 or dilation_base < 1:
        raise ValueError("receptive_field needs N, K, B >= 1")
    if dilation_base == 1:
        return 2 * n_blocks * (kernel_size - 1) + 1
    return 2 * (dilation_base ** n_blocks - 1) * (kernel_size - 1) // (dilation_base - 1) + 1


# ------------------------------------------------------------ parameters

def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: MaTcnConfig, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    d, dk, n = cfg.d, cfg.d_k, cfg.n_heads
    hd = n * dk
    shapes: dict[str, np.ndarray] = {}

    def add(name, arr):
        shapes[prefix + name] = arr

    add("emb.lat", rng.normal(0.0, 0.02, (cfg.lat_vocab, cfg.emb_lat)))
    add("emb.lon", rng.normal(0.0, 0.02, (cfg.lon_vocab, cfg.emb_lon)))
    add("emb.interval", rng.normal(0.0, 0.02, (cfg.n_intervals, cfg.emb_interval)))
    add("emb.vel_w", xavier_uniform(rng, (cfg.emb_velocity,), 1, cfg.emb_velocity))
    add("emb.vel_b", np.zeros(cfg.emb_velocity))
    add("stem.w", xavier_uniform(rng, (d, cfg.embed_width), cfg.embed_width, d))
    add("stem.b", np.zeros(d))
    r = cfg.ca_hidden
    add("ca.w1", xavier_uniform(rng, (d, r), d, r))
    add("ca.b1", np.zeros(r))
    add("ca.w2", xavier_uniform(rng, (r, d), r, d))
    add("ca.b2", np.zeros(d))
    for level in range(1, cfg.n_blocks + 1):
        blk = f"block{level}."
        if not cfg.disable_mhsa:
            for w in ("wq", "wk", "wv"):
                add(blk + "mhsa." + w, xavier_uniform(rng, (d, hd), d, hd))
            add(blk + "mhsa.wo", xavier_uniform(rng, (hd, d), hd, d))
        for sub in (1, 2):
            cv = f"{blk}conv{sub}."
            add(cv + "dw", xavier_uniform(rng, (d, cfg.kernel_size), cfg.kernel_size, cfg.kernel_size))
            add(cv + "pw1_w", xavier_uniform(rng, (2 * d, d), d, 2 * d))
            add(cv + "pw1_b", np.zeros(2 * d))
            add(cv + "pw2_w", xavier_uniform(rng, (d, 2 * d), 2 * d, d))
            add(cv + "pw2_b", np.zeros(d))
            if not cfg.disable_aggregation:
                add(f"{blk}agg{sub}.w", xavier_uniform(rng, (d, d), d, d))
    if not cfg.disable_aggregation:
        add("target.v", xavier_uniform(rng, (d, d), d, d))
        add("target.b", np.zeros(d))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in shapes.items()}


# ---------------------------------------------------------------- layers

def embed_inputs(p: dict[str, Tensor], cfg: MaTcnConfig, batch: GridBatch, prefix: str = "") -> Tensor:
    """Grid cells to a (B, d, L) feature map: table lookups + velocity projection, then 1x1 conv."""
    lat = T.gather_rows(p[prefix + "emb.lat"], batch.g_lat)
    lon = T.gather_rows(p[prefix + "emb.lon"], batch.g_lon)
    slot = T.gather_rows(p[prefix + "emb.interval"], batch.interval - 1)
    speed = Tensor((batch.velocity / cfg.velocity_scale)[..., None])
    vel = speed * p[prefix + "emb.vel_w"] + p[prefix + "emb.vel_b"]
    x = T.swapaxes(T.concat([lat, lon, slot, vel], axis=2), 1, 2)
    return T.pointwise_conv(x, p[prefix + "stem.w"], p[prefix + "stem.b"])


def channel_attention(x: Tensor, mask: np.ndarray, w1: Tensor, b1: Tensor, w2: Tensor,
                      b2: Tensor) -> tuple[Tensor, Tensor]:
    """Squeeze-and-excitation over channels; the squeeze is a masked time mean.

    Returns the rescaled map and the (B, d) gate.
    """
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("channel_attention: a sequence has no unmasked steps")
    squeeze = T.sum(x * Tensor(mask[:, None, :].astype(np.float64)), axis=2) * Tensor(1.0 / counts[:, None])
    gate = T.sigmoid(T.relu(squeeze @ w1 + b1) @ w2 + b2)
    return x * T.reshape(gate, gate.shape + (1,)), gate


def mhsa_layer(inp: Tensor, mask: np.ndarray, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
               n_heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product self-attention with a residual connection.

    ``inp`` is (B, L, d).  Padded keys are masked out; padded query rows are
    computed but never read downstream.  Returns the output and the
    (B, heads, L, L) attention weights.
    """
    b, length, _ = inp.shape
    dk = wq.shape[1] // n_heads
    if not np.all(mask.any(axis=1)):
        raise ValueError("mhsa_layer: a sequence has no unmasked steps")

    def heads(w):
        return T.swapaxes(T.reshape(inp @ w, (b, length, n_heads, dk)), 1, 2)

    q, k, v = heads(wq), heads(wk), heads(wv)
    logits = (q @ T.swapaxes(k, 2, 3)) * (1.0 / math.sqrt(dk))
    attn = T.masked_softmax(logits, mask[:, None, None, :])
    merged = T.reshape(T.swapaxes(attn @ v, 1, 2), (b, length, n_heads * dk))
    return merged @ wo + inp, attn


def conv_residual_block(x: Tensor, dilation: int, dw: Tensor, pw1_w: Tensor, pw1_b: Tensor,
                        pw2_w: Tensor, pw2_b: Tensor) -> Tensor:
    h = T.gelu(T.depthwise_causal_conv1d(x, dw, dilation))
    h = T.gelu(T.pointwise_conv(h, pw1_w, pw1_b))
    return x + T.pointwise_conv(h, pw2_w, pw2_b)


def _conv(p, prefix, x, dilation):
    return conv_residual_block(x, dilation, p[prefix + "dw"], p[prefix + "pw1_w"], p[prefix + "pw1_b"],
                               p[prefix + "pw2_w"], p[prefix + "pw2_b"])


def double_block(p: dict[str, Tensor], cfg: MaTcnConfig, x: Tensor, mask: np.ndarray, level: int,
                 prefix: str = "", trace: dict | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Self-attention then two conv residual sub-blocks at dilation B**(level-1).

    Returns (output, first sub-block sequence, second sub-block sequence);
    the output is the second sequence.
    """
    if not 1 <= level <= cfg.n_blocks:
        raise ValueError(f"level must lie in [1, {cfg.n_blocks}], got {level}")
    blk = f"{prefix}block{level}."
    if not cfg.disable_mhsa:
        seq, attn = mhsa_layer(T.swapaxes(x, 1, 2), mask, p[blk + "mhsa.wq"], p[blk + "mhsa.wk"],
                               p[blk + "mhsa.wv"], p[blk + "mhsa.wo"], cfg.n_heads)
        x = T.swapaxes(seq, 1, 2)
        if trace is not None:
            trace.setdefault("attention", []).append(attn)
    dil = cfg.dilation(level)
    h1 = _conv(p, blk + "conv1.", x, dil)
    h2 = _conv(p, blk + "conv2.", h1, dil)
    return h2, h1, h2


def time_aggregate(h: Tensor, mask: np.ndarray, lengths: np.ndarray, w: Tensor) -> tuple[Tensor, Tensor]:
    """Attention over the real time steps of h (B, d, L) keyed on the last real step.

    Returns the pooled (B, d) vector and the (B, L) weights.
    """
    if np.any(lengths < 1):
        raise ValueError("time_aggregate: a sequence has no unmasked steps")
    last = T.select_step(h, lengths - 1)
    target = T.reshape(w @ T.reshape(last, last.shape + (1,)), last.shape + (1,))
    logits = T.sum(h * target, axis=1)
    lam = T.masked_softmax(logits, mask)
    pooled = T.sum(h * T.reshape(lam, (lam.shape[0], 1, lam.shape[1])), axis=2)
    return pooled, lam


def target_attention(pooled: list[Tensor], d_emb: Tensor, v: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Weight the 2N pooled vectors by their affinity to the profile embedding.

    Weights come from tanh(V h + b) but the sum runs over the untransformed
    vectors.  Returns Tr (B, d) and the (B, 2N) weights.
    """
    if d_emb.shape[-1] != v.shape[0]:
        raise T.ShapeError(f"profile embedding width {d_emb.shape[-1]} does not match V {v.shape}")
    hs = T.stack(pooled, axis=1)
    transformed = T.tanh(hs @ T.swapaxes(v, 0, 1) + b)
    bsz, dim = d_emb.shape
    scores = T.sum(transformed * T.reshape(d_emb, (bsz, 1, dim)), axis=2)
    beta = T.masked_softmax(scores)
    return T.sum(hs * T.reshape(beta, beta.shape + (1,)), axis=1), beta


def forward_trip(p: dict[str, Tensor], cfg: MaTcnConfig, batch: GridBatch, d_emb: Tensor | None,
                 prefix: str = "", trace: dict | None = None) -> Tensor:
    """Encode a padded batch into trip representations of shape (B, d)."""
    mask = batch.mask
    x = embed_inputs(p, cfg, batch, prefix)
    x, gate = channel_attention(x, mask, p[prefix + "ca.w1"], p[prefix + "ca.b1"],
                                p[prefix + "ca.w2"], p[prefix + "ca.b2"])
    pooled = []
    lambdas = []
    for level in range(1, cfg.n_blocks + 1):
        x, h1, h2 = double_block(p, cfg, x, mask, level, prefix, trace)
        if not cfg.disable_aggregation:
            for sub, h in ((1, h1), (2, h2)):
                vec, lam = time_aggregate(h, mask, batch.lengths, p[f"{prefix}block{level}.agg{sub}.w"])
                pooled.append(vec)
                lambdas.append(lam)
    if cfg.disable_aggregation:
        trip = T.select_step(x, batch.lengths - 1)
        beta = None
    else:
        trip, beta = target_attention(pooled, d_emb, p[prefix + "target.v"], p[prefix + "target.b"])
    if trace is not None:
        trace["gate"] = gate
        trace["lambda"] = lambdas
        trace["beta"] = beta
    return trip


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return int(sum(t.size for k, t in params.items() if k.startswith(prefix)))
