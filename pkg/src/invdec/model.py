"""Patch-encoder forecaster with an inverted variate-attention decoder.

A lookback window (L, C) is cut into per-variable patches, embedded, and run
through a temporal transformer encoder that treats each variable
independently (optionally one joint token sequence over all variables).
Patch tokens are mean-pooled into one vector per variable; adding a learned
per-variable embedding to the pooled vectors gives the decoder its tokens.
The decoder applies attention across variables (tokens = variables, so its
cost grows with C^2 while the encoder's grows with C), projects, broadcasts
its per-variable output back along the patch axis, and injects it into the
encoder output through a scalar fusion weight:

    fused = encoded + fusion_weight * broadcast(decoded)

A flattening head maps each variable's fused patch features to the horizon.
With fusion_weight fixed at 0, the decoder is skipped outright and the model
is exactly the patch backbone, bit for bit, including rng stream positions.

Every operation here accepts extra leading batch axes; shapes are written
unbatched for clarity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .rng import RngPool
from .tensor import (
    GradTape,
    Parameter,
    Tensor,
    add,
    dropout,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    mul,
    repeat_axis,
    reshape,
    sigmoid,
    softmax_rows,
    sub,
    swapaxes,
)

log = logging.getLogger(__name__)

INIT_STD = 0.02


class ConfigError(ValueError):
    """Inconsistent model configuration."""


def default_fusion_weight(n_vars: int) -> float:
    """0.3 for small variable counts, 1.0 for large ones.

    Between 21 and 100 variables no setting is pinned down; 1.0 is used and
    logged so the choice is visible.
    """
    if n_vars <= 21:
        return 0.3
    if n_vars >= 100:
        return 1.0
    log.info(
        "fusion weight for %d variables is unspecified in the 21..100 range; using 1.0",
        n_vars,
    )
    return 1.0


@dataclass
class ModelConfig:
    n_vars: int
    lookback: int = 96
    horizon: int = 96
    patch_len: int = 16
    stride: int = 16
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int | None = None  # defaults to 4 * d_model
    dropout: float = 0.1
    fusion_weight: float | str = "auto"  # float in [0, 1], "learnable", or "auto"
    joint_encoder: bool = False  # one joint (C*P)-token sequence instead of per-variable
    eps: float = 1e-5

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        for name in ("n_vars", "lookback", "horizon", "patch_len", "stride", "d_model",
                     "n_heads", "enc_layers", "dec_layers", "ffn_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.patch_len > self.lookback:
            raise ConfigError(
                f"patch_len {self.patch_len} exceeds lookback {self.lookback}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        fw = self.fusion_weight
        if isinstance(fw, str):
            if fw not in ("auto", "learnable"):
                raise ConfigError(f"fusion_weight string must be auto|learnable, got {fw!r}")
        elif not 0.0 <= float(fw) <= 1.0:
            raise ConfigError(f"fusion_weight must lie in [0, 1], got {fw}")

    @property
    def n_patches(self) -> int:
        return (self.lookback - self.patch_len) // self.stride + 1

    def resolved_fusion(self) -> float | str:
        """The fusion weight actually used: a float, or "learnable"."""
        if self.fusion_weight == "auto":
            return default_fusion_weight(self.n_vars)
        if self.fusion_weight == "learnable":
            return "learnable"
        return float(self.fusion_weight)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class PatchEmbedder:
    weight: Parameter  # (D, S)
    bias: Parameter  # (D,)
    positional: Parameter  # (P, D)


@dataclass
class AttentionBlock:
    w_q: Parameter  # (D, D)
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    ffn_w1: Parameter  # (D, F)
    ffn_b1: Parameter  # (F,)
    ffn_w2: Parameter  # (F, D)
    ffn_b2: Parameter  # (D,)
    ln1_gain: Parameter  # (D,)
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class ModelParams:
    patch: PatchEmbedder
    encoder: list[AttentionBlock]
    variate_embedding: Parameter  # (C, D)
    decoder: list[AttentionBlock]
    w_proj: Parameter  # (D, D)
    fusion_raw: Parameter | None  # (1,), present only when fusion is learnable
    head_weight: Parameter  # (P*D, H)
    head_bias: Parameter  # (H,)

    def parameters(self) -> list[Parameter]:
        out = [self.patch.weight, self.patch.bias, self.patch.positional]
        for blk in self.encoder:
            out.extend(blk.parameters())
        out.append(self.variate_embedding)
        for blk in self.decoder:
            out.extend(blk.parameters())
        out.append(self.w_proj)
        if self.fusion_raw is not None:
            out.append(self.fusion_raw)
        out.extend([self.head_weight, self.head_bias])
        return out

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = snap[p.name]


def parameter_groups(params: ModelParams) -> dict[str, list[Parameter]]:
    """Parameters keyed by architectural group (patch, encoder.0, ...)."""
    groups: dict[str, list[Parameter]] = {}
    for p in params.parameters():
        parts = p.name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("encoder", "decoder") else parts[0]
        groups.setdefault(key, []).append(p)
    return groups


def _init_block(cfg: ModelConfig, rng: np.random.Generator, prefix: str) -> AttentionBlock:
    D, F = cfg.d_model, cfg.ffn_dim
    w = lambda shape, name: Parameter(rng.normal(0.0, INIT_STD, size=shape), f"{prefix}.{name}")
    zeros = lambda shape, name: Parameter(np.zeros(shape), f"{prefix}.{name}")
    ones = lambda shape, name: Parameter(np.ones(shape), f"{prefix}.{name}")
    return AttentionBlock(
        w_q=w((D, D), "W_Q"),
        w_k=w((D, D), "W_K"),
        w_v=w((D, D), "W_V"),
        w_o=w((D, D), "W_O"),
        ffn_w1=w((D, F), "ffn_W1"),
        ffn_b1=zeros((F,), "ffn_b1"),
        ffn_w2=w((F, D), "ffn_W2"),
        ffn_b2=zeros((D,), "ffn_b2"),
        ln1_gain=ones((D,), "ln1_gain"),
        ln1_bias=zeros((D,), "ln1_bias"),
        ln2_gain=ones((D,), "ln2_gain"),
        ln2_bias=zeros((D,), "ln2_bias"),
    )


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Draw all weights from one named "init" stream in a fixed order.

    Projection weights and embeddings are N(0, 0.02^2); biases start at 0,
    layer-norm gains at 1. A learnable fusion weight starts at raw 0, i.e.
    sigmoid(0) = 0.5.
    """
    from .rng import stream

    rng = stream(seed, "init")
    D, S, P = cfg.d_model, cfg.patch_len, cfg.n_patches
    patch = PatchEmbedder(
        weight=Parameter(rng.normal(0.0, INIT_STD, size=(D, S)), "patch.W_p"),
        bias=Parameter(np.zeros(D), "patch.b_p"),
        positional=Parameter(rng.normal(0.0, INIT_STD, size=(P, D)), "patch.pos"),
    )
    encoder = [_init_block(cfg, rng, f"encoder.{i}") for i in range(cfg.enc_layers)]
    e_var = Parameter(rng.normal(0.0, INIT_STD, size=(cfg.n_vars, D)), "E_var")
    decoder = [_init_block(cfg, rng, f"decoder.{i}") for i in range(cfg.dec_layers)]
    w_proj = Parameter(rng.normal(0.0, INIT_STD, size=(D, D)), "W_proj")
    fusion_raw = (
        Parameter(np.zeros(1), "fusion.raw") if cfg.resolved_fusion() == "learnable" else None
    )
    head_weight = Parameter(
        rng.normal(0.0, INIT_STD, size=(P * D, cfg.horizon)), "head.W_head"
    )
    head_bias = Parameter(np.zeros(cfg.horizon), "head.b_head")
    return ModelParams(
        patch=patch,
        encoder=encoder,
        variate_embedding=e_var,
        decoder=decoder,
        w_proj=w_proj,
        fusion_raw=fusion_raw,
        head_weight=head_weight,
        head_bias=head_bias,
    )


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass, for diagnostics and tests.

    On the fusion_weight == 0 fast path the decoder never runs, so pooled,
    variate_tokens, decoded, and broadcast stay None and fused is the
    encoder output itself.
    """

    embedded: Tensor | None = None  # (C, P, D)
    encoded: Tensor | None = None  # (C, P, D)
    pooled: Tensor | None = None  # (C, D)
    variate_tokens: Tensor | None = None  # (C, D)
    decoded: Tensor | None = None  # (C, D)
    broadcast: Tensor | None = None  # (C, P, D)
    fused: Tensor | None = None  # (C, P, D)
    enc_attn: list[Tensor] = field(default_factory=list)  # per layer (C, heads, P, P)
    dec_attn: list[Tensor] = field(default_factory=list)  # per layer (heads, C, C)

    def attention_maps(self) -> list[Tensor]:
        return list(self.enc_attn) + list(self.dec_attn)


def patchify(x, cfg: ModelConfig) -> Tensor:
    """(L, C) -> (C, P, S) non-overlapping or strided patches per variable.

    Trailing steps that do not fill a final patch are dropped. The input is
    observed data, never a function of the parameters, so this op does not
    participate in differentiation.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.tracked:
        raise ValueError("patchify input must be raw data, not a tracked tensor")
    if x.ndim < 2:
        raise ConfigError(f"patchify needs (L, C) input, got shape {x.shape}")
    L = x.shape[-2]
    if cfg.patch_len > L:
        raise ConfigError(f"patch_len {cfg.patch_len} exceeds series length {L}")
    P = (L - cfg.patch_len) // cfg.stride + 1
    idx = np.arange(P)[:, None] * cfg.stride + np.arange(cfg.patch_len)[None, :]
    gathered = x.data[..., idx, :]  # (..., P, S, C)
    return Tensor(np.ascontiguousarray(np.moveaxis(gathered, -1, -3)))


def embed_patches(patches: Tensor, patch_params: PatchEmbedder) -> Tensor:
    """(C, P, S) -> (C, P, D): linear patch embedding plus a learned
    additive positional table indexed by patch position."""
    w_t = swapaxes(patch_params.weight, -1, -2)  # (S, D)
    e = add(matmul(patches, w_t), patch_params.bias)
    return add(e, patch_params.positional)


def _attention_block(
    tokens: Tensor,
    blk: AttentionBlock,
    cfg: ModelConfig,
    training: bool,
    rng: np.random.Generator | None,
    attn_maps: list[Tensor] | None,
) -> Tensor:
    """Post-norm block: attention sublayer then feed-forward sublayer, with
    dropout at both residual injection points. tokens: (..., T, D)."""
    D, nh = cfg.d_model, cfg.n_heads
    dk = D // nh
    lead = tokens.shape[:-1]

    def split_heads(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, lead + (nh, dk)), -3, -2)  # (..., nh, T, dk)

    qh = split_heads(matmul(tokens, blk.w_q))
    kh = split_heads(matmul(tokens, blk.w_k))
    vh = split_heads(matmul(tokens, blk.w_v))
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dk))
    attn = softmax_rows(scores)  # (..., nh, T, T)
    if attn_maps is not None:
        attn_maps.append(attn)
    ctx = reshape(swapaxes(matmul(attn, vh), -3, -2), lead + (D,))
    a_out = dropout(matmul(ctx, blk.w_o), cfg.dropout, training, rng)
    z = layer_norm(add(tokens, a_out), blk.ln1_gain, blk.ln1_bias, cfg.eps)

    h = gelu(add(matmul(z, blk.ffn_w1), blk.ffn_b1))
    h = add(matmul(h, blk.ffn_w2), blk.ffn_b2)
    h = dropout(h, cfg.dropout, training, rng)
    return layer_norm(add(z, h), blk.ln2_gain, blk.ln2_bias, cfg.eps)


def encode_temporal(
    embedded: Tensor,
    blocks: list[AttentionBlock],
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_maps: list[Tensor] | None = None,
) -> Tensor:
    """(C, P, D) -> (C, P, D) temporal attention over patch tokens.

    Default: each variable is its own sequence (attention never crosses
    variables). joint_encoder=True flattens to a single (C*P)-token sequence
    instead.
    """
    z = embedded
    if cfg.joint_encoder:
        lead = embedded.shape[:-3]
        c, p, d = embedded.shape[-3:]
        z = reshape(z, lead + (c * p, d))
        for blk in blocks:
            z = _attention_block(z, blk, cfg, training, rng, attn_maps)
        return reshape(z, lead + (c, p, d))
    for blk in blocks:
        z = _attention_block(z, blk, cfg, training, rng, attn_maps)
    return z


def pool_variates(encoded: Tensor) -> Tensor:
    """(C, P, D) -> (C, D) mean over the patch axis."""
    return mean_axis(encoded, -2)


def decode_variates(
    pooled: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_maps: list[Tensor] | None = None,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """(C, D) -> (C, D): add per-variable embeddings, attend across the C
    variate tokens, then project."""
    tokens = add(pooled, params.variate_embedding)
    if trace is not None:
        trace.variate_tokens = tokens
    z = tokens
    for blk in params.decoder:
        z = _attention_block(z, blk, cfg, training, rng, attn_maps)
    return matmul(z, params.w_proj)


def broadcast_fuse(encoded: Tensor, decoded: Tensor, fusion, n_patches: int,
                   trace: ForwardTrace | None = None) -> Tensor:
    """fused = encoded + fusion * repeat(decoded along the patch axis).

    fusion is a plain float or a (1,) tensor (the squashed learnable
    weight)."""
    tiled = repeat_axis(decoded, -2, n_patches)  # (..., C, P, D)
    if trace is not None:
        trace.broadcast = tiled
    scaled = mul(tiled, fusion if isinstance(fusion, Tensor) else float(fusion))
    return add(encoded, scaled)


def predict(fused: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(C, P, D) -> (H, C): flatten each variable's patches (patch-major:
    patch index outer, feature inner) through the linear head, then put the
    horizon axis first."""
    lead = fused.shape[:-2]
    flat = reshape(fused, lead + (cfg.n_patches * cfg.d_model,))
    y = add(matmul(flat, params.head_weight), params.head_bias)  # (..., C, H)
    return swapaxes(y, -1, -2)


def forward(
    x,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rngs: RngPool | None = None,
    want_trace: bool = True,
) -> tuple[Tensor, ForwardTrace | None]:
    """Full model: (L, C) -> ((H, C), trace). Extra leading batch axes pass
    straight through: (B, L, C) -> (B, H, C).

    With a fixed fusion weight of exactly 0 the decoder is skipped entirely;
    no decoder parameters are touched and no decoder rng draws happen.
    """
    if training and cfg.dropout > 0.0 and rngs is None:
        raise ValueError("training-mode forward with dropout needs an RngPool")
    enc_rng = rngs.get("dropout/encoder") if rngs is not None else None
    trace = ForwardTrace() if want_trace else None

    patches = patchify(x, cfg)
    e = embed_patches(patches, params.patch)
    z_enc = encode_temporal(
        e, params.encoder, cfg, training, enc_rng,
        trace.enc_attn if trace is not None else None,
    )
    if trace is not None:
        trace.embedded = e
        trace.encoded = z_enc

    fusion = cfg.resolved_fusion()
    if fusion == "learnable":
        fusion = sigmoid(params.fusion_raw)
    if isinstance(fusion, float) and fusion == 0.0:
        fused = z_enc
    else:
        dec_rng = rngs.get("dropout/decoder") if rngs is not None else None
        pooled = pool_variates(z_enc)
        decoded = decode_variates(
            pooled, params, cfg, training, dec_rng,
            trace.dec_attn if trace is not None else None, trace,
        )
        fused = broadcast_fuse(z_enc, decoded, fusion, cfg.n_patches, trace)
        if trace is not None:
            trace.pooled = pooled
            trace.decoded = decoded
    if trace is not None:
        trace.fused = fused
    return predict(fused, params, cfg), trace


def backbone_forward(
    x,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rngs: RngPool | None = None,
) -> Tensor:
    """The decoder-free patch backbone: patchify, embed, encode, flatten,
    head. Composed independently of forward() so the two can be compared."""
    if training and cfg.dropout > 0.0 and rngs is None:
        raise ValueError("training-mode forward with dropout needs an RngPool")
    enc_rng = rngs.get("dropout/encoder") if rngs is not None else None
    patches = patchify(x, cfg)
    e = embed_patches(patches, params.patch)
    z_enc = encode_temporal(e, params.encoder, cfg, training, enc_rng, None)
    return predict(z_enc, params, cfg)
