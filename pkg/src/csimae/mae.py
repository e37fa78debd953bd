"""Masked-autoencoder ViT: patch tokenization, random masking, asymmetric
encoder/decoder, masked-patch reconstruction loss.

The encoder embeds only visible patches (plus a CLS token) and runs
pre-norm transformer blocks:

    z' = MHSA(LN(z)) + z
    z  = FFN(LN(z')) + z'

followed by a final LayerNorm.  The decoder projects the latent to its
own width, fills masked positions with one shared learnable mask token,
adds its own positional table, runs a shallower stack, and predicts raw
patch values through a linear head.  The loss is the mean over masked
patches of the squared L2 patch error; visible positions contribute
exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensors as T


VARIANTS = {
    "tiny": (6, 192, 3),
    "small": (8, 384, 6),
    "base": (12, 768, 12),
    "large": (24, 1024, 16),
}


class ModelError(ValueError):
    """Invalid model configuration or mask plan."""


@dataclass
class ModelConfig:
    variant: str = "small"
    enc_layers: int = 0  # 0 -> fill from variant
    enc_dim: int = 0
    enc_heads: int = 0
    dec_layers: int = 4
    dec_dim: int = 512
    dec_heads: int = 8
    patch_time: int = 30
    patch_freq: int = 3
    mask_ratio: float = 0.8
    ffn_expansion: int = 4
    input_time: int = 600
    input_chan: int = 90

    def __post_init__(self):
        if self.variant in VARIANTS:
            layers, dim, heads = VARIANTS[self.variant]
            self.enc_layers = self.enc_layers or layers
            self.enc_dim = self.enc_dim or dim
            self.enc_heads = self.enc_heads or heads
        elif self.variant != "custom":
            raise ModelError(f"unknown variant {self.variant!r}")
        if not (self.enc_layers and self.enc_dim and self.enc_heads):
            raise ModelError("custom variant needs enc_layers/enc_dim/enc_heads")
        if self.enc_dim % self.enc_heads:
            raise ModelError(f"enc_dim {self.enc_dim} not divisible by {self.enc_heads} heads")
        if self.dec_dim % self.dec_heads:
            raise ModelError(f"dec_dim {self.dec_dim} not divisible by {self.dec_heads} heads")
        if self.input_time % self.patch_time or self.input_chan % self.patch_freq:
            raise ModelError(
                f"input {self.input_time}x{self.input_chan} not divisible by patch "
                f"({self.patch_time},{self.patch_freq})"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ModelError("mask_ratio must be in (0, 1)")

    @property
    def n_patches(self) -> int:
        return (self.input_time // self.patch_time) * (self.input_chan // self.patch_freq)

    @property
    def patch_len(self) -> int:
        return self.patch_time * self.patch_freq

    @property
    def n_masked(self) -> int:
        return int(math.floor(self.mask_ratio * self.n_patches))

    @property
    def n_visible(self) -> int:
        return self.n_patches - self.n_masked

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class MaskPlan:
    """Per-clip partition of patch indices into visible and masked sets."""

    n_patches: int
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    seed: int

    def validate(self):
        v, m = set(self.visible_idx.tolist()), set(self.masked_idx.tolist())
        if v & m or v | m != set(range(self.n_patches)):
            raise ModelError("mask plan is not a partition of patch indices")
        return self


def sample_mask(n_patches: int, ratio: float, seed) -> MaskPlan:
    """Uniform sample without replacement of floor(ratio * n_patches) patches."""
    n_masked = int(math.floor(ratio * n_patches))
    if n_masked <= 0 or n_masked >= n_patches:
        raise ModelError(f"degenerate mask: {n_masked} of {n_patches} patches masked")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_patches)
    return MaskPlan(
        n_patches=n_patches,
        visible_idx=np.sort(perm[n_masked:]),
        masked_idx=np.sort(perm[:n_masked]),
        seed=seed if isinstance(seed, int) else 0,
    )


def full_plan(n_patches: int) -> MaskPlan:
    """No-mask plan used at inference (every patch visible)."""
    return MaskPlan(
        n_patches=n_patches,
        visible_idx=np.arange(n_patches),
        masked_idx=np.empty(0, dtype=int),
        seed=0,
    )


def patchify(clip: np.ndarray, patch_time: int, patch_freq: int) -> np.ndarray:
    """(…, T, C) -> (…, N_p, patch_time*patch_freq), time-major patch order."""
    *lead, t_len, c_len = clip.shape
    if t_len % patch_time or c_len % patch_freq:
        raise ModelError(f"clip {clip.shape} not divisible by patch ({patch_time},{patch_freq})")
    nt, nc = t_len // patch_time, c_len // patch_freq
    x = clip.reshape(*lead, nt, patch_time, nc, patch_freq)
    x = np.moveaxis(x, -3, -2)  # (…, nt, nc, patch_time, patch_freq)
    return x.reshape(*lead, nt * nc, patch_time * patch_freq)


def unpatchify(tokens: np.ndarray, patch_time: int, patch_freq: int, t_len: int, c_len: int) -> np.ndarray:
    """Exact inverse of patchify."""
    *lead, n_p, _ = tokens.shape
    nt, nc = t_len // patch_time, c_len // patch_freq
    x = tokens.reshape(*lead, nt, nc, patch_time, patch_freq)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, t_len, c_len)


# ---------------------------------------------------------------------
# parameters


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until everything lies within 2 std."""
    x = rng.standard_normal(shape) * std
    while True:
        bad = np.abs(x) > 2 * std
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum())) * std


def _init_linear(params, name, fan_in, fan_out, rng, dtype):
    limit = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = T.Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype), requires_grad=True)
    params[f"{name}.b"] = T.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def _init_block(params, prefix, dim, ffn_expansion, rng, dtype):
    for ln in ("ln1", "ln2"):
        params[f"{prefix}.{ln}.g"] = T.Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        params[f"{prefix}.{ln}.b"] = T.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    _init_linear(params, f"{prefix}.attn.qkv", dim, 3 * dim, rng, dtype)
    _init_linear(params, f"{prefix}.attn.proj", dim, dim, rng, dtype)
    _init_linear(params, f"{prefix}.ffn.fc1", dim, ffn_expansion * dim, rng, dtype)
    _init_linear(params, f"{prefix}.ffn.fc2", ffn_expansion * dim, dim, rng, dtype)


def init_params(cfg: ModelConfig, seed=0, dtype=np.float32) -> dict:
    """Named parameter tensors; names are the stable checkpoint keys."""
    rng = np.random.default_rng(seed)
    p = {}
    _init_linear(p, "enc.embed", cfg.patch_len, cfg.enc_dim, rng, dtype)
    p["enc.pos"] = T.Tensor(trunc_normal(rng, (cfg.n_patches, cfg.enc_dim)).astype(dtype), requires_grad=True)
    p["enc.cls"] = T.Tensor(trunc_normal(rng, (1, 1, cfg.enc_dim)).astype(dtype), requires_grad=True)
    for i in range(cfg.enc_layers):
        _init_block(p, f"enc.blocks.{i}", cfg.enc_dim, cfg.ffn_expansion, rng, dtype)
    p["enc.norm.g"] = T.Tensor(np.ones(cfg.enc_dim, dtype=dtype), requires_grad=True)
    p["enc.norm.b"] = T.Tensor(np.zeros(cfg.enc_dim, dtype=dtype), requires_grad=True)
    _init_linear(p, "dec.proj", cfg.enc_dim, cfg.dec_dim, rng, dtype)
    p["dec.mask_token"] = T.Tensor(trunc_normal(rng, (1, 1, cfg.dec_dim)).astype(dtype), requires_grad=True)
    p["dec.pos"] = T.Tensor(trunc_normal(rng, (cfg.n_patches, cfg.dec_dim)).astype(dtype), requires_grad=True)
    for i in range(cfg.dec_layers):
        _init_block(p, f"dec.blocks.{i}", cfg.dec_dim, cfg.ffn_expansion, rng, dtype)
    _init_linear(p, "dec.head", cfg.dec_dim, cfg.patch_len, rng, dtype)
    return p


def count_parameters(params: dict, prefix: str = "") -> int:
    return sum(t.data.size for name, t in params.items() if name.startswith(prefix))


# ---------------------------------------------------------------------
# forward graph


def _attention(x: T.Tensor, params: dict, prefix: str, n_heads: int) -> T.Tensor:
    b, t, dim = x.shape
    hd = dim // n_heads
    qkv = T.linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    heads = []
    for part in range(3):
        h = qkv[:, :, part * dim : (part + 1) * dim]
        h = T.reshape(h, (b, t, n_heads, hd))
        heads.append(T.transpose(h, (0, 2, 1, 3)))  # (B, H, T, hd)
    q, k, v = heads
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(hd))
    att = T.softmax(scores, axis=-1)
    out = T.matmul(att, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, dim))
    return T.linear(out, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])


def _block(x: T.Tensor, params: dict, prefix: str, n_heads: int) -> T.Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = T.add(_attention(h, params, f"{prefix}.attn", n_heads), x)
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.linear(h, params[f"{prefix}.ffn.fc1.w"], params[f"{prefix}.ffn.fc1.b"])
    h = T.gelu(h)
    h = T.linear(h, params[f"{prefix}.ffn.fc2.w"], params[f"{prefix}.ffn.fc2.b"])
    return T.add(h, x)


def _batch_indices(plans, attr) -> np.ndarray:
    idx = np.stack([getattr(p, attr) for p in plans])
    return idx.astype(np.intp)


class MaskedAutoencoder:
    """Config + named parameters + the forward graphs built on them."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed=seed, dtype=dtype)

    def encode(self, visible_tokens: T.Tensor, visible_idx: np.ndarray, params: dict | None = None) -> T.Tensor:
        """Embed visible tokens, add positions, prepend CLS, run the blocks.

        ``visible_tokens`` is (B, V, patch_len); ``visible_idx`` (B, V)
        holds each token's original patch position.  Output is
        (B, 1+V, enc_dim) after the final LayerNorm.
        """
        p = params if params is not None else self.params
        cfg = self.cfg
        b, v, _ = visible_tokens.shape
        x = T.linear(visible_tokens, p["enc.embed.w"], p["enc.embed.b"])
        x = T.add(x, T.gather_rows(p["enc.pos"], visible_idx))
        zeros = T.Tensor(np.zeros((b, 1, cfg.enc_dim), dtype=x.data.dtype))
        cls = T.add(zeros, p["enc.cls"])
        x = T.concat([cls, x], axis=1)
        for i in range(cfg.enc_layers):
            x = _block(x, p, f"enc.blocks.{i}", cfg.enc_heads)
        return T.layer_norm(x, p["enc.norm.g"], p["enc.norm.b"])

    def _decoder_tokens(self, latent: T.Tensor, plans, params: dict | None = None) -> T.Tensor:
        """Pre-block decoder input: projected latent, mask tokens, positions."""
        p = params if params is not None else self.params
        b = latent.shape[0]
        n_masked = len(plans[0].masked_idx)
        d = T.linear(latent, p["dec.proj.w"], p["dec.proj.b"])
        cls, vis = d[:, :1, :], d[:, 1:, :]
        if n_masked:
            zeros = T.Tensor(np.zeros((b, n_masked, self.cfg.dec_dim), dtype=latent.data.dtype))
            masked = T.add(zeros, p["dec.mask_token"])
            order = np.concatenate([_batch_indices(plans, "visible_idx"), _batch_indices(plans, "masked_idx")], axis=1)
            inv = np.argsort(order, axis=1)
            tokens = T.gather_tokens(T.concat([vis, masked], axis=1), inv)
        else:
            tokens = vis
        tokens = T.add(tokens, p["dec.pos"])
        return T.concat([cls, tokens], axis=1)

    def decode(self, latent: T.Tensor, plans, params: dict | None = None) -> T.Tensor:
        """Latent (B, 1+V, D) -> reconstructed patches (B, N_p, patch_len)."""
        p = params if params is not None else self.params
        x = self._decoder_tokens(latent, plans, p)
        for i in range(self.cfg.dec_layers):
            x = _block(x, p, f"dec.blocks.{i}", self.cfg.dec_heads)
        recon = T.linear(x, p["dec.head.w"], p["dec.head.b"])
        return recon[:, 1:, :]

    def forward_loss(self, clips: np.ndarray, plans, params: dict | None = None) -> tuple:
        """Clips (B, T, C) + per-clip plans -> (masked-patch loss, reconstruction)."""
        cfg = self.cfg
        patches = patchify(clips, cfg.patch_time, cfg.patch_freq)
        vis_idx = _batch_indices(plans, "visible_idx")
        b = np.arange(patches.shape[0])[:, None]
        visible = T.Tensor(patches[b, vis_idx])
        latent = self.encode(visible, vis_idx, params)
        recon = self.decode(latent, plans, params)
        return mae_loss(recon, patches, plans), recon

    def encode_features(self, clips: np.ndarray, params: dict | None = None) -> T.Tensor:
        """Full (unmasked) token sequence through the encoder; CLS row out."""
        cfg = self.cfg
        patches = patchify(clips, cfg.patch_time, cfg.patch_freq)
        n = patches.shape[0]
        vis_idx = np.tile(np.arange(cfg.n_patches), (n, 1))
        latent = self.encode(T.Tensor(patches), vis_idx, params)
        return latent[:, 0, :]


def mae_loss(recon: T.Tensor, patches: np.ndarray, plans) -> T.Tensor:
    """Mean over masked patches of the squared L2 patch error.

    Each masked patch contributes the sum of squared entry errors;
    visible patches are never touched by the graph, so perturbing them
    changes nothing, bit for bit.
    """
    if any(len(p.masked_idx) == 0 for p in plans):
        raise ModelError("mae_loss: empty masked set")
    masked = _batch_indices(plans, "masked_idx")
    b = np.arange(patches.shape[0])[:, None]
    rec_m = T.gather_tokens(recon, masked)
    tgt = T.Tensor(patches[b, masked])
    per_patch = T.sum_(T.square(T.sub(rec_m, tgt)), axis=-1)
    return T.mean_(per_patch)
