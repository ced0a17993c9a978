"""Encoder-processor-decoder forecaster.

Tensor layout inside the network is ``(B, levels, h, w, channels)`` where
``h, w`` index patches. States outside the network are ``(B, C, H, W)`` with
``C = n_vars * n_levels`` channels, variable-major.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DataError

NEG_INF = -1e9  # additive attention mask; exp underflows to exactly 0 in float64


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 2
    embed_dim: int = 32
    enc_layers: tuple = (1, 1, 1)
    dec_layers: tuple = (1, 1, 1)
    window: int = 2
    n_heads: int = 4
    latent_levels: int = 2
    lambda_set: tuple = (1.0, 10.0, 100.0, 1000.0)
    n_levels: int = 1
    level_values: tuple = (0.0,)  # depth in metres per input level
    horizon_vars: int = 1
    n_static: int = 1
    mlp_ratio: int = 4
    fourier_bands: int = 4
    increment_scale: float = 1.0  # typical one-step change, normalized units

    def __post_init__(self):
        for name in ("enc_layers", "dec_layers", "lambda_set", "level_values"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "lambda_set", tuple(float(v) for v in self.lambda_set))
        object.__setattr__(self, "level_values", tuple(float(v) for v in self.level_values))
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.latent_levels < 1:
            raise ConfigError("latent_levels must be >= 1")
        if not self.lambda_set or any(v <= 0 for v in self.lambda_set):
            raise ConfigError(f"lambda_set must be non-empty and positive, got {self.lambda_set}")
        if len(self.enc_layers) != len(self.dec_layers) or not self.enc_layers:
            raise ConfigError(f"enc_layers {self.enc_layers} and dec_layers {self.dec_layers} need equal, non-zero length")
        if any(n < 1 for n in self.enc_layers + self.dec_layers):
            raise ConfigError("every U-Net stage needs at least one block")
        if len(self.level_values) != self.n_levels:
            raise ConfigError(f"{len(self.level_values)} level values for n_levels={self.n_levels}")
        for name in ("patch_size", "window", "horizon_vars", "mlp_ratio", "fourier_bands", "n_levels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.increment_scale > 0:
            raise ConfigError(f"increment_scale must be positive, got {self.increment_scale}")

    @property
    def n_stages(self) -> int:
        return len(self.enc_layers)

    @property
    def n_channels(self) -> int:
        return self.horizon_vars * self.n_levels

    def stage_sides(self, height: int, width: int) -> list[tuple[int, int]]:
        h, w = -(-height // self.patch_size), -(-width // self.patch_size)
        sides = [(h, w)]
        for _ in range(self.n_stages - 1):
            h, w = -(-h // 2), -(-w // 2)
            sides.append((h, w))
        return sides

    def validate_grid(self, height: int, width: int) -> None:
        for i, (h, w) in enumerate(self.stage_sides(height, width)):
            if min(h, w) < self.window:
                raise ConfigError(
                    f"U-Net stage {i} patch grid {h}x{w} is smaller than window {self.window} "
                    f"for a {height}x{width} input"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "tiny": ModelConfig(),
    "small-analogue": ModelConfig(embed_dim=64, enc_layers=(2, 6, 2), dec_layers=(2, 6, 2), n_heads=4),
    # Larger configurations, usable but slow on CPU.
    "small": ModelConfig(patch_size=4, embed_dim=256, enc_layers=(2, 6, 2), dec_layers=(2, 6, 2), window=8, n_heads=8, latent_levels=4),
    "medium": ModelConfig(patch_size=4, embed_dim=384, enc_layers=(6, 8, 8), dec_layers=(6, 8, 8), window=8, n_heads=8, latent_levels=4),
    "large": ModelConfig(patch_size=4, embed_dim=512, enc_layers=(6, 10, 8), dec_layers=(8, 10, 6), window=8, n_heads=16, latent_levels=4),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


# ---------------------------------------------------------------- embeddings


def level_embedding(p: float, lambda_set) -> np.ndarray:
    """``[sin(p/l1), cos(p/l1), sin(p/l2), cos(p/l2), ...]``."""
    lam = np.asarray(lambda_set, dtype=np.float64)
    if lam.size == 0 or np.any(lam <= 0):
        raise ConfigError(f"wavelengths must be non-empty and positive, got {lambda_set}")
    ang = p / lam
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(-1)


def fourier_position_encoding(h: int, w: int, n_bands: int) -> np.ndarray:
    """``(h, w, 4 * n_bands)`` sin/cos features of positions scaled to [0, 1].

    Frequencies are ``pi * 2**k``; the lowest band alone is injective on [0, 1].
    """
    freqs = np.pi * 2.0 ** np.arange(n_bands)

    def axis(n):
        u = np.arange(n) / max(n - 1, 1)
        ang = u[:, None] * freqs[None, :]
        return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(n, -1)

    fy, fx = axis(h), axis(w)
    return np.concatenate(
        [np.broadcast_to(fy[:, None, :], (h, w, fy.shape[1])), np.broadcast_to(fx[None, :, :], (h, w, fx.shape[1]))],
        axis=-1,
    )


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """``(..., H, W)`` -> ``(..., H/p, W/p, p*p)``; H, W must be multiples of p."""
    *lead, H, W = x.shape
    if H % p or W % p:
        raise DataError(f"raster {H}x{W} not divisible by patch size {p}")
    y = x.reshape(*lead, H // p, p, W // p, p)
    n = len(lead)
    y = y.transpose(*range(n), n, n + 2, n + 1, n + 3)
    return y.reshape(*lead, H // p, W // p, p * p)


def unpatchify(t: Tensor, p: int) -> Tensor:
    """Inverse of :func:`patchify` on the last three axes."""
    *lead, h, w, pp = t.shape
    if pp != p * p:
        raise DataError(f"last axis {pp} != patch area {p * p}")
    n = len(lead)
    y = t.reshape(*lead, h, w, p, p)
    y = y.transpose(*range(n), n, n + 2, n + 1, n + 3)
    return y.reshape(*lead, h * p, w * p)


# ---------------------------------------------------------------- layers


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, group: str, rng, zero: bool = False):
        self.store, self.w, self.b = store, name + ".weight", name + ".bias"
        self.d_in, self.d_out = d_in, d_out
        weight = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        store.add(self.w, weight, group)
        store.add(self.b, np.zeros(d_out), group)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        lead = x.shape[:-1]
        y = x.reshape(-1, self.d_in) @ self.store[self.w] + self.store[self.b]
        return y.reshape(*lead, self.d_out)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, group: str):
        self.store, self.g, self.b = store, name + ".gain", name + ".bias"
        store.add(self.g, np.ones(dim), group)
        store.add(self.b, np.zeros(dim), group)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, axis=-1) * self.store[self.g] + self.store[self.b]


class MLP:
    def __init__(self, store, name, dim, ratio, group, rng):
        self.fc1 = Linear(store, name + ".fc1", dim, dim * ratio, group, rng)
        self.fc2 = Linear(store, name + ".fc2", dim * ratio, dim, group, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """``(..., N, D)`` -> ``(..., heads, N, D/heads)``."""
    *lead, n, d = t.shape
    k = len(lead)
    return t.reshape(*lead, n, heads, d // heads).transpose(*range(k), k + 1, k, k + 2)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, heads, n, dh = t.shape
    k = len(lead)
    return t.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, n, heads * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None):
    """``softmax(q k^T / sqrt(d_k) + mask) v``; returns output and weights."""
    d_k = q.shape[-1]
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = scores + mask
    weights = ad.softmax(scores, axis=-1)
    return weights @ v, weights


class CrossAttention:
    """Multi-head cross-attention from a small query set onto a token set."""

    def __init__(self, store, name, dim, heads, group, rng):
        self.heads = heads
        self.q = Linear(store, name + ".q", dim, dim, group, rng)
        self.kv = Linear(store, name + ".kv", dim, 2 * dim, group, rng)
        self.proj = Linear(store, name + ".proj", dim, dim, group, rng)

    def __call__(self, queries: Tensor, tokens: Tensor) -> Tensor:
        """queries ``(..., Nq, D)`` (broadcastable), tokens ``(..., Nk, D)``."""
        d = tokens.shape[-1]
        q = _split_heads(self.q(queries), self.heads)
        kv = self.kv(tokens)
        k = _split_heads(kv[..., :d], self.heads)
        v = _split_heads(kv[..., d:], self.heads)
        out, _ = attention(q, k, v)
        return self.proj(_merge_heads(out))


# ---------------------------------------------------------------- windowed attention


def _regions(n: int, window: int, shift: int) -> np.ndarray:
    lab = np.zeros(n, dtype=np.int64)
    if shift:
        lab[n - window:n - shift] = 1
        lab[n - shift:] = 2
    return lab


def window_mask(levels: int, hp: int, wp: int, window: int, shift: int, valid: np.ndarray) -> np.ndarray:
    """Additive mask ``(n_windows, N, N)`` for a padded, already-rolled token grid.

    ``valid`` is the ``(hp, wp)`` validity of the rolled grid. A key is masked
    when it is padding or, under a shift, comes from a different side of a
    wrap-around seam than the query.
    """
    lab = _regions(hp, window, shift)[:, None] * 3 + _regions(wp, window, shift)[None, :]
    lab = np.where(valid, lab, -1)
    nh, nw = hp // window, wp // window
    lab = lab.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, 1, window * window)
    lab = np.broadcast_to(lab, (nh * nw, levels, window * window)).reshape(nh * nw, -1)
    valid_k = (lab >= 0)[:, None, :]
    same = lab[:, :, None] == lab[:, None, :]
    # padding queries still see other padding so their rows stay finite
    pad_q = (lab < 0)[:, :, None]
    allowed = (same & valid_k) | (pad_q & ~valid_k)
    return np.where(allowed, 0.0, NEG_INF)


def window_partition(x: Tensor, window: int) -> Tensor:
    """``(B, L, H, W, D)`` -> ``(B, nW, L*w*w, D)``, windows in row-major order."""
    B, L, H, W, D = x.shape
    nh, nw = H // window, W // window
    y = x.reshape(B, L, nh, window, nw, window, D).transpose(0, 2, 4, 1, 3, 5, 6)
    return y.reshape(B, nh * nw, L * window * window, D)


def window_reverse(t: Tensor, window: int, L: int, H: int, W: int) -> Tensor:
    B, _, _, D = t.shape
    nh, nw = H // window, W // window
    y = t.reshape(B, nh, nw, L, window, window, D).transpose(0, 3, 1, 4, 2, 5, 6)
    return y.reshape(B, L, H, W, D)


def windowed_attention(x, qkv: Linear, proj: Linear, window: int, heads: int, shifted: bool,
                       return_weights: bool = False):
    """Multi-head self-attention inside local windows of a ``(B, L, H, W, D)`` grid.

    The grid is zero-padded to window multiples; padded keys are masked. With
    ``shifted`` the grid is rolled by half a window before partitioning and
    attention across the wrap-around seams is masked out.
    """
    x = ad.as_tensor(x)
    B, L, H, W, D = x.shape
    if D % heads:
        raise ConfigError(f"channel count {D} not divisible by {heads} heads")
    hp, wp = -(-H // window) * window, -(-W // window) * window
    x = ad.pad(x, [(0, 0), (0, 0), (0, hp - H), (0, wp - W), (0, 0)])
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:H, :W] = True
    shift = window // 2 if shifted else 0
    if shift:
        x = ad.roll(x, (-shift, -shift), (2, 3))
        valid = np.roll(valid, (-shift, -shift), (0, 1))
    mask = window_mask(L, hp, wp, window, shift, valid)[:, None]  # (nW, 1, N, N)

    t = window_partition(x, window)
    qkv_t = qkv(t)
    q, k, v = (_split_heads(qkv_t[..., i * D:(i + 1) * D], heads) for i in range(3))
    out, weights = attention(q, k, v, mask)
    y = window_reverse(proj(_merge_heads(out)), window, L, hp, wp)
    if shift:
        y = ad.roll(y, (shift, shift), (2, 3))
    y = y[:, :, :H, :W, :]
    return (y, weights) if return_weights else y


class SwinBlock:
    def __init__(self, store, name, dim, heads, window, shifted, mlp_ratio, group, rng):
        self.heads, self.window, self.shifted = heads, window, shifted
        self.norm1 = LayerNorm(store, name + ".norm1", dim, group)
        self.qkv = Linear(store, name + ".attn.qkv", dim, 3 * dim, group, rng)
        self.proj = Linear(store, name + ".attn.proj", dim, dim, group, rng)
        self.norm2 = LayerNorm(store, name + ".norm2", dim, group)
        self.mlp = MLP(store, name + ".mlp", dim, mlp_ratio, group, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + windowed_attention(self.norm1(x), self.qkv, self.proj, self.window, self.heads, self.shifted)
        return x + self.mlp(self.norm2(x))


class PatchMerge:
    """Halve both spatial sides, double channels."""

    def __init__(self, store, name, dim, group, rng):
        self.norm = LayerNorm(store, name + ".norm", 4 * dim, group)
        self.lin = Linear(store, name + ".lin", 4 * dim, 2 * dim, group, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, L, H, W, D = x.shape
        x = ad.pad(x, [(0, 0), (0, 0), (0, H % 2), (0, W % 2), (0, 0)])
        h, w = (H + 1) // 2, (W + 1) // 2
        y = x.reshape(B, L, h, 2, w, 2, D).transpose(0, 1, 2, 4, 3, 5, 6).reshape(B, L, h, w, 4 * D)
        return self.lin(self.norm(y))


class PatchExpand:
    """Double both spatial sides, halve channels; crops to ``(H, W)``."""

    def __init__(self, store, name, dim, group, rng):
        self.norm = LayerNorm(store, name + ".norm", dim, group)
        self.lin = Linear(store, name + ".lin", dim, 2 * dim, group, rng)

    def __call__(self, x: Tensor, H: int, W: int) -> Tensor:
        B, L, h, w, D = x.shape
        y = self.lin(self.norm(x)).reshape(B, L, h, w, 2, 2, D // 2)
        y = y.transpose(0, 1, 2, 4, 3, 5, 6).reshape(B, L, 2 * h, 2 * w, D // 2)
        return y[:, :, :H, :W, :]


# ---------------------------------------------------------------- the network


class ForecastModel:
    """Encoder, windowed-attention U-Net processor, and decoder.

    ``statics`` (``(n_static, H, W)``, e.g. the land mask) enter as extra input
    channels. Parameters live in ``self.params`` grouped as encoder /
    processor / decoder.
    """

    def __init__(self, config: ModelConfig, statics=None, seed: int = 0):
        self.config = c = config
        self.params = store = ParamStore()
        self.statics = None if statics is None else np.asarray(statics, dtype=np.float64)
        if self.statics is not None and self.statics.shape[0] != c.n_static:
            raise ConfigError(f"{self.statics.shape[0]} static fields for n_static={c.n_static}")
        rng = np.random.default_rng(seed)
        D, p = c.embed_dim, c.patch_size
        n_in = (2 * c.horizon_vars + c.n_static) * p * p + 4 * c.fourier_bands
        n_lev = 2 * len(c.lambda_set)

        # encoder
        self.embed = Linear(store, "encoder.patch_embed", n_in, D, "encoder", rng)
        self.level_embed = Linear(store, "encoder.level_embed", n_lev, D, "encoder", rng)
        store.add("encoder.latents", rng.normal(0.0, 1.0, (c.latent_levels, D)), "encoder")
        self.enc_norm_q = LayerNorm(store, "encoder.norm_q", D, "encoder")
        self.enc_norm_kv = LayerNorm(store, "encoder.norm_kv", D, "encoder")
        self.enc_xattn = CrossAttention(store, "encoder.xattn", D, c.n_heads, "encoder", rng)
        self.enc_norm_mlp = LayerNorm(store, "encoder.norm_mlp", D, "encoder")
        self.enc_mlp = MLP(store, "encoder.mlp", D, c.mlp_ratio, "encoder", rng)

        # processor
        self.down_blocks, self.merges, self.up_blocks, self.expands = [], [], [], []
        for i, n in enumerate(c.enc_layers):
            dim = D * 2 ** i
            self.down_blocks.append([
                SwinBlock(store, f"processor.down{i}.block{j}", dim, c.n_heads, c.window, j % 2 == 1,
                          c.mlp_ratio, "processor", rng)
                for j in range(n)
            ])
            if i < c.n_stages - 1:
                self.merges.append(PatchMerge(store, f"processor.merge{i}", dim, "processor", rng))
        for i, n in enumerate(c.dec_layers):
            stage = c.n_stages - 1 - i
            dim = D * 2 ** stage
            self.up_blocks.append([
                SwinBlock(store, f"processor.up{stage}.block{j}", dim, c.n_heads, c.window, j % 2 == 1,
                          c.mlp_ratio, "processor", rng)
                for j in range(n)
            ])
            if stage > 0:
                self.expands.append(PatchExpand(store, f"processor.expand{stage}", dim, "processor", rng))

        # decoder
        self.query_embed = Linear(store, "decoder.query_embed", n_lev, D, "decoder", rng)
        self.dec_norm_q = LayerNorm(store, "decoder.norm_q", D, "decoder")
        self.dec_norm_kv = LayerNorm(store, "decoder.norm_kv", D, "decoder")
        self.dec_xattn = CrossAttention(store, "decoder.xattn", D, c.n_heads, "decoder", rng)
        self.dec_norm_mlp = LayerNorm(store, "decoder.norm_mlp", D, "decoder")
        self.dec_mlp = MLP(store, "decoder.mlp", D, c.mlp_ratio, "decoder", rng)
        self.head_norm = LayerNorm(store, "decoder.head_norm", D, "decoder")
        self.head = Linear(store, "decoder.head", D, c.horizon_vars * p * p, "decoder", rng, zero=True)

        self._level_emb = np.stack([level_embedding(v, c.lambda_set) for v in c.level_values])

    # -- stages

    def _statics_for(self, H, W, statics):
        s = self.statics if statics is None else np.asarray(statics, dtype=np.float64)
        if s is None:
            s = np.zeros((self.config.n_static, H, W))
        if s.shape != (self.config.n_static, H, W):
            raise DataError(f"static fields shape {s.shape} != {(self.config.n_static, H, W)}")
        return s

    def encode(self, x_prev, x_curr, statics=None, level_order=None) -> Tensor:
        """Two states ``(B, C, H, W)`` -> latent ``(B, C_L, h, w, D)``.

        ``level_order`` permutes input levels together with their embeddings;
        the result is unchanged because the latent queries attend over levels
        as an unordered set.
        """
        c = self.config
        x_prev = np.asarray(x_prev, dtype=np.float64)
        x_curr = np.asarray(x_curr, dtype=np.float64)
        if x_prev.shape != x_curr.shape:
            raise DataError(f"input states differ in shape: {x_prev.shape} vs {x_curr.shape}")
        if x_curr.ndim != 4 or x_curr.shape[1] != c.n_channels:
            raise DataError(f"expected states (B, {c.n_channels}, H, W), got {x_curr.shape}")
        B, _, H, W = x_curr.shape
        c.validate_grid(H, W)
        s = self._statics_for(H, W, statics)
        p = c.patch_size
        Hp, Wp = -(-H // p) * p, -(-W // p) * p
        V, Lv = c.horizon_vars, c.n_levels

        # per level: [curr vars, scaled tendency, statics] as channels; the
        # tendency is tiny next to the state, so it is rescaled to order one
        to_levels = lambda a: a.reshape(B, V, Lv, H, W).transpose(0, 2, 1, 3, 4)
        per_level = np.concatenate([
            to_levels(x_curr),
            to_levels((x_curr - x_prev) / c.increment_scale),
            np.broadcast_to(s[None, None], (B, Lv) + s.shape),
        ], axis=2)
        per_level = np.pad(per_level, [(0, 0)] * 3 + [(0, Hp - H), (0, Wp - W)])
        patches = patchify(per_level, p)  # (B, Lv, F, h, w, p*p)
        h, w = Hp // p, Wp // p
        patches = patches.transpose(0, 1, 3, 4, 2, 5).reshape(B, Lv, h, w, -1)
        pos = fourier_position_encoding(h, w, c.fourier_bands)
        feats = np.concatenate([patches, np.broadcast_to(pos, (B, Lv) + pos.shape)], axis=-1)

        lev = self._level_emb
        if level_order is not None:
            order = np.asarray(level_order)
            feats, lev = feats[:, order], lev[order]
        tokens = self.embed(feats) + self.level_embed(lev).reshape(1, Lv, 1, 1, c.embed_dim)

        # Perceiver compression of the level axis to C_L latent levels
        tokens = tokens.transpose(0, 2, 3, 1, 4)  # (B, h, w, Lv, D)
        latents = self.params["encoder.latents"]
        z = latents + self.enc_xattn(self.enc_norm_q(latents), self.enc_norm_kv(tokens))
        z = z + self.enc_mlp(self.enc_norm_mlp(z))  # (B, h, w, C_L, D)
        return z.transpose(0, 3, 1, 2, 4)

    def process(self, z: Tensor) -> Tensor:
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for blk in blocks:
                z = blk(z)
            if i < len(self.merges):
                skips.append(z)
                z = self.merges[i](z)
        for i, blocks in enumerate(self.up_blocks):
            for blk in blocks:
                z = blk(z)
            if i < len(self.expands):
                skip = skips.pop()
                z = self.expands[i](z, skip.shape[2], skip.shape[3]) + skip
        return z

    def decode(self, z: Tensor, height: int, width: int) -> Tensor:
        """Latent ``(B, C_L, h, w, D)`` -> increment ``(B, C, H, W)``."""
        c = self.config
        B, _, h, w, D = z.shape
        p = c.patch_size
        if (-(-height // p), -(-width // p)) != (h, w):
            raise DataError(f"latent patch grid {h}x{w} does not match target grid {height}x{width}")
        lat = z.transpose(0, 2, 3, 1, 4)  # (B, h, w, C_L, D)
        queries = self.query_embed(self._level_emb)  # (Lv, D)
        y = queries + self.dec_xattn(self.dec_norm_q(queries), self.dec_norm_kv(lat))
        y = y + self.dec_mlp(self.dec_norm_mlp(y))  # (B, h, w, Lv, D)
        out = self.head(self.head_norm(y))  # (B, h, w, Lv, V*p*p)
        out = out.reshape(B, h, w, c.n_levels, c.horizon_vars, p * p).transpose(0, 4, 3, 1, 2, 5)
        out = unpatchify(out, p).reshape(B, c.n_channels, h * p, w * p)
        return out[:, :, :height, :width]

    def __call__(self, x_prev, x_curr, statics=None) -> Tensor:
        return forecast_step(self, x_prev, x_curr, statics)


def forecast_step(model: ForecastModel, x_prev, x_curr, statics=None) -> Tensor:
    """One step ``X^{t+1} = X^t + decode(process(encode(X^{t-1}, X^t)))``.

    Accepts ``(C, H, W)`` or batched ``(B, C, H, W)`` states in normalized units.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x_curr = np.asarray(x_curr, dtype=np.float64)
    single = x_curr.ndim == 3
    if single:
        x_prev, x_curr = x_prev[None], x_curr[None]
    H, W = x_curr.shape[-2:]
    delta = model.decode(model.process(model.encode(x_prev, x_curr, statics)), H, W)
    out = delta * model.config.increment_scale + x_curr
    return out[0] if single else out
