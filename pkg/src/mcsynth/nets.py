"""Networks: dual-encoder U-Net generator, time-conditioned discriminator,
attention autoencoder, and their shared building blocks."""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .diffusion import NonFiniteError
from .fusion import FeatureMaximizer, PlainConcat


@dataclass
class GeneratorConfig:
    image_size: int = 64
    in_channels_target: int = 1
    in_channels_cond: int = 2
    base_channels: int = 32
    num_scales: int = 3
    resnet_blocks_per_scale: int = 1
    attention_resolution: int = 16
    attention_heads: int = 4
    time_embed_dim: int = 128
    z_dim: int = 64
    groups: int = 8
    fm_join: str = "concat"
    use_fm: bool = True
    multiscale: bool = True
    disc_sees_cond: bool = False

    def __post_init__(self):
        if self.image_size % (2 ** self.num_scales):
            raise ValueError(
                f"image_size {self.image_size} must be divisible by 2^{self.num_scales} "
                "(bottleneck sits one level below the last scale)"
            )
        if self.attention_resolution not in self.resolutions:
            raise ValueError(
                f"attention_resolution {self.attention_resolution} not among scales {self.resolutions}"
            )
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def resolutions(self) -> list[int]:
        return [self.image_size >> k for k in range(self.num_scales)]

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * (1 if k == 0 else 2) for k in range(self.num_scales)]


@dataclass
class AttentionRecord:
    layer_id: int
    heads: int
    raw: torch.Tensor  # [B, heads, HW, HW], post-softmax
    spatial: tuple[int, int]


@dataclass
class FeatureBundle:
    skips: list[torch.Tensor]
    bottleneck: torch.Tensor
    attention: list[AttentionRecord] = field(default_factory=list)


def time_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sinusoidal embedding: ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]``.

    ``w_i = 10000^(-2i/dim)``. Scalar ``t`` gives shape ``[dim]``, a vector gives ``[B, dim]``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    i = torch.arange(dim // 2, dtype=torch.float64)
    omega = torch.pow(10000.0, -2.0 * i / dim)
    ang = t[..., None] * omega
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(*t.shape, dim)


def _groups(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    """GroupNorm ResNet block with optional per-channel scale/shift modulation."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.mod = None
        if emb_dim is not None:
            self.mod = nn.Linear(emb_dim, 2 * out_ch)
            # zero init: modulation starts as the identity
            nn.init.zeros_(self.mod.weight)
            nn.init.zeros_(self.mod.bias)

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.mod is not None and emb is not None:
            scale, shift = self.mod(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Multi-head self-attention over spatial positions, residual added by ``forward``."""

    def __init__(self, channels: int, heads: int = 4, groups: int = 8, layer_id: int = 0):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.layer_id = layer_id
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def weights(self, tokens: torch.Tensor) -> torch.Tensor:
        """``softmax(Q K^T / sqrt(d))`` per head, shape [B, heads, HW, HW]."""
        if tokens.dim() != 3 or tokens.shape[-1] != self.channels:
            raise ValueError(f"expected [B, HW, {self.channels}] tokens, got {tuple(tokens.shape)}")
        q, k = self._split(self.q(tokens)), self._split(self.k(tokens))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)

    def attend(self, tokens: torch.Tensor):
        """Attention update (without residual) and the attention weights."""
        attn = self.weights(tokens)
        v = self._split(self.v(tokens))
        out = (attn @ v).transpose(1, 2).reshape(tokens.shape)
        return self.proj(out), attn

    def forward(self, x: torch.Tensor):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        delta, attn = self.attend(tokens)
        out = x + delta.transpose(1, 2).reshape(b, c, h, w)
        return out, AttentionRecord(self.layer_id, self.heads, attn, (h, w))


def self_attention(tokens: torch.Tensor, layer: SelfAttention):
    """Token-space multi-head attention with residual: ``(tokens + update, weights)``."""
    delta, attn = layer.attend(tokens)
    return tokens + delta, attn


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class Conditioner(nn.Module):
    """Sinusoidal time MLP plus a 2-layer z MLP, summed into one embedding."""

    def __init__(self, time_dim: int, z_dim: int = 0):
        super().__init__()
        self.time_dim = time_dim
        self.t_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.z_dim = z_dim
        self.z_mlp = None
        if z_dim > 0:
            self.z_mlp = nn.Sequential(nn.Linear(z_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))

    def forward(self, t, z=None, batch: int | None = None, like: torch.Tensor | None = None):
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(batch or 1)
        dtype = like.dtype if like is not None else torch.float32
        emb = self.t_mlp(time_embed(t, self.time_dim).to(dtype))
        if self.z_mlp is not None and z is not None:
            emb = emb + self.z_mlp(z)
        return emb


class Encoder(nn.Module):
    """ResNet/attention encoder producing one skip per scale and a bottleneck.

    With ``fuse_channels`` set, each scale concatenates an external feature
    map (the semantic guidance) and mixes it back with a 1x1 conv before the
    skip is taken and the map is downsampled.
    """

    def __init__(self, in_ch: int, cfg: GeneratorConfig, emb_dim: int | None = None,
                 fuse_channels: list[int] | None = None):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        self.conv_in = nn.Conv2d(in_ch, chs[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.fusers = nn.ModuleList() if fuse_channels is not None else None
        self.downs = nn.ModuleList()
        prev = chs[0]
        layer = 0
        for k, (res, ch) in enumerate(zip(cfg.resolutions, chs)):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.resnet_blocks_per_scale):
                blocks.append(ResBlock(prev, ch, emb_dim, cfg.groups))
                prev = ch
                if res == cfg.attention_resolution:
                    attns.append(SelfAttention(ch, cfg.attention_heads, cfg.groups, layer_id=layer))
                    layer += 1
            self.blocks.append(blocks)
            self.attn.append(attns)
            if self.fusers is not None:
                self.fusers.append(nn.Conv2d(ch + fuse_channels[k], ch, 1))
            self.downs.append(Downsample(ch))
        self.mid = ResBlock(prev, prev, emb_dim, cfg.groups)

    def forward(self, x, emb=None, guidance: list[torch.Tensor] | None = None) -> FeatureBundle:
        if self.fusers is not None:
            if guidance is None or len(guidance) != len(self.blocks):
                n = None if guidance is None else len(guidance)
                raise ValueError(f"expected {len(self.blocks)} guidance maps, got {n}")
        h = self.conv_in(x)
        skips, records = [], []
        for k in range(len(self.blocks)):
            attns = list(self.attn[k])
            for block in self.blocks[k]:
                h = block(h, emb)
                if attns:
                    h, rec = attns.pop(0)(h)
                    records.append(rec)
            if self.fusers is not None:
                h = self.fusers[k](torch.cat([h, guidance[k]], dim=1))
            skips.append(h)
            h = self.downs[k](h)
        return FeatureBundle(skips, self.mid(h, emb), records)


class Decoder(nn.Module):
    def __init__(self, in_ch: int, skip_channels: list[int], cfg: GeneratorConfig,
                 emb_dim: int | None = None, out_ch: int = 1):
        super().__init__()
        chs = cfg.channels
        self.mid = ResBlock(in_ch, chs[-1], emb_dim, cfg.groups)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.attn = nn.ModuleList()
        prev = chs[-1]
        layer = 0
        for k in reversed(range(cfg.num_scales)):
            res, ch = cfg.resolutions[k], chs[k]
            self.ups.append(Upsample(prev))
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for j in range(cfg.resnet_blocks_per_scale):
                blocks.append(ResBlock(prev + (skip_channels[k] if j == 0 else 0), ch, emb_dim, cfg.groups))
                prev = ch
                if res == cfg.attention_resolution:
                    attns.append(SelfAttention(ch, cfg.attention_heads, cfg.groups, layer_id=layer))
                    layer += 1
            self.blocks.append(blocks)
            self.attn.append(attns)
        self.norm_out = nn.GroupNorm(_groups(prev, cfg.groups), prev)
        self.conv_out = nn.Conv2d(prev, out_ch, 3, padding=1)

    def forward(self, latent, skips: list[torch.Tensor], emb=None):
        h = self.mid(latent, emb)
        records = []
        for i, k in enumerate(reversed(range(len(skips)))):
            h = self.ups[i](h)
            h = torch.cat([h, skips[k]], dim=1)
            attns = list(self.attn[i])
            for block in self.blocks[i]:
                h = block(h, emb)
                if attns:
                    h, rec = attns.pop(0)(h)
                    records.append(rec)
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h)))), records


def _check_input(x: torch.Tensor, channels: int, size: int, name: str):
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"{name}: expected [B, {channels}, {size}, {size}], got {tuple(x.shape)}")


class Generator(nn.Module):
    """Semantic encoder over the conditions, diffusive encoder over ``x_t``,
    bottleneck fusion, and a shared decoder predicting ``x0``."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        emb = cfg.time_embed_dim
        self.cond = Conditioner(emb, cfg.z_dim)
        self.se = Encoder(cfg.in_channels_cond, cfg)
        self.de = Encoder(cfg.in_channels_target, cfg, emb_dim=emb, fuse_channels=cfg.channels)
        c = cfg.channels[-1]
        self.fm = FeatureMaximizer(c, 2 * c, cfg.fm_join) if cfg.use_fm else PlainConcat(c)
        skip_ch = [2 * ch for ch in cfg.channels]
        self.decoder = Decoder(2 * c, skip_ch, cfg, emb_dim=emb, out_ch=cfg.in_channels_target)

    def semantic_encode(self, y: torch.Tensor) -> FeatureBundle:
        _check_input(y, self.cfg.in_channels_cond, self.cfg.image_size, "conditions")
        return self.se(y)

    def diffusive_encode(self, x_t, se_features: FeatureBundle, emb, multiscale: bool | None = None) -> FeatureBundle:
        if len(se_features.skips) != self.cfg.num_scales:
            raise ValueError(
                f"semantic bundle has {len(se_features.skips)} scales, expected {self.cfg.num_scales}"
            )
        multiscale = self.cfg.multiscale if multiscale is None else multiscale
        guidance = se_features.skips if multiscale else [torch.zeros_like(s) for s in se_features.skips]
        return self.de(x_t, emb, guidance)

    def forward(self, x_t, y, z, t):
        cfg = self.cfg
        _check_input(x_t, cfg.in_channels_target, cfg.image_size, "x_t")
        emb = self.cond(t, z, batch=x_t.shape[0], like=x_t)
        se = self.semantic_encode(y)
        de = self.diffusive_encode(x_t, se, emb)
        latent = self.fm(de.bottleneck, se.bottleneck)
        se_skips = se.skips if cfg.multiscale else [torch.zeros_like(s) for s in se.skips]
        skips = [torch.cat([a, b], dim=1) for a, b in zip(de.skips, se_skips)]
        out, records = self.decoder(latent, skips, emb)
        if not torch.isfinite(out).all():
            raise NonFiniteError(_diagnose(self, (x_t, y, z, t)))
        return out, records


def _diagnose(model: nn.Module, inputs) -> str:
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    bad_in = [i for i, x in enumerate(inputs) if isinstance(x, torch.Tensor) and x.is_floating_point()
              and not torch.isfinite(x).all()]
    return f"non-finite generator output; non-finite params: {bad[:8]}; non-finite inputs: {bad_in}"


def generator_forward(x_t, y, z, t, model: Generator):
    return model(x_t, y, z, t)


class Discriminator(nn.Module):
    """Scores whether ``x_prev`` is a plausible one-step denoising of ``x_t``."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        emb = cfg.time_embed_dim
        self.cond = Conditioner(emb, 0)
        in_ch = 2 * cfg.in_channels_target + (cfg.in_channels_cond if cfg.disc_sees_cond else 0)
        chs = cfg.channels
        self.conv_in = nn.Conv2d(in_ch, chs[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chs[0]
        for ch in chs:
            self.blocks.append(ResBlock(prev, ch, emb, cfg.groups))
            self.downs.append(Downsample(ch))
            prev = ch
        self.head = nn.Linear(prev, 1)

    def forward(self, x_prev, x_t, t, y=None):
        cfg = self.cfg
        _check_input(x_prev, cfg.in_channels_target, cfg.image_size, "x_prev")
        _check_input(x_t, cfg.in_channels_target, cfg.image_size, "x_t")
        parts = [x_prev, x_t]
        if cfg.disc_sees_cond:
            if y is None:
                raise ValueError("discriminator configured to see conditions but y is None")
            parts.append(y)
        h = self.conv_in(torch.cat(parts, dim=1))
        emb = self.cond(t, batch=x_prev.shape[0], like=x_prev)
        for block, down in zip(self.blocks, self.downs):
            h = down(block(h, emb))
        h = F.silu(h).sum(dim=(2, 3))
        return self.head(h).squeeze(1)


def discriminator_forward(x_prev, x_t, t, model: Discriminator, y=None):
    return model(x_prev, x_t, t, y)


class AttentionAutoencoder(nn.Module):
    """Target-contrast autoencoder whose decoder mirrors the generator decoder,
    including attention layers at the same resolution."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.in_channels_target, cfg)
        self.decoder = Decoder(cfg.channels[-1], cfg.channels, cfg, out_ch=cfg.in_channels_target)

    def forward(self, x):
        _check_input(x, self.cfg.in_channels_target, self.cfg.image_size, "x")
        feats = self.encoder(x)
        return self.decoder(feats.bottleneck, feats.skips)


def autoencoder_forward(x, model: AttentionAutoencoder):
    return model(x)


@contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_models(cfg: GeneratorConfig, seed: int):
    """Generator, discriminator and autoencoder with seed-determined initial weights."""
    with _seeded(seed):
        g = Generator(cfg)
    with _seeded(seed + 1):
        d = Discriminator(cfg)
    with _seeded(seed + 2):
        ae = AttentionAutoencoder(cfg)
    return g, d, ae


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
