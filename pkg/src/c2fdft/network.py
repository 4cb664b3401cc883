"""Noise-prediction network: a 4-level U-shaped diffusion Transformer.

Each level stacks diffusion Transformer blocks (channel self-attention and a
pointwise feed-forward, both conditioned on a sinusoidal timestep embedding).
The network sees ``x_t`` concatenated with the degraded image ``y`` and
returns ``x_t + residual`` as its noise estimate.
"""

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


@dataclass
class DftConfig:
    base_channels: int = 48
    blocks_per_level: list = field(default_factory=lambda: [4, 6, 6, 8])
    heads_per_level: list = field(default_factory=lambda: [1, 2, 4, 8])
    channels_per_level: list = field(default_factory=lambda: [48, 96, 192, 384])
    dfn_expansion: int = 4
    in_channels: int = 6
    out_channels: int = 3
    time_embedding: bool = True

    def __post_init__(self):
        self.blocks_per_level = [int(v) for v in self.blocks_per_level]
        self.heads_per_level = [int(v) for v in self.heads_per_level]
        self.channels_per_level = [int(v) for v in self.channels_per_level]
        self.validate()

    def validate(self):
        errors = []
        for name in ("blocks_per_level", "heads_per_level", "channels_per_level"):
            if len(getattr(self, name)) != 4:
                errors.append(f"{name} must have exactly 4 entries")
        if errors:
            raise ValueError("; ".join(errors))
        C = self.base_channels
        if C <= 0 or C % 2:
            errors.append(f"base_channels must be a positive even number, got {C}")
        expected = [C * 2**i for i in range(4)]
        if self.channels_per_level != expected:
            errors.append(f"channels_per_level must be {expected}, got {self.channels_per_level}")
        if any(v <= 0 for v in self.blocks_per_level + self.heads_per_level):
            errors.append("block and head counts must be positive")
        for width, heads in zip(self.channels_per_level, self.heads_per_level):
            if width % heads:
                errors.append(f"{width} channels not divisible by {heads} heads")
        # decoder level 1 runs at 2C with the level-1 head count
        if (2 * C) % self.heads_per_level[0]:
            errors.append("2*base_channels not divisible by level-1 heads")
        if self.dfn_expansion <= 0:
            errors.append("dfn_expansion must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    @classmethod
    def tiny(cls, **overrides):
        kw = dict(
            base_channels=16,
            blocks_per_level=[1, 1, 1, 1],
            heads_per_level=[1, 2, 4, 8],
            channels_per_level=[16, 32, 64, 128],
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sinusoidal_encoding(t, dim):
    """Transformer-style encoding of timesteps: [sin(t w_k), cos(t w_k)].

    ``t`` is a (B,) tensor or int; returns (B, dim) in float32.
    """
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc.float()


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis at every spatial site."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class DiffusionSelfAttention(nn.Module):
    """Channel (transposed) self-attention with the time embedding added before the Q/K/V split."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"{dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = LayerNorm2d(dim)
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.project_out = nn.Conv2d(dim, dim, 1)
        self.last_attn = None

    def forward(self, x, temb, keep_attn=False):
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
        b, c, h, w = x.shape
        qkv = self.qkv_dwconv(self.qkv(self.norm(x)))
        if temb is not None:
            qkv = qkv + temb[:, :, None, None]
        q, k, v = qkv.chunk(3, dim=1)
        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.heads)
        v = rearrange(v, "b (head c) h w -> b head c (h w)", head=self.heads)
        # unit-norm rows keep logits bounded regardless of resolution
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = (k @ q.transpose(-2, -1)) / self.temperature
        attn = attn.softmax(dim=-1)
        if keep_attn:
            self.last_attn = attn.detach()
        out = attn @ v
        out = rearrange(out, "b head c (h w) -> b (head c) h w", head=self.heads, h=h, w=w)
        return self.project_out(out) + x


class DiffusionFeedForward(nn.Module):
    def __init__(self, dim, expansion=4):
        super().__init__()
        self.norm = LayerNorm2d(dim)
        self.project_in = nn.Conv2d(dim, dim * expansion, 1)
        self.project_out = nn.Conv2d(dim * expansion, dim, 1)

    def forward(self, x, temb):
        h = self.norm(x)
        if temb is not None:
            if temb.shape[1] != x.shape[1]:
                raise ValueError(f"time embedding width {temb.shape[1]} != {x.shape[1]} channels")
            h = h + temb[:, :, None, None]
        return self.project_out(F.gelu(self.project_in(h))) + x


class DiffusionTransformerBlock(nn.Module):
    def __init__(self, dim, heads, expansion):
        super().__init__()
        self.attn = DiffusionSelfAttention(dim, heads)
        self.ffn = DiffusionFeedForward(dim, expansion)

    def forward(self, x, temb_attn, temb_ffn, keep_attn=False):
        x = self.attn(x, temb_attn, keep_attn=keep_attn)
        return self.ffn(x, temb_ffn)


class Stage(nn.Module):
    """A stack of blocks at one width, sharing that level's time projections."""

    def __init__(self, dim, heads, depth, expansion, temb_dim):
        super().__init__()
        self.dim = dim
        self.time_attn = nn.Linear(temb_dim, dim * 3)
        self.time_ffn = nn.Linear(temb_dim, dim)
        self.blocks = nn.ModuleList(
            [DiffusionTransformerBlock(dim, heads, expansion) for _ in range(depth)]
        )

    def project_time(self, base):
        return self.time_attn(base), self.time_ffn(base)

    def forward(self, x, base, keep_attn=False):
        ta, tf = self.project_time(base)
        for blk in self.blocks:
            x = blk(x, ta, tf, keep_attn=keep_attn)
        return x


class Downsample(nn.Module):
    """H x W x C -> H/2 x W/2 x 2C via 1x1 conv (C -> C/2) and pixel-unshuffle."""

    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim // 2, 1)

    def forward(self, x):
        return F.pixel_unshuffle(self.conv(x), 2)


class Upsample(nn.Module):
    """H x W x C -> 2H x 2W x C/2 via 1x1 conv (C -> 2C) and pixel-shuffle."""

    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim * 2, 1)

    def forward(self, x):
        return F.pixel_shuffle(self.conv(x), 2)


STAGES = ("encoder1", "encoder2", "encoder3", "latent", "decoder3", "decoder2", "decoder1")


class DftModel(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = config or DftConfig()
        self.config = cfg
        C = cfg.base_channels
        ch = cfg.channels_per_level
        nb = cfg.blocks_per_level
        hd = cfg.heads_per_level
        ex = cfg.dfn_expansion
        self.temb_dim = 4 * C

        def stage(level, width=None):
            return Stage(width or ch[level], hd[level], nb[level], ex, self.temb_dim)

        self.patch_embed = nn.Conv2d(cfg.in_channels, C, 3, padding=1)
        self.encoder1 = stage(0)
        self.down1_2 = Downsample(ch[0])
        self.encoder2 = stage(1)
        self.down2_3 = Downsample(ch[1])
        self.encoder3 = stage(2)
        self.down3_4 = Downsample(ch[2])
        self.latent = stage(3)
        self.up4_3 = Upsample(ch[3])
        self.reduce3 = nn.Conv2d(ch[3], ch[2], 1)
        self.decoder3 = stage(2)
        self.up3_2 = Upsample(ch[2])
        self.reduce2 = nn.Conv2d(ch[2], ch[1], 1)
        self.decoder2 = stage(1)
        self.up2_1 = Upsample(ch[1])
        self.decoder1 = stage(0, width=2 * C)
        self.output = nn.Conv2d(2 * C, cfg.out_channels, 3, padding=1)

        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)
        if not cfg.time_embedding:
            for name in STAGES:
                s = getattr(self, name)
                for lin in (s.time_attn, s.time_ffn):
                    nn.init.zeros_(lin.weight)
                    nn.init.zeros_(lin.bias)
                    lin.requires_grad_(False)

    def stages(self):
        return [getattr(self, name) for name in STAGES]

    def time_embed(self, t, level, width):
        """Projected time embedding for stage ``level`` (index or name) at ``width``."""
        name = STAGES[level] if isinstance(level, int) else level
        s = getattr(self, name)
        base = sinusoidal_encoding(t, self.temb_dim).to(s.time_ffn.weight.device)
        ta, tf = s.project_time(base)
        if width == s.dim:
            return tf
        if width == 3 * s.dim:
            return ta
        raise ValueError(f"stage {name} has widths {s.dim} and {3 * s.dim}, not {width}")

    def forward(self, x_t, y, t, keep_attn=False):
        if x_t.ndim != 4 or x_t.shape != y.shape:
            raise ValueError(f"x_t {tuple(x_t.shape)} and y {tuple(y.shape)} must match (B, 3, H, W)")
        B, _, H, W = x_t.shape
        if H % 8 or W % 8:
            raise ValueError(f"H and W must be divisible by 8, got {H}x{W}")
        t = torch.as_tensor(t, device=x_t.device).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        if t.numel() != B:
            raise ValueError(f"got {t.numel()} timesteps for batch of {B}")

        base = sinusoidal_encoding(t.cpu(), self.temb_dim).to(device=x_t.device, dtype=x_t.dtype)
        feat = self.patch_embed(torch.cat([x_t, y], dim=1))
        enc1 = self.encoder1(feat, base, keep_attn)
        enc2 = self.encoder2(self.down1_2(enc1), base, keep_attn)
        enc3 = self.encoder3(self.down2_3(enc2), base, keep_attn)
        lat = self.latent(self.down3_4(enc3), base, keep_attn)

        d3 = self.reduce3(torch.cat([self.up4_3(lat), enc3], dim=1))
        d3 = self.decoder3(d3, base, keep_attn)
        d2 = self.reduce2(torch.cat([self.up3_2(d3), enc2], dim=1))
        d2 = self.decoder2(d2, base, keep_attn)
        d1 = torch.cat([self.up2_1(d2), enc1], dim=1)
        d1 = self.decoder1(d1, base, keep_attn)
        return self.output(d1) + x_t

    def attention_maps(self):
        return [
            blk.attn.last_attn
            for s in self.stages()
            for blk in s.blocks
            if blk.attn.last_attn is not None
        ]


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())
