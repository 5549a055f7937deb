"""Clean-sequence denoiser: causal TCN encoder/decoder around a transformer bottleneck.

Block causality holds end to end: with 8-frame blocks (three halvings), an
input change in block k never alters output frames in blocks before k. All
pieces are built for that: left-padded convolutions, per-frame group norm,
a block-aligned strided downsample, a causal linear upsample, and time masks
in every motion-token attention.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scene_bps import D_OBJ


@dataclass
class DenoiserConfig:
    joints: int = 17
    frames: int = 275
    levels: int = 3
    pose_kernel: int = 5
    others_kernel: int = 3
    groups: int = 32
    pose_widths: tuple = (128, 256, 256)
    others_widths: tuple = (32, 64, 128)
    d_scene: int = 256
    ff_scene: int = 1024
    heads_scene: int = 8
    layers_scene: int = 3
    d_others: int = 128
    ff_others: int = 512
    heads_others: int = 4
    layers_others: int = 2
    d_obj: int = D_OBJ
    time_dim: int = 128
    fourier_scale: float = 16.0
    time_seed: int = 0
    diffusion_steps: int = 1000
    dropout: float = 0.0

    def __post_init__(self):
        self.pose_widths = tuple(self.pose_widths)
        self.others_widths = tuple(self.others_widths)
        if len(self.pose_widths) != self.levels or len(self.others_widths) != self.levels:
            raise ValueError("one channel width per level is required")
        if self.pose_widths[-1] != self.d_scene:
            raise ValueError("pose encoder bottleneck width must equal d_scene")
        if self.others_widths[-1] != self.d_others:
            raise ValueError("others encoder bottleneck width must equal d_others")
        for w in self.pose_widths + self.others_widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by {self.groups} groups")
        if self.d_scene % self.heads_scene or self.d_others % self.heads_others:
            raise ValueError("model widths must be divisible by the head counts")

    @property
    def block(self) -> int:
        return 2**self.levels

    @property
    def padded_frames(self) -> int:
        return -(-self.frames // self.block) * self.block

    @property
    def bottleneck_frames(self) -> int:
        return self.padded_frames // self.block

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose_widths"] = list(self.pose_widths)
        d["others_widths"] = list(self.others_widths)
        return d


# ---------------------------------------------------------------------------
# time embedding


def fourier_time_embed(t, dim: int, seed: int = 0, scale: float = 16.0, steps: int = 1000) -> np.ndarray:
    """Gaussian Fourier features [sin, cos] of the diffusion step ``t``."""
    freqs = _fourier_frequencies(dim, seed, scale)
    arg = 2 * math.pi * (np.asarray(t, dtype=np.float64)[..., None] / steps) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _fourier_frequencies(dim: int, seed: int, scale: float) -> np.ndarray:
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    return np.random.default_rng(seed).standard_normal(dim // 2) * scale


class FourierTimeEmbedding(nn.Module):
    def __init__(self, dim: int, seed: int, scale: float, steps: int):
        super().__init__()
        self.steps = steps
        self.register_buffer("freqs", torch.from_numpy(_fourier_frequencies(dim, seed, scale)).float())
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, t):
        arg = 2 * math.pi * (t.to(self.freqs.dtype)[:, None] / self.steps) * self.freqs
        return self.mlp(torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1))


# ---------------------------------------------------------------------------
# convolutional blocks


class CausalConv1d(nn.Conv1d):
    """Left-padded conv. With stride 2 the padding is k-2, so output m sees
    inputs up to 2m+1, i.e. exactly through the end of its 2-frame block."""

    def __init__(self, cin, cout, kernel, stride=1):
        super().__init__(cin, cout, kernel, stride=stride)
        self.left = kernel - 1 if stride == 1 else kernel - stride

    def forward(self, x):
        return super().forward(F.pad(x, (self.left, 0)))


class FrameGroupNorm(nn.Module):
    """Group norm with statistics per frame (channel groups only)."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        B, C, L = x.shape
        g = x.view(B, self.groups, C // self.groups, L)
        centered = g - g.mean(dim=2, keepdim=True)
        var = (centered * centered).mean(dim=2, keepdim=True)
        g = centered * torch.rsqrt(var + self.eps)
        return g.view(B, C, L) * self.weight[:, None] + self.bias[:, None]


class ResidualConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel, time_dim, groups):
        super().__init__()
        self.conv1 = CausalConv1d(cin, cout, kernel)
        self.norm1 = FrameGroupNorm(groups, cout)
        self.time = nn.Linear(time_dim, cout)
        self.conv2 = CausalConv1d(cout, cout, kernel)
        self.norm2 = FrameGroupNorm(groups, cout)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time(temb)[:, :, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class EncoderLevel(nn.Module):
    def __init__(self, cin, cout, kernel, time_dim, groups):
        super().__init__()
        self.block1 = ResidualConvBlock(cin, cout, kernel, time_dim, groups)
        self.block2 = ResidualConvBlock(cout, cout, kernel, time_dim, groups)
        self.down = CausalConv1d(cout, cout, kernel, stride=2)

    def forward(self, x, temb):
        skip = self.block2(self.block1(x, temb), temb)
        return skip, self.down(skip)


class TemporalEncoder(nn.Module):
    def __init__(self, cin, widths, kernel, time_dim, groups):
        super().__init__()
        chans = (cin,) + tuple(widths)
        self.levels = nn.ModuleList(
            EncoderLevel(chans[i], chans[i + 1], kernel, time_dim, groups) for i in range(len(widths))
        )

    def forward(self, x, temb):
        skips = []
        for level in self.levels:
            skip, x = level(x, temb)
            skips.append(skip)
        return skips, x


def causal_upsample(x):
    """Double the length; token m sits at the end of its block (2m+1) and the
    in-between frame 2m is the mean of tokens m-1 and m (token -1 := token 0)."""
    prev = torch.cat([x[..., :1], x[..., :-1]], dim=-1)
    mid = 0.5 * (prev + x)
    return torch.stack([mid, x], dim=-1).flatten(-2)


class DecoderLevel(nn.Module):
    def __init__(self, cin, cskip, cout, kernel, time_dim, groups):
        super().__init__()
        self.block1 = ResidualConvBlock(cin + cskip, cout, kernel, time_dim, groups)
        self.block2 = ResidualConvBlock(cout, cout, kernel, time_dim, groups)

    def forward(self, x, skip, temb):
        x = torch.cat([causal_upsample(x), skip], dim=1)
        return self.block2(self.block1(x, temb), temb)


class TemporalDecoder(nn.Module):
    def __init__(self, cin, widths, cout, kernel, time_dim, groups):
        super().__init__()
        rev = tuple(reversed(widths))
        ins = (cin,) + rev[:-1]
        self.levels = nn.ModuleList(
            DecoderLevel(ins[i], rev[i], rev[i], kernel, time_dim, groups) for i in range(len(rev))
        )
        self.out = nn.Conv1d(rev[-1], cout, 1)

    def forward(self, h, skips, temb):
        for level, skip in zip(self.levels, reversed(skips)):
            h = level(h, skip, temb)
        return self.out(h)


# ---------------------------------------------------------------------------
# attention


def sinusoidal_encoding(positions, dim: int):
    pos = positions.to(torch.float32)[..., None]
    i = torch.arange(0, dim, 2, dtype=torch.float32, device=positions.device)
    div = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(positions.shape + (dim,), device=positions.device)
    pe[..., 0::2] = torch.sin(pos * div)
    pe[..., 1::2] = torch.cos(pos * div)
    return pe


class Attention(nn.Module):
    """Multi-head attention with a boolean ``allowed`` (B, Lq, Lk) mask.

    Rows without any allowed key return exactly zero. ``value_bias=False``
    removes the biases after the values so all-zero memories contribute
    exactly zero.
    """

    def __init__(self, d, heads, value_bias=True):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d, bias=value_bias)
        self.o = nn.Linear(d, d, bias=value_bias)

    def forward(self, x, mem, allowed=None):
        B, Lq, d = x.shape
        Lk = mem.shape[1]
        if Lk == 0:
            return torch.zeros_like(x)
        h = self.heads
        q = self.q(x).view(B, Lq, h, d // h).transpose(1, 2)
        k = self.k(mem).view(B, Lk, h, d // h).transpose(1, 2)
        v = self.v(mem).view(B, Lk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if allowed is not None:
            a = allowed[:, None]
            scores = scores.masked_fill(~a, -1e9)
            w = torch.softmax(scores, dim=-1) * a.to(scores.dtype)
        else:
            w = torch.softmax(scores, dim=-1)
        out = (w @ v).transpose(1, 2).reshape(B, Lq, d)
        return self.o(out)


class FeedForward(nn.Sequential):
    def __init__(self, d, ff, dropout=0.0):
        super().__init__(nn.Linear(d, ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, ff, heads, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, ff, dropout)

    def forward(self, x, allowed):
        y = self.norm1(x)
        x = x + self.attn(y, y, allowed)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d, ff, heads, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads, value_bias=False)
        self.norm3 = nn.LayerNorm(d)
        self.ff = FeedForward(d, ff, dropout)

    def forward(self, x, self_allowed, mem, cross_allowed):
        y = self.norm1(x)
        x = x + self.self_attn(y, y, self_allowed)
        if mem is not None and mem.shape[1] > 0:
            x = x + self.cross_attn(self.norm2(x), mem, cross_allowed)
        return x + self.ff(self.norm3(x))


class TransformerEncoder(nn.Module):
    def __init__(self, d, ff, heads, layers, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, ff, heads, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, allowed):
        for layer in self.layers:
            x = layer(x, allowed)
        return self.norm(x)


class TransformerDecoder(nn.Module):
    def __init__(self, d, ff, heads, layers, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(d, ff, heads, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, x, self_allowed, mem, cross_allowed):
        for layer in self.layers:
            x = layer(x, self_allowed, mem, cross_allowed)
        return self.norm(x)


# ---------------------------------------------------------------------------
# full model


@dataclass
class Conditioning:
    """Batched context for the denoiser.

    x_input: (B, J, 3, N) noise-free input, zero-velocity padded past frame n.
    others: (B, K, J, 3, N) other persons; others_mask (B, K) marks real ones.
    scene: (B, G, d_obj) object encodings; scene_mask (B, G) marks real ones.
    """

    x_input: torch.Tensor
    others: torch.Tensor
    others_mask: torch.Tensor
    scene: torch.Tensor
    scene_mask: torch.Tensor


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        c = config
        self.config = c
        self.zero_scene = False
        self.zero_others = False
        pose_ch = c.joints * 3
        self.time_embed = FourierTimeEmbedding(c.time_dim, c.time_seed, c.fourier_scale, c.diffusion_steps)
        self.pose_encoder = TemporalEncoder(2 * pose_ch, c.pose_widths, c.pose_kernel, c.time_dim, c.groups)
        self.others_encoder = TemporalEncoder(pose_ch, c.others_widths, c.others_kernel, c.time_dim, c.groups)
        self.scene_proj = nn.Linear(c.d_obj, c.d_scene)
        self.scene_encoder = TransformerEncoder(c.d_scene, c.ff_scene, c.heads_scene, c.layers_scene, c.dropout)
        self.scene_decoder = TransformerDecoder(c.d_scene, c.ff_scene, c.heads_scene, c.layers_scene, c.dropout)
        self.bridge_in = nn.Linear(c.d_scene, c.d_others)
        self.others_tf_encoder = TransformerEncoder(c.d_others, c.ff_others, c.heads_others, c.layers_others, c.dropout)
        self.others_decoder = TransformerDecoder(c.d_others, c.ff_others, c.heads_others, c.layers_others, c.dropout)
        self.bridge_out = nn.Linear(c.d_others, c.d_scene)
        self.decoder = TemporalDecoder(c.d_scene, c.pose_widths, pose_ch, c.pose_kernel, c.time_dim, c.groups)

    # -- pieces -------------------------------------------------------------

    def _pad_time(self, seq):
        """(..., L) -> (..., padded) by repeating the last frame."""
        extra = self.config.padded_frames - seq.shape[-1]
        if extra == 0:
            return seq
        tail = seq[..., -1:].expand(*seq.shape[:-1], extra)
        return torch.cat([seq, tail], dim=-1)

    def encode_primary(self, x_t, x_input, temb):
        """Returns (skips, h_x) with h_x shaped (B, N_b, d_scene)."""
        B = x_t.shape[0]
        inp = torch.cat([x_input.reshape(B, -1, x_input.shape[-1]), x_t.reshape(B, -1, x_t.shape[-1])], dim=1)
        skips, h = self.pose_encoder(self._pad_time(inp), temb)
        return skips, h.transpose(1, 2)

    def encode_others(self, others, temb):
        """Shared-weight encoding of each other person; (B, K*N_b, d_others)."""
        B, K = others.shape[:2]
        if K == 0:
            return others.new_zeros(B, 0, self.config.d_others)
        seq = self._pad_time(others.reshape(B * K, -1, others.shape[-1]))
        _, h = self.others_encoder(seq, temb.repeat_interleave(K, dim=0))
        h = h.transpose(1, 2).reshape(B, K * h.shape[-1], -1)
        return h

    def aggregate(self, h_x, h_O, others_mask, scene, scene_mask):
        c = self.config
        B, Nb, _ = h_x.shape
        device = h_x.device
        tpos = torch.arange(Nb, device=device)
        causal = (tpos[None, :] <= tpos[:, None])[None].expand(B, Nb, Nb)

        G = scene.shape[1]
        if G > 0:
            tokens = self.scene_proj(scene)
            enc_allowed = scene_mask[:, None, :].expand(B, G, G)
            mem_s = self.scene_encoder(tokens, enc_allowed)
            if self.zero_scene:
                mem_s = torch.zeros_like(mem_s)
            cross_s = scene_mask[:, None, :].expand(B, Nb, G)
        else:
            mem_s, cross_s = None, None
        h = self.scene_decoder(h_x + sinusoidal_encoding(tpos, c.d_scene), causal, mem_s, cross_s)

        g = self.bridge_in(h) + sinusoidal_encoding(tpos, c.d_others)
        Ktok = h_O.shape[1]
        if Ktok > 0:
            K = Ktok // Nb
            ttime = tpos.repeat(K)
            valid = others_mask.repeat_interleave(Nb, dim=1)  # (B, K*Nb)
            if self.zero_others:
                mem_o = h_O.new_zeros(B, Ktok, c.d_others)
            else:
                enc_allowed = (ttime[None, :] <= ttime[:, None])[None] & valid[:, None, :]
                mem_o = self.others_tf_encoder(h_O + sinusoidal_encoding(ttime, c.d_others), enc_allowed)
            cross_o = (ttime[None, :] <= tpos[:, None])[None] & valid[:, None, :]
        else:
            mem_o, cross_o = None, None
        g = self.others_decoder(g, causal, mem_o, cross_o)
        return self.bridge_out(g)

    def decode(self, h_prime, skips, temb):
        B = h_prime.shape[0]
        out = self.decoder(h_prime.transpose(1, 2), skips, temb)
        out = out[..., : self.config.frames]
        return out.reshape(B, self.config.joints, 3, self.config.frames)

    def forward(self, x_t, t, cond: Conditioning):
        temb = self.time_embed(t)
        skips, h_x = self.encode_primary(x_t, cond.x_input, temb)
        if self.zero_others or cond.others.shape[1] == 0:
            K = cond.others.shape[1]
            h_O = h_x.new_zeros(x_t.shape[0], K * h_x.shape[1], self.config.d_others)
        else:
            h_O = self.encode_others(cond.others, temb)
        h_prime = self.aggregate(h_x, h_O, cond.others_mask, cond.scene, cond.scene_mask)
        return self.decode(h_prime, skips, temb)


def ablate(model: Denoiser, zero_scene: bool = False, zero_others: bool = False) -> Denoiser:
    """Shallow copy sharing all weights whose scene and/or others memories are
    replaced by zeros."""
    out = copy.copy(model)
    out.zero_scene = bool(zero_scene)
    out.zero_others = bool(zero_others)
    return out


def count_params(params) -> int:
    """Number of learnable scalars in a module, a mapping or a sequence of arrays."""
    if isinstance(params, nn.Module):
        return sum(p.numel() for p in params.parameters() if p.requires_grad)
    if isinstance(params, dict):
        params = params.values()
    return int(sum(np.asarray(p).size if not torch.is_tensor(p) else p.numel() for p in params))
