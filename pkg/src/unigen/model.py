"""Token-based diffusion transformer over condition tokens and latent blocks.

One joint full-attention sequence: projected condition rows followed by the
latent layout (boundary markers and latent tokens). Latent queries/keys are
rotated by 3-axis RoPE from their (t, y, x) coordinates; condition rows carry
no positional rotation. Timestep modulation (adaLN) applies to the latent
stream only, and the velocity is read off the target slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .latents import BlockKind, LatentLayout


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 6
    d_model: int = 240
    heads: int = 4
    d_cond: int = 96
    c_lat: int = 192
    rope_base: float = 10000.0
    mlp_ratio: float = 4.0
    zero_init: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 6:
            raise ValueError("head dim must be divisible by 6 for the 3-axis rope split")
        # widths below c_lat rank-limit the latent input projection and cap
        # reconstruction fidelity; the default stays above it on purpose

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class DenoiseInput:
    cond: torch.Tensor  # [B, Lc, d_cond]
    layout: LatentLayout  # blocks carry [B, f, h, w, c_lat]; target noised at t
    t: Union[float, torch.Tensor]


def _slice_input(din: DenoiseInput, b: int) -> DenoiseInput:
    """One example's view of a batched DenoiseInput."""
    import dataclasses as _dc

    blocks = [
        _dc.replace(blk, latent=blk.latent[b] if blk.latent.ndim == 5 else blk.latent)
        for blk in din.layout.blocks
    ]
    layout = LatentLayout(
        blocks=blocks,
        entries=din.layout.entries,
        target_slice=din.layout.target_slice,
        boundary_tokens=din.layout.boundary_tokens,
        coords=din.layout.coords,
    )
    t = din.t
    if torch.is_tensor(t) and t.ndim > 0:
        t = t[b]
    return DenoiseInput(cond=din.cond[b : b + 1], layout=layout, t=t)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of t in [0,1], scaled onto the usual 0..1000 range."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / half
    )
    args = t[..., None] * 1000.0 * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def rope_angles(coords: torch.Tensor, head_dim: int, base: float) -> tuple:
    """cos/sin tables [n, head_dim/2] from integer (t, y, x) coordinates.

    The head dim splits into three equal even bands, one per axis; zero
    coordinates give the identity rotation.
    """
    band = head_dim // 3
    inv = base ** (
        -torch.arange(0, band, 2, dtype=coords.dtype, device=coords.device) / band
    )
    parts = [coords[:, a : a + 1] * inv[None] for a in range(3)]
    ang = torch.cat(parts, dim=-1)
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs of the last dim. x: [..., n, head_dim]."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out1 = x1 * cos - x2 * sin
    out2 = x1 * sin + x2 * cos
    return torch.stack([out1, out2], dim=-1).flatten(-2)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class JointBlock(nn.Module):
    """Two-modality block: separate weights per stream, one joint attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.heads
        self.norm1_c = nn.LayerNorm(d, elementwise_affine=False)
        self.norm1_x = nn.LayerNorm(d, elementwise_affine=False)
        self.qkv_c = nn.Linear(d, 3 * d)
        self.qkv_x = nn.Linear(d, 3 * d)
        self.proj_c = nn.Linear(d, d)
        self.proj_x = nn.Linear(d, d)
        self.norm2_c = nn.LayerNorm(d, elementwise_affine=False)
        self.norm2_x = nn.LayerNorm(d, elementwise_affine=False)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp_c = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))
        self.mlp_x = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))
        self.ada = nn.Linear(d, 6 * d)
        if cfg.zero_init:
            nn.init.zeros_(self.ada.weight)
            nn.init.zeros_(self.ada.bias)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, d = t.shape
        return t.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, c, x, t_emb, cos, sin):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(
            torch.nn.functional.silu(t_emb)
        ).chunk(6, dim=-1)

        cn = self.norm1_c(c)
        xn = modulate(self.norm1_x(x), shift1, scale1)
        qc, kc, vc = (self._heads(t) for t in self.qkv_c(cn).chunk(3, dim=-1))
        qx, kx, vx = (self._heads(t) for t in self.qkv_x(xn).chunk(3, dim=-1))
        qx = apply_rope(qx, cos, sin)
        kx = apply_rope(kx, cos, sin)

        q = torch.cat([qc, qx], dim=2)
        k = torch.cat([kc, kx], dim=2)
        v = torch.cat([vc, vx], dim=2)
        hd = q.shape[-1]
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(c.shape[0], -1, c.shape[-1])
        ac, ax = attn[:, : c.shape[1]], attn[:, c.shape[1] :]

        c = c + self.proj_c(ac)
        x = x + gate1[:, None, :] * self.proj_x(ax)
        c = c + self.mlp_c(self.norm2_c(c))
        x = x + gate2[:, None, :] * self.mlp_x(
            modulate(self.norm2_x(x), shift2, scale2)
        )
        return c, x


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.cond_in = nn.Linear(cfg.d_cond, d)
        self.lat_in = nn.Linear(cfg.c_lat, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(JointBlock(cfg) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False)
        self.ada_out = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.c_lat)
        if cfg.zero_init:
            nn.init.zeros_(self.ada_out.weight)
            nn.init.zeros_(self.ada_out.bias)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def timestep_embed(self, t, batch: int, dtype, device) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor(float(t), dtype=dtype, device=device)
        t = t.to(dtype=dtype, device=device)
        if t.ndim == 0:
            t = t[None].expand(batch)
        return self.t_mlp(timestep_embedding(t, self.cfg.d_model))

    def _latent_rows(self, layout: LatentLayout, batch: int, dtype, device):
        """Interleave boundary markers and projected latent tokens per block."""
        rows = []
        for bi, block in enumerate(layout.blocks):
            lat = block.latent.to(dtype=dtype, device=device)
            if lat.ndim == 4:
                lat = lat[None]
            b, f, h, w, c = lat.shape
            tok = self.lat_in(lat.reshape(b, f * h * w, c))
            if tok.shape[0] != batch:
                tok = tok.expand(batch, -1, -1)
            if layout.boundary_tokens is not None:
                bs, be = layout.boundary_tokens[bi]
                bs = bs.to(dtype=dtype, device=device).reshape(1, 1, -1).expand(batch, 1, -1)
                be = be.to(dtype=dtype, device=device).reshape(1, 1, -1).expand(batch, 1, -1)
                rows.extend([bs, tok, be])
            else:
                rows.append(tok)
        return torch.cat(rows, dim=1)

    def forward(self, din: DenoiseInput) -> torch.Tensor:
        """Velocity over the target slice, shaped like the target block latent.

        Batched inputs are evaluated one example at a time so that duplicating
        an example duplicates its output bitwise.
        """
        cfg = self.cfg
        layout = din.layout
        for block in layout.blocks:
            want_clean = block.kind is not BlockKind.TARGET
            if block.clean != want_clean:
                raise ValueError("reference blocks must be clean and the target noised")
        cond = din.cond
        if cond.ndim == 2:
            cond = cond[None]
        if cond.shape[-1] != cfg.d_cond:
            raise ValueError(
                f"condition width {cond.shape[-1]} != configured {cfg.d_cond}"
            )
        if cond.shape[0] > 1:
            return torch.cat([self.forward(_slice_input(din, b)) for b in range(cond.shape[0])])
        batch = cond.shape[0]
        dtype = self.cond_in.weight.dtype
        device = self.cond_in.weight.device
        cond = cond.to(dtype=dtype, device=device)

        c = self.cond_in(cond)
        x = self._latent_rows(layout, batch, dtype, device)
        if layout.coords is None:
            raise ValueError("layout has no rope coordinates; run assign_rope first")
        coords = torch.as_tensor(layout.coords, dtype=dtype, device=device)
        cos, sin = rope_angles(coords, cfg.head_dim, cfg.rope_base)
        t_emb = self.timestep_embed(din.t, batch, dtype, device)

        for blk in self.blocks:
            c, x = blk(c, x, t_emb, cos, sin)

        shift, scale = self.ada_out(torch.nn.functional.silu(t_emb)).chunk(2, dim=-1)
        v = self.head(modulate(self.norm_out(x), shift, scale))
        tgt = layout.blocks[-1]
        f, h, w, ch = tgt.shape
        v = v[:, layout.target_slice].reshape(batch, f, h, w, ch)
        return v
