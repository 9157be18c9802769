"""Condition encoding: a tiny causal vision-language encoder stand-in.

The encoder embeds the interleaved context (system words, patchified visual
payloads between vision start/end markers, user text, trailing learnable query
tokens), runs a causal pre-norm transformer, and exposes the penultimate-layer
hidden states. A two-layer connector projects those states into the width the
denoiser conditions on. The transformer is frozen from random initialization;
only the learnable tokens and the connector train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import vocab as vocab_mod
from .context import (
    ConditioningSpec,
    InterleavedContext,
    Segment,
    SegmentKind,
    assemble_context,
)
from .vocab import DEFAULT_VOCAB, HashVocab


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 3
    width: int = 64
    heads: int = 4
    n_learnable: int = 16
    frozen: bool = True
    patch_size: int = 4
    max_video_frames: int = 8
    vocab_buckets: int = 256
    max_positions: int = 2048
    d_cond: int = 96

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.depth < 2:
            raise ValueError("need at least two blocks to expose a penultimate layer")


def subsample_indices(n_frames: int, max_frames: int = 8) -> list[int]:
    """Uniform-stride frame picks, first frame always included."""
    k = min(n_frames, max_frames)
    return [(j * n_frames) // k for j in range(k)]


def subsample_condition_video(video: np.ndarray, max_frames: int = 8) -> np.ndarray:
    return video[subsample_indices(video.shape[0], max_frames)]


def patchify(pixels: torch.Tensor, p: int) -> torch.Tensor:
    """(f, h, w, 3) -> (f * h/p * w/p, p*p*3) rows, frame-major then row-major."""
    if pixels.ndim == 3:
        pixels = pixels[None]
    f, h, w, c = pixels.shape
    if h % p or w % p:
        raise ShapeMismatch(f"{h}x{w} not divisible by patch size {p}")
    x = pixels.reshape(f, h // p, p, w // p, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(f * (h // p) * (w // p), p * p * c)


class CausalBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape[-2], x.shape[-1]
        hd = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q = q.view(*x.shape[:-1], self.heads, hd).transpose(-3, -2)
        k = k.view(*x.shape[:-1], self.heads, hd).transpose(-3, -2)
        v = v.view(*x.shape[:-1], self.heads, hd).transpose(-3, -2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        mask = torch.triu(
            torch.full((n, n), float("-inf"), dtype=x.dtype, device=x.device), 1
        )
        attn = torch.softmax(scores + mask, dim=-1)
        out = (attn @ v).transpose(-3, -2).reshape(*x.shape)
        x = x + self.proj(out)
        return x + self.mlp(self.norm2(x))


class ConditionEncoder(nn.Module):
    """Frozen causal transformer over the interleaved context.

    Owns the learnable query tokens. encode() returns the penultimate layer:
    hidden states after depth-1 blocks (the final block's parameters exist but
    its output is never consumed, mirroring penultimate-layer feature use).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = HashVocab(cfg.vocab_buckets)
        self.token_embed = nn.Embedding(self.vocab.size, cfg.width)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_positions, cfg.width) * 0.02)
        self.patch_embed = nn.Linear(cfg.patch_size * cfg.patch_size * 3, cfg.width)
        self.learnable_tokens = nn.Parameter(torch.randn(cfg.n_learnable, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(
            CausalBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )
        if cfg.frozen:
            self.freeze_backbone()

    def freeze_backbone(self):
        """Everything except the learnable query tokens stays fixed."""
        for name, p in self.named_parameters():
            if name != "learnable_tokens":
                p.requires_grad_(False)

    def _special(self, token_id: int) -> torch.Tensor:
        return self.token_embed.weight[token_id]

    def embed_context(
        self, ctx: InterleavedContext, spec: ConditioningSpec
    ) -> torch.Tensor:
        """Row-for-row input embeddings aligned to the context segments."""
        cfg = self.cfg
        dev = self.token_embed.weight.device
        dt = self.token_embed.weight.dtype
        rows = []
        from .context import SYSTEM_SENTENCE

        for seg in ctx.segments:
            if seg.kind is SegmentKind.SYSTEM:
                ids = torch.tensor(self.vocab.encode(SYSTEM_SENTENCE), device=dev)
                rows.append(self.token_embed(ids))
            elif seg.kind is SegmentKind.TEXT:
                ids = torch.tensor(self.vocab.encode(spec.text), device=dev)
                rows.append(self.token_embed(ids))
            elif seg.kind is SegmentKind.VISION_START:
                rows.append(self._special(vocab_mod.VISION_START)[None])
            elif seg.kind is SegmentKind.VISION_END:
                rows.append(self._special(vocab_mod.VISION_END)[None])
            elif seg.kind is SegmentKind.IMAGE_TOKENS:
                px = torch.as_tensor(spec.images[seg.source_index], dtype=dt, device=dev)
                rows.append(self.patch_embed(patchify(px, cfg.patch_size)))
            elif seg.kind is SegmentKind.VIDEO_TOKENS:
                sub = subsample_condition_video(spec.video, cfg.max_video_frames)
                px = torch.as_tensor(sub, dtype=dt, device=dev)
                rows.append(self.patch_embed(patchify(px, cfg.patch_size)))
            elif seg.kind is SegmentKind.LEARNABLE:
                rows.append(self.learnable_tokens.to(dt))
        emb = torch.cat([r for r in rows if r.shape[0] > 0], dim=0) if rows else None
        if emb is None or emb.shape[0] != ctx.total_len:
            got = 0 if emb is None else emb.shape[0]
            raise ShapeMismatch(f"embedded {got} rows, context declares {ctx.total_len}")
        return emb

    def encode_from_embeddings(self, emb: torch.Tensor) -> torch.Tensor:
        n = emb.shape[-2]
        if n > self.cfg.max_positions:
            raise ShapeMismatch(f"context of {n} tokens exceeds {self.cfg.max_positions}")
        h = emb + self.pos_embed[:n].to(emb.dtype)
        for blk in self.blocks[: self.cfg.depth - 1]:
            h = blk(h)
        return h

    def encode(self, ctx: InterleavedContext, spec: ConditioningSpec) -> torch.Tensor:
        if ctx.segments[-1].payload_len != self.cfg.n_learnable:
            raise ShapeMismatch(
                f"context carries {ctx.segments[-1].payload_len} learnable slots, "
                f"encoder owns {self.cfg.n_learnable}"
            )
        return self.encode_from_embeddings(self.embed_context(ctx, spec))

    def assemble(self, spec: ConditioningSpec) -> InterleavedContext:
        # tolerate identifiers left dangling by condition dropout
        return assemble_context(
            spec,
            self.cfg.n_learnable,
            vocab=self.vocab,
            patch_size=self.cfg.patch_size,
            max_video_frames=self.cfg.max_video_frames,
            check_identifiers=False,
        )


class Connector(nn.Module):
    """Two affine layers with one nonlinearity between, hidden -> condition width."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.fc2 = nn.Linear(d_out, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.silu(self.fc1(x)))


@dataclass
class ConditionSequence:
    """Projected context rows plus the boundary embeddings latent blocks reuse.

    start_embed/end_embed are the canonical pair (the vision start/end token
    embeddings pushed through the connector); visual_pairs holds the
    per-occurrence (start_row, end_row) projections, in visual-segment order.
    """

    tokens: torch.Tensor  # [L, d_cond]
    start_embed: torch.Tensor
    end_embed: torch.Tensor
    segments: tuple
    visual_pairs: list


def condition_sequence(
    encoder: ConditionEncoder,
    connector: Connector,
    ctx: InterleavedContext,
    spec: ConditioningSpec,
) -> ConditionSequence:
    hidden = encoder.encode(ctx, spec)
    tokens = connector(hidden)
    canon = connector(
        torch.stack(
            [encoder._special(vocab_mod.VISION_START), encoder._special(vocab_mod.VISION_END)]
        ).to(hidden.dtype)
    )
    pairs = []
    for i, seg in enumerate(ctx.segments):
        if seg.kind in (SegmentKind.IMAGE_TOKENS, SegmentKind.VIDEO_TOKENS):
            start_row = ctx.rows_of(i - 1)[0]
            end_row = ctx.rows_of(i + 1)[0]
            pairs.append((tokens[start_row], tokens[end_row]))
    return ConditionSequence(
        tokens=tokens,
        start_embed=canon[0],
        end_embed=canon[1],
        segments=ctx.segments,
        visual_pairs=pairs,
    )


class NativeTextEncoder(nn.Module):
    """Bag-of-embeddings caption encoder for the pretrained-base stand-in.

    Every caption ends with an end-of-text token so even an empty caption
    yields one row. Owns its own boundary start/end vectors since no vision
    encoder exists at this stage.
    """

    def __init__(self, d_cond: int = 96, vocab_buckets: int = 256):
        super().__init__()
        self.vocab = HashVocab(vocab_buckets)
        self.embed = nn.Embedding(self.vocab.size, d_cond)
        self.boundary_start = nn.Parameter(torch.randn(d_cond) * 0.02)
        self.boundary_end = nn.Parameter(torch.randn(d_cond) * 0.02)

    def encode(self, text: str) -> torch.Tensor:
        ids = self.vocab.encode(text or "") + [vocab_mod.EOT]
        dev = self.embed.weight.device
        return self.embed(torch.tensor(ids, device=dev))
