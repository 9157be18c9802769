"""VAE latents, the reference/target latent layout, and 3D RoPE coordinates.

The default codec is an exact space-to-depth rearrangement with spatial factor
8 (no temporal compression): decode(encode(x)) == x bitwise. Reference latents
and the noisy target are arranged into one sequence, each block wrapped by a
start/end boundary token projected from the condition encoder, and every token
gets a (t, y, x) coordinate on a shared timeline with references first and the
target last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

SPATIAL_FACTOR = 8


class ShapeError(ValueError):
    pass


class MultipleTargets(ValueError):
    pass


class TargetNotLast(ValueError):
    pass


def vae_encode(pixels: np.ndarray) -> np.ndarray:
    """(f, h, w, 3) pixels -> (f, h/8, w/8, 192) latent, pure rearrangement."""
    if pixels.ndim == 3:
        pixels = pixels[None]
    f, h, w, c = pixels.shape
    s = SPATIAL_FACTOR
    if h % s or w % s:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {s}")
    lat = pixels.reshape(f, h // s, s, w // s, s, c)
    lat = lat.transpose(0, 1, 3, 2, 4, 5)
    return lat.reshape(f, h // s, w // s, s * s * c)


def vae_decode(latent: np.ndarray) -> np.ndarray:
    """Exact inverse of vae_encode."""
    f, gh, gw, d = latent.shape
    s = SPATIAL_FACTOR
    if d % (s * s):
        raise ShapeError(f"latent channel dim {d} is not {s}x{s}x c")
    c = d // (s * s)
    px = latent.reshape(f, gh, gw, s, s, c)
    px = px.transpose(0, 1, 3, 2, 4, 5)
    return px.reshape(f, gh * s, gw * s, c)


def latent_channels(pixel_channels: int = 3) -> int:
    return SPATIAL_FACTOR * SPATIAL_FACTOR * pixel_channels


def normalize_latent(lat):
    """Map [0,1] pixel-space latents to the centered range diffusion runs in."""
    return lat * 2.0 - 1.0


def denormalize_latent(z):
    return (z + 1.0) / 2.0


class BlockKind(str, Enum):
    REF_IMAGE = "REF_IMAGE"
    REF_VIDEO = "REF_VIDEO"
    TARGET = "TARGET"


@dataclass
class LatentBlock:
    kind: BlockKind
    latent: torch.Tensor  # [..., f, h, w, c]; may carry a leading batch dim
    clean: bool = True
    source_index: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return tuple(self.latent.shape[-4:])

    @property
    def n_tokens(self) -> int:
        f, h, w, _ = self.shape
        return f * h * w

    def validate(self):
        if self.kind is BlockKind.REF_IMAGE and self.shape[0] != 1:
            raise ShapeError("REF_IMAGE block must have a single frame")


class EntryKind(str, Enum):
    BOUNDARY_START = "BOUNDARY_START"
    LATENT = "LATENT"
    BOUNDARY_END = "BOUNDARY_END"


@dataclass(frozen=True)
class LayoutEntry:
    kind: EntryKind
    block_index: int


@dataclass
class LatentLayout:
    blocks: list
    entries: list
    target_slice: slice
    boundary_tokens: Optional[list] = None  # [(start, end)] per block, model width
    coords: Optional[np.ndarray] = None  # [n_entries, 3] after assign_rope

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    def block_entry_ranges(self) -> list[range]:
        """Entry-index range per block, in block order."""
        out, pos = [], 0
        for b in self.blocks:
            extra = 0 if self.boundary_tokens is None else 2
            out.append(range(pos, pos + b.n_tokens + extra))
            pos += b.n_tokens + extra
        return out


def layout_latents(
    blocks: Sequence[LatentBlock], boundaries: Optional[Sequence[tuple]]
) -> LatentLayout:
    """Arrange reference blocks then the target into one entry sequence.

    boundaries is a per-block (start, end) token pair in the denoiser width,
    or None for the boundary-free ablation arm. target_slice indexes the
    target's latent tokens only (its boundary markers excluded).
    """
    targets = [i for i, b in enumerate(blocks) if b.kind is BlockKind.TARGET]
    if len(targets) != 1:
        raise MultipleTargets(f"expected exactly one TARGET block, got {len(targets)}")
    if targets[0] != len(blocks) - 1:
        raise TargetNotLast("TARGET block must come last")
    if boundaries is not None and len(boundaries) != len(blocks):
        raise ShapeError("one boundary pair required per block")
    for b in blocks:
        b.validate()

    entries: list[LayoutEntry] = []
    target_slice = slice(0, 0)
    for bi, b in enumerate(blocks):
        if boundaries is not None:
            entries.append(LayoutEntry(EntryKind.BOUNDARY_START, bi))
        start = len(entries)
        entries.extend(LayoutEntry(EntryKind.LATENT, bi) for _ in range(b.n_tokens))
        if b.kind is BlockKind.TARGET:
            target_slice = slice(start, len(entries))
        if boundaries is not None:
            entries.append(LayoutEntry(EntryKind.BOUNDARY_END, bi))
    return LatentLayout(
        blocks=list(blocks),
        entries=entries,
        target_slice=target_slice,
        boundary_tokens=list(boundaries) if boundaries is not None else None,
    )


def assign_rope(layout: LatentLayout, gap: int = 0) -> np.ndarray:
    """Assign (t, y, x) per entry on the shared timeline.

    Reference blocks occupy consecutive temporal slots (one per frame); the
    target starts after an optional gap. Boundary markers take their block's
    first/last temporal slot at spatial (0, 0).
    """
    coords = np.zeros((layout.n_entries, 3), dtype=np.int64)
    t_start = 0
    pos = 0
    for b in layout.blocks:
        f, h, w, _ = b.shape
        if b.kind is BlockKind.TARGET:
            t_start += gap
        t_end = t_start + f - 1
        if layout.boundary_tokens is not None:
            coords[pos] = (t_start, 0, 0)
            pos += 1
        for fi in range(f):
            for y in range(h):
                for x in range(w):
                    coords[pos] = (t_start + fi, y, x)
                    pos += 1
        if layout.boundary_tokens is not None:
            coords[pos] = (t_end, 0, 0)
            pos += 1
        t_start = t_end + 1
    layout.coords = coords
    return coords


class BoundaryProjector(nn.Module):
    """Two-layer MLP lifting vision start/end embeddings to the denoiser width."""

    def __init__(self, d_cond: int, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(d_cond, d_model)
        self.fc2 = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.silu(self.fc1(x)))


def format_layout(layout: LatentLayout) -> str:
    """Plain-text dump (entry kind, rope coords, block, source) for golden files."""
    if layout.coords is None:
        raise ValueError("assign_rope must run before formatting")
    lines = ["# latents", "idx\tkind\tt\ty\tx\tblock\tsource"]
    for i, e in enumerate(layout.entries):
        b = layout.blocks[e.block_index]
        src = "-" if b.source_index is None else str(b.source_index)
        t, y, x = layout.coords[i]
        lines.append(f"{i}\t{e.kind.value}\t{t}\t{y}\t{x}\t{e.block_index}\t{src}")
    ts = layout.target_slice
    lines.append(f"total\t{layout.n_entries}\ttarget_slice\t{ts.start}:{ts.stop}")
    return "\n".join(lines) + "\n"
