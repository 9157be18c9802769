"""Dynamic resolution bucketing: near-equal pixel area at preserved aspect.

Buckets are (h, w) pairs divisible by the VAE spatial factor whose area stays
within a tolerance of the target area. Samples land in the bucket with the
nearest aspect ratio, so every sample in a bucket shares one post-rescale
shape and one per-step token count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

DEFAULT_RATIOS = (9 / 16, 3 / 4, 1.0, 4 / 3, 16 / 9)
DEFAULT_TOL = 0.125


@dataclass(frozen=True)
class Bucket:
    height: int
    width: int
    frames: int = 1

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def ratio(self) -> float:
        return self.width / self.height

    @property
    def tokens(self) -> int:
        return self.frames * self.area


def _candidates(target_area: int, factor: int, tol: float):
    hi = int(target_area * (1 + tol))
    i = 1
    while factor * factor * i <= hi:
        h = factor * i
        for j in range(1, hi // (factor * h) + 1):
            w = factor * j
            if abs(h * w - target_area) <= tol * target_area:
                yield h, w
        i += 1


def build_buckets(
    target_area: int,
    ratios=DEFAULT_RATIOS,
    factor: int = 8,
    tol: float = DEFAULT_TOL,
    frames: int = 1,
) -> list:
    """One bucket per requested ratio.

    For each ratio, among factor-divisible shapes within the area tolerance,
    pick the shape with the closest aspect ratio, breaking ties by area
    deviation and then by smaller height. Sorted by ratio.
    """
    if target_area <= 0:
        raise ValueError("target_area must be positive")
    cands = list(_candidates(target_area, factor, tol))
    if not cands:
        raise ValueError(
            f"no {factor}-divisible shape lies within {tol:.0%} of area {target_area}"
        )
    out = []
    for r in sorted(ratios):
        best = min(
            cands,
            key=lambda hw: (abs(hw[1] / hw[0] - r), abs(hw[0] * hw[1] - target_area), hw[0]),
        )
        out.append(Bucket(height=best[0], width=best[1], frames=frames))
    return out


def assign_bucket(sample_w: int, sample_h: int, table) -> int:
    """Index of the bucket with the nearest aspect ratio (ties: smaller index)."""
    if not table:
        raise ValueError("bucket table is empty")
    r = sample_w / sample_h
    dists = [abs(b.ratio - r) for b in table]
    return int(np.argmin(dists))


def adjust_frames(bucket: Bucket, max_tokens: int, factor: int = 8) -> Bucket:
    """Reduce frames until latent token count fits the per-task budget."""
    per_frame = (bucket.height // factor) * (bucket.width // factor)
    frames = min(bucket.frames, max(1, max_tokens // per_frame))
    return Bucket(bucket.height, bucket.width, frames)


def rescale(sample: np.ndarray, bucket: Bucket) -> np.ndarray:
    """Aspect-preserving uniform scale, then center crop to the bucket shape.

    Identity (content untouched) when the sample already has the bucket shape.
    """
    single = sample.ndim == 3
    frames = sample[None] if single else sample
    f, h, w, _ = frames.shape
    if (h, w) == (bucket.height, bucket.width):
        return sample.copy()
    scale = max(bucket.height / h, bucket.width / w)
    nh, nw = max(bucket.height, round(h * scale)), max(bucket.width, round(w * scale))
    out = np.empty((f, bucket.height, bucket.width, 3), dtype=np.float32)
    top = (nh - bucket.height) // 2
    left = (nw - bucket.width) // 2
    for i in range(f):
        img = Image.fromarray(
            np.clip(np.rint(frames[i] * 255.0), 0, 255).astype(np.uint8)
        ).resize((nw, nh), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        out[i] = arr[top : top + bucket.height, left : left + bucket.width]
    return out[0] if single else out


def format_bucket_table(table) -> str:
    lines = ["ratio\th\tw\tarea\tframes"]
    for b in table:
        lines.append(f"{b.ratio:.4f}\t{b.height}\t{b.width}\t{b.area}\t{b.frames}")
    return "\n".join(lines) + "\n"
