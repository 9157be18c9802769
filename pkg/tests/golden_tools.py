"""Independent layout enumerator used to produce the golden files.

This module re-derives context tables and rope layouts from the documented
rules alone (word counting, 4x4 patches, 8x8 space-to-depth, block ordering,
shared timeline) without importing the package's context or layout code, so
the golden files in tests/golden/ are an oracle for the implementation.
Regenerate with: python3 tests/golden_tools.py
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

GOLDEN_DIR = Path(__file__).parent / "golden"

SYSTEM_WORDS = 12  # "You are a helpful assistant aimed at generating an output video caption."
PATCH = 4
VAE = 8
MAX_VLM_FRAMES = 8
N_LEARNABLE = 16

GOLDEN_SPECS = [
    dict(name="t2i_small", task="t2i", text="a red circle", images=[], video=None,
         target=(1, 16, 16)),
    dict(name="t2i_large", task="t2i", text="two shapes resting on a black background",
         images=[], video=None, target=(1, 32, 32)),
    dict(name="t2v_short", task="t2v", text="red circle moves right", images=[],
         video=None, target=(3, 16, 16)),
    dict(name="t2v_rect", task="t2v", text="a gray square drifts down slowly",
         images=[], video=None, target=(2, 24, 24)),
    dict(name="i2v_basic", task="i2v", text="animate Image 1: red circle moves right",
         images=[(16, 16)], video=None, target=(3, 16, 16)),
    dict(name="i2v_rect", task="i2v", text="animate Image 1: blue square moves left",
         images=[(24, 24)], video=None, target=(2, 24, 24)),
    dict(name="edit_image_recolor", task="edit_image",
         text="change the red circle to blue", images=[(16, 16)], video=None,
         target=(1, 16, 16)),
    dict(name="edit_image_tiny", task="edit_image", text="remove the gray square",
         images=[(8, 8)], video=None, target=(1, 8, 8)),
    dict(name="edit_video_basic", task="edit_video", text="add a green triangle",
         images=[], video=(2, 16, 16), target=(2, 16, 16)),
    dict(name="edit_video_tiny", task="edit_video",
         text="change the white circle to cyan", images=[], video=(3, 8, 8),
         target=(3, 8, 8)),
    dict(name="ref2v_one", task="ref2v",
         text="a video showing the subject of Image 1 in motion",
         images=[(16, 16)], video=None, target=(2, 16, 16)),
    dict(name="ref2v_two", task="ref2v",
         text="a video showing the subjects of Image 1 and Image 2 in motion",
         images=[(16, 16), (16, 16)], video=None, target=(2, 16, 16)),
    dict(name="ref2v_three", task="ref2v",
         text="a video showing the subjects of Image 1 and Image 2 and Image 3 in motion",
         images=[(8, 8), (8, 8), (8, 8)], video=None, target=(2, 8, 8)),
    dict(name="recon_basic", task="recon_proxy", text="reconstruct the input image",
         images=[(16, 16)], video=None, target=(1, 16, 16), latent_refs=False),
    dict(name="recon_large", task="recon_proxy", text="reconstruct the input image",
         images=[(32, 32)], video=None, target=(1, 32, 32), latent_refs=False),
    dict(name="select_two", task="select_proxy", text="reconstruct Image 1",
         images=[(8, 8), (8, 8)], video=None, target=(1, 8, 8)),
    dict(name="select_three", task="select_proxy", text="reconstruct Image 3",
         images=[(8, 8), (8, 8), (8, 8)], video=None, target=(1, 8, 8)),
    dict(name="select_mixed", task="select_proxy", text="reconstruct Image 1",
         images=[(16, 16), (8, 8), (8, 8)], video=None, target=(1, 16, 16)),
    dict(name="edit_video_mixed", task="edit_video",
         text="blend Image 1 into the video", images=[(16, 16)],
         video=(2, 16, 16), target=(2, 16, 16)),
    dict(name="edit_video_gap", task="edit_video",
         text="use Image 1 and Image 2 while editing", images=[(8, 8), (8, 8)],
         video=(3, 8, 8), target=(3, 8, 8), gap=1),
]


def _words(text: str) -> int:
    return len(re.findall(r"[a-z0-9]+", text.lower()))


def oracle_context_rows(g: dict) -> list:
    rows = [("SYSTEM", SYSTEM_WORDS, "-")]
    for i, (h, w) in enumerate(g["images"]):
        rows.append(("VISION_START", 1, str(i)))
        rows.append(("IMAGE_TOKENS", (h // PATCH) * (w // PATCH), str(i)))
        rows.append(("VISION_END", 1, str(i)))
    if g["video"] is not None:
        f, h, w = g["video"]
        rows.append(("VISION_START", 1, "0"))
        rows.append(
            ("VIDEO_TOKENS", min(f, MAX_VLM_FRAMES) * (h // PATCH) * (w // PATCH), "0")
        )
        rows.append(("VISION_END", 1, "0"))
    n_text = _words(g["text"])
    if n_text:
        rows.append(("TEXT", n_text, "-"))
    rows.append(("LEARNABLE", g.get("n_learnable", N_LEARNABLE), "-"))
    return rows


def oracle_context_text(g: dict) -> str:
    rows = oracle_context_rows(g)
    lines = ["# context", "idx\tkind\tlen\tsource"]
    for i, (kind, n, src) in enumerate(rows):
        lines.append(f"{i}\t{kind}\t{n}\t{src}")
    lines.append(f"total\t{sum(n for _, n, _ in rows)}")
    return "\n".join(lines) + "\n"


def oracle_blocks(g: dict) -> list:
    """(kind, frames, grid_h, grid_w, source) in layout order."""
    blocks = []
    if g.get("latent_refs", True):
        for i, (h, w) in enumerate(g["images"]):
            blocks.append(("REF_IMAGE", 1, h // VAE, w // VAE, str(i)))
        if g["video"] is not None:
            f, h, w = g["video"]
            blocks.append(("REF_VIDEO", f, h // VAE, w // VAE, "0"))
    f, h, w = g["target"]
    blocks.append(("TARGET", f, h // VAE, w // VAE, "-"))
    return blocks


def oracle_layout_text(g: dict) -> str:
    blocks = oracle_blocks(g)
    gap = g.get("gap", 0)
    lines = ["# latents", "idx\tkind\tt\ty\tx\tblock\tsource"]
    idx = 0
    t_start = 0
    target_slice = (0, 0)
    for bi, (kind, f, gh, gw, src) in enumerate(blocks):
        if kind == "TARGET":
            t_start += gap
        t_end = t_start + f - 1
        lines.append(f"{idx}\tBOUNDARY_START\t{t_start}\t0\t0\t{bi}\t{src}")
        idx += 1
        if kind == "TARGET":
            target_slice = (idx, idx + f * gh * gw)
        for fi in range(f):
            for y in range(gh):
                for x in range(gw):
                    lines.append(f"{idx}\tLATENT\t{t_start + fi}\t{y}\t{x}\t{bi}\t{src}")
                    idx += 1
        lines.append(f"{idx}\tBOUNDARY_END\t{t_end}\t0\t0\t{bi}\t{src}")
        idx += 1
        t_start = t_end + 1
    lines.append(f"total\t{idx}\ttarget_slice\t{target_slice[0]}:{target_slice[1]}")
    return "\n".join(lines) + "\n"


def golden_text(g: dict) -> str:
    return oracle_context_text(g) + oracle_layout_text(g)


def package_text(g: dict) -> str:
    """The implementation's dump for the same spec (compared against goldens)."""
    from unigen.context import ConditioningSpec, Task, assemble_context, format_context
    from unigen.latents import format_layout
    from unigen.pipeline import layout_for_spec

    spec = ConditioningSpec(
        task=Task(g["task"]),
        text=g["text"],
        images=tuple(np.zeros((h, w, 3), dtype=np.float32) for h, w in g["images"]),
        video=None
        if g["video"] is None
        else np.zeros((*g["video"], 3), dtype=np.float32),
        target_shape=g["target"],
        latent_refs=g.get("latent_refs", True),
    )
    ctx = assemble_context(spec, g.get("n_learnable", N_LEARNABLE))
    layout = layout_for_spec(spec, gap=g.get("gap", 0))
    return format_context(ctx) + format_layout(layout)


def write_goldens():
    GOLDEN_DIR.mkdir(exist_ok=True)
    for g in GOLDEN_SPECS:
        (GOLDEN_DIR / f"{g['name']}.txt").write_text(golden_text(g))
    print(f"wrote {len(GOLDEN_SPECS)} golden files to {GOLDEN_DIR}")


if __name__ == "__main__":
    write_goldens()
