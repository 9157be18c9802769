"""Conditioning specs and the interleaved prompt context.

A ConditioningSpec is the user-level request (text, reference images, an
optional reference video, a task tag). This module renders it into the chat
prompt string and into an InterleavedContext: the ordered token-segment layout
the condition encoder consumes, with visual payloads wrapped in vision
start/end markers and a run of learnable query tokens appended at the end.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .vocab import DEFAULT_VOCAB, HashVocab


class Task(str, Enum):
    T2I = "t2i"
    T2V = "t2v"
    I2V = "i2v"
    EDIT_IMAGE = "edit_image"
    EDIT_VIDEO = "edit_video"
    REF2V = "ref2v"
    RECON_PROXY = "recon_proxy"
    SELECT_PROXY = "select_proxy"


# Tasks whose output is a single frame.
IMAGE_OUTPUT_TASKS = frozenset(
    {Task.T2I, Task.EDIT_IMAGE, Task.RECON_PROXY, Task.SELECT_PROXY}
)
# Tasks conditioned on text alone.
TEXT_ONLY_TASKS = frozenset({Task.T2I, Task.T2V})

SYSTEM_SENTENCE = (
    "You are a helpful assistant aimed at generating an output video caption."
)

_IMAGE_REF_RE = re.compile(r"\bimage\s+(\d+)", re.IGNORECASE)


class PromptError(ValueError):
    pass


class MissingText(PromptError):
    pass


class IdentifierOutOfRange(PromptError):
    pass


@dataclass(frozen=True, eq=False)
class ConditioningSpec:
    """User-level request.

    text=None means the user supplied no text (an error for every task);
    text="" is the null condition used for classifier-free guidance branches.
    Images are HxWx3 float arrays in [0,1]; video is FxHxWx3. latent_refs=False
    routes reference pixels through the condition encoder only, skipping their
    VAE latent blocks (the reconstruction proxy path).
    """

    task: Task
    text: Optional[str] = None
    images: tuple = ()
    video: Optional[np.ndarray] = None
    target_shape: tuple = (1, 32, 32)
    latent_refs: bool = True

    def has_visuals(self) -> bool:
        return len(self.images) > 0 or self.video is not None

    def replace(self, **kw) -> "ConditioningSpec":
        cur = dict(
            task=self.task,
            text=self.text,
            images=self.images,
            video=self.video,
            target_shape=self.target_shape,
            latent_refs=self.latent_refs,
        )
        cur.update(kw)
        return ConditioningSpec(**cur)


def referenced_image_ids(text: str) -> list[int]:
    return [int(m.group(1)) for m in _IMAGE_REF_RE.finditer(text)]


def validate_spec(spec: ConditioningSpec) -> list[str]:
    """Report invariant violations without raising.

    Codes: TaskVisualMismatch (text-only task carrying visuals),
    TargetShapeMismatch (image-output task with frames != 1),
    IdentifierOutOfRange, MissingText.
    """
    out = []
    if spec.task in TEXT_ONLY_TASKS and spec.has_visuals():
        out.append("TaskVisualMismatch")
    if spec.task in IMAGE_OUTPUT_TASKS and spec.target_shape[0] != 1:
        out.append("TargetShapeMismatch")
    if spec.text is None:
        out.append("MissingText")
    else:
        for k in referenced_image_ids(spec.text):
            if not (1 <= k <= len(spec.images)):
                out.append("IdentifierOutOfRange")
                break
    return out


def build_prompt(spec: ConditioningSpec, check_identifiers: bool = True) -> str:
    """Render the chat-style prompt string for a spec.

    Text-only requests use the plain template; requests with visual inputs get
    numbered "Image k:" / "Video 1:" slots ahead of the user text. The string
    is a pure function of the spec. check_identifiers=False skips the
    out-of-range check; condition dropout can legitimately leave the text
    referencing an image that was removed.
    """
    if spec.text is None:
        raise MissingText(f"task {spec.task.value} requires text (use '' to drop it)")
    if check_identifiers:
        for k in referenced_image_ids(spec.text):
            if not (1 <= k <= len(spec.images)):
                raise IdentifierOutOfRange(
                    f"text references Image {k} but only {len(spec.images)} image(s) given"
                )
    lines = [
        "<|im_start|>system",
        SYSTEM_SENTENCE,
        "<|im_end|>",
        "<|im_start|>user",
    ]
    if spec.has_visuals():
        slots = [f"Image {i + 1}: <|user_image_{i + 1}|>" for i in range(len(spec.images))]
        if spec.video is not None:
            slots.append("Video 1: <|user_video|>")
        lines.append(" ".join(slots))
    lines.append(spec.text)
    lines.append("<|im_end|>")
    lines.append("<|im_start|>assistant")
    return "\n".join(lines)


class SegmentKind(str, Enum):
    SYSTEM = "SYSTEM"
    TEXT = "TEXT"
    IMAGE_TOKENS = "IMAGE_TOKENS"
    VIDEO_TOKENS = "VIDEO_TOKENS"
    VISION_START = "VISION_START"
    VISION_END = "VISION_END"
    LEARNABLE = "LEARNABLE"


VISUAL_KINDS = (SegmentKind.IMAGE_TOKENS, SegmentKind.VIDEO_TOKENS)


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    payload_len: int
    source_index: Optional[int] = None


@dataclass(frozen=True)
class InterleavedContext:
    segments: tuple
    total_len: int

    def rows_of(self, seg_index: int) -> range:
        start = sum(s.payload_len for s in self.segments[:seg_index])
        return range(start, start + self.segments[seg_index].payload_len)

    def visual_segments(self) -> list[tuple[int, Segment]]:
        return [(i, s) for i, s in enumerate(self.segments) if s.kind in VISUAL_KINDS]


def image_token_count(h: int, w: int, patch_size: int) -> int:
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    return (h // patch_size) * (w // patch_size)


def assemble_context(
    spec: ConditioningSpec,
    n_learnable: int,
    *,
    vocab: HashVocab = DEFAULT_VOCAB,
    patch_size: int = 4,
    max_video_frames: int = 8,
    check_identifiers: bool = True,
) -> InterleavedContext:
    """Build the segment layout: SYSTEM, wrapped visuals (images then video),
    TEXT, then the trailing LEARNABLE run.

    An empty text ("") contributes no TEXT segment, so every non-LEARNABLE
    segment keeps a positive payload. The LEARNABLE segment is always present,
    last, possibly zero-length.
    """
    if n_learnable < 0:
        raise ValueError("n_learnable must be >= 0")
    # build_prompt performs the error checking shared with this op
    build_prompt(spec, check_identifiers=check_identifiers)

    segs: list[Segment] = [
        Segment(SegmentKind.SYSTEM, len(vocab.encode(SYSTEM_SENTENCE)))
    ]
    for i, img in enumerate(spec.images):
        n = image_token_count(img.shape[0], img.shape[1], patch_size)
        segs.append(Segment(SegmentKind.VISION_START, 1, i))
        segs.append(Segment(SegmentKind.IMAGE_TOKENS, n, i))
        segs.append(Segment(SegmentKind.VISION_END, 1, i))
    if spec.video is not None:
        f = min(spec.video.shape[0], max_video_frames)
        per_frame = image_token_count(
            spec.video.shape[1], spec.video.shape[2], patch_size
        )
        segs.append(Segment(SegmentKind.VISION_START, 1, 0))
        segs.append(Segment(SegmentKind.VIDEO_TOKENS, f * per_frame, 0))
        segs.append(Segment(SegmentKind.VISION_END, 1, 0))
    text_ids = vocab.encode(spec.text)
    if text_ids:
        segs.append(Segment(SegmentKind.TEXT, len(text_ids)))
    segs.append(Segment(SegmentKind.LEARNABLE, n_learnable))
    return InterleavedContext(tuple(segs), sum(s.payload_len for s in segs))


def format_context(ctx: InterleavedContext, prompt: Optional[str] = None) -> str:
    """Plain-text table dump used by the inspect-layout CLI and golden files."""
    lines = ["# context", "idx\tkind\tlen\tsource"]
    for i, s in enumerate(ctx.segments):
        src = "-" if s.source_index is None else str(s.source_index)
        lines.append(f"{i}\t{s.kind.value}\t{s.payload_len}\t{src}")
    lines.append(f"total\t{ctx.total_len}")
    if prompt is not None:
        lines.append("# prompt")
        lines.append(prompt)
    return "\n".join(lines) + "\n"
