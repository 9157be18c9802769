"""Synthetic corpus: moving colored shapes with captions, edits, and references.

Every sample is rendered exactly (hard-edged masks, no antialiasing) from a
Scene whose shapes follow linear trajectories, so color histograms, masks, and
positions give closed-form oracles. A manifest of seeds reproduces the corpus
bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .context import ConditioningSpec, Task

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
}
PALETTE_NAMES = tuple(PALETTE)
BACKGROUND = (0.0, 0.0, 0.0)
SHAPE_KINDS = ("circle", "square", "triangle")


class InapplicableEdit(ValueError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    size: float
    cx: float
    cy: float
    vx: float = 0.0
    vy: float = 0.0

    def center(self, frame: int) -> tuple:
        return (self.cx + frame * self.vx, self.cy + frame * self.vy)


@dataclass(frozen=True)
class Scene:
    shapes: tuple
    frames: int
    h: int
    w: int
    seed: int
    background: str = "black"


@dataclass(frozen=True)
class SceneConfig:
    h: int = 32
    w: int = 32
    frames: int = 1
    n_shapes: tuple = (1, 2)
    size_range: tuple = (8.0, 14.0)
    max_speed: float = 1.5


def _shape_mask_at(shape: Shape, frame: int, h: int, w: int) -> np.ndarray:
    cx, cy = shape.center(frame)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    half = shape.size / 2.0
    if shape.kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
    if shape.kind == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= half
    if shape.kind == "triangle":
        top = cy - half
        inside_y = (ys >= top) & (ys <= cy + half)
        return inside_y & (np.abs(xs - cx) <= 0.5 * (ys - top))
    raise ValueError(f"unknown shape kind {shape.kind}")


def shape_mask(scene: Scene, index: int, frame: int) -> np.ndarray:
    return _shape_mask_at(scene.shapes[index], frame, scene.h, scene.w)


def render_scene(scene: Scene) -> np.ndarray:
    """Exact renderer: (frames, h, w, 3) float32 in [0,1]."""
    out = np.empty((scene.frames, scene.h, scene.w, 3), dtype=np.float32)
    out[...] = np.float32(BACKGROUND)
    for f in range(scene.frames):
        for s in scene.shapes:
            out[f][_shape_mask_at(s, f, scene.h, scene.w)] = np.float32(PALETTE[s.color])
    return out


def _bounding_radius(shape: Shape) -> float:
    # circumscribed radius; squares/triangles reach size/2 * sqrt(2)
    return 0.71 * shape.size if shape.kind != "circle" else shape.size / 2.0


def _fits(shape: Shape, frames: int, h: int, w: int) -> bool:
    r = _bounding_radius(shape) + 1.0
    for f in (0, frames - 1):
        cx, cy = shape.center(f)
        if not (r <= cx <= w - 1 - r and r <= cy <= h - 1 - r):
            return False
    return True


def _overlaps(a: Shape, b: Shape, frames: int) -> bool:
    gap = _bounding_radius(a) + _bounding_radius(b) + 1.0
    for f in range(frames):
        ax, ay = a.center(f)
        bx, by = b.center(f)
        if (ax - bx) ** 2 + (ay - by) ** 2 < gap**2:
            return True
    return False


def _sample_shape(
    rng: np.random.Generator,
    cfg: SceneConfig,
    color: str,
    existing: tuple = (),
    max_tries: int = 200,
) -> Optional[Shape]:
    for _ in range(max_tries):
        kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        size = float(rng.uniform(*cfg.size_range))
        if cfg.frames > 1:
            vx = float(rng.uniform(-cfg.max_speed, cfg.max_speed))
            vy = float(rng.uniform(-cfg.max_speed, cfg.max_speed))
        else:
            vx = vy = 0.0
        r = 0.71 * size + 1.0
        lo_x = r + max(0.0, -vx * (cfg.frames - 1))
        hi_x = cfg.w - 1 - r - max(0.0, vx * (cfg.frames - 1))
        lo_y = r + max(0.0, -vy * (cfg.frames - 1))
        hi_y = cfg.h - 1 - r - max(0.0, vy * (cfg.frames - 1))
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        cand = Shape(
            kind=kind,
            color=color,
            size=size,
            cx=float(rng.uniform(lo_x, hi_x)),
            cy=float(rng.uniform(lo_y, hi_y)),
            vx=vx,
            vy=vy,
        )
        if _fits(cand, cfg.frames, cfg.h, cfg.w) and not any(
            _overlaps(cand, o, cfg.frames) for o in existing
        ):
            return cand
    return None


def generate_scene(seed: int, cfg: SceneConfig) -> tuple:
    """Deterministic (video, Scene) pair for a seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    colors = rng.choice(len(PALETTE_NAMES), size=n, replace=False)
    shapes: list[Shape] = []
    for ci in colors:
        s = _sample_shape(rng, cfg, PALETTE_NAMES[ci], tuple(shapes))
        if s is not None:
            shapes.append(s)
    if not shapes:  # degenerate config; keep the invariant of >= 1 shape
        shapes.append(
            Shape("circle", PALETTE_NAMES[int(colors[0])], 8.0, cfg.w / 2, cfg.h / 2)
        )
    scene = Scene(
        shapes=tuple(shapes), frames=cfg.frames, h=cfg.h, w=cfg.w, seed=seed
    )
    return render_scene(scene), scene


def direction_name(vx: float, vy: float) -> str:
    if abs(vx) < 1e-9 and abs(vy) < 1e-9:
        return "still"
    if abs(vx) >= abs(vy):
        return "right" if vx > 0 else "left"
    return "down" if vy > 0 else "up"


def caption(scene: Scene, style: str) -> str:
    """Pure text over Scene fields; long enumerates everything, short <= 8 words."""
    moving = scene.frames > 1
    if style == "short":
        names = [f"{s.color} {s.kind}" for s in scene.shapes]
        head = ", ".join(names[:-1]) + " and " + names[-1] if len(names) > 1 else names[0]
        if not moving:
            return head
        verb = "move" if len(names) > 1 else f"moves {direction_name(scene.shapes[0].vx, scene.shapes[0].vy)}"
        return f"{head} {verb}"
    if style != "long":
        raise ValueError(f"unknown caption style {style!r}")
    parts = [
        f"The scene shows {len(scene.shapes)} shape{'s' if len(scene.shapes) != 1 else ''} "
        f"on a {scene.background} background."
    ]
    for s in scene.shapes:
        place = f"a {s.color} {s.kind} of size {s.size:.1f} sits at ({s.cx:.1f}, {s.cy:.1f})"
        if moving and (s.vx or s.vy):
            place += (
                f" and moves {direction_name(s.vx, s.vy)}"
                f" at {max(abs(s.vx), abs(s.vy)):.1f} pixels per frame"
            )
        parts.append(place.capitalize() + ".")
    return " ".join(parts)


# ----- edits ---------------------------------------------------------------


@dataclass
class EditPair:
    source: np.ndarray
    instruction: str
    target: np.ndarray
    source_scene: Scene
    target_scene: Scene
    op: str
    shape_index: int  # index of the edited shape in the *target* scene


def make_edit_pair(scene: Scene, op: str, rng: np.random.Generator) -> EditPair:
    if op not in ("recolor", "remove", "add"):
        raise ValueError(f"unknown edit op {op!r}")
    if op in ("recolor", "remove") and len(scene.shapes) == 0:
        raise InapplicableEdit(f"{op} needs at least one shape")
    source = render_scene(scene)
    used = {s.color for s in scene.shapes}
    if op == "recolor":
        idx = int(rng.integers(len(scene.shapes)))
        old = scene.shapes[idx]
        free = [c for c in PALETTE_NAMES if c not in used]
        if not free:
            raise InapplicableEdit("no free palette color to recolor to")
        new_color = free[int(rng.integers(len(free)))]
        shapes = list(scene.shapes)
        shapes[idx] = dataclasses.replace(old, color=new_color)
        tgt = dataclasses.replace(scene, shapes=tuple(shapes))
        instr = f"change the {old.color} {old.kind} to {new_color}"
        return EditPair(source, instr, render_scene(tgt), scene, tgt, op, idx)
    if op == "remove":
        idx = int(rng.integers(len(scene.shapes)))
        gone = scene.shapes[idx]
        tgt = dataclasses.replace(
            scene, shapes=tuple(s for i, s in enumerate(scene.shapes) if i != idx)
        )
        instr = f"remove the {gone.color} {gone.kind}"
        return EditPair(source, instr, render_scene(tgt), scene, tgt, op, -1)
    # add
    free = [c for c in PALETTE_NAMES if c not in used]
    if not free:
        raise InapplicableEdit("palette exhausted, cannot add")
    color = free[int(rng.integers(len(free)))]
    cfg = SceneConfig(h=scene.h, w=scene.w, frames=scene.frames)
    new_shape = _sample_shape(rng, cfg, color, scene.shapes)
    if new_shape is None:
        raise InapplicableEdit("no room to add a shape")
    tgt = dataclasses.replace(scene, shapes=scene.shapes + (new_shape,))
    instr = f"add a {color} {new_shape.kind}"
    return EditPair(source, instr, render_scene(tgt), scene, tgt, op, len(scene.shapes))


# ----- reference tasks -------------------------------------------------------


def reference_crop(shape: Shape, h: int, w: int) -> np.ndarray:
    """Single static shape centered on the scene background."""
    centered = dataclasses.replace(shape, cx=w / 2.0, cy=h / 2.0, vx=0.0, vy=0.0)
    return render_scene(Scene(shapes=(centered,), frames=1, h=h, w=w, seed=0))[0]


def make_reference_task(scene: Scene, ref_h: int = 32, ref_w: int = 32) -> tuple:
    """(reference images, prompt, target video) for subject-driven generation."""
    if not scene.shapes:
        raise ValueError("reference task needs at least one shape")
    refs = tuple(reference_crop(s, ref_h, ref_w) for s in scene.shapes)
    ids = " and ".join(f"Image {k + 1}" for k in range(len(refs)))
    prompt = f"a video showing the subjects of {ids} in motion"
    if len(refs) == 1:
        prompt = "a video showing the subject of Image 1 in motion"
    return refs, prompt, render_scene(scene)


# ----- task example builders -------------------------------------------------


@dataclass
class TaskExample:
    spec: ConditioningSpec
    target: np.ndarray  # (f, h, w, 3)
    meta: dict


def _scene_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def build_task_example(
    task: Task,
    rng: np.random.Generator,
    cfg: SceneConfig,
    caption_style: str = "long",
) -> TaskExample:
    """Construct a training/eval example for the non-proxy tasks."""
    if task is Task.T2I:
        img_cfg = dataclasses.replace(cfg, frames=1)
        video, scene = generate_scene(_scene_seed(rng), img_cfg)
        text = caption(scene, caption_style)
        spec = ConditioningSpec(Task.T2I, text, target_shape=(1, cfg.h, cfg.w))
        return TaskExample(spec, video, {"scene": scene})
    if task is Task.T2V:
        video, scene = generate_scene(_scene_seed(rng), cfg)
        text = caption(scene, caption_style)
        spec = ConditioningSpec(Task.T2V, text, target_shape=(cfg.frames, cfg.h, cfg.w))
        return TaskExample(spec, video, {"scene": scene})
    if task is Task.I2V:
        video, scene = generate_scene(_scene_seed(rng), cfg)
        text = "animate Image 1: " + caption(scene, "short")
        spec = ConditioningSpec(
            Task.I2V,
            text,
            images=(video[0],),
            target_shape=(cfg.frames, cfg.h, cfg.w),
        )
        return TaskExample(spec, video, {"scene": scene})
    if task is Task.EDIT_IMAGE or task is Task.EDIT_VIDEO:
        frames = 1 if task is Task.EDIT_IMAGE else cfg.frames
        scene_cfg = dataclasses.replace(cfg, frames=frames)
        for _ in range(20):
            _, scene = generate_scene(_scene_seed(rng), scene_cfg)
            op = ("recolor", "recolor", "remove", "add")[int(rng.integers(4))]
            try:
                pair = make_edit_pair(scene, op, rng)
            except InapplicableEdit:
                continue
            if task is Task.EDIT_IMAGE:
                spec = ConditioningSpec(
                    Task.EDIT_IMAGE,
                    pair.instruction,
                    images=(pair.source[0],),
                    target_shape=(1, cfg.h, cfg.w),
                )
            else:
                spec = ConditioningSpec(
                    Task.EDIT_VIDEO,
                    pair.instruction,
                    video=pair.source,
                    target_shape=(frames, cfg.h, cfg.w),
                )
            meta = {
                "scene": pair.source_scene,
                "target_scene": pair.target_scene,
                "op": pair.op,
                "shape_index": pair.shape_index,
            }
            return TaskExample(spec, pair.target, meta)
        raise InapplicableEdit("could not build an applicable edit")
    if task is Task.REF2V:
        video, scene = generate_scene(_scene_seed(rng), cfg)
        refs, prompt, target = make_reference_task(scene, cfg.h, cfg.w)
        spec = ConditioningSpec(
            Task.REF2V, prompt, images=refs, target_shape=(cfg.frames, cfg.h, cfg.w)
        )
        return TaskExample(spec, target, {"scene": scene})
    raise ValueError(f"no corpus builder for task {task}")


# ----- pixel classification oracles ------------------------------------------


def nearest_palette_color(rgb: np.ndarray, include_background: bool = False) -> str:
    names = PALETTE_NAMES + (("black",) if include_background else ())
    table = np.array(
        [PALETTE[n] for n in PALETTE_NAMES]
        + ([list(BACKGROUND)] if include_background else [])
    )
    d = ((table - np.asarray(rgb, dtype=np.float64)) ** 2).sum(axis=1)
    return names[int(np.argmin(d))]


def classify_pixels(frame: np.ndarray) -> np.ndarray:
    """Per-pixel nearest color over palette + background; returns name indices.

    Index len(PALETTE_NAMES) is the background class.
    """
    table = np.array([PALETTE[n] for n in PALETTE_NAMES] + [list(BACKGROUND)])
    d = ((frame[..., None, :] - table) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


# ----- on-disk corpus ---------------------------------------------------------


def _to_png(path: Path, frame: np.ndarray):
    arr = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _from_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _scene_to_json(scene: Scene) -> dict:
    return {
        "shapes": [dataclasses.asdict(s) for s in scene.shapes],
        "frames": scene.frames,
        "h": scene.h,
        "w": scene.w,
        "seed": scene.seed,
        "background": scene.background,
    }


def _scene_from_json(d: dict) -> Scene:
    return Scene(
        shapes=tuple(Shape(**s) for s in d["shapes"]),
        frames=d["frames"],
        h=d["h"],
        w=d["w"],
        seed=d["seed"],
        background=d.get("background", "black"),
    )


def write_sample(sample_dir: Path, example: TaskExample, sample_seed: int):
    sample_dir.mkdir(parents=True, exist_ok=True)
    spec = example.spec
    for f in range(example.target.shape[0]):
        _to_png(sample_dir / f"target_{f:03d}.png", example.target[f])
    for i, img in enumerate(spec.images):
        _to_png(sample_dir / f"image_{i}.png", img)
    if spec.video is not None:
        for f in range(spec.video.shape[0]):
            _to_png(sample_dir / f"video_{f:03d}.png", spec.video[f])
    meta = {
        "task": spec.task.value,
        "seed": sample_seed,
        "text": spec.text,
        "target_shape": list(spec.target_shape),
        "latent_refs": spec.latent_refs,
        "n_images": len(spec.images),
        "video_frames": 0 if spec.video is None else int(spec.video.shape[0]),
    }
    for key in ("scene", "target_scene"):
        if key in example.meta:
            meta[key] = _scene_to_json(example.meta[key])
    for key in ("op", "shape_index", "select_index"):
        if key in example.meta:
            meta[key] = example.meta[key]
    with open(sample_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_sample(sample_dir: Path) -> TaskExample:
    with open(sample_dir / "meta.json") as fh:
        meta = json.load(fh)
    target = np.stack(
        [_from_png(p) for p in sorted(sample_dir.glob("target_*.png"))]
    )
    images = tuple(
        _from_png(sample_dir / f"image_{i}.png") for i in range(meta["n_images"])
    )
    video = None
    if meta["video_frames"]:
        video = np.stack([_from_png(p) for p in sorted(sample_dir.glob("video_*.png"))])
    spec = ConditioningSpec(
        task=Task(meta["task"]),
        text=meta["text"],
        images=images,
        video=video,
        target_shape=tuple(meta["target_shape"]),
        latent_refs=meta.get("latent_refs", True),
    )
    out_meta = {}
    for key in ("scene", "target_scene"):
        if key in meta:
            out_meta[key] = _scene_from_json(meta[key])
    for key in ("op", "shape_index", "select_index"):
        if key in meta:
            out_meta[key] = meta[key]
    return TaskExample(spec, target, out_meta)


def load_manifest(corpus_dir: Path) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as fh:
        return json.load(fh)
