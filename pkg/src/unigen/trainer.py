"""Progressive curriculum trainer.

Stage 0 pretrains the denoiser with the native bag-of-embeddings caption
encoder (the stand-in for a pretrained video base); stages 1-3 switch to the
frozen condition encoder and gate exactly the configured trainable module
groups. Task choice per step is a pure function of (step, shared seed,
mixture), so any number of simulated data workers agree on the task sequence,
and every derived rng stream keys on the step index alone, which makes the
run invariant to the worker count. A fresh optimizer is built per stage.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import corpus
from .bucketing import Bucket, adjust_frames, build_buckets
from .context import ConditioningSpec, Task
from .corpus import SceneConfig, TaskExample, build_task_example, generate_scene
from .diffusion import drop_conditions
from .pipeline import TRAINABLE_GROUPS, GeneratorSystem, SystemConfig


class IndexOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    steps: int
    lr: float
    mixture: dict
    trainable: tuple
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    ema: bool = False
    ema_decay: float = 0.9999
    frame_area: int = 1024
    shift: float = 1.0
    mode: str = "vlm"
    caption_short_p: float = 0.0
    drop_p: float = 0.1
    joint_drop_at: int = 3
    video_frames: tuple = (2, 3)
    select_k: tuple = (2, 3)
    ratios: tuple = (1.0,)
    max_latent_tokens: int = 256
    size_range: tuple = (8.0, 14.0)
    n_shapes: tuple = (1, 2)

    def __post_init__(self):
        total = sum(self.mixture.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture probabilities sum to {total}, expected 1")
        bad = set(self.trainable) - set(TRAINABLE_GROUPS)
        if bad:
            raise ValueError(f"unknown trainable modules {sorted(bad)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mixture"] = {
            (k.value if isinstance(k, Task) else str(k)): v
            for k, v in self.mixture.items()
        }
        d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        d["mixture"] = {Task(k): float(v) for k, v in d["mixture"].items()}
        d["trainable"] = tuple(d["trainable"])
        for key in ("betas", "video_frames", "select_k", "ratios", "size_range", "n_shapes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "StageConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_stage_config(stage: int) -> StageConfig:
    from importlib.resources import files

    path = files("unigen.configs").joinpath(f"stage{stage}.json")
    return StageConfig.from_dict(json.loads(path.read_text()))


def select_task(step: int, shared_seed: int, mixture: dict) -> Task:
    """Deterministic per-step task draw every simulated worker agrees on."""
    items = sorted(mixture.items(), key=lambda kv: kv[0].value)
    rng = np.random.default_rng(np.random.SeedSequence(shared_seed, spawn_key=(step,)))
    u = rng.random()
    acc = 0.0
    for task, p in items:
        acc += p
        if u < acc:
            return task
    return items[-1][0]


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    """shadow' = decay * shadow + (1 - decay) * params, elementwise (in place)."""
    with torch.no_grad():
        for k, s in shadow.items():
            s.mul_(decay).add_(params[k].detach(), alpha=1.0 - decay)
    return shadow


# ----- proxy tasks -----------------------------------------------------------

RECON_INSTRUCTION = "reconstruct the input image"


def make_proxy_reconstruction(image: np.ndarray) -> TaskExample:
    """Image through the condition encoder only; its own latent is the target."""
    h, w = image.shape[0], image.shape[1]
    spec = ConditioningSpec(
        Task.RECON_PROXY,
        RECON_INSTRUCTION,
        images=(image,),
        target_shape=(1, h, w),
        latent_refs=False,
    )
    return TaskExample(spec, image[None], {})


def make_proxy_selection(images: list, i: int) -> TaskExample:
    """All images enter the context; the instruction names the one to rebuild."""
    if len(images) < 2:
        raise IndexOutOfRange("selection needs at least two images")
    if not 1 <= i <= len(images):
        raise IndexOutOfRange(f"i={i} outside 1..{len(images)}")
    h, w = images[0].shape[0], images[0].shape[1]
    spec = ConditioningSpec(
        Task.SELECT_PROXY,
        f"reconstruct Image {i}",
        images=tuple(images),
        target_shape=(1, h, w),
    )
    return TaskExample(spec, images[i - 1][None], {"select_index": i})


# ----- per-step example construction ------------------------------------------


def _pick_bucket(cfg: StageConfig, rng: np.random.Generator, frames: int) -> Bucket:
    table = build_buckets(cfg.frame_area, cfg.ratios, factor=8, frames=frames)
    b = table[int(rng.integers(len(table)))]
    return adjust_frames(b, cfg.max_latent_tokens)


def build_example(task: Task, step: int, cfg: StageConfig, data_seed: int) -> TaskExample:
    """Pure function of (task, step, stage config, data seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(data_seed, spawn_key=(step,)))
    frames = int(rng.integers(cfg.video_frames[0], cfg.video_frames[1] + 1))
    bucket = _pick_bucket(cfg, rng, frames)
    scene_cfg = SceneConfig(
        h=bucket.height,
        w=bucket.width,
        frames=bucket.frames,
        n_shapes=cfg.n_shapes,
        size_range=cfg.size_range,
    )
    if task is Task.RECON_PROXY:
        video, _ = generate_scene(
            int(rng.integers(0, 2**31 - 1)),
            dataclasses.replace(scene_cfg, frames=1),
        )
        return make_proxy_reconstruction(video[0])
    if task is Task.SELECT_PROXY:
        k = int(rng.integers(cfg.select_k[0], cfg.select_k[1] + 1))
        images = []
        for _ in range(k):
            video, _ = generate_scene(
                int(rng.integers(0, 2**31 - 1)),
                dataclasses.replace(scene_cfg, frames=1, n_shapes=(1, 1)),
            )
            images.append(video[0])
        return make_proxy_selection(images, int(rng.integers(1, k + 1)))
    style = "short" if rng.random() < cfg.caption_short_p else "long"
    return build_task_example(task, rng, scene_cfg, caption_style=style)


@dataclass
class RunSeeds:
    task_seed: int
    data_seed: int
    noise_seed: int

    @classmethod
    def derive(cls, master: int, stage: int) -> "RunSeeds":
        a, b, c = np.random.SeedSequence([master, stage]).generate_state(3)
        return cls(int(a), int(b), int(c))


def _prepared_step(step: int, cfg: StageConfig, seeds: RunSeeds):
    """(task, dropped spec, target) for one step; shared rng drives the drop."""
    task = select_task(step, seeds.task_seed, cfg.mixture)
    ex = build_example(task, step, cfg, seeds.data_seed)
    n_visual = len(ex.spec.images) + (1 if ex.spec.video is not None else 0)
    drop_rng = np.random.default_rng(
        np.random.SeedSequence(seeds.task_seed, spawn_key=(step, 7))
    )
    spec = drop_conditions(
        ex.spec, cfg.drop_p, drop_rng, force_joint=n_visual >= cfg.joint_drop_at
    )
    return task, spec, ex.target


def _step_stream(cfg: StageConfig, seeds: RunSeeds, workers: int):
    """Ordered example stream; workers>0 prefetches on producer threads."""
    if workers <= 0:
        for step in range(cfg.steps):
            yield step, _prepared_step(step, cfg, seeds)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        next_submit = 0
        for step in range(cfg.steps):
            while next_submit < cfg.steps and len(pending) < 2 * workers:
                pending.append(pool.submit(_prepared_step, next_submit, cfg, seeds))
                next_submit += 1
            yield step, pending.popleft().result()


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.detach() ** 2).sum())
    return math.sqrt(total)


def run_stage(
    system: GeneratorSystem,
    cfg: StageConfig,
    seeds: RunSeeds,
    ema: Optional[dict] = None,
    log_fh=None,
    workers: int = 0,
    on_step: Optional[Callable] = None,
):
    """Execute one stage; returns (ema, history rows)."""
    system.mode = cfg.mode
    system.set_trainable(cfg.trainable)
    params = [p for p in system.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(
        params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    ) if params else None
    if cfg.ema and ema is None:
        ema = system.ema_parameters_copy()
    if not cfg.ema:
        ema = None
    history = []
    for step, (task, spec, target) in _step_stream(cfg, seeds, workers):
        gen = torch.Generator()
        gen.manual_seed((seeds.noise_seed * 2654435761 + step) % (2**63 - 1))
        loss, _ = system.training_loss(spec, target, gen, cfg.shift)
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            raw_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
            gnorm = _grad_norm(params)
            opt.step()
            if ema is not None:
                ema = ema_update(ema, system.state_dict(), cfg.ema_decay)
        else:
            raw_norm = gnorm = 0.0
        row = {
            "stage": cfg.stage,
            "step": step,
            "task": task.value,
            "loss": float(loss.detach()),
            "grad_norm": gnorm,
            "grad_norm_raw": raw_norm,
            "lr": cfg.lr,
        }
        history.append(row)
        if log_fh is not None:
            log_fh.write(json.dumps(row) + "\n")
        if on_step is not None:
            on_step(row)
    return ema, history


def run_curriculum(
    system: GeneratorSystem,
    stage_cfgs: list,
    out_dir: Path,
    master_seed: int,
    workers: int = 0,
    log_name: str = "train_log.jsonl",
    on_step: Optional[Callable] = None,
):
    """Run stages in order, checkpointing after each; returns checkpoint paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    histories = []
    ema = None
    with open(out_dir / log_name, "a") as log_fh:
        for cfg in stage_cfgs:
            seeds = RunSeeds.derive(master_seed, cfg.stage)
            ema, hist = run_stage(
                system, cfg, seeds, ema=ema, log_fh=log_fh, workers=workers, on_step=on_step
            )
            histories.append(hist)
            path = out_dir / f"stage{cfg.stage}.pt"
            system.save_checkpoint(
                path,
                stage=cfg.stage,
                step=cfg.steps,
                ema=ema,
                extra={"master_seed": master_seed, "shift": cfg.shift},
            )
            paths.append(path)
    return paths, histories


def stage0_pretrain(
    system: GeneratorSystem,
    cfg: Optional[StageConfig] = None,
    out_dir: Path = Path("runs/base"),
    master_seed: int = 0,
    workers: int = 0,
):
    """Train the text-to-video base the later stages build on."""
    cfg = cfg or default_stage_config(0)
    if cfg.mode != "native":
        raise ValueError("stage 0 pretraining runs in native conditioning mode")
    return run_curriculum(system, [cfg], out_dir, master_seed, workers=workers)
