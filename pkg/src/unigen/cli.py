"""Command-line surface: training, sampling, inspection, and evaluation."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .bucketing import build_buckets, format_bucket_table
from .context import (
    ConditioningSpec,
    Task,
    assemble_context,
    build_prompt,
    format_context,
    validate_spec,
)
from .corpus import SceneConfig, _from_png, _to_png
from .diffusion import GuidanceWeights, TEXT_ONLY_DEFAULT_W_TEXT, sample
from .evaluate import (
    ablation_run,
    build_corpus,
    cfg_sweep,
    evaluate,
    file_digest,
)
from .latents import format_layout
from .pipeline import GeneratorSystem, SystemConfig, layout_for_spec
from .trainer import StageConfig, default_stage_config, run_curriculum


def _parse_shape(text: str) -> tuple:
    return tuple(int(p) for p in text.lower().split("x"))


def _parse_floats(text: str) -> list:
    return [float(p) for p in text.split(",") if p.strip() != ""]


def _parse_ints(text: str) -> list:
    return [int(p) for p in text.split(",") if p.strip() != ""]


def _load_video_dir(path: Path) -> np.ndarray:
    frames = sorted(Path(path).glob("*.png"))
    if not frames:
        raise FileNotFoundError(f"no PNG frames under {path}")
    return np.stack([_from_png(p) for p in frames])


def _spec_from_args(args) -> ConditioningSpec:
    task = Task(args.task)
    images = tuple(_from_png(Path(p)) for p in args.image or [])
    video = _load_video_dir(Path(args.video)) if args.video else None
    if args.frames is not None:
        frames = args.frames
    else:
        frames = 1 if task in (Task.T2I, Task.EDIT_IMAGE, Task.RECON_PROXY, Task.SELECT_PROXY) else 3
    return ConditioningSpec(
        task=task,
        text=args.text,
        images=images,
        video=video,
        target_shape=(frames, args.height, args.width),
        latent_refs=task is not Task.RECON_PROXY,
    )


def _placeholder_spec(args) -> ConditioningSpec:
    task = Task(args.task)
    images = tuple(
        np.zeros((*_parse_shape(s), 3), dtype=np.float32) for s in args.image_shape or []
    )
    video = None
    if args.video_shape:
        f, h, w = _parse_shape(args.video_shape)
        video = np.zeros((f, h, w, 3), dtype=np.float32)
    return ConditioningSpec(
        task=task,
        text=args.text,
        images=images,
        video=video,
        target_shape=_parse_shape(args.target_shape),
        latent_refs=not args.no_latent_refs,
    )


def cmd_train(args) -> int:
    stage = args.stage
    cfg = StageConfig.load(args.config) if args.config else default_stage_config(stage)
    if cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage}, requested {stage}")
    if args.resume:
        system, _ = GeneratorSystem.load_checkpoint(args.resume)
    else:
        torch.manual_seed(args.seed)
        system = GeneratorSystem(SystemConfig())
    paths, _ = run_curriculum(
        system, [cfg], Path(args.out), args.seed, workers=args.workers
    )
    print(f"stage {stage} done -> {paths[-1]}")
    return 0


def cmd_pretrain_base(args) -> int:
    args.stage = 0
    return cmd_train(args)


def cmd_sample(args) -> int:
    system, payload = GeneratorSystem.load_checkpoint(args.checkpoint)
    if payload.get("ema") and not args.raw_weights:
        system.load_ema(payload["ema"])
    system.eval()
    spec = _spec_from_args(args)
    violations = validate_spec(spec)
    if violations:
        raise ValueError(f"invalid request: {', '.join(violations)}")
    w_text = args.w_text
    if w_text is None:
        w_text = 5.0 if spec.has_visuals() else TEXT_ONLY_DEFAULT_W_TEXT
    weights = GuidanceWeights(w_text=w_text, w_image=args.w_image)
    shift = args.shift
    if shift is None:
        shift = float(payload.get("extra", {}).get("shift", 5.0))
    gen = torch.Generator()
    gen.manual_seed(args.seed)
    out = sample(system, spec, args.steps, weights, gen, shift=shift)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for f in range(out.shape[0]):
        name = f"frame_{f:03d}.png"
        _to_png(out_dir / name, out[f])
        files.append(name)
    index = {
        "task": spec.task.value,
        "seed": args.seed,
        "steps": args.steps,
        "w_text": w_text,
        "w_image": args.w_image,
        "shift": shift,
        "frames": files,
        "checkpoint_id": file_digest(Path(args.checkpoint)),
    }
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    print(f"wrote {len(files)} frame(s) to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    report = evaluate(
        Path(args.checkpoint),
        Path(args.corpus),
        seed=args.seed,
        out_dir=Path(args.out) if args.out else None,
        steps=args.steps,
        weights=GuidanceWeights(w_text=args.w_text, w_image=args.w_image),
        use_ema=not args.raw_weights,
        max_per_task=args.max_per_task,
    )
    print(json.dumps(report["metrics"], indent=1, sort_keys=True))
    return 0


def cmd_cfg_sweep(args) -> int:
    rows = cfg_sweep(
        Path(args.checkpoint),
        Path(args.corpus),
        _parse_floats(args.w_image),
        seed=args.seed,
        out_dir=Path(args.out) if args.out else None,
        steps=args.steps,
        w_text=args.w_text,
        max_samples=args.samples,
    )
    print("w_image\treference_match_rate\tmotion_magnitude")
    for r in rows:
        print(f"{r['w_image']}\t{r['reference_match_rate']:.4f}\t{r['motion_magnitude']:.6f}")
    return 0


def cmd_ablate(args) -> int:
    stage_cfgs = None
    if args.config:
        with open(args.config) as fh:
            stage_cfgs = [StageConfig.from_dict(d) for d in json.load(fh)]
    summary = ablation_run(
        args.flag,
        Path(args.out),
        stage_cfgs=stage_cfgs,
        seeds=tuple(_parse_ints(args.seeds)),
        workers=args.workers,
    )
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_inspect_layout(args) -> int:
    spec = _placeholder_spec(args)
    ctx = assemble_context(spec, args.n_learnable)
    sys.stdout.write(format_context(ctx, prompt=build_prompt(spec)))
    if args.latents:
        layout = layout_for_spec(
            spec, gap=args.gap, use_boundaries=not args.no_boundaries
        )
        sys.stdout.write(format_layout(layout))
    return 0


def cmd_inspect_buckets(args) -> int:
    table = build_buckets(
        args.target_area,
        _parse_floats(args.ratios),
        factor=args.factor,
        frames=args.frames,
    )
    sys.stdout.write(format_bucket_table(table))
    return 0


def cmd_build_corpus(args) -> int:
    cfg = SceneConfig(h=args.height, w=args.width, frames=args.frames)
    tasks = tuple(Task(t) for t in args.tasks.split(","))
    manifest = build_corpus(Path(args.out), args.seed, args.per_task, cfg, tasks)
    print(f"corpus manifest: {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unigen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_train_args(sp):
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--resume", type=str, default=None)
        sp.add_argument("--out", type=str, required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=0)

    sp = sub.add_parser("pretrain-base", help="train the stage-0 text-to-video base")
    add_train_args(sp)
    sp.set_defaults(fn=cmd_pretrain_base)

    sp = sub.add_parser("train", help="run one curriculum stage")
    sp.add_argument("--stage", type=int, required=True, choices=(0, 1, 2, 3))
    add_train_args(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="generate frames from a checkpoint")
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--task", type=str, required=True, choices=[t.value for t in Task])
    sp.add_argument("--text", type=str, default=None)
    sp.add_argument("--image", action="append", default=None, help="reference image PNG")
    sp.add_argument("--video", type=str, default=None, help="directory of PNG frames")
    sp.add_argument("--frames", type=int, default=None)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--steps", type=int, default=16)
    sp.add_argument("--w-text", type=float, default=None)
    sp.add_argument("--w-image", type=float, default=1.5)
    sp.add_argument("--shift", type=float, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--raw-weights", action="store_true", help="skip EMA weights")
    sp.add_argument("--out", type=str, required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("evaluate", help="oracle metrics over a held-out corpus")
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--corpus", type=str, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=16)
    sp.add_argument("--w-text", type=float, default=5.0)
    sp.add_argument("--w-image", type=float, default=1.5)
    sp.add_argument("--max-per-task", type=int, default=None)
    sp.add_argument("--raw-weights", action="store_true")
    sp.add_argument("--out", type=str, default=None)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("cfg-sweep", help="image-guidance fidelity/motion sweep")
    sp.add_argument("--checkpoint", type=str, required=True)
    sp.add_argument("--corpus", type=str, required=True)
    sp.add_argument("--w-image", type=str, default="0,0.5,1.5,4")
    sp.add_argument("--w-text", type=float, default=5.0)
    sp.add_argument("--steps", type=int, default=16)
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=str, default=None)
    sp.set_defaults(fn=cmd_cfg_sweep)

    sp = sub.add_parser("ablate", help="paired retraining with a component removed")
    sp.add_argument("flag", choices=("no_learnable", "no_boundary"))
    sp.add_argument("--out", type=str, required=True)
    sp.add_argument("--seeds", type=str, default="0,1,2")
    sp.add_argument("--config", type=str, default=None, help="JSON list of stage configs")
    sp.add_argument("--workers", type=int, default=0)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("inspect-layout", help="print context segments and rope layout")
    sp.add_argument("--task", type=str, required=True, choices=[t.value for t in Task])
    sp.add_argument("--text", type=str, default="")
    sp.add_argument("--image-shape", action="append", default=None, help="HxW, repeatable")
    sp.add_argument("--video-shape", type=str, default=None, help="FxHxW")
    sp.add_argument("--target-shape", type=str, default="1x32x32", help="FxHxW")
    sp.add_argument("--n-learnable", type=int, default=16)
    sp.add_argument("--gap", type=int, default=0)
    sp.add_argument("--latents", action="store_true", help="also print the latent layout")
    sp.add_argument("--no-boundaries", action="store_true")
    sp.add_argument("--no-latent-refs", action="store_true")
    sp.set_defaults(fn=cmd_inspect_layout)

    sp = sub.add_parser("inspect-buckets", help="dump the bucket table as TSV")
    sp.add_argument("--target-area", type=int, required=True)
    sp.add_argument("--ratios", type=str, default="0.5625,0.75,1.0,1.3333,1.7778")
    sp.add_argument("--factor", type=int, default=8)
    sp.add_argument("--frames", type=int, default=1)
    sp.set_defaults(fn=cmd_inspect_buckets)

    sp = sub.add_parser("build-corpus", help="materialize a held-out oracle corpus")
    sp.add_argument("--out", type=str, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--per-task", type=int, default=24)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--frames", type=int, default=3)
    sp.add_argument(
        "--tasks", type=str, default="recon_proxy,edit_image,ref2v,select_proxy"
    )
    sp.set_defaults(fn=cmd_build_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
