"""Oracle-based evaluation, corpus building, CFG sweeps, and ablation runs.

Metrics are closed-form: reconstruction PSNR, recolor accuracy by the
nearest-palette-color of the edited region, reference presence by per-pixel
color classification, and selection accuracy by nearest-L2 input. Reports are
pure functions of (checkpoint, corpus manifest, seed) and never contain
NaN/Inf.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from . import corpus as corpus_mod
from .context import ConditioningSpec, Task
from .corpus import (
    SceneConfig,
    TaskExample,
    classify_pixels,
    load_manifest,
    psnr,
    read_sample,
    shape_mask,
    write_sample,
)
from .diffusion import GuidanceWeights, sample
from .encoder import EncoderConfig
from .pipeline import GeneratorSystem, SystemConfig
from .trainer import (
    RunSeeds,
    StageConfig,
    build_example,
    default_stage_config,
    make_proxy_reconstruction,
    make_proxy_selection,
    run_curriculum,
)

REPORT_SCHEMA_VERSION = 1
METRIC_RANGES = {
    "reconstruction_psnr_db": (0.0, 200.0),
    "edit_accuracy": (0.0, 1.0),
    "reference_match_rate": (0.0, 1.0),
    "selection_accuracy": (0.0, 1.0),
}
EVAL_TASKS = (Task.RECON_PROXY, Task.EDIT_IMAGE, Task.REF2V, Task.SELECT_PROXY)


class CheckpointMissing(FileNotFoundError):
    pass


class CorpusMissing(FileNotFoundError):
    pass


# ----- corpus building --------------------------------------------------------


def build_eval_example(task: Task, seed: int, cfg: SceneConfig) -> TaskExample:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if task is Task.RECON_PROXY:
        video, scene = corpus_mod.generate_scene(
            int(rng.integers(0, 2**31 - 1)), dataclasses.replace(cfg, frames=1)
        )
        ex = make_proxy_reconstruction(video[0])
        ex.meta["scene"] = scene
        return ex
    if task is Task.SELECT_PROXY:
        k = int(rng.integers(2, 4))
        images = [
            corpus_mod.generate_scene(
                int(rng.integers(0, 2**31 - 1)),
                dataclasses.replace(cfg, frames=1, n_shapes=(1, 1)),
            )[0][0]
            for _ in range(k)
        ]
        return make_proxy_selection(images, int(rng.integers(1, k + 1)))
    if task is Task.EDIT_IMAGE:
        # evaluation scores the recolor oracle, so hold-out edits are recolors
        for _ in range(20):
            _, scene = corpus_mod.generate_scene(
                int(rng.integers(0, 2**31 - 1)), dataclasses.replace(cfg, frames=1)
            )
            try:
                pair = corpus_mod.make_edit_pair(scene, "recolor", rng)
            except corpus_mod.InapplicableEdit:
                continue
            spec = ConditioningSpec(
                Task.EDIT_IMAGE,
                pair.instruction,
                images=(pair.source[0],),
                target_shape=(1, cfg.h, cfg.w),
            )
            return TaskExample(
                spec,
                pair.target,
                {
                    "scene": pair.source_scene,
                    "target_scene": pair.target_scene,
                    "op": "recolor",
                    "shape_index": pair.shape_index,
                },
            )
        raise corpus_mod.InapplicableEdit("no recolorable scene found")
    return corpus_mod.build_task_example(task, rng, cfg, caption_style="long")


def build_corpus(
    out_dir: Path,
    seed: int,
    per_task: int,
    cfg: Optional[SceneConfig] = None,
    tasks=EVAL_TASKS,
) -> Path:
    """Write per-sample directories plus a manifest of seeds and task tags."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or SceneConfig(h=32, w=32, frames=3)
    samples = []
    for task in tasks:
        for i in range(per_task):
            sid = f"{task.value}_{i:04d}"
            sseed = int(
                np.random.SeedSequence([seed, hash_id(task.value), i]).generate_state(1)[0]
            )
            ex = build_eval_example(task, sseed, cfg)
            write_sample(out_dir / sid, ex, sseed)
            samples.append({"id": sid, "task": task.value, "seed": sseed})
    manifest = {
        "version": 1,
        "seed": seed,
        "scene": dataclasses.asdict(cfg),
        "samples": samples,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return out_dir / "manifest.json"


def hash_id(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


# ----- metrics ----------------------------------------------------------------


def recolor_accuracy_one(output: np.ndarray, ex: TaskExample) -> bool:
    """Mean color inside the edited shape's mask, classified to the palette."""
    scene = ex.meta["target_scene"]
    idx = ex.meta["shape_index"]
    expected = scene.shapes[idx].color
    hits = 0
    for f in range(output.shape[0]):
        mask = shape_mask(scene, idx, f)
        if not mask.any():
            continue
        mean_rgb = output[f][mask].mean(axis=0)
        if corpus_mod.nearest_palette_color(mean_rgb) == expected:
            hits += 1
    return hits > output.shape[0] // 2


def reference_match_one(output: np.ndarray, ex: TaskExample, min_frac: float = 0.01) -> float:
    """Fraction of reference subjects whose color appears in the output."""
    scene = ex.meta["scene"]
    total = len(scene.shapes)
    if total == 0:
        return 0.0
    matched = 0
    labels = [classify_pixels(output[f]) for f in range(output.shape[0])]
    npix = output.shape[1] * output.shape[2]
    for s in scene.shapes:
        want = corpus_mod.PALETTE_NAMES.index(s.color)
        if any((lab == want).sum() >= min_frac * npix for lab in labels):
            matched += 1
    return matched / total


def selection_correct_one(output: np.ndarray, ex: TaskExample) -> bool:
    dists = [
        float(((output[0] - img) ** 2).mean()) for img in ex.spec.images
    ]
    return int(np.argmin(dists)) == ex.meta["select_index"] - 1


def motion_magnitude(output: np.ndarray) -> float:
    if output.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(output, axis=0)).mean())


# ----- evaluation -------------------------------------------------------------


def _load_system(checkpoint: Path, use_ema: bool = True):
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise CheckpointMissing(str(checkpoint))
    system, payload = GeneratorSystem.load_checkpoint(checkpoint)
    if use_ema and payload.get("ema"):
        system.load_ema(payload["ema"])
    system.eval()
    shift = float(payload.get("extra", {}).get("shift", 5.0))
    return system, payload, shift


def _sample_generator(seed: int, sample_id: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 2654435761 + hash_id(sample_id)) % (2**63 - 1))
    return g


def _iter_corpus(corpus_dir: Path, task: Task):
    corpus_dir = Path(corpus_dir)
    try:
        manifest = load_manifest(corpus_dir)
    except FileNotFoundError as e:
        raise CorpusMissing(str(e)) from e
    for row in manifest["samples"]:
        if row["task"] == task.value:
            yield row["id"], read_sample(corpus_dir / row["id"])


def _contact_sheet(pairs: list, path: Path):
    """Rows of (target frame 0 | output frame 0)."""
    if not pairs:
        return
    h, w = pairs[0][0].shape[1:3]
    rows = len(pairs)
    sheet = np.zeros((rows * h, 2 * w, 3), dtype=np.uint8)
    for r, (tgt, out) in enumerate(pairs):
        sheet[r * h : (r + 1) * h, :w] = np.clip(np.rint(tgt[0] * 255), 0, 255)
        sheet[r * h : (r + 1) * h, w:] = np.clip(np.rint(out[0] * 255), 0, 255)
    Image.fromarray(sheet).save(path)


def evaluate(
    checkpoint: Path,
    corpus_dir: Path,
    seed: int,
    out_dir: Optional[Path] = None,
    steps: int = 16,
    weights: GuidanceWeights = GuidanceWeights(),
    use_ema: bool = True,
    max_per_task: Optional[int] = None,
) -> dict:
    """Fixed-seed sampling over the held-out corpus; oracle metrics per task."""
    system, payload, shift = _load_system(checkpoint, use_ema)
    metrics: dict = {}
    counts: dict = {}
    sheets: dict = {t: [] for t in EVAL_TASKS}

    def outputs_for(task):
        n = 0
        for sid, ex in _iter_corpus(corpus_dir, task):
            if max_per_task is not None and n >= max_per_task:
                break
            n += 1
            gen = _sample_generator(seed, sid)
            out = sample(system, ex.spec, steps, weights, gen, shift=shift)
            sheets[task].append((ex.target, out))
            yield ex, out

    vals = [psnr(ex.target, out) for ex, out in outputs_for(Task.RECON_PROXY)]
    finite = [min(v, 99.0) for v in vals]
    metrics["reconstruction_psnr_db"] = float(np.mean(finite)) if finite else 0.0
    counts["recon_proxy"] = len(finite)

    hits = [recolor_accuracy_one(out, ex) for ex, out in outputs_for(Task.EDIT_IMAGE)]
    metrics["edit_accuracy"] = float(np.mean(hits)) if hits else 0.0
    counts["edit_image"] = len(hits)

    rates = [reference_match_one(out, ex) for ex, out in outputs_for(Task.REF2V)]
    metrics["reference_match_rate"] = float(np.mean(rates)) if rates else 0.0
    counts["ref2v"] = len(rates)

    sel = [selection_correct_one(out, ex) for ex, out in outputs_for(Task.SELECT_PROXY)]
    metrics["selection_accuracy"] = float(np.mean(sel)) if sel else 0.0
    counts["select_proxy"] = len(sel)

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoint_id": file_digest(checkpoint),
        "config_fingerprint": config_fingerprint(system.cfg),
        "seed": seed,
        "steps": steps,
        "weights": {"w_text": weights.w_text, "w_image": weights.w_image},
        "used_ema": bool(use_ema and payload.get("ema")),
        "metrics": metrics,
        "counts": counts,
    }
    problems = validate_report(report)
    if problems:
        raise ValueError(f"invalid report: {problems}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
        for task, pairs in sheets.items():
            _contact_sheet(pairs, out_dir / f"{task.value}_sheet.png")
    return report


def validate_report(report: dict) -> list:
    problems = []
    if report.get("schema_version") != REPORT_SCHEMA_VERSION:
        problems.append("bad schema_version")
    for key in ("checkpoint_id", "config_fingerprint", "seed", "metrics", "counts"):
        if key not in report:
            problems.append(f"missing {key}")
    for name, (lo, hi) in METRIC_RANGES.items():
        v = report.get("metrics", {}).get(name)
        if v is None or not np.isfinite(v) or not lo <= v <= hi:
            problems.append(f"metric {name} out of range: {v}")
    return problems


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def config_fingerprint(cfg: SystemConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()
    ).hexdigest()[:16]


# ----- image-guidance sweep -----------------------------------------------------


def cfg_sweep(
    checkpoint: Path,
    corpus_dir: Path,
    w_images,
    seed: int,
    out_dir: Optional[Path] = None,
    steps: int = 16,
    w_text: float = 5.0,
    max_samples: int = 16,
) -> list:
    """Fidelity/motion trade-off rows, one per image-guidance weight."""
    system, _, shift = _load_system(checkpoint)
    examples = []
    for sid, ex in _iter_corpus(corpus_dir, Task.REF2V):
        if len(examples) >= max_samples:
            break
        examples.append((sid, ex))
    rows = []
    for w_img in w_images:
        weights = GuidanceWeights(w_text=w_text, w_image=float(w_img))
        match, motion = [], []
        for sid, ex in examples:
            out = sample(
                system, ex.spec, steps, weights, _sample_generator(seed, sid), shift=shift
            )
            match.append(reference_match_one(out, ex))
            motion.append(motion_magnitude(out))
        rows.append(
            {
                "w_image": float(w_img),
                "reference_match_rate": float(np.mean(match)) if match else 0.0,
                "motion_magnitude": float(np.mean(motion)) if motion else 0.0,
            }
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "cfg_sweep.json", "w") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)
        with open(out_dir / "cfg_sweep.tsv", "w") as fh:
            fh.write("w_image\treference_match_rate\tmotion_magnitude\n")
            for r in rows:
                fh.write(
                    f"{r['w_image']}\t{r['reference_match_rate']:.4f}"
                    f"\t{r['motion_magnitude']:.6f}\n"
                )
    return rows


# ----- ablation harness ----------------------------------------------------------


ABLATION_FLAGS = ("no_learnable", "no_boundary")


def ablation_stage_configs() -> list:
    """Compact stage 0-2 budgets at 16x16 so paired retraining stays cheap."""
    tweaks = dict(frame_area=256, size_range=(5.0, 8.0), n_shapes=(1, 1), video_frames=(2, 2))
    s0 = dataclasses.replace(default_stage_config(0), steps=250, **tweaks)
    s1 = dataclasses.replace(default_stage_config(1), steps=200, **tweaks)
    s2 = dataclasses.replace(default_stage_config(2), steps=600, **tweaks)
    return [s0, s1, s2]


def _ablated_system_config(flag: Optional[str]) -> SystemConfig:
    base = SystemConfig()
    if flag is None:
        return base
    if flag == "no_learnable":
        return dataclasses.replace(
            base, encoder=dataclasses.replace(base.encoder, n_learnable=0)
        )
    if flag == "no_boundary":
        return dataclasses.replace(base, use_boundaries=False)
    raise ValueError(f"unknown ablation flag {flag!r}")


def _write_curves(path: Path, history_per_stage: list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "step", "task", "loss", "grad_norm", "grad_norm_raw"])
        for hist in history_per_stage:
            for row in hist:
                writer.writerow(
                    [
                        row["stage"], row["step"], row["task"], row["loss"],
                        row["grad_norm"], row.get("grad_norm_raw", row["grad_norm"]),
                    ]
                )


def _stage2_grad_variance(history_per_stage: list, window: int = 500) -> float:
    """Variance of the raw (pre-clip) gradient norm; clipping flattens the
    post-clip series to the ceiling and would hide the dynamics."""
    stage2 = [r for h in history_per_stage for r in h if r["stage"] == 2]
    tail = stage2[-window:]
    key = "grad_norm_raw"
    return float(np.var([r.get(key, r["grad_norm"]) for r in tail])) if tail else 0.0


def ablation_run(
    flag: str,
    out_dir: Path,
    stage_cfgs: Optional[list] = None,
    seeds=(0, 1, 2),
    workers: int = 0,
) -> dict:
    """Retrain with and without the flagged component; log paired curves.

    The summary reports stage-2 gradient-norm variance per arm. When the
    ablated arm fails to show higher variance the summary flags the divergence
    instead of failing.
    """
    if flag not in ABLATION_FLAGS:
        raise ValueError(f"flag must be one of {ABLATION_FLAGS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgs = stage_cfgs or ablation_stage_configs()
    var_full, var_ablated = [], []
    for seed in seeds:
        for arm, arm_flag in (("full", None), (flag, flag)):
            torch.manual_seed(seed)
            system = GeneratorSystem(_ablated_system_config(arm_flag))
            run_dir = out_dir / f"{arm}_seed{seed}"
            _, hists = run_curriculum(system, cfgs, run_dir, seed, workers=workers)
            _write_curves(out_dir / f"{arm}_seed{seed}.csv", hists)
            v = _stage2_grad_variance(hists)
            (var_full if arm == "full" else var_ablated).append(v)
    summary = {
        "flag": flag,
        "seeds": list(seeds),
        "stage2_grad_norm_variance_full": var_full,
        "stage2_grad_norm_variance_ablated": var_ablated,
        "ablated_variance_higher": float(np.mean(var_ablated)) > float(np.mean(var_full)),
    }
    summary["diverges_from_expectation"] = not summary["ablated_variance_higher"]
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary
