"""Acceptance suite: one test per criterion, printed as a PASS/FAIL line.

The toy-training criteria (9, 10, 12) share a session-scoped curriculum run.
Set UNIGEN_ACCEPT_CACHE=<dir> to reuse a finished run across pytest sessions.
Run with `pytest tests/test_acceptance.py -v -s` to see the lines live.
"""

import dataclasses
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from golden_tools import GOLDEN_DIR, GOLDEN_SPECS, package_text
from test_bucketing import brute_force_bucket

from unigen.bucketing import Bucket, build_buckets, rescale
from unigen.cli import main as cli_main
from unigen.context import ConditioningSpec, Task
from unigen.corpus import SceneConfig
from unigen.diffusion import (
    GuidanceWeights,
    cfg_combine,
    drop_conditions,
    shift_timestep,
)
from unigen.encoder import Connector, EncoderConfig
from unigen.evaluate import ablation_run, build_corpus, evaluate
from unigen.latents import BoundaryProjector
from unigen.model import ModelConfig
from unigen.pipeline import GeneratorSystem, SystemConfig
from unigen.trainer import (
    RunSeeds,
    default_stage_config,
    ema_update,
    run_curriculum,
    run_stage,
)


def report(criterion: int, name: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {criterion:02d} {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    assert passed, line


# ----- shared heavy fixtures ---------------------------------------------------


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    cache = os.environ.get("UNIGEN_ACCEPT_CACHE")
    out = Path(cache) if cache else tmp_path_factory.mktemp("accept_run")
    out.mkdir(parents=True, exist_ok=True)
    done = out / "DONE"
    if not done.exists():
        torch.manual_seed(0)
        system = GeneratorSystem(SystemConfig())
        cfgs = [default_stage_config(i) for i in range(4)]
        t0 = time.time()
        paths, hists = run_curriculum(system, cfgs, out, master_seed=0)
        (out / "histories.json").write_text(json.dumps(hists))
        torch.manual_seed(123)
        untrained = GeneratorSystem(SystemConfig())
        untrained.save_checkpoint(out / "untrained.pt", stage=3, extra={"shift": 5.0})
        build_corpus(out / "corpus", seed=99, per_task=24, cfg=SceneConfig(h=32, w=32, frames=3))
        (out / "train_seconds.txt").write_text(str(time.time() - t0))
        done.touch()
    hists = json.loads((out / "histories.json").read_text())
    return {
        "dir": out,
        "histories": hists,
        "final": out / "stage3.pt",
        "untrained": out / "untrained.pt",
        "corpus": out / "corpus",
    }


@pytest.fixture(scope="session")
def eval_reports(trained_run):
    out = trained_run["dir"]
    cached = out / "eval_reports.json"
    if cached.exists():
        return json.loads(cached.read_text())
    reports = {
        "trained": evaluate(
            trained_run["final"], trained_run["corpus"], seed=7, steps=16,
            out_dir=out / "eval_trained",
        ),
        "untrained": evaluate(
            trained_run["untrained"], trained_run["corpus"], seed=7, steps=16,
            out_dir=out / "eval_untrained",
        ),
    }
    cached.write_text(json.dumps(reports))
    return reports


# ----- criterion 1: layout golden files ------------------------------------------


def test_criterion_01_layout_goldens():
    t0 = time.time()
    mismatches = [
        g["name"]
        for g in GOLDEN_SPECS
        if package_text(g) != (GOLDEN_DIR / f"{g['name']}.txt").read_text()
    ]
    elapsed = time.time() - t0
    report(
        1,
        "layout vs hand-enumerated goldens",
        not mismatches and elapsed < 1.0,
        f"{len(GOLDEN_SPECS)} specs in {elapsed:.3f}s, mismatches={mismatches}",
    )


# ----- criterion 2: causality ------------------------------------------------------


def test_criterion_02_causal_mask_exact():
    torch.manual_seed(11)
    enc_cfg = EncoderConfig(depth=3, width=32, heads=2, n_learnable=8, d_cond=16)
    from unigen.encoder import ConditionEncoder

    enc = ConditionEncoder(enc_cfg).double()
    rng = np.random.default_rng(0)
    failures = 0
    for trial in range(100):
        n_img = int(rng.integers(0, 3))
        has_vid = bool(rng.integers(0, 2))
        images = tuple(rng.random((8, 8, 3)) for _ in range(n_img))
        video = rng.random((int(rng.integers(1, 4)), 8, 8, 3)) if has_vid else None
        task = Task.EDIT_VIDEO if (n_img or has_vid) else Task.T2V
        spec = ConditioningSpec(
            task,
            ["a red circle moves", "two shapes drift apart", "make it blue"][trial % 3],
            images=images,
            video=video,
            target_shape=(1, 8, 8),
        )
        ctx = enc.assemble(spec)
        emb = enc.embed_context(ctx, spec)
        base = enc.encode_from_embeddings(emb)
        j = int(rng.integers(1, ctx.total_len))
        pert = emb.clone()
        pert[j] += 1.0 + rng.random()
        out = enc.encode_from_embeddings(pert)
        if not torch.equal(out[:j], base[:j]):
            failures += 1
    report(2, "causal masking exact on 100 contexts", failures == 0, f"failures={failures}")


# ----- criterion 3: gradient checks --------------------------------------------------


def _fd_check(loss_value, params, n_points, tol, rng):
    checked = 0
    worst = 0.0
    loss = loss_value()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    while checked < n_points:
        pi = int(rng.integers(len(params)))
        if grads[pi] is None or params[pi].numel() == 0:
            continue
        p = params[pi]
        idx = tuple(rng.integers(s) for s in p.shape)
        h = 1e-6
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_value().item()
            p[idx] = orig - h
            down = loss_value().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        g = grads[pi][idx].item()
        rel = abs(g - fd) / max(abs(fd), abs(g), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return worst < tol, worst


def test_criterion_03_gradient_checks():
    t0 = time.time()
    rng = np.random.default_rng(1)
    torch.manual_seed(5)

    conn = Connector(6, 9).double()
    x = torch.randn(4, 6, dtype=torch.float64)
    w = torch.randn(4, 9, dtype=torch.float64)
    ok_c, worst_c = _fd_check(lambda: (conn(x) * w).sum(), list(conn.parameters()), 10, 1e-4, rng)

    proj = BoundaryProjector(6, 9).double()
    xb = torch.randn(6, dtype=torch.float64)
    wb = torch.randn(9, dtype=torch.float64)
    ok_b, worst_b = _fd_check(lambda: (proj(xb) * wb).sum(), list(proj.parameters()), 10, 1e-4, rng)

    enc = EncoderConfig(depth=2, width=24, heads=2, n_learnable=4, d_cond=12)
    mdl = ModelConfig(depth=2, d_model=24, heads=2, d_cond=12, zero_init=False)
    system = GeneratorSystem(SystemConfig(encoder=enc, model=mdl)).double()
    spec = ConditioningSpec(
        Task.EDIT_IMAGE,
        "make Image 1 blue",
        images=(np.random.default_rng(2).random((8, 8, 3)),),
        target_shape=(1, 8, 8),
    )
    xt = torch.randn(system.target_latent_shape(spec), dtype=torch.float64)
    wf = torch.randn(xt.shape, dtype=torch.float64)

    def full_loss():
        prepared = system.prepare_condition(spec)
        return (system.velocity(prepared, spec, xt, 0.41) * wf).sum()

    params = [p for p in system.parameters() if p.requires_grad]
    ok_f, worst_f = _fd_check(full_loss, params, 10, 1e-3, rng)
    elapsed = time.time() - t0
    report(
        3,
        "finite-difference gradient checks",
        ok_c and ok_b and ok_f and elapsed < 120,
        f"connector {worst_c:.2e}, boundary {worst_b:.2e}, full {worst_f:.2e}, {elapsed:.1f}s",
    )


# ----- criterion 4: condition dropout ----------------------------------------------


def test_criterion_04_dropout_rates():
    rng = np.random.default_rng(3)
    base = ConditioningSpec(
        Task.EDIT_VIDEO,
        "make it blue",
        images=(np.zeros((8, 8, 3), dtype=np.float32),),
        video=np.zeros((2, 8, 8, 3), dtype=np.float32),
        target_shape=(2, 8, 8),
    )
    n = 100_000
    drops = {"text": 0, "images": 0, "video": 0}
    for _ in range(n):
        out = drop_conditions(base, 0.1, rng)
        drops["text"] += out.text == ""
        drops["images"] += out.images == ()
        drops["video"] += out.video is None
    rates = {k: v / n for k, v in drops.items()}
    rate_ok = all(abs(r - 0.1) <= 0.005 for r in rates.values())
    violations = 0
    for _ in range(20_000):
        out = drop_conditions(base, 0.25, rng, force_joint=True)
        if (out.images == ()) != (out.video is None):
            violations += 1
    report(
        4,
        "dropout rate 0.100±0.005 and joint mode",
        rate_ok and violations == 0,
        f"rates={ {k: round(v, 4) for k, v in rates.items()} }, joint violations={violations}",
    )


# ----- criterion 5: CFG identities ---------------------------------------------------


def test_criterion_05_cfg_identities():
    gen = torch.Generator().manual_seed(4)
    v_u = torch.randn(6, generator=gen)
    v_i = torch.randn(6, generator=gen)
    v_f = torch.randn(6, generator=gen)
    zero_ok = torch.equal(cfg_combine(v_u, v_i, v_f, GuidanceWeights(0.0, 0.0)), v_u)
    one = cfg_combine(v_u, v_i, v_f, GuidanceWeights(1.0, 1.0))
    one_ok = torch.allclose(one, v_f, atol=1e-6)
    scalar = float(
        cfg_combine(torch.tensor(0.0), torch.tensor(1.0), torch.tensor(2.0), GuidanceWeights())
    )
    defaults = GuidanceWeights()
    report(
        5,
        "cfg identities and worked example",
        zero_ok and one_ok and abs(scalar - 6.5) < 1e-12
        and defaults.w_text == 5.0 and defaults.w_image == 1.5,
        f"scalar={scalar}",
    )


# ----- criterion 6: stage gating ------------------------------------------------------


def _tiny_stage_overrides():
    return dict(frame_area=256, size_range=(5.0, 8.0), n_shapes=(1, 1), video_frames=(2, 2))


def test_criterion_06_stage_gating():
    torch.manual_seed(6)
    system = GeneratorSystem(SystemConfig())
    s0 = dataclasses.replace(default_stage_config(0), steps=3, **_tiny_stage_overrides())
    run_stage(system, s0, RunSeeds.derive(1, 0))
    snap_native = {
        k: v.clone() for k, v in system.state_dict().items() if k.startswith("native.")
    }
    snap_all = {k: v.clone() for k, v in system.state_dict().items()}
    s1 = dataclasses.replace(default_stage_config(1), steps=4, **_tiny_stage_overrides())
    run_stage(system, s1, RunSeeds.derive(1, 1))
    after1 = system.state_dict()
    frozen_groups_ok = all(
        torch.equal(snap_all[k], after1[k])
        for k in snap_all
        if k.startswith(("denoiser.", "native."))
        or (k.startswith("encoder.") and k != "encoder.learnable_tokens")
    )
    tuned_ok = any(
        not torch.equal(snap_all[k], after1[k])
        for k in snap_all
        if k.startswith(("connector.", "boundary_proj.")) or k == "encoder.learnable_tokens"
    )
    for stage in (2, 3):
        cfg = dataclasses.replace(default_stage_config(stage), steps=3, **_tiny_stage_overrides())
        run_stage(system, cfg, RunSeeds.derive(1, stage))
    native_ok = all(
        torch.equal(snap_native[k], system.state_dict()[k]) for k in snap_native
    )
    report(
        6,
        "trainable-set gating bitwise",
        frozen_groups_ok and tuned_ok and native_ok,
        f"stage1 frozen ok={frozen_groups_ok}, native frozen after stage0={native_ok}",
    )


# ----- criterion 7: EMA and clipping ---------------------------------------------------


def test_criterion_07_ema_and_clipping(trained_run):
    shadow = {"w": torch.zeros(1, dtype=torch.float64)}
    params = {"w": torch.ones(1, dtype=torch.float64)}
    cases = [
        (0.0, 1.0),
        (1.0, 0.0),
        (0.9999, 0.0001),
    ]
    ema_ok = all(
        abs(float(ema_update(shadow, params, d)["w"]) - want) <= 1e-12 for d, want in cases
    )
    norms = [
        row["grad_norm"] for hist in trained_run["histories"] for row in hist
    ]
    clip_ok = all(n <= 1.0 + 1e-6 for n in norms)
    report(
        7,
        "ema arithmetic and post-clip norms",
        ema_ok and clip_ok and len(norms) > 0,
        f"{len(norms)} steps, max norm {max(norms):.6f}",
    )


# ----- criterion 8: timestep shift ------------------------------------------------------


def test_criterion_08_timestep_shift():
    ident_ok = all(
        abs(shift_timestep(u, 1.0) - u) < 1e-12 for u in np.linspace(0, 1, 101)
    )
    point_ok = abs(shift_timestep(0.5, 3.0) - 0.75) < 1e-12
    grid = [shift_timestep(u, 5.0) for u in np.linspace(0, 1, 1001)]
    mono_ok = all(b > a for a, b in zip(grid, grid[1:]))
    ends_ok = grid[0] == 0.0 and abs(grid[-1] - 1.0) < 1e-12
    report(8, "timestep shift identity/value/monotonicity", ident_ok and point_ok and mono_ok and ends_ok)


# ----- criterion 9: toy training outcome --------------------------------------------------


def test_criterion_09a_stage3_loss_halves(trained_run):
    stage3 = trained_run["histories"][-1]
    start = float(np.mean([r["loss"] for r in stage3[:100]]))
    end = float(np.mean([r["loss"] for r in stage3[-100:]]))
    report(
        9,
        "stage-3 loss <= 50% of stage start",
        end <= 0.5 * start,
        f"start {start:.4f} -> end {end:.4f} (ratio {end / start:.3f})",
    )


def test_criterion_09b_reconstruction_psnr(eval_reports):
    trained = eval_reports["trained"]["metrics"]["reconstruction_psnr_db"]
    base = eval_reports["untrained"]["metrics"]["reconstruction_psnr_db"]
    report(
        9,
        "reconstruction PSNR >= baseline + 6 dB",
        trained >= base + 6.0,
        f"untrained {base:.2f} dB, trained {trained:.2f} dB",
    )


def test_criterion_09c_recolor_accuracy(eval_reports):
    acc = eval_reports["trained"]["metrics"]["edit_accuracy"]
    report(9, "recolor accuracy >= 80%", acc >= 0.8, f"accuracy {acc:.3f}")


def test_criterion_09d_selection_accuracy(eval_reports):
    acc = eval_reports["trained"]["metrics"]["selection_accuracy"]
    report(9, "selection accuracy >= 80%", acc >= 0.8, f"accuracy {acc:.3f}")


# ----- criterion 10: ablation harness -------------------------------------------------------


@pytest.fixture(scope="session")
def ablation_summary(tmp_path_factory):
    cache = os.environ.get("UNIGEN_ACCEPT_CACHE")
    out = (Path(cache) / "ablation") if cache else tmp_path_factory.mktemp("ablation")
    summary_path = out / "summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text()), out
    return ablation_run("no_learnable", out, seeds=(0, 1, 2)), out


def test_criterion_10_ablation_harness(ablation_summary):
    summary, out = ablation_summary
    csvs = sorted(out.glob("*_seed*.csv"))
    grids_ok = True
    for seed in summary["seeds"]:
        full = (out / f"full_seed{seed}.csv").read_text().splitlines()
        ablated = (out / f"no_learnable_seed{seed}.csv").read_text().splitlines()
        full_grid = [line.split(",")[:2] for line in full[1:]]
        ablated_grid = [line.split(",")[:2] for line in ablated[1:]]
        grids_ok = grids_ok and full_grid == ablated_grid
    structure_ok = (
        len(csvs) == 6
        and len(summary["stage2_grad_norm_variance_full"]) == 3
        and len(summary["stage2_grad_norm_variance_ablated"]) == 3
        and "diverges_from_expectation" in summary
    )
    flag_ok = summary["diverges_from_expectation"] == (not summary["ablated_variance_higher"])
    expected_direction = summary["ablated_variance_higher"]
    detail = (
        f"variance full={np.mean(summary['stage2_grad_norm_variance_full']):.4f} "
        f"ablated={np.mean(summary['stage2_grad_norm_variance_ablated']):.4f}; "
        + ("matches expectation" if expected_direction else "divergence flagged in report")
    )
    report(10, "ablation harness paired curves", structure_ok and grids_ok and flag_ok, detail)


# ----- criterion 11: bucketing ----------------------------------------------------------------


def test_criterion_11_bucketing_brute_force():
    rng = np.random.default_rng(11)
    mismatches = []
    for _ in range(50):
        area = int(rng.integers(512, 16384))
        ratio = float(rng.uniform(0.3, 3.0))
        (b,) = build_buckets(area, ratios=[ratio], factor=8)
        want = brute_force_bucket(area, ratio)
        if (b.height, b.width) != want:
            mismatches.append((area, ratio, (b.height, b.width), want))
    table = build_buckets(1024, ratios=[0.5625, 1.0, 16 / 9], factor=8)
    shape_ok = True
    for bucket in table:
        shapes = set()
        for _ in range(10):
            h = int(rng.integers(9, 120))
            w = int(rng.integers(9, 120))
            out = rescale(rng.random((h, w, 3)).astype(np.float32), bucket)
            shapes.add(out.shape)
        shape_ok = shape_ok and shapes == {(bucket.height, bucket.width, 3)}
    report(
        11,
        "bucket builder vs brute force; uniform shapes",
        not mismatches and shape_ok,
        f"mismatches={mismatches[:3]}",
    )


# ----- criterion 12: determinism ----------------------------------------------------------------


def test_criterion_12_bit_reproducible(trained_run, tmp_path):
    ckpt = str(trained_run["final"])
    outs = []
    for name in ("s1", "s2"):
        rc = cli_main(
            [
                "sample",
                "--checkpoint", ckpt,
                "--task", "t2v",
                "--text", "red circle moves right",
                "--frames", "2",
                "--steps", "6",
                "--seed", "21",
                "--out", str(tmp_path / name),
            ]
        )
        assert rc == 0
        outs.append(
            {p.name: p.read_bytes() for p in sorted((tmp_path / name).glob("*"))}
        )
    sample_ok = outs[0] == outs[1]
    reps = []
    for name in ("e1", "e2"):
        rc = cli_main(
            [
                "evaluate",
                "--checkpoint", ckpt,
                "--corpus", str(trained_run["corpus"]),
                "--seed", "13",
                "--steps", "4",
                "--max-per-task", "3",
                "--out", str(tmp_path / name),
            ]
        )
        assert rc == 0
        reps.append((tmp_path / name / "report.json").read_bytes())
    eval_ok = reps[0] == reps[1]
    report(12, "sample/evaluate bit-reproducible", sample_ok and eval_ok)
