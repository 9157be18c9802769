"""Flow-matching objective, condition dropout, and guided Euler sampling.

Convention used everywhere: t=0 is pure noise, t=1 is data, the interpolant is
x_t = t*x0 + (1-t)*eps, and the regression target is the constant velocity
v = x0 - eps of that straight path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .context import ConditioningSpec


def shift_timestep(u, s: float):
    """Monotone remap t = s*u / (1 + (s-1)*u); s=1 is the identity."""
    if s < 1.0:
        raise ValueError("shift must be >= 1")
    return (s * u) / (1.0 + (s - 1.0) * u)


@dataclass
class NoisingState:
    x0: torch.Tensor
    eps: torch.Tensor
    t: float
    x_t: torch.Tensor
    v_target: torch.Tensor


def make_training_example(
    x0: torch.Tensor, generator: torch.Generator, s: float = 1.0
) -> NoisingState:
    """Sample u uniformly, shift it, and build the interpolant around x0."""
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    t = float(shift_timestep(u, s))
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = t * x0 + (1.0 - t) * eps
    return NoisingState(x0=x0, eps=eps, t=t, x_t=x_t, v_target=x0 - eps)


def fm_loss(
    pred: torch.Tensor,
    v_target: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Squared error over target tokens; reference latents never contribute.

    mask, when given, must broadcast against pred; the mean normalizes by the
    number of selected elements.
    """
    se = (pred - v_target) ** 2
    if mask is not None:
        m = torch.broadcast_to(mask.to(se.dtype), se.shape)
        if reduction == "sum":
            return (se * m).sum()
        return (se * m).sum() / m.sum().clamp_min(1)
    return se.sum() if reduction == "sum" else se.mean()


def drop_conditions(
    spec: ConditioningSpec,
    p: float,
    rng: np.random.Generator,
    force_joint: bool = False,
) -> ConditioningSpec:
    """Independently drop text / images / video with probability p each.

    Dropping replaces a modality with its null form (empty text, no visual
    segments). force_joint ties the image and video decisions together so
    visual conditions vanish all at once or not at all.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0,1]")
    drop_text = rng.random() < p
    if force_joint:
        drop_visual = rng.random() < p
        drop_images = drop_video = drop_visual
    else:
        drop_images = rng.random() < p
        drop_video = rng.random() < p
    out = spec
    if drop_text and spec.text is not None:
        out = out.replace(text="")
    if drop_images and len(spec.images) > 0:
        out = out.replace(images=())
    if drop_video and spec.video is not None:
        out = out.replace(video=None)
    return out


@dataclass(frozen=True)
class GuidanceWeights:
    w_text: float = 5.0
    w_image: float = 1.5

    def __post_init__(self):
        if self.w_text < 0 or self.w_image < 0:
            raise ValueError("guidance weights must be non-negative")


TEXT_ONLY_DEFAULT_W_TEXT = 7.0


def cfg_combine(v_uncond, v_img, v_full, w: GuidanceWeights):
    """Dual guidance: image term inside, text term outside.

    v_img conditions on visuals only, v_full on visuals plus text. With
    v_img == v_uncond this collapses to the familiar two-term form.
    """
    return v_uncond + w.w_image * (v_img - v_uncond) + w.w_text * (v_full - v_img)


def unconditional_spec(spec: ConditioningSpec) -> ConditioningSpec:
    return spec.replace(text="", images=(), video=None)


def visual_only_spec(spec: ConditioningSpec) -> ConditioningSpec:
    return spec.replace(text="")


def sample(
    system,
    spec: ConditioningSpec,
    steps: int,
    weights: GuidanceWeights,
    generator: torch.Generator,
    shift: float = 1.0,
) -> np.ndarray:
    """Euler-integrate the guided velocity from noise to pixels.

    The target latent starts as standard noise at t=0; each step evaluates the
    guidance branches at the shifted time grid and advances by the grid
    increment. Returns decoded pixels clipped to [0,1].
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    branches = [unconditional_spec(spec), spec]
    if spec.has_visuals():
        branches.insert(1, visual_only_spec(spec))
    with torch.no_grad():
        conds = [system.prepare_condition(b) for b in branches]
        x = torch.randn(system.target_latent_shape(spec), generator=generator)
        ts = [float(shift_timestep(i / steps, shift)) for i in range(steps + 1)]
        for i in range(steps):
            t = ts[i]
            vs = [system.velocity(cond, b, x, t) for cond, b in zip(conds, branches)]
            if spec.has_visuals():
                v = cfg_combine(vs[0], vs[1], vs[2], weights)
            else:
                v = cfg_combine(vs[0], vs[0], vs[1], weights)
            x = x + (ts[i + 1] - ts[i]) * v
    return system.decode_target(x)
