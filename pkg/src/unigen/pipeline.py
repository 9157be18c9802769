"""Glue between conditioning specs and the denoiser.

GeneratorSystem owns every parameterized piece (condition encoder, connector,
boundary projector, native caption encoder, denoiser) and turns a
ConditioningSpec plus target pixels into condition rows, a latent layout, and
a velocity prediction. It also implements the shared checkpoint format.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .context import ConditioningSpec, SegmentKind
from .diffusion import fm_loss, make_training_example
from .encoder import (
    ConditionEncoder,
    Connector,
    EncoderConfig,
    NativeTextEncoder,
    condition_sequence,
)
from .latents import (
    BlockKind,
    BoundaryProjector,
    LatentBlock,
    LatentLayout,
    assign_rope,
    denormalize_latent,
    latent_channels,
    layout_latents,
    normalize_latent,
    vae_decode,
    vae_encode,
)
from .model import DenoiseInput, Denoiser, ModelConfig

CHECKPOINT_VERSION = 1

TRAINABLE_GROUPS = ("connectors", "learnable_tokens", "mmdit", "native_text_encoder")


class IncompatibleCheckpoint(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rope_gap: int = 0
    use_boundaries: bool = True

    def __post_init__(self):
        if self.encoder.d_cond != self.model.d_cond:
            raise ValueError("encoder d_cond must match model d_cond")
        if self.model.c_lat != latent_channels():
            raise ValueError(f"model c_lat must be {latent_channels()}")

    def to_dict(self) -> dict:
        return {
            "encoder": dataclasses.asdict(self.encoder),
            "model": dataclasses.asdict(self.model),
            "rope_gap": self.rope_gap,
            "use_boundaries": self.use_boundaries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            model=ModelConfig(**d["model"]),
            rope_gap=d.get("rope_gap", 0),
            use_boundaries=d.get("use_boundaries", True),
        )


@dataclass
class PreparedCondition:
    """Condition rows plus the boundary-source embeddings for latent blocks."""

    tokens: torch.Tensor  # [L, d_cond]
    visual_pairs: list  # [(start, end)] per visual occurrence, d_cond
    canonical: tuple  # (start, end) fallback pair, d_cond


def reference_blocks(spec: ConditioningSpec) -> list:
    """VAE-encode the spec's visual inputs into clean latent blocks."""
    if not spec.latent_refs:
        return []
    blocks = []
    for i, img in enumerate(spec.images):
        z = normalize_latent(torch.from_numpy(np.ascontiguousarray(vae_encode(img))))
        blocks.append(LatentBlock(BlockKind.REF_IMAGE, z, clean=True, source_index=i))
    if spec.video is not None:
        z = normalize_latent(
            torch.from_numpy(np.ascontiguousarray(vae_encode(spec.video)))
        )
        blocks.append(LatentBlock(BlockKind.REF_VIDEO, z, clean=True, source_index=0))
    return blocks


def layout_for_spec(
    spec: ConditioningSpec, gap: int = 0, use_boundaries: bool = True
) -> LatentLayout:
    """Structural layout (entries, rope coords) with a zeroed target latent.

    Boundary token slots are placeholders; this path serves layout inspection
    and golden-file tests without touching model weights.
    """
    blocks = reference_blocks(spec)
    f, h, w = spec.target_shape
    target = torch.zeros(f, h // 8, w // 8, latent_channels())
    blocks.append(LatentBlock(BlockKind.TARGET, target, clean=False))
    boundaries = [(None, None)] * len(blocks) if use_boundaries else None
    layout = layout_latents(blocks, boundaries)
    assign_rope(layout, gap)
    return layout


class GeneratorSystem(nn.Module):
    def __init__(self, cfg: SystemConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConditionEncoder(cfg.encoder)
        self.connector = Connector(cfg.encoder.width, cfg.encoder.d_cond)
        self.boundary_proj = BoundaryProjector(cfg.encoder.d_cond, cfg.model.d_model)
        self.native = NativeTextEncoder(cfg.encoder.d_cond, cfg.encoder.vocab_buckets)
        self.denoiser = Denoiser(cfg.model)
        self.mode = "vlm"  # or "native" for the pretraining base

    # ----- trainable-module gating -------------------------------------
    def group_parameters(self, group: str):
        if group == "connectors":
            yield from self.connector.parameters()
            yield from self.boundary_proj.parameters()
        elif group == "learnable_tokens":
            yield self.encoder.learnable_tokens
        elif group == "mmdit":
            yield from self.denoiser.parameters()
        elif group == "native_text_encoder":
            yield from self.native.parameters()
        else:
            raise KeyError(f"unknown trainable group {group!r}")

    def set_trainable(self, groups):
        unknown = set(groups) - set(TRAINABLE_GROUPS)
        if unknown:
            raise KeyError(f"unknown trainable groups {sorted(unknown)}")
        for p in self.parameters():
            p.requires_grad_(False)
        for g in groups:
            for p in self.group_parameters(g):
                p.requires_grad_(True)

    # ----- conditioning -------------------------------------------------
    def prepare_condition(self, spec: ConditioningSpec) -> PreparedCondition:
        if self.mode == "native":
            tokens = self.native.encode(spec.text or "")
            pair = (self.native.boundary_start, self.native.boundary_end)
            return PreparedCondition(tokens=tokens, visual_pairs=[], canonical=pair)
        ctx = self.encoder.assemble(spec)
        seq = condition_sequence(self.encoder, self.connector, ctx, spec)
        return PreparedCondition(
            tokens=seq.tokens,
            visual_pairs=seq.visual_pairs,
            canonical=(seq.start_embed, seq.end_embed),
        )

    # ----- latent layout ------------------------------------------------
    def build_layout(
        self,
        spec: ConditioningSpec,
        prepared: PreparedCondition,
        target_latent: torch.Tensor,
    ) -> LatentLayout:
        blocks = reference_blocks(spec)
        blocks.append(
            LatentBlock(BlockKind.TARGET, target_latent, clean=False, source_index=None)
        )
        boundaries = None
        if self.cfg.use_boundaries:
            pairs = []
            for bi, block in enumerate(blocks):
                if block.kind is BlockKind.TARGET or bi >= len(prepared.visual_pairs):
                    src = prepared.canonical
                else:
                    src = prepared.visual_pairs[bi]
                pairs.append(
                    (self.boundary_proj(src[0]), self.boundary_proj(src[1]))
                )
            boundaries = pairs
        layout = layout_latents(blocks, boundaries)
        assign_rope(layout, self.cfg.rope_gap)
        return layout

    # ----- denoising ----------------------------------------------------
    def target_latent_shape(self, spec: ConditioningSpec) -> tuple:
        f, h, w = spec.target_shape
        return (f, h // 8, w // 8, self.cfg.model.c_lat)

    def velocity(
        self,
        prepared: PreparedCondition,
        spec: ConditioningSpec,
        x_t: torch.Tensor,
        t: float,
    ) -> torch.Tensor:
        layout = self.build_layout(spec, prepared, x_t)
        v = self.denoiser(DenoiseInput(cond=prepared.tokens, layout=layout, t=t))
        return v[0]

    def training_loss(
        self,
        spec: ConditioningSpec,
        target_pixels: np.ndarray,
        generator: torch.Generator,
        shift: float,
    ):
        dtype = self.denoiser.cond_in.weight.dtype
        z0 = normalize_latent(
            torch.from_numpy(np.ascontiguousarray(vae_encode(target_pixels)))
        ).to(dtype)
        state = make_training_example(z0, generator, shift)
        prepared = self.prepare_condition(spec)
        v = self.velocity(prepared, spec, state.x_t, state.t)
        return fm_loss(v, state.v_target.to(v.dtype)), state

    def decode_target(self, z: torch.Tensor) -> np.ndarray:
        lat = denormalize_latent(z.detach().cpu().double().numpy())
        return vae_decode(np.clip(lat, 0.0, 1.0))

    # ----- checkpointing --------------------------------------------------
    def save_checkpoint(
        self,
        path,
        *,
        stage: Optional[int] = None,
        step: int = 0,
        ema: Optional[dict] = None,
        extra: Optional[dict] = None,
    ):
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "mode": self.mode,
            "stage": stage,
            "step": step,
            "state": self.state_dict(),
            "ema": ema,
            "extra": extra or {},
        }
        torch.save(payload, path)

    @classmethod
    def load_checkpoint(cls, path) -> tuple:
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:  # noqa: BLE001 - surface as a checkpoint error
            raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {e}") from e
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise IncompatibleCheckpoint(
                f"checkpoint format {payload.get('format_version')} unsupported"
            )
        cfg = SystemConfig.from_dict(payload["config"])
        system = cls(cfg)
        try:
            system.load_state_dict(payload["state"])
        except RuntimeError as e:
            raise IncompatibleCheckpoint(str(e)) from e
        system.mode = payload.get("mode", "vlm")
        return system, payload

    def ema_parameters_copy(self) -> dict:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def load_ema(self, ema: dict):
        self.load_state_dict(ema)
