"""End-to-end segmentation network: encoder, fusion, decoder, logit head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .decoder import DecoderResult, GaussianField, SegmentationHead, UncertaintyDecoder
from .encoder import Encoder, FeaturePyramid
from .fusion import GlobalLocalFusion
from .modules import Module
from .tensor import Tensor


@dataclass
class NetworkOutput:
    logits: Tensor
    f_local: Tensor
    f_global: Tensor
    field_local: GaussianField | None
    field_global: GaussianField | None
    u_local: Tensor | None
    u_global: Tensor | None


class SegmentationNetwork(Module):
    """Binary building-footprint model over (3,H,W) images, H,W % 32 == 0."""

    def __init__(self, config: ModelConfig, init_rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = init_rng if init_rng is not None else np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A17]))
        self.encoder = Encoder(
            widths=config.widths,
            depths=config.depths,
            groups=config.modulator_groups,
            heads=config.heads,
            ffn_ratios=config.ffn_ratios,
            drop_rate=config.drop_path_rate,
            rng=rng,
        )
        self.fusion = GlobalLocalFusion(
            level_widths=config.widths,
            out_width=config.fusion_width,
            local_levels=config.local_levels,
            global_levels=config.global_levels,
            rng=rng,
        )
        if config.use_uncertainty:
            self.decoder = UncertaintyDecoder(
                channels=config.fusion_width,
                sample_count=config.sample_count,
                std_floor=config.std_floor,
                zero_std=config.zero_std,
                map_gradients=config.uncertainty_gradients,
                rng=rng,
            )
        else:
            self.decoder = None
        self.head = SegmentationHead(config.fusion_width, rng=rng)

    def forward(self, image: Tensor, rng: np.random.Generator | None = None,
                training: bool = False) -> NetworkOutput:
        pyramid: FeaturePyramid = self.encoder(image, training=training, rng=rng)
        f_local, f_global = self.fusion(pyramid)

        if self.decoder is not None:
            if rng is None:
                raise ValueError("uncertainty decoding draws samples and needs an rng")
            result: DecoderResult = self.decoder(f_local, f_global, rng)
            fused = result.fused
            fields = (result.field_local, result.field_global)
            umaps = (result.u_local, result.u_global)
        else:
            fused = f_local + f_global
            fields = (None, None)
            umaps = (None, None)

        logits = self.head(fused, factor=4)
        return NetworkOutput(logits, f_local, f_global, fields[0], fields[1], umaps[0], umaps[1])

    __call__ = forward


def parameter_breakdown(model: SegmentationNetwork) -> dict[str, int]:
    """Trainable scalar counts per top-level component plus the total."""
    out: dict[str, int] = {}
    for name, child in model.__dict__.get("_children", {}).items():
        out[name] = sum(p.size for _, p in child.named_parameters())
    out["total"] = sum(out.values())
    return out


def count_parameters(config: ModelConfig) -> dict[str, int]:
    """Build a model from the config and report its parameter counts.

    The count depends only on the architecture fields, never on batch size
    or input resolution.
    """
    return parameter_breakdown(SegmentationNetwork(config))
