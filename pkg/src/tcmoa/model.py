"""Full fusion model: backbone plus encoder/decoder fusion layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, FusionTrace, make_backbone
from .moa import MoaLayer, TaskId, make_moa_layer


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_adapters: int = 4
    top_k: int = 2
    group_size: int = 4
    bottleneck: int | None = None  # None -> dim // 4


@dataclass
class FusionModel:
    cfg: ModelConfig
    backbone: Backbone
    enc_moas: list[MoaLayer]
    dec_moas: list[MoaLayer]

    def moa_named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for j, layer in enumerate(self.enc_moas):
            out += layer.named_params(f"moa.enc.{j}.")
        for j, layer in enumerate(self.dec_moas):
            out += layer.named_params(f"moa.dec.{j}.")
        return out

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.backbone.named_params() + self.moa_named_params()

    @property
    def all_moas(self) -> list[MoaLayer]:
        return self.enc_moas + self.dec_moas

    def fuse(
        self,
        x_img,
        y_img,
        task: TaskId,
        training: bool = False,
        rng: np.random.Generator | None = None,
        manipulate: tuple[float, float] | None = None,
        trace: FusionTrace | None = None,
        return_both: bool = False,
    ):
        """Run the paired forward; returns the fused image tensor.

        ``trace`` collects prompts/gates across encoder then decoder fusion
        layers, in execution order.
        """
        x_img = x_img if isinstance(x_img, Tensor) else Tensor(x_img)
        y_img = y_img if isinstance(y_img, Tensor) else Tensor(y_img)
        fx, fy = self.backbone.encode_pair(
            x_img, y_img, self.enc_moas, task,
            training=training, rng=rng, manipulate=manipulate, trace=trace)
        return self.backbone.decode_to_image(
            fx, self.dec_moas, task, companion=fy,
            training=training, rng=rng, manipulate=manipulate, trace=trace,
            return_both=return_both)


def make_fusion_model(cfg: ModelConfig, rng: np.random.Generator) -> FusionModel:
    bb = make_backbone(cfg.backbone, rng)
    enc = [make_moa_layer(cfg.backbone.dim, cfg.n_adapters, cfg.top_k,
                          cfg.group_size, cfg.bottleneck, rng)
           for _ in range(cfg.backbone.enc_moa_count)]
    dec = [make_moa_layer(cfg.backbone.dim, cfg.n_adapters, cfg.top_k,
                          cfg.group_size, cfg.bottleneck, rng)
           for _ in range(cfg.backbone.dec_moa_count)]
    return FusionModel(cfg=cfg, backbone=bb, enc_moas=enc, dec_moas=dec)
