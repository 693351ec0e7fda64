"""Windowed-attention ViT autoencoder hosting the fusion layers.

Encoder and decoder are stacks of pre-norm transformer blocks that attend
within w x w token windows; odd-numbered blocks cyclically shift the grid
by half a window first, so information crosses window borders. Each block
carries a learnable local position embedding shared by all its windows.
Fusion layers are invoked on the paired token streams after every ``tau``
blocks of either stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import moa
from .autodiff import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 64
    encoder_depth: int = 8
    decoder_depth: int = 4
    heads: int = 4
    window: int = 4
    tau: int = 2
    mlp_ratio: float = 4.0
    fuse_branch: str = "x"  # which decoded branch is the fused image: "x" or "avg"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        grid = self.image_size // self.patch_size
        if grid % self.window:
            raise ValueError("token grid side must be divisible by window")
        if self.encoder_depth % self.tau or self.decoder_depth % self.tau:
            raise ValueError("tau must divide encoder_depth and decoder_depth")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.fuse_branch not in ("x", "avg"):
            raise ValueError("fuse_branch must be 'x' or 'avg'")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def enc_moa_count(self) -> int:
        return self.encoder_depth // self.tau

    @property
    def dec_moa_count(self) -> int:
        return self.decoder_depth // self.tau


@dataclass
class Block:
    ln1_scale: Tensor
    ln1_shift: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    pos: Tensor          # w x w x C, shared across the block's windows
    shift_flag: bool

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        names = ["ln1_scale", "ln1_shift", "qkv_w", "qkv_b", "proj_w", "proj_b",
                 "ln2_scale", "ln2_shift", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "pos"]
        return [(prefix + n, getattr(self, n)) for n in names]


def _make_block(cfg: BackboneConfig, shift: bool, rng: np.random.Generator) -> Block:
    c = cfg.dim
    hidden = int(round(c * cfg.mlp_ratio))

    def w(*shape):
        return ad.param(rng.normal(0.0, 0.02, size=shape))

    def z(*shape):
        return ad.param(np.zeros(shape))

    return Block(
        ln1_scale=ad.param(np.ones(c)), ln1_shift=z(c),
        qkv_w=w(c, 3 * c), qkv_b=z(3 * c),
        proj_w=w(c, c), proj_b=z(c),
        ln2_scale=ad.param(np.ones(c)), ln2_shift=z(c),
        mlp_w1=w(c, hidden), mlp_b1=z(hidden),
        mlp_w2=w(hidden, c), mlp_b2=z(c),
        pos=w(cfg.window, cfg.window, c),
        shift_flag=shift,
    )


@dataclass
class Backbone:
    cfg: BackboneConfig
    patch_w: Tensor
    patch_b: Tensor
    enc_blocks: list[Block]
    dec_blocks: list[Block]
    head_w: Tensor
    head_b: Tensor

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("backbone.patch.w", self.patch_w), ("backbone.patch.b", self.patch_b)]
        for i, b in enumerate(self.enc_blocks):
            out += b.named_params(f"backbone.enc.{i}.")
        for i, b in enumerate(self.dec_blocks):
            out += b.named_params(f"backbone.dec.{i}.")
        out += [("backbone.head.w", self.head_w), ("backbone.head.b", self.head_b)]
        return out

    def set_trainable(self, flag: bool):
        for _, p in self.named_params():
            p.requires_grad = flag

    # -- patch embedding ----------------------------------------------------

    def patchify(self, image: Tensor) -> Tensor:
        """H x W x 3 image -> pH x pW x C token grid (linear per-patch embed)."""
        cfg = self.cfg
        h = cfg.image_size
        if image.shape != (h, h, 3):
            raise ad.ShapeError(f"patchify: expected {(h, h, 3)}, got {image.shape}")
        p, g = cfg.patch_size, cfg.grid
        x = image.reshape(g, p, g, p, 3).swapaxes(1, 2).reshape(g * g, cfg.patch_dim)
        tokens = ad.matmul(x, self.patch_w) + self.patch_b
        return tokens.reshape(g, g, cfg.dim)

    def unpatchify(self, tokens: Tensor) -> Tensor:
        """Token grid -> H x W x 3 image in (0,1) via linear head + sigmoid."""
        cfg = self.cfg
        p, g = cfg.patch_size, cfg.grid
        x = ad.matmul(tokens.reshape(g * g, cfg.dim), self.head_w) + self.head_b
        x = x.reshape(g, g, p, p, 3).swapaxes(1, 2).reshape(cfg.image_size, cfg.image_size, 3)
        return ad.sigmoid(x)

    # -- transformer blocks ---------------------------------------------------

    def block_forward_multi(self, grids: list[Tensor], block: Block) -> list[Tensor]:
        """Window attention + MLP on several grids at once.

        The grids are partitioned into windows and stacked along the window
        axis so the shared-weight block runs as one batched computation.
        """
        cfg = self.cfg
        g, w, c = cfg.grid, cfg.window, cfg.dim
        heads, dh = cfg.heads, cfg.dim // cfg.heads
        shift = w // 2
        nside = g // w
        nwin = nside * nside
        t = w * w

        partitioned = []
        for grid in grids:
            if block.shift_flag:
                grid = ad.roll2d(grid, (-shift, -shift))
            partitioned.append(grid.reshape(nside, w, nside, w, c).swapaxes(1, 2).reshape(nwin, t, c))
        x = partitioned[0] if len(partitioned) == 1 else ad.concat(partitioned, axis=0)
        b = nwin * len(grids)
        x = x + block.pos.reshape(t, c)

        h = ad.layer_norm(x, block.ln1_scale, block.ln1_shift)
        qkv = ad.matmul(h, block.qkv_w) + block.qkv_b
        q, k, v = ad.split(qkv, [c, c, c], axis=2)
        q = q.reshape(b, t, heads, dh).swapaxes(1, 2)
        k = k.reshape(b, t, heads, dh).swapaxes(1, 2)
        v = v.reshape(b, t, heads, dh).swapaxes(1, 2)
        scores = ad.matmul(q, k.swapaxes(2, 3)) * (1.0 / np.sqrt(dh))
        attn = ad.softmax(scores)
        ctx = ad.matmul(attn, v).swapaxes(1, 2).reshape(b, t, c)
        x = x + (ad.matmul(ctx, block.proj_w) + block.proj_b)

        h = ad.layer_norm(x, block.ln2_scale, block.ln2_shift)
        h = ad.matmul(ad.gelu(ad.matmul(h, block.mlp_w1) + block.mlp_b1), block.mlp_w2) + block.mlp_b2
        x = x + h

        pieces = [x] if len(grids) == 1 else ad.split(x, [nwin] * len(grids), axis=0)
        outs = []
        for piece in pieces:
            grid = piece.reshape(nside, nside, w, w, c).swapaxes(1, 2).reshape(g, g, c)
            if block.shift_flag:
                grid = ad.roll2d(grid, (shift, shift))
            outs.append(grid)
        return outs

    def block_forward(self, grid: Tensor, block: Block) -> Tensor:
        return self.block_forward_multi([grid], block)[0]

    # -- single-stream paths (pretraining / reconstruction) -------------------

    def encode_single(self, image: Tensor) -> Tensor:
        grid = self.patchify(image)
        for block in self.enc_blocks:
            grid = self.block_forward(grid, block)
        return grid

    def decode_single(self, grid: Tensor) -> Tensor:
        for block in self.dec_blocks:
            grid = self.block_forward(grid, block)
        return self.unpatchify(grid)

    # -- paired fusion paths ---------------------------------------------------

    def _run_pair(self, fx, fy, blocks, layers, task, training, rng, manipulate, trace):
        cfg = self.cfg
        for i, block in enumerate(blocks):
            fx, fy = self.block_forward_multi([fx, fy], block)
            if (i + 1) % cfg.tau == 0:
                layer = layers[(i + 1) // cfg.tau - 1]
                fx, fy, prompt, gates = moa.fuse_step(
                    fx, fy, layer, task, training=training, rng=rng, manipulate=manipulate)
                if trace is not None:
                    trace.prompts.append(prompt)
                    trace.gates.append(gates)
        return fx, fy

    def encode_pair(self, x_img: Tensor, y_img: Tensor,
                    moa_layers: list[moa.MoaLayer], task: moa.TaskId,
                    training: bool = False, rng: np.random.Generator | None = None,
                    manipulate: tuple[float, float] | None = None,
                    trace: "FusionTrace | None" = None) -> tuple[Tensor, Tensor]:
        """Shared-weight encoding of both sources with fusion every tau blocks."""
        if len(moa_layers) != self.cfg.enc_moa_count:
            raise ValueError(f"encode_pair: expected {self.cfg.enc_moa_count} fusion layers, got {len(moa_layers)}")
        fx = self.patchify(x_img)
        fy = self.patchify(y_img)
        return self._run_pair(fx, fy, self.enc_blocks, moa_layers, task, training, rng, manipulate, trace)

    def decode_to_image(self, fx: Tensor, moa_layers: list[moa.MoaLayer], task: moa.TaskId,
                        companion: Tensor,
                        training: bool = False, rng: np.random.Generator | None = None,
                        manipulate: tuple[float, float] | None = None,
                        trace: "FusionTrace | None" = None,
                        return_both: bool = False):
        """Decode both branches with fusion insertions; the fused image is the
        x branch (or the branch average when configured)."""
        if len(moa_layers) != self.cfg.dec_moa_count:
            raise ValueError(f"decode_to_image: expected {self.cfg.dec_moa_count} fusion layers, got {len(moa_layers)}")
        fx, fy = self._run_pair(fx, companion, self.dec_blocks, moa_layers, task, training, rng, manipulate, trace)
        if self.cfg.fuse_branch == "avg":
            fused = self.unpatchify((fx + fy) * 0.5)
        else:
            fused = self.unpatchify(fx)
        if return_both:
            return fused, self.unpatchify(fx), self.unpatchify(fy)
        return fused


@dataclass
class FusionTrace:
    """Per-layer prompts and gate results collected during a paired forward."""

    prompts: list[moa.Prompt] = field(default_factory=list)
    gates: list[moa.GateResult] = field(default_factory=list)


def make_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> Backbone:
    def w(*shape):
        return ad.param(rng.normal(0.0, 0.02, size=shape))

    return Backbone(
        cfg=cfg,
        patch_w=w(cfg.patch_dim, cfg.dim),
        patch_b=ad.param(np.zeros(cfg.dim)),
        enc_blocks=[_make_block(cfg, shift=(i % 2 == 1), rng=rng) for i in range(cfg.encoder_depth)],
        dec_blocks=[_make_block(cfg, shift=(i % 2 == 1), rng=rng) for i in range(cfg.decoder_depth)],
        head_w=w(cfg.dim, cfg.patch_dim),
        head_b=ad.param(np.zeros(cfg.patch_dim)),
    )
