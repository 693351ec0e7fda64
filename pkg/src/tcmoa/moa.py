"""Task-routed adapter mixtures and prompt-driven feature fusion.

One fusion layer owns: a shared bank of bottleneck adapters, one noisy
top-k router per task, per-task source embeddings, a residual pair of 3x3
convolutions, and a learnable blend scalar. Routing picks a sparse adapter
mixture per token; the mixture's sigmoid output, averaged over channel
groups, is the per-token fusion prompt (one weight per source).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF_FILL = 1e9  # shifts non-selected logits far enough that softmax underflows to exact 0


class TaskId(Enum):
    VIF = "vif"
    MEF = "mef"
    MFF = "mff"

    @classmethod
    def parse(cls, text: str) -> "TaskId":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown task {text!r}; expected one of vif, mef, mff") from None


@dataclass
class Adapter:
    """Bottleneck expert: down-projection, gelu, up-projection to 2*g channels."""

    down_w: Tensor
    down_b: Tensor
    up_w: Tensor
    up_b: Tensor

    def apply(self, rows: Tensor) -> Tensor:
        h = ad.gelu(ad.matmul(rows, self.down_w) + self.down_b)
        return ad.matmul(h, self.up_w) + self.up_b


@dataclass
class Router:
    w_gate: Tensor
    w_noise: Tensor


@dataclass
class Prompt:
    """Per-token source weights, shape pH x pW x 2, generated in (0, 1)."""

    values: Tensor

    @property
    def shape(self):
        return self.values.shape

    def split_xy(self) -> tuple[Tensor, Tensor]:
        px, py = ad.split(self.values, [1, 1], axis=2)
        return px, py


@dataclass
class GateResult:
    """Sparse mixture weights (exactly k positive per token) plus the picked indices."""

    weights: Tensor            # pH x pW x N
    selected: np.ndarray       # pH x pW x k, int


@dataclass
class MoaLayer:
    n_adapters: int
    top_k: int
    group_size: int
    reduce_w: Tensor
    reduce_b: Tensor
    reduce_ln_scale: Tensor
    reduce_ln_shift: Tensor
    routers: dict[TaskId, Router]
    adapters: list[Adapter]
    source_embed: dict[TaskId, tuple[Tensor, Tensor]]
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    lambda_f: Tensor           # scalar blend, init 0.5

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [
            (f"{prefix}reduce.w", self.reduce_w),
            (f"{prefix}reduce.b", self.reduce_b),
            (f"{prefix}reduce.ln_scale", self.reduce_ln_scale),
            (f"{prefix}reduce.ln_shift", self.reduce_ln_shift),
        ]
        for task in TaskId:
            r = self.routers[task]
            out.append((f"{prefix}router.{task.value}.gate", r.w_gate))
            out.append((f"{prefix}router.{task.value}.noise", r.w_noise))
        for i, a in enumerate(self.adapters):
            out += [
                (f"{prefix}adapter.{i}.down.w", a.down_w),
                (f"{prefix}adapter.{i}.down.b", a.down_b),
                (f"{prefix}adapter.{i}.up.w", a.up_w),
                (f"{prefix}adapter.{i}.up.b", a.up_b),
            ]
        for task in TaskId:
            sx, sy = self.source_embed[task]
            out.append((f"{prefix}embed.{task.value}.x", sx))
            out.append((f"{prefix}embed.{task.value}.y", sy))
        out += [
            (f"{prefix}conv1.w", self.conv1_w),
            (f"{prefix}conv1.b", self.conv1_b),
            (f"{prefix}conv2.w", self.conv2_w),
            (f"{prefix}conv2.b", self.conv2_b),
            (f"{prefix}lambda", self.lambda_f),
        ]
        return out


def make_moa_layer(
    dim: int,
    n_adapters: int = 4,
    top_k: int = 2,
    group_size: int = 4,
    bottleneck: int | None = None,
    rng: np.random.Generator | None = None,
) -> MoaLayer:
    """Fresh fusion layer. Routers start at zero (uniform routing), the second
    fusion conv starts at zero so the conv block is an exact identity."""
    if not (n_adapters >= top_k >= 1):
        raise ValueError(f"need n_adapters >= top_k >= 1, got {n_adapters}, {top_k}")
    rng = rng or np.random.default_rng(0)
    d_b = bottleneck if bottleneck is not None else max(1, dim // 4)

    def w(*shape, std=0.02):
        return ad.param(rng.normal(0.0, std, size=shape))

    def z(*shape):
        return ad.param(np.zeros(shape))

    adapters = [
        Adapter(
            down_w=w(dim, d_b, std=0.1),
            down_b=z(d_b),
            up_w=w(d_b, 2 * group_size, std=0.1),
            up_b=z(2 * group_size),
        )
        for _ in range(n_adapters)
    ]
    routers = {t: Router(w_gate=z(dim, n_adapters), w_noise=z(dim, n_adapters)) for t in TaskId}
    embeds = {t: (w(dim), w(dim)) for t in TaskId}
    return MoaLayer(
        n_adapters=n_adapters,
        top_k=top_k,
        group_size=group_size,
        reduce_w=w(2 * dim, dim),
        reduce_b=z(dim),
        reduce_ln_scale=ad.param(np.ones(dim)),
        reduce_ln_shift=z(dim),
        routers=routers,
        adapters=adapters,
        source_embed=embeds,
        conv1_w=w(3, 3, dim, dim),
        conv1_b=z(dim),
        conv2_w=z(3, 3, dim, dim),
        conv2_b=z(dim),
        lambda_f=ad.param(np.asarray(0.5)),
    )


def reduce_pair(f_x: Tensor, f_y: Tensor, layer: MoaLayer) -> Tensor:
    """Token-wise concat of the two streams, linear down to C, layer norm."""
    if f_x.shape != f_y.shape:
        raise ad.ShapeError(f"reduce_pair: grids differ, {f_x.shape} vs {f_y.shape}")
    ph, pw, c = f_x.shape
    cat = ad.concat([f_x, f_y], axis=2).reshape(ph * pw, 2 * c)
    phi = (ad.matmul(cat, layer.reduce_w) + layer.reduce_b).reshape(ph, pw, c)
    return ad.layer_norm(phi, layer.reduce_ln_scale, layer.reduce_ln_shift)


def gate(
    phi: Tensor,
    layer: MoaLayer,
    task: TaskId,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> GateResult:
    """Noisy top-k routing over the adapter bank.

    Gaussian logit noise scaled by softplus(phi @ w_noise) is applied only
    while training. Non-selected weights are exactly zero; ties in the
    top-k cut go to the lower adapter index.
    """
    ph, pw, c = phi.shape
    n = layer.n_adapters
    router = layer.routers[task]
    rows = phi.reshape(ph * pw, c)
    logits = ad.matmul(rows, router.w_gate)
    if training:
        if rng is None:
            raise ValueError("gate: training mode needs an rng for routing noise")
        noise = Tensor(rng.standard_normal((ph * pw, n)))
        logits = logits + noise * ad.softplus(ad.matmul(rows, router.w_noise))
    logits = logits.reshape(ph, pw, n)

    # stable argsort of negated logits: descending order, ties -> lower index
    order = np.argsort(-logits.data, axis=-1, kind="stable")
    selected = order[..., : layer.top_k]
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, selected, True, axis=-1)
    weights = ad.softmax(logits + Tensor(np.where(keep, 0.0, -NEG_INF_FILL)))
    return GateResult(weights=weights, selected=selected)


def generate_prompt(phi: Tensor, gates: GateResult, layer: MoaLayer) -> Prompt:
    """Mixture of adapter outputs -> sigmoid -> per-group channel average."""
    ph, pw, c = phi.shape
    rows = phi.reshape(ph * pw, c)
    wflat = gates.weights.reshape(ph * pw, layer.n_adapters)
    parts = ad.split(wflat, [1] * layer.n_adapters, axis=1)
    mix = None
    for i, adapter in enumerate(layer.adapters):
        term = parts[i] * adapter.apply(rows)
        mix = term if mix is None else mix + term
    pooled = ad.grouped_average(ad.sigmoid(mix), layer.group_size)
    return Prompt(values=pooled.reshape(ph, pw, 2))


def mir_penalty(p: Prompt) -> Tensor:
    """Mean |prompt_x + prompt_y - 1| over tokens."""
    return ad.absolute(p.values.sum(axis=2) - 1.0).mean()


def manipulate_prompt(p: Prompt, alpha: float, beta: float) -> Prompt:
    """Affine steering around the 0.5 mean: scale by alpha, shift x by +beta
    and y by -beta, clamped to [0, 1]. (1, 0) returns the prompt unchanged."""
    if alpha == 1.0 and beta == 0.0:
        return p
    shifted = (p.values - 0.5) * alpha + 0.5 + Tensor(np.array([beta, -beta]))
    clamped = ad.minimum(ad.maximum(shifted, 0.0), 1.0)
    return Prompt(values=clamped)


def fuse_step(
    f_x: Tensor,
    f_y: Tensor,
    layer: MoaLayer,
    task: TaskId,
    training: bool = False,
    rng: np.random.Generator | None = None,
    manipulate: tuple[float, float] | None = None,
) -> tuple[Tensor, Tensor, Prompt, GateResult]:
    """One fusion pass: route, prompt, scale-and-shift both streams, mix.

    Returns the updated streams plus the generated prompt and gate result
    for loss accounting. ``manipulate=(alpha, beta)`` steers the prompt
    actually used for blending without touching the returned one.
    """
    phi = reduce_pair(f_x, f_y, layer)
    gates = gate(phi, layer, task, training=training, rng=rng)
    prompt = generate_prompt(phi, gates, layer)

    used = prompt if manipulate is None else manipulate_prompt(prompt, *manipulate)
    px, py = used.split_xy()
    s_x, s_y = layer.source_embed[task]
    h = (px * f_x + s_x) + (py * f_y + s_y)
    f_moa = h + ad.conv2d(ad.gelu(ad.conv2d(h, layer.conv1_w, layer.conv1_b)),
                          layer.conv2_w, layer.conv2_b)
    lam = layer.lambda_f
    fx_new = lam * f_x + (1.0 - lam) * f_moa
    fy_new = lam * f_y + (1.0 - lam) * f_moa
    return fx_new, fy_new, prompt, gates


def adapter_map(gates: GateResult) -> np.ndarray:
    """Index of the highest-weight adapter per token (ties -> lower index)."""
    return np.argmax(gates.weights.data, axis=-1)


def intensity_bias_stats(prompts: Iterable[Prompt]) -> dict[str, float | None]:
    """Dominant/auxiliary prompt means over a collection of prompts.

    A token is X-dominant iff prompt_x > prompt_y (strict; ties count as
    Y-dominant). Statistics whose token set is empty come back as None.
    avg_dom / diff_dom need both dominant means.
    """
    px_all, py_all = [], []
    for p in prompts:
        v = p.values.data.reshape(-1, 2)
        px_all.append(v[:, 0])
        py_all.append(v[:, 1])
    if not px_all:
        raise ValueError("intensity_bias_stats: empty prompt collection")
    px = np.concatenate(px_all)
    py = np.concatenate(py_all)
    x_dom = px > py
    y_dom = ~x_dom

    def mean_or_none(vals, mask):
        return float(vals[mask].mean()) if mask.any() else None

    dom_x = mean_or_none(px, x_dom)
    aux_x = mean_or_none(px, y_dom)
    dom_y = mean_or_none(py, y_dom)
    aux_y = mean_or_none(py, x_dom)
    both = dom_x is not None and dom_y is not None
    return {
        "dom_x": dom_x,
        "aux_x": aux_x,
        "dom_y": dom_y,
        "aux_y": aux_y,
        "avg_dom": (dom_x + dom_y) / 2.0 if both else None,
        "diff_dom": abs(dom_x - dom_y) if both else None,
    }
