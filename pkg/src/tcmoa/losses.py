"""Task-customized unsupervised fusion losses and their shared pieces.

Three families share one construction: a structural term (1 - SSIM against
each source, weighted 0.5/0.5), an intensity term, and a signed-gradient
term, plus the router balancing penalty and the prompt complementarity
penalty. Intensity/gradient targets differ per task: elementwise max for
visible-infrared, elementwise mean for multi-exposure, and a per-patch
winner-take-all mask for multi-focus. Targets, masks and selection
decisions are recomputed every step but never differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moa import GateResult, Prompt, TaskId, mir_penalty

# classic 3x3 Sobel pair; gx responds to left-to-right increase, gy to top-to-bottom
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class GradField:
    """Signed horizontal/vertical Sobel responses of an H x W x 3 image."""

    gx: Tensor
    gy: Tensor


@dataclass
class MaskMap:
    """Per-patch binary source selector; the two maps sum to one everywhere."""

    mx: np.ndarray  # pH x pW x 1, values in {0.0, 1.0}
    patch: int

    @property
    def my(self) -> np.ndarray:
        return 1.0 - self.mx

    def pixel_mask_x(self) -> np.ndarray:
        m = np.repeat(np.repeat(self.mx, self.patch, axis=0), self.patch, axis=1)
        return m  # H x W x 1


@dataclass
class LossReport:
    total: Tensor
    terms: dict[str, Tensor]

    def floats(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data)
        return out


def _diag_kernel(kernel2d: np.ndarray, channels: int = 3) -> np.ndarray:
    """Per-channel conv kernel: each channel convolved independently."""
    kh, kw = kernel2d.shape
    k = np.zeros((kh, kw, channels, channels))
    for c in range(channels):
        k[:, :, c, c] = kernel2d
    return k

_SOBEL_KX = Tensor(_diag_kernel(SOBEL_X))
_SOBEL_KY = Tensor(_diag_kernel(SOBEL_Y))


def sobel(image: Tensor) -> GradField:
    """Signed per-channel Sobel responses with replicate border padding."""
    return GradField(
        gx=ad.conv2d(image, _SOBEL_KX, padding="replicate"),
        gy=ad.conv2d(image, _SOBEL_KY, padding="replicate"),
    )


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()

_SSIM_KERNEL = Tensor(_diag_kernel(_gaussian_window(SSIM_WINDOW, SSIM_SIGMA)))


def _crop(t: Tensor, pad: int) -> Tensor:
    h, w = t.shape[0], t.shape[1]
    t = ad.split(t, [pad, h - 2 * pad, pad], axis=0)[1]
    return ad.split(t, [pad, w - 2 * pad, pad], axis=1)[1]


def _local_means(img: Tensor, pad: int) -> Tensor:
    # zero-pad same conv cropped to the interior == valid-window filtering
    return _crop(ad.conv2d(img, _SSIM_KERNEL, padding="zero"), pad)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1),
    averaged over channels. Images smaller than the window fall back to one
    global window."""
    if a.shape != b.shape:
        raise ad.ShapeError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    h, w = a.shape[0], a.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        mu_a = a.mean(axis=(0, 1))
        mu_b = b.mean(axis=(0, 1))
        var_a = (a * a).mean(axis=(0, 1)) - mu_a * mu_a
        var_b = (b * b).mean(axis=(0, 1)) - mu_b * mu_b
        cov = (a * b).mean(axis=(0, 1)) - mu_a * mu_b
    else:
        pad = SSIM_WINDOW // 2
        mu_a = _local_means(a, pad)
        mu_b = _local_means(b, pad)
        var_a = _local_means(a * a, pad) - mu_a * mu_a
        var_b = _local_means(b * b, pad) - mu_b * mu_b
        cov = _local_means(a * b, pad) - mu_a * mu_b
    num = (mu_a * mu_b * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def _l1(a: Tensor, b) -> Tensor:
    return ad.absolute(a - b).mean()


def pixel_loss(fused: Tensor, x: Tensor, y: Tensor, mode: str,
               mask: MaskMap | None = None) -> Tensor:
    """Mean L1 distance to the task's intensity target."""
    if mode == "max":
        target = Tensor(np.maximum(x.data, y.data))
        return _l1(fused, target)
    if mode == "avg":
        target = Tensor((x.data + y.data) * 0.5)
        return _l1(fused, target)
    if mode == "mask":
        if mask is None:
            raise ValueError("pixel_loss: mask mode needs a MaskMap")
        mx = Tensor(mask.pixel_mask_x())
        return (ad.absolute(fused - Tensor(x.data)) * mx
                + ad.absolute(fused - Tensor(y.data)) * (1.0 - mx)).mean()
    raise ValueError(f"pixel_loss: unknown mode {mode!r}")


def signed_absmax(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Value of larger magnitude, sign preserved; ties take the first input."""
    return np.where(np.abs(a) >= np.abs(b), a, b)


def grad_loss(fused: Tensor, x: Tensor, y: Tensor, mode: str,
              mask: MaskMap | None = None) -> Tensor:
    """Mean L1 between the fused Sobel field and the task's gradient target,
    averaged over both components. Targets are constants of the sources."""
    gf = sobel(fused)
    with ad.no_grad():
        gx_src = sobel(Tensor(x.data))
        gy_src = sobel(Tensor(y.data))
    if mode == "max":
        tx = Tensor(signed_absmax(gx_src.gx.data, gy_src.gx.data))
        ty = Tensor(signed_absmax(gx_src.gy.data, gy_src.gy.data))
        return (_l1(gf.gx, tx) + _l1(gf.gy, ty)) * 0.5
    if mode == "mask":
        if mask is None:
            raise ValueError("grad_loss: mask mode needs a MaskMap")
        mx = Tensor(mask.pixel_mask_x())
        lx = ad.absolute(gf.gx - Tensor(gx_src.gx.data)) * mx \
            + ad.absolute(gf.gx - Tensor(gy_src.gx.data)) * (1.0 - mx)
        ly = ad.absolute(gf.gy - Tensor(gx_src.gy.data)) * mx \
            + ad.absolute(gf.gy - Tensor(gy_src.gy.data)) * (1.0 - mx)
        return (lx.mean() + ly.mean()) * 0.5
    raise ValueError(f"grad_loss: unknown mode {mode!r}")


def compute_mask(x: Tensor, y: Tensor, patch: int) -> MaskMap:
    """Winner-take-all focus mask: per patch, the source whose Sobel response
    has the larger maximum magnitude wins (ties go to x). Non-differentiated."""
    h, w = x.shape[0], x.shape[1]
    if h % patch or w % patch:
        raise ValueError(f"compute_mask: image {h}x{w} not divisible by patch {patch}")
    with ad.no_grad():
        fx = sobel(Tensor(x.data))
        fy = sobel(Tensor(y.data))

    def patch_score(field: GradField) -> np.ndarray:
        mag = np.maximum(np.abs(field.gx.data), np.abs(field.gy.data)).max(axis=2)
        ph, pw = h // patch, w // patch
        return mag.reshape(ph, patch, pw, patch).max(axis=(1, 3))

    sx = patch_score(fx)
    sy = patch_score(fy)
    mx = (sx >= sy).astype(np.float64)[..., None]
    return MaskMap(mx=mx, patch=patch)


def aux_loss(gates: GateResult | Sequence[GateResult], w_aux: float = 0.01) -> Tensor:
    """Balancing penalty: w_aux * CV^2 of per-adapter importance (population
    variance over the adapter axis). Importance sums gate weights over every
    token of the given gate results."""
    if isinstance(gates, GateResult):
        gates = [gates]
    if not gates:
        raise ValueError("aux_loss: no gate results")
    total_tokens = 0
    importance = None
    for g in gates:
        total_tokens += g.weights.shape[0] * g.weights.shape[1]
        s = g.weights.sum(axis=(0, 1))
        importance = s if importance is None else importance + s
    if total_tokens == 0:
        raise ValueError("aux_loss: zero tokens")
    mean = importance.mean()
    centered = importance - mean
    var = (centered * centered).mean()
    return (var / (mean * mean)) * w_aux


_PIXEL_MODE = {TaskId.VIF: "max", TaskId.MEF: "avg", TaskId.MFF: "mask"}
_GRAD_MODE = {TaskId.VIF: "max", TaskId.MEF: "max", TaskId.MFF: "mask"}


def task_loss(
    task: TaskId,
    fused: Tensor,
    x: Tensor,
    y: Tensor,
    prompts: Sequence[Prompt],
    gates: Sequence[GateResult],
    patch: int = 4,
    mir_weight: float = 1.0,
    aux_weight: float = 0.01,
) -> LossReport:
    """Itemized task loss for one fused sample.

    ``prompts``/``gates`` are the per-layer traces of the forward pass; the
    balancing penalty is summed over layers, the complementarity penalty is
    the mean over layers. The structural term weighs both sources 0.5/0.5.
    """
    if task not in _PIXEL_MODE:
        raise ValueError(f"task_loss: unknown task {task!r}")
    mask = compute_mask(x, y, patch) if task is TaskId.MFF else None

    ssim_term = (1.0 - ssim(fused, Tensor(x.data))) * 0.5 \
        + (1.0 - ssim(fused, Tensor(y.data))) * 0.5
    pixel = pixel_loss(fused, x, y, _PIXEL_MODE[task], mask)
    grad = grad_loss(fused, x, y, _GRAD_MODE[task], mask)

    aux = None
    for g in gates:
        term = aux_loss(g, aux_weight)
        aux = term if aux is None else aux + term
    if aux is None:
        aux = Tensor(np.asarray(0.0))

    mir = None
    for p in prompts:
        term = mir_penalty(p)
        mir = term if mir is None else mir + term
    mir = (mir * (mir_weight / len(prompts))) if mir is not None else Tensor(np.asarray(0.0))

    terms = {"ssim": ssim_term, "pixel": pixel, "grad": grad, "aux": aux, "mir": mir}
    total = ssim_term + pixel + grad + aux + mir
    return LossReport(total=total, terms=terms)
