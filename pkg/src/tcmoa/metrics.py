"""Fusion quality metrics on 8-bit-quantized images (file-stable values)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import ssim as ssim_op

PSNR_CAP = 99.0


@dataclass
class MetricsRow:
    en: float    # gray-histogram entropy, bits
    psnr: float  # dB vs reference (or vs mean of the sources)
    sd: float    # standard deviation of the gray image, 8-bit units
    ssim: float
    mi: float    # mutual information with each source, summed, bits

    def as_tsv(self) -> str:
        return "\t".join(f"{v:.6f}" for v in (self.en, self.psnr, self.sd, self.ssim, self.mi))

    HEADER = "en\tpsnr\tsd\tssim\tmi"


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip an image through 8-bit quantization."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def gray_levels(img: np.ndarray) -> np.ndarray:
    """Quantized gray image as integer levels 0..255."""
    return np.rint(quantize(img).mean(axis=2) * 255.0).astype(np.int64)


def entropy_bits(levels: np.ndarray) -> float:
    hist = np.bincount(levels.reshape(-1), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def mutual_information_bits(a: np.ndarray, b: np.ndarray) -> float:
    joint = np.zeros((256, 256))
    np.add.at(joint, (a.reshape(-1), b.reshape(-1)), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)

    def h(p):
        nz = p[p > 0]
        return float(-(nz * np.log2(nz)).sum())

    return h(pa) + h(pb) - h(joint.reshape(-1))


def psnr_db(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def compute_metrics(fused: np.ndarray, x: np.ndarray, y: np.ndarray,
                    reference: np.ndarray | None = None) -> MetricsRow:
    """EN / PSNR / SD / SSIM / MI for one fused result.

    PSNR and SSIM compare against ``reference`` when given, otherwise PSNR
    uses the source mean and SSIM averages over both sources. MI sums the
    fused image's mutual information with each source.
    """
    fq, xq, yq = quantize(fused), quantize(x), quantize(y)
    g_f, g_x, g_y = gray_levels(fused), gray_levels(x), gray_levels(y)

    with ad.no_grad():
        if reference is not None:
            rq = quantize(reference)
            ssim_val = float(ssim_op(Tensor(fq), Tensor(rq)).data)
            psnr_val = psnr_db(fq, rq)
        else:
            ssim_val = 0.5 * float(ssim_op(Tensor(fq), Tensor(xq)).data) \
                + 0.5 * float(ssim_op(Tensor(fq), Tensor(yq)).data)
            psnr_val = psnr_db(fq, (xq + yq) / 2.0)

    return MetricsRow(
        en=entropy_bits(g_f),
        psnr=psnr_val,
        sd=float(g_f.std()),
        ssim=ssim_val,
        mi=mutual_information_bits(g_f, g_x) + mutual_information_bits(g_f, g_y),
    )
