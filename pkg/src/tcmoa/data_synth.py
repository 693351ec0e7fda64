"""Deterministic synthetic source pairs with known ground truth, plus PPM I/O.

One generator per task:

* visible/infrared: a textured "visible" frame vs a smooth low-intensity
  frame carrying a few bright blobs (the truth keeps the blob mask);
* multi-exposure: one latent image offset symmetrically down/up by 0.2,
  built so that mean(x, y) reproduces the latent bitwise;
* multi-focus: one sharp texture, box-blurred outside vs inside a random
  focus region (half-plane or disk).

Images are float64 in [0, 1], H x W x 3. Files are binary PPM (P6, maxval
255), written as round(v * 255) and read back as v / 255.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .moa import TaskId

MEF_OFFSET = 0.2
BLUR_KERNEL = 5
BLUR_PASSES = 2

_TASK_STREAM = {TaskId.VIF: 1, TaskId.MEF: 2, TaskId.MFF: 3}


class PpmError(ValueError):
    """Malformed or unsupported PPM content."""


@dataclass
class GroundTruth:
    hotspot_mask: np.ndarray | None = None   # VIF: bool H x W, bright-blob region
    texture_ref: np.ndarray | None = None    # VIF: the textured source
    latent: np.ndarray | None = None         # MEF: image B with mean(x,y) == B
    offset: float | None = None              # MEF: symmetric exposure offset d
    focus_region: np.ndarray | None = None   # MFF: bool H x W, x in focus where True


@dataclass
class SourcePair:
    x: np.ndarray
    y: np.ndarray
    task: TaskId
    truth: GroundTruth


def _box1d(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    r = k // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad, mode="edge")
    zshape = list(p.shape)
    zshape[axis] = 1
    c = np.concatenate([np.zeros(zshape), np.cumsum(p, axis=axis)], axis=axis)
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(k, None)
    hi[axis] = slice(0, -k)
    return (c[tuple(lo)] - c[tuple(hi)]) / k


def box_blur(img: np.ndarray, k: int = BLUR_KERNEL, passes: int = BLUR_PASSES) -> np.ndarray:
    """Separable box blur with replicated borders."""
    out = np.asarray(img, dtype=np.float64)
    for _ in range(passes):
        out = _box1d(_box1d(out, k, axis=0), k, axis=1)
    return out


def _smooth_field(rng: np.random.Generator, size: int, channels: int = 3,
                  passes: int = 4) -> np.ndarray:
    """Low-frequency random field in [0, 1] per channel."""
    f = rng.random((size, size, channels))
    f = box_blur(f, k=BLUR_KERNEL, passes=passes)
    lo = f.min(axis=(0, 1), keepdims=True)
    hi = f.max(axis=(0, 1), keepdims=True)
    return (f - lo) / np.maximum(hi - lo, 1e-12)


def _generate_vif(rng: np.random.Generator, size: int) -> SourcePair:
    base = 0.2 + 0.6 * _smooth_field(rng, size)
    detail = rng.random((size, size, 3)) - 0.5
    detail -= box_blur(detail, passes=1)          # keep only high frequencies
    x = np.clip(base + 0.3 * detail, 0.0, 1.0)

    background = 0.05 + 0.1 * _smooth_field(rng, size, channels=1)
    yy, xx = np.mgrid[0:size, 0:size]
    bumps = np.zeros((size, size))
    n_blobs = int(rng.integers(1, 4))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
        radius = rng.uniform(0.08 * size, 0.2 * size)
        amp = rng.uniform(0.7, 0.9)
        bumps = np.maximum(bumps, amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2)))
    y = np.clip(background + bumps[..., None], 0.0, 1.0)
    y = np.repeat(y[..., :1], 3, axis=2)
    truth = GroundTruth(hotspot_mask=bumps > 0.3, texture_ref=x.copy())
    return SourcePair(x=x, y=y, task=TaskId.VIF, truth=truth)


def _generate_mef(rng: np.random.Generator, size: int) -> SourcePair:
    field = 0.25 + 0.5 * _smooth_field(rng, size)
    x = field - MEF_OFFSET
    y = field + MEF_OFFSET
    latent = (x + y) / 2.0  # exact: halving is lossless, so mean(x, y) == latent bitwise
    truth = GroundTruth(latent=latent, offset=MEF_OFFSET)
    return SourcePair(x=x, y=y, task=TaskId.MEF, truth=truth)


def _generate_mff(rng: np.random.Generator, size: int) -> SourcePair:
    base = 0.2 + 0.6 * _smooth_field(rng, size)
    noise = rng.random((size, size, 3)) - 0.5
    base = np.clip(base + 0.35 * noise, 0.02, 0.98)
    blurred = box_blur(base)

    yy, xx = np.mgrid[0:size, 0:size]
    if rng.random() < 0.5:
        theta = rng.uniform(0.0, 2 * np.pi)
        offset = rng.uniform(-0.2 * size, 0.2 * size)
        region = (np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) > offset
    else:
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        radius = rng.uniform(0.25 * size, 0.45 * size)
        region = ((yy - cy) ** 2 + (xx - cx) ** 2) < radius ** 2
    r3 = region[..., None]
    x = np.where(r3, base, blurred)
    y = np.where(r3, blurred, base)
    return SourcePair(x=x, y=y, task=TaskId.MFF, truth=GroundTruth(focus_region=region))


def generate(task: TaskId, seed: int, size: int = 32) -> SourcePair:
    """Deterministic pair for (task, seed, size); same arguments, same bits."""
    rng = np.random.default_rng([_TASK_STREAM[task], int(seed), int(size)])
    if task is TaskId.VIF:
        return _generate_vif(rng, size)
    if task is TaskId.MEF:
        return _generate_mef(rng, size)
    return _generate_mff(rng, size)


# ---------------------------------------------------------------------------
# lossless 8-bit PPM round trip
# ---------------------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255); values quantized as round(v * 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PpmError(f"write_image: expected H x W x 3, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise PpmError("write_image: values must lie in [0, 1]")
    h, w = img.shape[:2]
    payload = np.rint(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())


def read_image(path) -> np.ndarray:
    """Read a P6 PPM back to float64 in [0, 1] (v / 255)."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(raw):
            raise PpmError(f"{path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise PpmError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace() and raw[end:end + 1] != b"#":
                end += 1
            fields.append(raw[pos:end])
            pos = end
    if fields[0] != b"P6":
        raise PpmError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise PpmError(f"{path}: malformed header fields {fields[1:]!r}") from None
    if maxval != 255:
        raise PpmError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = raw[pos:pos + w * h * 3]
    if len(data) < w * h * 3:
        raise PpmError(f"{path}: truncated payload ({len(data)} of {w * h * 3} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def pair_paths(root, task: TaskId, seed: int) -> dict[str, Path]:
    """File layout <root>/<task>/<seed>_{x,y,truth}.ppm."""
    d = Path(root) / task.value
    return {
        "x": d / f"{seed}_x.ppm",
        "y": d / f"{seed}_y.ppm",
        "truth": d / f"{seed}_truth.ppm",
    }


def truth_image(pair: SourcePair) -> np.ndarray | None:
    """Ground truth rendered as an image, where the task defines one."""
    t = pair.truth
    if pair.task is TaskId.MEF:
        return t.latent
    if pair.task is TaskId.MFF:
        return np.repeat(t.focus_region[..., None].astype(np.float64), 3, axis=2)
    if t.hotspot_mask is not None:
        return np.repeat(t.hotspot_mask[..., None].astype(np.float64), 3, axis=2)
    return None


def write_pair(root, pair: SourcePair, seed: int) -> None:
    paths = pair_paths(root, pair.task, seed)
    paths["x"].parent.mkdir(parents=True, exist_ok=True)
    write_image(paths["x"], pair.x)
    write_image(paths["y"], pair.y)
    truth = truth_image(pair)
    if truth is not None:
        write_image(paths["truth"], truth)
