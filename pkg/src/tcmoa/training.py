"""Two-stage training: backbone autoencoder pretraining, then frozen-backbone
fine-tuning of the fusion layers with AdamW and an EMA over routers/adapters.

Also owns the binary checkpoint container and parameter accounting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, Tensor
from .backbone import BackboneConfig, FusionTrace
from .data_synth import generate
from .losses import task_loss
from .model import FusionModel, ModelConfig, make_fusion_model
from .moa import TaskId

ADAM_EPS = 1e-8
CHECKPOINT_MAGIC = b"TCMOA1"

# dedicated seed streams so pretraining, fine-tuning and held-out data never overlap
PRETRAIN_SEED_BASE = 1_000_000
PRETRAIN_HELDOUT_BASE = 2_000_000
FUSION_SEED_BASE = 3_000_000
HELDOUT_SEED_BASE = 4_000_000


@dataclass
class TrainConfig:
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    batch_per_task: int = 3
    epochs: int = 20
    steps_per_epoch: int = 25
    ema_decay: float = 0.999
    mir_weight: float = 1.0
    aux_weight: float = 0.01
    crop: int | None = None  # None: train on full generated images
    seed: int = 0

    def __post_init__(self):
        # lr == 0 is allowed as a degenerate no-update configuration
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[tuple[str, Tensor]]) -> "AdamState":
        return cls(
            m={n: np.zeros(p.shape) for n, p in params},
            v={n: np.zeros(p.shape) for n, p in params},
            t=0,
        )


@dataclass
class EmaState:
    """Shadow copies of the router and adapter parameters only."""

    shadow: dict[str, np.ndarray]

    @classmethod
    def from_params(cls, params: list[tuple[str, Tensor]]) -> "EmaState":
        return cls(shadow={n: p.data.copy() for n, p in params if covered_by_ema(n)})


def covered_by_ema(name: str) -> bool:
    return ".router." in name or ".adapter." in name


def adamw_step(
    params: list[tuple[str, Tensor]],
    grads: GradMap,
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """Decoupled-weight-decay Adam with bias correction, in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params:
        g = grads.grad(p).data
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - cfg.lr * cfg.weight_decay
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def ema_update(ema: EmaState, params: list[tuple[str, Tensor]], decay: float) -> None:
    for name, p in params:
        if name in ema.shadow:
            s = ema.shadow[name]
            s *= decay
            s += (1.0 - decay) * p.data


class swap_in_ema:
    """Context manager: run the model with EMA router/adapter weights."""

    def __init__(self, model: FusionModel, ema: EmaState | None):
        self.model = model
        self.ema = ema
        self._saved: dict[str, np.ndarray] = {}

    def __enter__(self):
        if self.ema is not None:
            for name, p in self.model.moa_named_params():
                if name in self.ema.shadow:
                    self._saved[name] = p.data
                    p.data = self.ema.shadow[name].copy()
        return self.model

    def __exit__(self, *exc):
        for name, p in self.model.moa_named_params():
            if name in self._saved:
                p.data = self._saved[name]
        return False


# ---------------------------------------------------------------------------
# stage 1: backbone pretraining (single-image autoencoder)
# ---------------------------------------------------------------------------

_TASK_CYCLE = (TaskId.VIF, TaskId.MEF, TaskId.MFF)


def pretrain_image(index: int, size: int, heldout: bool = False) -> np.ndarray:
    """Deterministic image pool for autoencoder training."""
    base = PRETRAIN_HELDOUT_BASE if heldout else PRETRAIN_SEED_BASE
    pair = generate(_TASK_CYCLE[index % 3], base + index, size)
    return pair.x if (index // 3) % 2 == 0 else pair.y


def reconstruction_mse(model_backbone, images) -> float:
    with ad.no_grad():
        total = 0.0
        for img in images:
            rec = model_backbone.decode_single(model_backbone.encode_single(Tensor(img)))
            total += float(((rec - Tensor(img)) * (rec - Tensor(img))).mean().data)
    return total / len(images)


def pretrain_backbone(
    backbone,
    cfg: TrainConfig,
    steps: int,
    batch: int = 4,
    log_every: int = 0,
) -> list[float]:
    """Train encoder+decoder as an image autoencoder (no fusion layers in the
    path); returns the per-step MSE history. The caller freezes the result."""
    params = backbone.named_params()
    state = AdamState.for_params(params)
    size = backbone.cfg.image_size
    history: list[float] = []
    for step in range(steps):
        loss = None
        for j in range(batch):
            img = Tensor(pretrain_image(step * batch + j, size))
            rec = backbone.decode_single(backbone.encode_single(img))
            diff = rec - img
            term = (diff * diff).mean()
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / batch)
        val = float(loss.data)
        if not np.isfinite(val):
            raise FloatingPointError(f"pretraining diverged: loss {val} at step {step}")
        history.append(val)
        grads = ad.backward(loss)
        adamw_step(params, grads, state, cfg)
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: mse {val:.6f}")
    return history


# ---------------------------------------------------------------------------
# stage 2: frozen-backbone fusion fine-tuning
# ---------------------------------------------------------------------------


def fusion_batch(task: TaskId, step: int, count: int, size: int,
                 heldout: bool = False) -> list:
    base = HELDOUT_SEED_BASE if heldout else FUSION_SEED_BASE
    return [generate(task, base + step * count + j, size) for j in range(count)]


def _random_crop(pair, crop: int, rng: np.random.Generator):
    size = pair.x.shape[0]
    if crop >= size:
        return pair.x, pair.y
    oy = int(rng.integers(0, size - crop + 1))
    ox = int(rng.integers(0, size - crop + 1))
    return (pair.x[oy:oy + crop, ox:ox + crop], pair.y[oy:oy + crop, ox:ox + crop])


def train_fusion(
    model: FusionModel,
    cfg: TrainConfig,
    steps: int,
    fixed_batches: dict[TaskId, list] | None = None,
    tasks: tuple[TaskId, ...] = _TASK_CYCLE,
    log_every: int = 0,
) -> tuple[EmaState, list[dict[str, float]], AdamState]:
    """Joint fine-tuning over all three tasks with equal per-task batches.

    Draws fresh pairs per step unless ``fixed_batches`` pins one batch per
    task (overfit mode). Only the fusion-layer parameters are updated; the
    backbone must already be frozen. Returns the EMA state, the per-step
    loss history, and the optimizer state (for checkpointing).
    """
    for name, p in model.backbone.named_params():
        if p.requires_grad:
            raise ValueError(f"train_fusion: backbone parameter {name} is not frozen")
    trainable = model.moa_named_params()
    state = AdamState.for_params(trainable)
    ema = EmaState.from_params(trainable)
    rng = np.random.default_rng(cfg.seed)
    size = model.cfg.backbone.image_size
    crop = cfg.crop if cfg.crop is not None else size
    gen_size = max(size, crop)
    history: list[dict[str, float]] = []

    for step in range(steps):
        total = None
        row: dict[str, float] = {"step": float(step)}
        for task in tasks:
            if fixed_batches is not None:
                pairs = fixed_batches[task]
            else:
                pairs = fusion_batch(task, step, cfg.batch_per_task, gen_size)
            task_total = None
            term_sums: dict[str, float] = {}
            for pair in pairs:
                x_img, y_img = _random_crop(pair, crop, rng)
                trace = FusionTrace()
                fused = model.fuse(x_img, y_img, task, training=True, rng=rng, trace=trace)
                report = task_loss(
                    task, fused, Tensor(x_img), Tensor(y_img),
                    trace.prompts, trace.gates,
                    patch=model.cfg.backbone.patch_size,
                    mir_weight=cfg.mir_weight, aux_weight=cfg.aux_weight,
                )
                for tname, tval in report.terms.items():
                    v = float(tval.data)
                    if not np.isfinite(v):
                        raise FloatingPointError(
                            f"non-finite loss term {task.value}.{tname} at step {step}")
                    term_sums[tname] = term_sums.get(tname, 0.0) + v
                task_total = report.total if task_total is None else task_total + report.total
            task_mean = task_total * (1.0 / len(pairs))
            total = task_mean if total is None else total + task_mean
            for tname, tsum in term_sums.items():
                row[f"{task.value}.{tname}"] = tsum / len(pairs)
            row[f"{task.value}.total"] = float(task_mean.data)
        row["total"] = float(total.data)
        history.append(row)
        grads = ad.backward(total)
        adamw_step(trainable, grads, state, cfg)
        ema_update(ema, trainable, cfg.ema_decay)
        if log_every and step % log_every == 0:
            print(f"train step {step}: total {row['total']:.4f}")
    return ema, history, state


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def param_report(model: FusionModel) -> dict:
    """Exact parameter counts split into the frozen backbone, its local
    position embeddings, and the two trainable fusion groups."""
    pos = other_backbone = 0
    for name, p in model.backbone.named_params():
        if name.endswith(".pos"):
            pos += p.size
        else:
            other_backbone += p.size
    prompt_gen = prompt_fusion = 0
    for name, p in model.moa_named_params():
        local = name.split(".", 3)[3]  # moa.<stage>.<idx>.<local>
        if local.startswith(("reduce", "router", "adapter")):
            prompt_gen += p.size
        else:  # embed, conv1, conv2, lambda
            prompt_fusion += p.size
    trainable = prompt_gen + prompt_fusion
    total = pos + other_backbone + trainable
    return {
        "total": total,
        "frozen": pos + other_backbone,
        "trainable": trainable,
        "trainable_fraction": trainable / total,
        "breakdown": {
            "backbone": other_backbone,
            "position_embeddings": pos,
            "prompt_generation": prompt_gen,
            "prompt_driven_fusion": prompt_fusion,
        },
    }


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray], config: dict[str, str]) -> None:
    """Versioned container: magic, u64 count, sorted length-prefixed named
    tensors (u32 name len, name, u32 rank, u64 extents, little-endian f64
    payload), then a key=value config echo."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        names = sorted(tensors)
        f.write(struct.pack("<Q", len(names)))
        for name in names:
            arr = np.asarray(tensors[name], dtype="<f8")  # keeps 0-d rank
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes())
        lines = [f"{k}={config[k]}" for k in sorted(config)]
        f.write(("\n".join(lines) + "\n").encode("utf-8"))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<Q", f.read(8))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(n * 8), dtype="<f8").reshape(shape).astype(np.float64)
            tensors[name] = arr
        text = f.read().decode("utf-8")
    config = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            config[k] = v
    return tensors, config


def config_echo(mcfg: ModelConfig, tcfg: TrainConfig, stage: str) -> dict[str, str]:
    bb = mcfg.backbone
    return {
        "stage": stage,
        "image_size": str(bb.image_size),
        "patch_size": str(bb.patch_size),
        "dim": str(bb.dim),
        "encoder_depth": str(bb.encoder_depth),
        "decoder_depth": str(bb.decoder_depth),
        "heads": str(bb.heads),
        "window": str(bb.window),
        "tau": str(bb.tau),
        "mlp_ratio": repr(bb.mlp_ratio),
        "fuse_branch": bb.fuse_branch,
        "n_adapters": str(mcfg.n_adapters),
        "top_k": str(mcfg.top_k),
        "group_size": str(mcfg.group_size),
        "bottleneck": "" if mcfg.bottleneck is None else str(mcfg.bottleneck),
        "lr": repr(tcfg.lr),
        "beta1": repr(tcfg.beta1),
        "beta2": repr(tcfg.beta2),
        "weight_decay": repr(tcfg.weight_decay),
        "batch_per_task": str(tcfg.batch_per_task),
        "epochs": str(tcfg.epochs),
        "steps_per_epoch": str(tcfg.steps_per_epoch),
        "ema_decay": repr(tcfg.ema_decay),
        "mir_weight": repr(tcfg.mir_weight),
        "aux_weight": repr(tcfg.aux_weight),
        "crop": "" if tcfg.crop is None else str(tcfg.crop),
        "seed": str(tcfg.seed),
    }


def configs_from_echo(config: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    bb = BackboneConfig(
        image_size=int(config["image_size"]),
        patch_size=int(config["patch_size"]),
        dim=int(config["dim"]),
        encoder_depth=int(config["encoder_depth"]),
        decoder_depth=int(config["decoder_depth"]),
        heads=int(config["heads"]),
        window=int(config["window"]),
        tau=int(config["tau"]),
        mlp_ratio=float(config["mlp_ratio"]),
        fuse_branch=config.get("fuse_branch", "x"),
    )
    mcfg = ModelConfig(
        backbone=bb,
        n_adapters=int(config["n_adapters"]),
        top_k=int(config["top_k"]),
        group_size=int(config["group_size"]),
        bottleneck=int(config["bottleneck"]) if config.get("bottleneck") else None,
    )
    tcfg = TrainConfig(
        lr=float(config["lr"]),
        beta1=float(config["beta1"]),
        beta2=float(config["beta2"]),
        weight_decay=float(config["weight_decay"]),
        batch_per_task=int(config["batch_per_task"]),
        epochs=int(config["epochs"]),
        steps_per_epoch=int(config["steps_per_epoch"]),
        ema_decay=float(config["ema_decay"]),
        mir_weight=float(config["mir_weight"]),
        aux_weight=float(config["aux_weight"]),
        crop=int(config["crop"]) if config.get("crop") else None,
        seed=int(config["seed"]),
    )
    return mcfg, tcfg


def save_checkpoint(path, model: FusionModel, tcfg: TrainConfig, stage: str,
                    ema: EmaState | None = None, opt: AdamState | None = None) -> None:
    tensors: dict[str, np.ndarray] = {n: p.data for n, p in model.named_params()}
    if ema is not None:
        for n, arr in ema.shadow.items():
            tensors[f"ema.{n}"] = arr
    if opt is not None:
        for n, arr in opt.m.items():
            tensors[f"opt.m.{n}"] = arr
        for n, arr in opt.v.items():
            tensors[f"opt.v.{n}"] = arr
        tensors["opt.step"] = np.asarray(float(opt.t))
    save_tensors(path, tensors, config_echo(model.cfg, tcfg, stage))


def load_checkpoint(path) -> tuple[FusionModel, TrainConfig, str, EmaState | None, AdamState | None]:
    """Rebuild a model (and optional EMA / optimizer state) from a container."""
    tensors, config = load_tensors(path)
    mcfg, tcfg = configs_from_echo(config)
    model = make_fusion_model(mcfg, np.random.default_rng(0))
    shadow: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    t = 0
    consumed = set()
    for name, arr in tensors.items():
        if name.startswith("ema."):
            shadow[name[4:]] = arr.copy()
            consumed.add(name)
        elif name.startswith("opt.m."):
            m[name[6:]] = arr.copy()
            consumed.add(name)
        elif name.startswith("opt.v."):
            v[name[6:]] = arr.copy()
            consumed.add(name)
        elif name == "opt.step":
            t = int(arr)
            consumed.add(name)
    for name, p in model.named_params():
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint missing tensor {name}")
        if tensors[name].shape != p.shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].copy()
        consumed.add(name)
    extra = set(tensors) - consumed
    if extra:
        raise ValueError(f"{path}: unexpected tensors {sorted(extra)[:5]}")
    ema = EmaState(shadow=shadow) if shadow else None
    opt = AdamState(m=m, v=v, t=t) if m else None
    return model, tcfg, config.get("stage", ""), ema, opt


# ---------------------------------------------------------------------------
# evaluation helpers shared by the CLI and the acceptance suite
# ---------------------------------------------------------------------------


def collect_traces(model: FusionModel, pairs, task: TaskId,
                   manipulate=None) -> list[FusionTrace]:
    traces = []
    with ad.no_grad():
        for pair in pairs:
            trace = FusionTrace()
            model.fuse(pair.x, pair.y, task, training=False, manipulate=manipulate, trace=trace)
            traces.append(trace)
    return traces


def measure_mir(model: FusionModel, pairs_by_task: dict[TaskId, list]) -> float:
    """Mean |prompt_x + prompt_y - 1| across layers, pairs and tasks (noise off)."""
    vals = []
    for task, pairs in pairs_by_task.items():
        for trace in collect_traces(model, pairs, task):
            for p in trace.prompts:
                vals.append(float(np.abs(p.values.data.sum(axis=-1) - 1.0).mean()))
    return float(np.mean(vals))


def measure_importance_cv2(model: FusionModel, pairs_by_task: dict[TaskId, list]) -> float:
    """Mean over layers of CV^2 of adapter importance, importance summed over
    every token of the given pairs and tasks (noise off)."""
    n_layers = len(model.all_moas)
    importances = [None] * n_layers
    for task, pairs in pairs_by_task.items():
        for trace in collect_traces(model, pairs, task):
            for i, g in enumerate(trace.gates):
                imp = g.weights.data.sum(axis=(0, 1))
                importances[i] = imp if importances[i] is None else importances[i] + imp
    cv2s = []
    for imp in importances:
        mean = imp.mean()
        var = ((imp - mean) ** 2).mean()
        cv2s.append(var / (mean * mean))
    return float(np.mean(cv2s))
