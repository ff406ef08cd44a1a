"""Optimization of a Gaussian cloud against images and semantic masks."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataset import TrainingSample
from .gaussians import GaussianCloud, export_ply
from .losses import bce_loss_grad, dssim_loss_grad, l1_loss_grad
from .rasterizer import CloudGradients, RenderConfig, RenderOutput, backward, psnr, render, render_with_context

logger = logging.getLogger(__name__)

GEOMETRY_FIELDS = ("means", "log_scales", "rotations", "opacity_logits", "colors")
SEMANTIC_FIELDS = ("s_logits", "b_logits")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 15000
    lambda_dssim: float = 0.2
    w_strawberry: float = 1.0
    w_bruise: float = 1.0
    lr_mean: float = 1.6e-4
    lr_mean_final: float = 1.6e-6
    lr_rest: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_semantic: float = 2.5e-2
    # mean learning rates are multiplied by this; None derives it from the cameras
    spatial_lr_scale: Optional[float] = None
    prune_opacity_threshold: float = 0.005
    prune_interval: int = 500
    seed: int = 0
    ssim_window: int = 11
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError(f"lambda_dssim must lie in [0, 1], got {self.lambda_dssim}")
        for name in ("lr_mean", "lr_mean_final", "lr_rest", "lr_opacity", "lr_semantic"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.w_strawberry < 0 or self.w_bruise < 0:
            raise ValueError("loss weights must be non-negative")
        if self.prune_interval <= 0:
            raise ValueError("prune_interval must be positive")
        if self.ssim_window % 2 != 1:
            raise ValueError("ssim_window must be odd")
        if self.spatial_lr_scale is not None and self.spatial_lr_scale <= 0:
            raise ValueError("spatial_lr_scale must be positive")

    def learning_rate(self, name: str, step: int, spatial_scale: float = 1.0) -> float:
        if name == "means":
            t = min(max(step / self.steps, 0.0), 1.0)
            lr = math.exp((1.0 - t) * math.log(self.lr_mean) + t * math.log(self.lr_mean_final))
            return lr * spatial_scale
        if name == "opacity_logits":
            return self.lr_opacity
        if name in SEMANTIC_FIELDS:
            return self.lr_semantic
        return self.lr_rest


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    dssim: float
    bce_strawberry: float
    bce_bruise: float
    total: float

    @classmethod
    def combine(cls, l1: float, dssim: float, bce_s: float, bce_b: float, cfg: TrainConfig) -> "LossBreakdown":
        total = (1.0 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * dssim + cfg.w_strawberry * bce_s + cfg.w_bruise * bce_b
        return cls(l1, dssim, bce_s, bce_b, total)


class Adam:
    """Per-field Adam moments sized to a cloud; ``step`` counts updates taken."""

    def __init__(self, cloud: GaussianCloud, config: TrainConfig, spatial_scale: float = 1.0):
        self.config = config
        self.spatial_scale = spatial_scale
        self.step = 0
        self.m = {name: np.zeros_like(getattr(cloud, name)) for name in GaussianCloud.ARRAYS}
        self.v = {name: np.zeros_like(getattr(cloud, name)) for name in GaussianCloud.ARRAYS}

    def update(self, cloud: GaussianCloud, grads: CloudGradients) -> None:
        cfg = self.config
        self.step += 1
        bc1 = 1.0 - cfg.beta1 ** self.step
        bc2 = 1.0 - cfg.beta2 ** self.step
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            lr = cfg.learning_rate(name, self.step - 1, self.spatial_scale)
            param = getattr(cloud, name)
            param -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def keep(self, mask: np.ndarray) -> None:
        for name in GaussianCloud.ARRAYS:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]


def _project_constraints(cloud: GaussianCloud) -> None:
    norms = np.linalg.norm(cloud.rotations, axis=1)
    off = np.abs(norms - 1.0) > 1e-12
    if np.any(off):
        cloud.rotations[off] /= norms[off, None]
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)


def compute_loss(out: RenderOutput, sample: TrainingSample,
                 cfg: TrainConfig) -> tuple[LossBreakdown, RenderOutput]:
    """Loss terms plus the gradient of the total w.r.t. every rendered channel."""
    l1, g_l1 = l1_loss_grad(out.color, sample.image)
    dssim, g_dssim = dssim_loss_grad(out.color, sample.image, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
    has_s = sample.strawberry_mask is not None
    has_b = sample.bruise_mask is not None
    bce_s, g_s = bce_loss_grad(out.strawberry, sample.strawberry_mask if has_s else None, valid=has_s)
    bce_b, g_b = bce_loss_grad(out.bruise, sample.bruise_mask if has_b else None, valid=has_b)
    losses = LossBreakdown.combine(l1, dssim, bce_s, bce_b, cfg)
    upstream = RenderOutput(
        color=(1.0 - cfg.lambda_dssim) * g_l1 + cfg.lambda_dssim * g_dssim,
        strawberry=cfg.w_strawberry * g_s,
        bruise=cfg.w_bruise * g_b,
        alpha=np.zeros_like(out.alpha),
    )
    return losses, upstream


def train_step(cloud: GaussianCloud, sample: TrainingSample, config: TrainConfig, optimizer: Adam,
               render_config: RenderConfig | None = None) -> LossBreakdown:
    """One render / loss / backward / Adam update on a single frame, in place."""
    out, ctx = render_with_context(cloud, sample.frame, render_config)
    losses, upstream = compute_loss(out, sample, config)
    if not math.isfinite(losses.total):
        raise FloatingPointError(f"non-finite loss at step {optimizer.step + 1}: {losses}")
    grads = backward(ctx, upstream)
    optimizer.update(cloud, grads)
    _project_constraints(cloud)
    cloud.metadata["step"] = optimizer.step
    return losses


def prune(cloud: GaussianCloud, threshold: float, optimizer: Optional[Adam] = None) -> int:
    """Drop Gaussians whose opacity fell below ``threshold``; returns how many."""
    keep = cloud.opacities >= threshold
    removed = int((~keep).sum())
    if removed:
        for name in GaussianCloud.ARRAYS:
            setattr(cloud, name, getattr(cloud, name)[keep])
        if optimizer is not None:
            optimizer.keep(keep)
    return removed


def scene_extent(frames) -> float:
    """1.1 x the largest camera distance from the camera centroid."""
    centers = np.array([f.camera_center() for f in frames])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) if len(centers) > 1 else 0.0
    return 1.1 * radius if radius > 0 else 1.0


def train(
    cloud: GaussianCloud,
    samples: Sequence[TrainingSample],
    config: TrainConfig,
    render_config: RenderConfig | None = None,
    on_step: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> tuple[GaussianCloud, list[LossBreakdown]]:
    """Train a copy of ``cloud`` for ``config.steps`` single-frame steps.

    Frames are visited in a seeded shuffled order, reshuffled each pass.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    cloud = cloud.copy()
    cloud.validate()
    scale = config.spatial_lr_scale or scene_extent([s.frame for s in samples])
    optimizer = Adam(cloud, config, scale)
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    history = []
    for step in range(1, config.steps + 1):
        if not order:
            order = list(rng.permutation(len(samples)))
        sample = samples[order.pop(0)]
        losses = train_step(cloud, sample, config, optimizer, render_config)
        history.append(losses)
        if on_step is not None:
            on_step(step, losses)
        if step % config.prune_interval == 0 and step < config.steps:
            removed = prune(cloud, config.prune_opacity_threshold, optimizer)
            if removed:
                logger.info("step %d: pruned %d Gaussians, %d remain", step, removed, len(cloud))
            if len(cloud) == 0:
                raise RuntimeError(f"all Gaussians pruned at step {step}")
    return cloud, history


def evaluate_psnr(cloud: GaussianCloud, samples: Sequence[TrainingSample],
                  render_config: RenderConfig | None = None) -> float:
    """Mean PSNR (dB) of rendered color over ``samples``."""
    values = [psnr(render(cloud, s.frame, render_config).color, s.image) for s in samples]
    return float(np.mean(values))


# --------------------------------------------------------------------------- outputs

LOSS_COLUMNS = ("step", "l1", "dssim", "bce_s", "bce_b", "total")


def write_loss_csv(path: str | Path, history: Sequence[LossBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for i, lb in enumerate(history, start=1):
            writer.writerow([i, repr(lb.l1), repr(lb.dssim), repr(lb.bce_strawberry), repr(lb.bce_bruise), repr(lb.total)])


def save_checkpoint(cloud: GaussianCloud, path: str | Path, config: TrainConfig, extra: dict | None = None) -> None:
    """Raw-logit PLY plus a ``.json`` sidecar with the config, step and seed."""
    path = Path(path)
    export_ply(cloud, path, activated=False)
    sidecar = {"step": int(cloud.metadata.get("step", 0)), "seed": config.seed, "config": asdict(config)}
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
