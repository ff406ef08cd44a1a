"""Training samples from disk, and synthetic fruit scenes with known bruising."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .colmap import CameraFrame, CameraIntrinsics, CameraModel, SparsePoint, parse_colmap_model, rotmat_to_quat
from .gaussians import GaussianCloud
from .rasterizer import RenderConfig, render

MASK_THRESHOLD = 127
SEMANTIC_HIGH = 8.0


@dataclass(frozen=True)
class TrainingSample:
    frame: CameraFrame
    image: np.ndarray
    strawberry_mask: Optional[np.ndarray] = None
    bruise_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        h, w = self.frame.height, self.frame.width
        if self.image.shape != (h, w, 3):
            raise ValueError(
                f"frame {self.frame.frame_id}: image is {self.image.shape[1]}x{self.image.shape[0]}, "
                f"camera expects {w}x{h}"
            )
        if self.bruise_mask is not None and self.strawberry_mask is None:
            raise ValueError(f"frame {self.frame.frame_id}: bruise mask given without a strawberry mask")
        for name in ("strawberry_mask", "bruise_mask"):
            m = getattr(self, name)
            if m is not None and m.shape != (h, w):
                raise ValueError(
                    f"frame {self.frame.frame_id}: {name} is {m.shape[1]}x{m.shape[0]}, image is {w}x{h}"
                )
        for name in ("image", "strawberry_mask", "bruise_mask"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    def without_masks(self) -> "TrainingSample":
        return TrainingSample(self.frame, self.image)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > MASK_THRESHOLD).astype(np.uint8)


def write_image(path: Path, img: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def _find_mask(mask_dir: Path, image_name: str) -> Path:
    exact = mask_dir / image_name
    if exact.exists():
        return exact
    png = mask_dir / (Path(image_name).stem + ".png")
    if png.exists():
        return png
    raise FileNotFoundError(f"missing mask for {image_name} in {mask_dir}")


def load_dataset(
    model_dir: str | Path,
    image_dir: str | Path,
    strawberry_mask_dir: str | Path | None = None,
    bruise_mask_dir: str | Path | None = None,
    threads: int = 1,
) -> list[TrainingSample]:
    """Join a COLMAP model with its images and optional pseudo-ground-truth masks.

    Mask files mirror the image basenames (a ``.png`` with the same stem is
    also accepted). Gray values above 127 count as foreground.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory {image_dir} does not exist")
    if bruise_mask_dir is not None and strawberry_mask_dir is None:
        raise ValueError("bruise masks require strawberry masks as well")
    frames, _ = parse_colmap_model(model_dir)

    def load(frame: CameraFrame) -> TrainingSample:
        path = image_dir / frame.image_name
        if not path.exists():
            raise FileNotFoundError(f"frame {frame.frame_id}: missing image {path}")
        img = read_image(path)
        straw = read_mask(_find_mask(Path(strawberry_mask_dir), frame.image_name)) if strawberry_mask_dir else None
        bruise = read_mask(_find_mask(Path(bruise_mask_dir), frame.image_name)) if bruise_mask_dir else None
        return TrainingSample(frame, img, straw, bruise)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(load, frames))
    else:
        samples = [load(f) for f in frames]
    return sorted(samples, key=lambda s: s.frame.frame_id)


# --------------------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    n_gaussians: int = 400
    fruit_semiaxes: tuple[float, float, float] = (0.02, 0.02, 0.025)
    bruise_patch_center: tuple[float, float, float] = (1.0, 0.0, 0.0)
    bruise_patch_angle: float = math.pi / 3
    n_cameras: int = 24
    camera_radius: float = 0.12
    seed: int = 0
    image_size: int = 64
    n_background: int = 64
    fruit_color: tuple[float, float, float] = (0.80, 0.12, 0.14)
    bruise_color: tuple[float, float, float] = (0.42, 0.22, 0.10)
    background_color: tuple[float, float, float] = (0.30, 0.55, 0.30)

    def __post_init__(self):
        if self.n_gaussians <= 0:
            raise ValueError(f"n_gaussians must be positive, got {self.n_gaussians}")
        if not 0.0 < self.bruise_patch_angle < math.pi:
            raise ValueError(f"bruise_patch_angle must lie in (0, pi), got {self.bruise_patch_angle}")
        if self.n_cameras < 2:
            raise ValueError(f"n_cameras must be >= 2, got {self.n_cameras}")
        if min(self.fruit_semiaxes) <= 0:
            raise ValueError("fruit semiaxes must be positive")
        if self.camera_radius <= 2.0 * max(self.fruit_semiaxes):
            raise ValueError("cameras must sit well outside the fruit")
        if self.n_background < 0 or self.image_size < 8:
            raise ValueError("invalid background count or image size")
        c = np.asarray(self.bruise_patch_center, dtype=float)
        if abs(np.linalg.norm(c) - 1.0) > 1e-6:
            raise ValueError("bruise_patch_center must be a unit vector")

    @staticmethod
    def angle_for_fraction(fraction: float) -> float:
        """Cap half-angle whose expected share of a uniform sphere is ``fraction``."""
        if not 0.0 <= fraction < 1.0:
            raise ValueError(f"bruise fraction must lie in [0, 1), got {fraction}")
        return max(math.acos(1.0 - 2.0 * fraction), 1e-9)


def _look_at(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.column_stack([right, down, forward])
    w2c = c2w.T
    return w2c, -w2c @ center


def synthetic_cameras(spec: SyntheticSceneSpec) -> list[CameraFrame]:
    """Cameras on a Fibonacci sphere around the origin, all looking inward."""
    size = spec.image_size
    extent = 1.9 * max(spec.fruit_semiaxes)
    focal = 0.45 * size * spec.camera_radius / extent
    intr = CameraIntrinsics(CameraModel.PINHOLE, size, size, focal, focal, size / 2.0, size / 2.0)
    frames = []
    for i, d in enumerate(_fibonacci_sphere(spec.n_cameras)):
        w2c, t = _look_at(spec.camera_radius * d)
        q = rotmat_to_quat(w2c)
        frames.append(CameraFrame(i + 1, intr, tuple(q), tuple(t), f"frame_{i + 1:04d}.png"))
    return frames


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _build_cloud(spec: SyntheticSceneSpec):
    rng = np.random.default_rng(spec.seed)
    semi = np.asarray(spec.fruit_semiaxes, dtype=float)
    n, nb = spec.n_gaussians, spec.n_background

    dirs = _fibonacci_sphere(n) @ _random_rotation(rng).T
    fruit_pos = dirs * semi
    cos_to_patch = dirs @ np.asarray(spec.bruise_patch_center, dtype=float)
    bruised = cos_to_patch >= math.cos(spec.bruise_patch_angle)

    mean_r = float(np.mean(semi))
    spacing = math.sqrt(4.0 * math.pi * mean_r ** 2 / n)
    fruit_scale = 0.7 * spacing

    ring_r = 1.5 * max(semi[0], semi[1])
    phi = 2.0 * math.pi * (np.arange(nb) + rng.uniform(0.0, 1.0, nb) * 0.5) / max(nb, 1)
    ring_pos = np.column_stack([ring_r * np.cos(phi), ring_r * np.sin(phi), np.full(nb, -0.5 * semi[2])])
    ring_scale = max(fruit_scale, 0.5 * 2.0 * math.pi * ring_r / max(nb, 1))

    colors = np.where(bruised[:, None], spec.bruise_color, spec.fruit_color)
    colors = np.clip(colors + rng.normal(0.0, 0.03, (n, 3)), 0.0, 1.0)
    ring_colors = np.clip(np.asarray(spec.background_color) + rng.normal(0.0, 0.03, (nb, 3)), 0.0, 1.0)

    total = n + nb
    rot = np.zeros((total, 4))
    rot[:, 0] = 1.0
    is_fruit = np.concatenate([np.ones(n, bool), np.zeros(nb, bool)])
    is_bruised = np.concatenate([bruised, np.zeros(nb, bool)])
    cloud = GaussianCloud(
        means=np.vstack([fruit_pos, ring_pos]),
        log_scales=np.log(np.concatenate([np.full(n, fruit_scale), np.full(nb, ring_scale)]))[:, None].repeat(3, 1),
        rotations=rot,
        opacity_logits=np.full(total, math.log(0.9 / 0.1)),
        colors=np.vstack([colors, ring_colors]),
        s_logits=np.where(is_fruit, SEMANTIC_HIGH, -SEMANTIC_HIGH),
        b_logits=np.where(is_bruised, SEMANTIC_HIGH, -SEMANTIC_HIGH),
        metadata={"step": 0, "source": f"synthetic seed={spec.seed}"},
    )
    return cloud, is_fruit, is_bruised


def generate_synthetic_scene(spec: SyntheticSceneSpec, render_config: RenderConfig | None = None):
    """Ground-truth cloud, rendered samples and the true bruise statistics.

    Masks are the GT cloud's rendered semantic channels thresholded at 0.5.
    Returns ``(cloud, samples, ground_truth)`` where ``ground_truth`` holds
    ``bruise_fraction``, ``strawberry_count`` and the per-Gaussian
    ``is_fruit`` / ``is_bruised`` flags.
    """
    cloud, is_fruit, is_bruised = _build_cloud(spec)
    cfg = render_config or RenderConfig()
    samples = []
    for frame in synthetic_cameras(spec):
        out = render(cloud, frame, cfg)
        straw = (out.strawberry >= 0.5).astype(np.uint8)
        bruise = (out.bruise >= 0.5).astype(np.uint8)
        # per-Gaussian bruise <= strawberry probability makes this a subset
        if np.any(bruise > straw):
            raise RuntimeError(f"frame {frame.frame_id}: synthetic bruise mask leaks outside the fruit")
        samples.append(TrainingSample(frame, out.color, straw, bruise))
    truth = {
        "bruise_fraction": float(is_bruised.sum() / is_fruit.sum()),
        "strawberry_count": int(is_fruit.sum()),
        "is_fruit": is_fruit,
        "is_bruised": is_bruised,
    }
    return cloud, samples, truth


def synthetic_sparse_points(cloud: GaussianCloud, noise: float, seed: int) -> list[SparsePoint]:
    """SfM-like points: the GT means with Gaussian jitter and 8-bit colors."""
    rng = np.random.default_rng(seed + 7919)
    pos = cloud.means + rng.normal(0.0, noise, cloud.means.shape)
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    return [SparsePoint(tuple(p), tuple(c)) for p, c in zip(pos, rgb)]
