"""Shared fixtures-by-function: random scenes, cameras and naive oracles."""

from __future__ import annotations

import math

import numpy as np

from fruitsplat.colmap import CameraFrame, CameraIntrinsics, CameraModel
from fruitsplat.gaussians import GaussianCloud
from fruitsplat.rasterizer import RenderConfig, render_with_context


def identity_frame(size: int = 32, focal: float = 30.0, frame_id: int = 1) -> CameraFrame:
    intr = CameraIntrinsics(CameraModel.PINHOLE, size, size, focal, focal, size / 2.0, size / 2.0)
    return CameraFrame(frame_id, intr, (1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0), f"f{frame_id}.png")


def random_cloud(rng: np.random.Generator, n: int, focal: float = 30.0, size: int = 32) -> GaussianCloud:
    """Gaussians in front of ``identity_frame`` with footprints of a few pixels."""
    z = rng.uniform(2.0, 4.0, n)
    half = 0.45 * size / focal
    xy = rng.uniform(-half, half, (n, 2)) * z[:, None]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        means=np.column_stack([xy, z]),
        log_scales=np.log(rng.uniform(0.03, 0.25, (n, 3))),
        rotations=q,
        opacity_logits=rng.uniform(-2.0, 1.5, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        s_logits=rng.normal(0.0, 2.0, n),
        b_logits=rng.normal(0.0, 2.0, n),
    )


def structure(cloud: GaussianCloud, frame: CameraFrame, config: RenderConfig | None = None):
    """Discrete state of a render: culling, tile lists, alpha clamps, termination.

    Two parameter values with the same structure lie on the same smooth
    piece of the forward map.
    """
    _, ctx = render_with_context(cloud, frame, config)
    parts = [ctx.proj.index.tobytes()]
    for wk, st in zip(ctx.work, ctx.tiles):
        parts += [wk.ids.tobytes(), st.unclamped.tobytes(), st.active.tobytes()]
    return tuple(parts)


def naive_composite(contributions, background=(0.0, 0.0, 0.0), t_min=1e-4):
    """Front-to-back alpha compositing with explicit loops, including early stop."""
    rgb = [0.0, 0.0, 0.0]
    s = b = 0.0
    t = 1.0
    for alpha, color, si, bi in contributions:
        if t < t_min:
            break
        for c in range(3):
            rgb[c] += color[c] * alpha * t
        s += si * alpha * t
        b += bi * alpha * t
        t *= 1.0 - alpha
    return tuple(rgb[c] + t * background[c] for c in range(3)), s, b, 1.0 - t


def naive_ssim_mean(x, y, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Windowed SSIM by explicit summation over a zero-padded neighbourhood."""
    h, w = x.shape[:2]
    half = window // 2
    g1 = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-half, half + 1)]
    tot = sum(g1)
    g1 = [v / tot for v in g1]
    chans = x.shape[2] if x.ndim == 3 else 1
    x3 = x.reshape(h, w, chans)
    y3 = y.reshape(h, w, chans)
    acc = 0.0
    for ch in range(chans):
        for i in range(h):
            for j in range(w):
                mx = my = sxx = syy = sxy = 0.0
                for di in range(-half, half + 1):
                    ii = i + di
                    if ii < 0 or ii >= h:
                        continue
                    for dj in range(-half, half + 1):
                        jj = j + dj
                        if jj < 0 or jj >= w:
                            continue
                        wt = g1[di + half] * g1[dj + half]
                        a, b = x3[ii, jj, ch], y3[ii, jj, ch]
                        mx += wt * a
                        my += wt * b
                        sxx += wt * a * a
                        syy += wt * b * b
                        sxy += wt * a * b
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return acc / (h * w * chans)


def random_colmap_model(rng: np.random.Generator, max_frames: int = 6, max_points: int = 20):
    """Random valid frames and sparse points, mixing all three camera models."""
    from fruitsplat.colmap import SparsePoint

    intrinsics = []
    for _ in range(int(rng.integers(1, 4))):
        w, h = int(rng.integers(8, 2000)), int(rng.integers(8, 2000))
        model = CameraModel(rng.choice([m.value for m in CameraModel]))
        f = float(rng.uniform(10.0, 3000.0))
        fy = f if model != CameraModel.PINHOLE else float(rng.uniform(10.0, 3000.0))
        k = float(rng.normal(0.0, 0.1)) if model == CameraModel.SIMPLE_RADIAL else 0.0
        intrinsics.append(CameraIntrinsics(model, w, h, f, fy, float(rng.uniform(0, w)), float(rng.uniform(0, h)), k))
    frames = []
    for i in range(int(rng.integers(0, max_frames + 1))):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        frames.append(CameraFrame(int(i * 3 + 1), intrinsics[int(rng.integers(len(intrinsics)))],
                                  tuple(q), tuple(rng.normal(0.0, 5.0, 3)), f"img_{i:03d}.jpg"))
    points = [SparsePoint(tuple(rng.normal(0.0, 10.0, 3)), tuple(int(c) for c in rng.integers(0, 256, 3)))
              for _ in range(int(rng.integers(0, max_points + 1)))]
    return frames, points
