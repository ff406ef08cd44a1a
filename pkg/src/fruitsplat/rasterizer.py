"""Tile-based Gaussian splat rasterizer with an analytic backward pass.

Four channels share one front-to-back accumulator: color, strawberry
probability, bruise probability and accumulated alpha. The backward pass
routes the strawberry/bruise channel gradients only into the matching
logits; geometry, opacity and color are driven by the color and alpha
channels alone.

Pixel ``(u, v)`` is sampled at its center ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .colmap import CameraFrame
from .gaussians import GaussianCloud, quats_to_rotmats, sigmoid

THREADS_ENV = "FRUITSPLAT_THREADS"


@dataclass(frozen=True)
class RenderConfig:
    near_clip: float = 0.01
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_size: int = 16
    blur: float = 0.3
    alpha_max: float = 0.999
    min_transmittance: float = 1e-4
    # half-extent of the screen-space footprint, in standard deviations
    extent_sigma: float = 3.0
    threads: int | None = None

    def __post_init__(self):
        if self.near_clip <= 0:
            raise ValueError("near_clip must be positive")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if len(self.background) != 3 or not all(0.0 <= c <= 1.0 for c in self.background):
            raise ValueError(f"background must be an RGB triple in [0, 1], got {self.background}")
        if not 0.0 < self.alpha_max < 1.0:
            raise ValueError("alpha_max must lie in (0, 1)")

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get(THREADS_ENV)
        return max(1, int(env)) if env else 1


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    strawberry: np.ndarray  # (H, W)
    bruise: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)

    @classmethod
    def zeros(cls, height: int, width: int) -> "RenderOutput":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width)), np.zeros((height, width)))

    def check_finite(self) -> None:
        for name in ("color", "strawberry", "bruise", "alpha"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name} upstream gradient")


@dataclass
class CloudGradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    s_logits: np.ndarray
    b_logits: np.ndarray

    FIELDS = ("means", "log_scales", "rotations", "opacity_logits", "colors", "s_logits", "b_logits")

    @classmethod
    def zeros(cls, n: int) -> "CloudGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n), np.zeros(n))

    def items(self):
        return ((name, getattr(self, name)) for name in self.FIELDS)


@dataclass(frozen=True)
class ProjectedGaussian:
    pixel_mean: tuple[float, float]
    cov2d: np.ndarray
    depth: float
    parent_index: int


# --------------------------------------------------------------------------- projection


@dataclass
class _Projection:
    """Vectorized projection state for the Gaussians surviving the near clip."""

    index: np.ndarray  # parent indices
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2), regularized
    conic: np.ndarray  # (M, 3): a, b, c of the inverse covariance
    depth: np.ndarray
    radius: np.ndarray
    # kept for the backward pass
    t_cam: np.ndarray
    jac: np.ndarray  # (M, 2, 3)
    cov3d: np.ndarray
    rotmats: np.ndarray
    scales: np.ndarray


def _camera_params(frame: CameraFrame):
    intr = frame.intrinsics
    return (frame.rotation_matrix(), np.asarray(frame.translation, dtype=float),
            intr.fx, intr.fy, intr.cx, intr.cy)


def _project(cloud: GaussianCloud, frame: CameraFrame, near_clip: float, blur: float,
             extent_sigma: float = 3.0) -> _Projection:
    w2c, tvec, fx, fy, cx, cy = _camera_params(frame)
    t_all = cloud.means @ w2c.T + tvec
    keep = np.flatnonzero(t_all[:, 2] > near_clip)
    t = t_all[keep]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]

    rot = quats_to_rotmats(cloud.rotations[keep])
    scales = np.exp(cloud.log_scales[keep])
    m = rot * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)

    jac = np.zeros((len(keep), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)
    jw = jac @ w2c
    cov2d = jw @ cov3d @ np.swapaxes(jw, 1, 2)
    cov2d[:, 0, 0] += blur
    cov2d[:, 1, 1] += blur

    a_, b_, c_ = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a_ * c_ - b_ * b_
    conic = np.column_stack([c_ / det, -b_ / det, a_ / det])
    mid = 0.5 * (a_ + c_)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(extent_sigma * np.sqrt(lam))
    mean2d = np.column_stack([fx * x / z + cx, fy * y / z + cy])
    return _Projection(keep, mean2d, cov2d, conic, z.copy(), radius, t, jac, cov3d, rot, scales)


def project(cloud: GaussianCloud, frame: CameraFrame, near_clip: float = 0.01,
            blur: float = RenderConfig.blur) -> list[ProjectedGaussian]:
    """Screen-space footprint of every Gaussian in front of the near plane."""
    proj = _project(cloud, frame, near_clip, blur)
    return [
        ProjectedGaussian((float(proj.mean2d[k, 0]), float(proj.mean2d[k, 1])), proj.cov2d[k].copy(),
                          float(proj.depth[k]), int(proj.index[k]))
        for k in range(len(proj.index))
    ]


# --------------------------------------------------------------------------- compositing


def _accumulate(alphas: np.ndarray, min_transmittance: float):
    """Front-to-back weights for a (K, P) alpha stack.

    A contribution is composited only while the transmittance in front of it
    is still >= ``min_transmittance``; everything behind that point is dropped.
    Returns (weights, transmittance in front of each entry, active mask,
    final transmittance).
    """
    k = alphas.shape[0]
    trans = np.empty_like(alphas)
    if k:
        trans[0] = 1.0
        np.cumprod(1.0 - alphas[:-1], axis=0, out=trans[1:])
    active = trans >= min_transmittance
    weights = np.where(active, alphas * trans, 0.0)
    # the last active entry per pixel decides what is left over
    final = np.where(active, trans * (1.0 - alphas), 1.0).min(axis=0) if k else np.ones(alphas.shape[1:])
    return weights, trans, active, final


def composite_pixel(
    contributions: Sequence[tuple[float, Sequence[float], float, float]],
    background: Sequence[float] = (0.0, 0.0, 0.0),
    min_transmittance: float = 1e-4,
) -> tuple[tuple[float, float, float], float, float, float]:
    """Blend ``(alpha, rgb, strawberry, bruise)`` entries ordered front to back.

    Returns ``(rgb, strawberry, bruise, alpha)``; the color falls through to
    ``background`` while the semantic channels composite over zero.
    """
    alphas = np.array([c[0] for c in contributions], dtype=float)
    if np.any(~np.isfinite(alphas)) or np.any(alphas < 0.0) or np.any(alphas >= 1.0):
        bad = next(a for a in alphas if not 0.0 <= a < 1.0)
        raise ValueError(f"alpha {bad!r} outside [0, 1)")
    colors = np.array([c[1] for c in contributions], dtype=float).reshape(-1, 3)
    sem = np.array([(c[2], c[3]) for c in contributions], dtype=float).reshape(-1, 2)
    w, _, _, final = _accumulate(alphas[:, None], min_transmittance)
    w = w[:, 0]
    rgb = (w[:, None] * colors).sum(axis=0) + final[0] * np.asarray(background, dtype=float)
    s, b = (w[:, None] * sem).sum(axis=0)
    return (float(rgb[0]), float(rgb[1]), float(rgb[2])), float(s), float(b), float(1.0 - final[0])


# --------------------------------------------------------------------------- tiles


@dataclass
class _TileWork:
    y0: int
    y1: int
    x0: int
    x1: int
    ids: np.ndarray  # indices into the projection, front to back


@dataclass
class _TileState:
    ids: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    unclamped: np.ndarray
    alphas: np.ndarray
    trans: np.ndarray
    active: np.ndarray
    weights: np.ndarray
    final: np.ndarray


def _bin_tiles(proj: _Projection, width: int, height: int, tile: int) -> list[_TileWork]:
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    mx, my, r = proj.mean2d[:, 0], proj.mean2d[:, 1], proj.radius
    tx0 = np.floor((mx - r) / tile)
    tx1 = np.floor((mx + r) / tile)
    ty0 = np.floor((my - r) / tile)
    ty1 = np.floor((my + r) / tile)
    # stable sort keeps ties in input order, so the result is reproducible
    order = np.argsort(proj.depth, kind="stable")
    work = []
    for ty in range(nty):
        rows = order[(ty0[order] <= ty) & (ty1[order] >= ty)]
        for tx in range(ntx):
            ids = rows[(tx0[rows] <= tx) & (tx1[rows] >= tx)]
            work.append(_TileWork(ty * tile, min((ty + 1) * tile, height),
                                  tx * tile, min((tx + 1) * tile, width), ids))
    return work


def _tile_forward(work: _TileWork, proj: _Projection, opac: np.ndarray, cfg: RenderConfig) -> _TileState:
    ys, xs = np.mgrid[work.y0:work.y1, work.x0:work.x1]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    ids = work.ids
    dx = px[None, :] - proj.mean2d[ids, 0][:, None]
    dy = py[None, :] - proj.mean2d[ids, 1][:, None]
    a, b, c = (proj.conic[ids, j][:, None] for j in range(3))
    gauss = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
    raw = opac[ids][:, None] * gauss
    unclamped = raw < cfg.alpha_max
    alphas = np.where(unclamped, raw, cfg.alpha_max)
    weights, trans, active, final = _accumulate(alphas, cfg.min_transmittance)
    return _TileState(ids, dx, dy, gauss, unclamped, alphas, trans, active, weights, final)


@dataclass
class RenderContext:
    """Forward intermediates needed by :func:`backward`."""

    cloud: GaussianCloud
    frame: CameraFrame
    config: RenderConfig
    proj: _Projection
    work: list[_TileWork]
    tiles: list[_TileState]
    opac: np.ndarray
    colors: np.ndarray
    s_prob: np.ndarray
    b_prob: np.ndarray


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def render_with_context(cloud: GaussianCloud, frame: CameraFrame,
                        config: RenderConfig | None = None) -> tuple[RenderOutput, RenderContext]:
    cfg = config or RenderConfig()
    h, w = frame.height, frame.width
    out = RenderOutput.zeros(h, w)
    bg = np.asarray(cfg.background, dtype=float)
    out.color[:] = bg

    proj = _project(cloud, frame, cfg.near_clip, cfg.blur, cfg.extent_sigma)
    sel = proj.index
    opac = sigmoid(cloud.opacity_logits[sel])
    colors = cloud.colors[sel]
    s_prob = sigmoid(cloud.s_logits[sel])
    b_prob = sigmoid(cloud.b_logits[sel])

    work = _bin_tiles(proj, w, h, cfg.tile_size) if len(sel) else []
    tiles = _map(lambda wk: _tile_forward(wk, proj, opac, cfg), work, cfg.worker_count())
    for wk, st in zip(work, tiles):
        shape = (wk.y1 - wk.y0, wk.x1 - wk.x0)
        ids = st.ids
        rgb = np.einsum("kp,kc->pc", st.weights, colors[ids]) + st.final[:, None] * bg
        out.color[wk.y0:wk.y1, wk.x0:wk.x1] = rgb.reshape(shape + (3,))
        out.strawberry[wk.y0:wk.y1, wk.x0:wk.x1] = np.einsum("kp,k->p", st.weights, s_prob[ids]).reshape(shape)
        out.bruise[wk.y0:wk.y1, wk.x0:wk.x1] = np.einsum("kp,k->p", st.weights, b_prob[ids]).reshape(shape)
        out.alpha[wk.y0:wk.y1, wk.x0:wk.x1] = (1.0 - st.final).reshape(shape)
    ctx = RenderContext(cloud, frame, cfg, proj, work, tiles, opac, colors, s_prob, b_prob)
    return out, ctx


def render(cloud: GaussianCloud, frame: CameraFrame, config: RenderConfig | None = None) -> RenderOutput:
    """Render color, strawberry, bruise and alpha images for one camera."""
    return render_with_context(cloud, frame, config)[0]


# --------------------------------------------------------------------------- backward


def _tile_backward(args):
    wk, st, ctx, up = args
    cfg = ctx.config
    ids = st.ids
    sl = (slice(wk.y0, wk.y1), slice(wk.x0, wk.x1))
    g_color = up.color[sl].reshape(-1, 3)
    g_alpha = up.alpha[sl].reshape(-1)
    g_straw = up.strawberry[sl].reshape(-1)
    g_bruise = up.bruise[sl].reshape(-1)
    colors = ctx.colors[ids]
    bg = np.asarray(cfg.background, dtype=float)

    # semantic channels: gradient reaches only the logits (weights held fixed)
    s_p, b_p = ctx.s_prob[ids], ctx.b_prob[ids]
    d_s = (st.weights @ g_straw) * s_p * (1.0 - s_p)
    d_b = (st.weights @ g_bruise) * b_p * (1.0 - b_p)

    d_color = st.weights @ g_color

    # d pixel / d alpha_i = T_i c_i - (what lies behind i) / (1 - alpha_i)
    v = colors @ g_color.T  # (K, P)
    wv = st.weights * v
    behind = np.cumsum(wv[::-1], axis=0)[::-1] - wv
    behind += (st.final * (g_color @ bg))[None, :]
    behind -= (g_alpha * st.final)[None, :]
    d_alpha = st.trans * v - behind / (1.0 - st.alphas)
    d_alpha = np.where(st.active & st.unclamped, d_alpha, 0.0)

    opac = ctx.opac[ids][:, None]
    d_opac = (d_alpha * st.gauss).sum(axis=1)
    d_q = d_alpha * opac * st.gauss * -0.5
    dx, dy = st.dx, st.dy
    a, b, c = (ctx.proj.conic[ids, j][:, None] for j in range(3))
    d_conic = np.column_stack([(d_q * dx * dx).sum(axis=1),
                               (d_q * 2.0 * dx * dy).sum(axis=1),
                               (d_q * dy * dy).sum(axis=1)])
    d_mean2d = np.column_stack([(d_q * -2.0 * (a * dx + b * dy)).sum(axis=1),
                                (d_q * -2.0 * (b * dx + c * dy)).sum(axis=1)])
    return ids, d_mean2d, d_conic, d_opac, d_color, d_s, d_b


def _quat_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain a (M, 3, 3) rotation-matrix gradient back to raw quaternions."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = d_rot
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gq = np.column_stack([gw, gx, gy, gz])
    return (gq - qn * (qn * gq).sum(axis=1, keepdims=True)) / norm


def backward(ctx: RenderContext, upstream: RenderOutput) -> CloudGradients:
    """Gradients of ``sum(upstream * output)`` w.r.t. every cloud parameter."""
    upstream.check_finite()
    cloud, proj = ctx.cloud, ctx.proj
    n, m = len(cloud), len(proj.index)
    grads = CloudGradients.zeros(n)
    if m == 0:
        return grads

    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_color = np.zeros((m, 3))
    d_s = np.zeros(m)
    d_b = np.zeros(m)
    parts = _map(_tile_backward, [(wk, st, ctx, upstream) for wk, st in zip(ctx.work, ctx.tiles)],
                 ctx.config.worker_count())
    # fixed tile order keeps the reduction independent of scheduling
    for ids, gm, gc, go, gcol, gs, gb in parts:
        np.add.at(d_mean2d, ids, gm)
        np.add.at(d_conic, ids, gc)
        np.add.at(d_opac, ids, go)
        np.add.at(d_color, ids, gcol)
        np.add.at(d_s, ids, gs)
        np.add.at(d_b, ids, gb)

    sel = proj.index
    grads.colors[sel] = d_color
    grads.s_logits[sel] = d_s
    grads.b_logits[sel] = d_b
    grads.opacity_logits[sel] = d_opac * ctx.opac * (1.0 - ctx.opac)

    # conic = inverse(cov2d):  dL/dcov2d = -Q G Q with G the symmetric conic gradient
    q_mat = np.empty((m, 2, 2))
    q_mat[:, 0, 0] = proj.conic[:, 0]
    q_mat[:, 0, 1] = q_mat[:, 1, 0] = proj.conic[:, 1]
    q_mat[:, 1, 1] = proj.conic[:, 2]
    g_q = np.empty((m, 2, 2))
    g_q[:, 0, 0] = d_conic[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_q[:, 1, 1] = d_conic[:, 2]
    g_cov2d = -q_mat @ g_q @ q_mat

    w2c, _, fx, fy, _, _ = _camera_params(ctx.frame)
    jw = proj.jac @ w2c
    g_cov3d = np.swapaxes(jw, 1, 2) @ g_cov2d @ jw
    g_jw = 2.0 * g_cov2d @ jw @ proj.cov3d
    g_jac = g_jw @ w2c.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    g_t = np.zeros((m, 3))
    g_t[:, 0] = d_mean2d[:, 0] * fx / z - g_jac[:, 0, 2] * fx / (z * z)
    g_t[:, 1] = d_mean2d[:, 1] * fy / z - g_jac[:, 1, 2] * fy / (z * z)
    g_t[:, 2] = (-d_mean2d[:, 0] * fx * x / (z * z) - d_mean2d[:, 1] * fy * y / (z * z)
                 - g_jac[:, 0, 0] * fx / (z * z) + g_jac[:, 0, 2] * 2.0 * fx * x / (z ** 3)
                 - g_jac[:, 1, 1] * fy / (z * z) + g_jac[:, 1, 2] * 2.0 * fy * y / (z ** 3))
    grads.means[sel] = g_t @ w2c

    # cov3d = (R S)(R S)^T
    rs = proj.rotmats * proj.scales[:, None, :]
    g_rs = 2.0 * g_cov3d @ rs
    g_scale = (g_rs * proj.rotmats).sum(axis=1)
    grads.log_scales[sel] = g_scale * proj.scales
    g_rot = g_rs * proj.scales[:, None, :]
    grads.rotations[sel] = _quat_backward(cloud.rotations[sel], g_rot)
    return grads


def render_backward(cloud: GaussianCloud, frame: CameraFrame, config: RenderConfig | None,
                    upstream_grads: RenderOutput) -> CloudGradients:
    """Recompute the forward pass and return parameter gradients."""
    upstream_grads.check_finite()
    _, ctx = render_with_context(cloud, frame, config)
    return backward(ctx, upstream_grads)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
