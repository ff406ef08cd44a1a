"""Gaussian primitives carrying color plus strawberry and bruise logits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .colmap import SparsePoint

DEFAULT_SINGLE_POINT_SCALE = 0.01

PLY_PROPERTIES = (
    "x", "y", "z",
    "red", "green", "blue",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "strawberry", "bruise",
)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p, eps: float = 1e-12):
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    s_logit: float
    b_logit: float


@dataclass
class GaussianCloud:
    """Struct-of-arrays storage; row ``i`` of every array is Gaussian ``i``.

    Rotations are (w, x, y, z) quaternions.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    s_logits: np.ndarray
    b_logits: np.ndarray
    metadata: dict = field(default_factory=lambda: {"step": 0, "source": ""})

    ARRAYS = ("means", "log_scales", "rotations", "opacity_logits", "colors", "s_logits", "b_logits")
    _WIDTHS = {"means": 3, "log_scales": 3, "rotations": 4, "colors": 3}

    def __post_init__(self):
        for name in self.ARRAYS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            width = self._WIDTHS.get(name)
            if width is None:
                arr = arr.reshape(-1)
            else:
                arr = arr.reshape(-1, width)
            setattr(self, name, arr)
        n = len(self.means)
        for name in self.ARRAYS:
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        self.metadata = {"step": 0, "source": "", **dict(self.metadata)}

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.means[i].copy(), self.log_scales[i].copy(), self.rotations[i].copy(),
            float(self.opacity_logits[i]), self.colors[i].copy(),
            float(self.s_logits[i]), float(self.b_logits[i]),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], metadata: dict | None = None) -> "GaussianCloud":
        if not gaussians:
            return cls.empty(metadata)
        return cls(
            means=[g.mean for g in gaussians],
            log_scales=[g.log_scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            opacity_logits=[g.opacity_logit for g in gaussians],
            colors=[g.color for g in gaussians],
            s_logits=[g.s_logit for g in gaussians],
            b_logits=[g.b_logit for g in gaussians],
            metadata=metadata or {},
        )

    @classmethod
    def empty(cls, metadata: dict | None = None) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0), metadata or {})

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, n).copy() for n in self.ARRAYS), metadata=dict(self.metadata))

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, n)[keep] for n in self.ARRAYS), metadata=dict(self.metadata))

    def validate(self) -> None:
        for name in self.ARRAYS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        norms = np.linalg.norm(self.rotations, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) >= 1e-6)
        if bad.size:
            raise ValueError(f"Gaussian {bad[0]} has non-unit quaternion (norm {norms[bad[0]]!r})")

    # activations
    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def strawberry_scores(self) -> np.ndarray:
        return sigmoid(self.s_logits)

    @property
    def bruise_scores(self) -> np.ndarray:
        return sigmoid(self.b_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariance_from_params(self.log_scales, self.rotations)


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched (w, x, y, z) -> (N, 3, 3); quaternions are normalized first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def covariance_from_params(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(log_scale))^2 R^T, batched."""
    r = quats_to_rotmats(rotations)
    m = r * np.exp(log_scales)[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def init_from_points(
    points: Sequence[SparsePoint],
    initial_opacity: float = 0.1,
    knn_k: int = 3,
    fallback_scale: float = DEFAULT_SINGLE_POINT_SCALE,
) -> GaussianCloud:
    """One isotropic Gaussian per sparse point.

    The scale is the mean distance to the ``knn_k`` nearest neighbours (fewer
    when the cloud is smaller). Semantic logits start at 0.
    """
    if len(points) == 0:
        raise ValueError("cannot initialize a Gaussian cloud from zero points")
    if not 0.0 < initial_opacity < 1.0:
        raise ValueError(f"initial_opacity must lie in (0, 1), got {initial_opacity}")
    if knn_k < 1:
        raise ValueError(f"knn_k must be >= 1, got {knn_k}")

    xyz = np.array([p.position for p in points], dtype=float)
    rgb = np.array([p.color for p in points], dtype=float) / 255.0
    n = len(xyz)
    if n == 1:
        dist = np.array([fallback_scale])
    else:
        k = min(knn_k, n - 1)
        d, _ = cKDTree(xyz).query(xyz, k=k + 1)
        dist = d[:, 1:].mean(axis=1)
        # coincident points would give log(0)
        dist = np.where(dist > 0, dist, fallback_scale)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        means=xyz,
        log_scales=np.repeat(np.log(dist)[:, None], 3, axis=1),
        rotations=rot,
        opacity_logits=np.full(n, math.log(initial_opacity / (1.0 - initial_opacity))),
        colors=rgb,
        s_logits=np.zeros(n),
        b_logits=np.zeros(n),
        metadata={"step": 0, "source": "sparse points"},
    )


# --------------------------------------------------------------------------- PLY


def export_ply(cloud: GaussianCloud, path: str | Path, activated: bool = False) -> None:
    """Binary little-endian PLY, one vertex per Gaussian, float64 properties.

    With ``activated`` the opacity/strawberry/bruise columns hold sigmoid
    probabilities instead of logits.
    """
    if len(cloud) == 0:
        raise ValueError("cannot export an empty Gaussian cloud")
    cloud.validate()
    if activated:
        opacity, straw, bruise = cloud.opacities, cloud.strawberry_scores, cloud.bruise_scores
    else:
        opacity, straw, bruise = cloud.opacity_logits, cloud.s_logits, cloud.b_logits
    cols = np.column_stack([
        cloud.means, cloud.colors, opacity, cloud.log_scales, cloud.rotations, straw, bruise,
    ])
    data = np.ascontiguousarray(cols, dtype="<f8")

    header = ["ply", "format binary_little_endian 1.0",
              f"comment fruitsplat activated={int(bool(activated))}",
              f"comment fruitsplat step={int(cloud.metadata.get('step', 0))}",
              f"element vertex {len(cloud)}"]
    header += [f"property double {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply_vertices(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Vertex properties of a binary little-endian PLY plus ``key=value`` comments."""
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline()
        if first.strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = None
        props: list[tuple[str, str]] = []
        comments: dict[str, str] = {}
        element = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: PLY header has no end_header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "comment":
                for tok in tokens[1:]:
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        comments[k] = v
            elif tokens[0] == "element":
                element = tokens[1]
                if element == "vertex":
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and element == "vertex":
                if tokens[1] == "list":
                    raise ValueError(f"{path}: list properties are not supported")
                if tokens[1] not in _PLY_TYPES:
                    raise ValueError(f"{path}: unknown property type {tokens[1]}")
                props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
        if n_vertex is None:
            raise ValueError(f"{path}: no vertex element")
        dtype = np.dtype(props)
        raw = fh.read(dtype.itemsize * n_vertex)
        if len(raw) != dtype.itemsize * n_vertex:
            raise ValueError(f"{path}: truncated vertex data")
    arr = np.frombuffer(raw, dtype=dtype, count=n_vertex)
    return {name: arr[name].astype(np.float64) for name in arr.dtype.names}, comments


def import_ply(path: str | Path) -> GaussianCloud:
    """Inverse of :func:`export_ply`. Activated files are mapped back through logit."""
    props, comments = read_ply_vertices(path)
    for name in PLY_PROPERTIES:
        if name not in props:
            raise ValueError(f"missing property {name}")
    activated = comments.get("activated", "0") == "1"
    opacity, straw, bruise = props["opacity"], props["strawberry"], props["bruise"]
    if activated:
        opacity, straw, bruise = logit(opacity), logit(straw), logit(bruise)
    cloud = GaussianCloud(
        means=np.column_stack([props["x"], props["y"], props["z"]]),
        log_scales=np.column_stack([props[f"scale_{i}"] for i in range(3)]),
        rotations=np.column_stack([props[f"rot_{i}"] for i in range(4)]),
        opacity_logits=opacity,
        colors=np.column_stack([props["red"], props["green"], props["blue"]]),
        s_logits=straw,
        b_logits=bruise,
        metadata={"step": int(comments.get("step", 0)), "source": str(path)},
    )
    return cloud
