"""Reading and writing COLMAP sparse models (cameras, images, points3D).

Binary files follow the reference COLMAP layout: little-endian, u64 record
counts, f64 parameters. Text files are whitespace separated with ``#``
comment lines.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

logger = logging.getLogger(__name__)

QUAT_TOL = 1e-6


class ColmapFormatError(ValueError):
    """Malformed or unsupported COLMAP model content."""


class CameraModel(str, Enum):
    SIMPLE_PINHOLE = "SIMPLE_PINHOLE"
    PINHOLE = "PINHOLE"
    SIMPLE_RADIAL = "SIMPLE_RADIAL"


class ModelFormat(str, Enum):
    BINARY = "BINARY"
    TEXT = "TEXT"
    AUTO = "AUTO"


_MODEL_IDS = {CameraModel.SIMPLE_PINHOLE: 0, CameraModel.PINHOLE: 1, CameraModel.SIMPLE_RADIAL: 2}
_NUM_PARAMS = {CameraModel.SIMPLE_PINHOLE: 3, CameraModel.PINHOLE: 4, CameraModel.SIMPLE_RADIAL: 4}
# full COLMAP table, only used to name unsupported models in errors
_ALL_MODEL_NAMES = {
    0: "SIMPLE_PINHOLE", 1: "PINHOLE", 2: "SIMPLE_RADIAL", 3: "RADIAL", 4: "OPENCV",
    5: "OPENCV_FISHEYE", 6: "FULL_OPENCV", 7: "FOV", 8: "SIMPLE_RADIAL_FISHEYE",
    9: "RADIAL_FISHEYE", 10: "THIN_PRISM_FISHEYE", 11: "RAD_TAN_THIN_PRISM_FISHEYE",
}


@dataclass(frozen=True)
class CameraIntrinsics:
    model: CameraModel
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    radial_k: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        if self.model in (CameraModel.SIMPLE_PINHOLE, CameraModel.SIMPLE_RADIAL) and self.fx != self.fy:
            raise ValueError(f"{self.model.value} requires fx == fy")
        if self.model != CameraModel.SIMPLE_RADIAL and self.radial_k != 0.0:
            raise ValueError(f"{self.model.value} has no distortion parameter")

    def params(self) -> tuple[float, ...]:
        if self.model == CameraModel.SIMPLE_PINHOLE:
            return (self.fx, self.cx, self.cy)
        if self.model == CameraModel.PINHOLE:
            return (self.fx, self.fy, self.cx, self.cy)
        return (self.fx, self.cx, self.cy, self.radial_k)

    @classmethod
    def from_params(cls, model: CameraModel, width: int, height: int, params: Sequence[float]) -> "CameraIntrinsics":
        p = [float(v) for v in params]
        if len(p) != _NUM_PARAMS[model]:
            raise ColmapFormatError(f"{model.value} expects {_NUM_PARAMS[model]} params, got {len(p)}")
        if model == CameraModel.SIMPLE_PINHOLE:
            return cls(model, width, height, p[0], p[0], p[1], p[2])
        if model == CameraModel.PINHOLE:
            return cls(model, width, height, p[0], p[1], p[2], p[3])
        return cls(model, width, height, p[0], p[0], p[1], p[2], radial_k=p[3])

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraFrame:
    """One registered image: intrinsics plus a world-to-camera pose.

    ``rotation`` is a (w, x, y, z) quaternion.
    """

    frame_id: int
    intrinsics: CameraIntrinsics
    rotation: tuple[float, float, float, float]
    translation: tuple[float, float, float]
    image_name: str

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.rotation) != 4 or len(self.translation) != 3:
            raise ValueError("rotation must have 4 and translation 3 components")
        norm = math.sqrt(sum(v * v for v in self.rotation))
        if abs(norm - 1.0) >= QUAT_TOL:
            raise ValueError(f"frame {self.frame_id}: quaternion norm {norm!r} is not 1")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(np.asarray(self.rotation))

    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def camera_center(self) -> np.ndarray:
        r = self.rotation_matrix()
        return -r.T @ np.asarray(self.translation)


@dataclass(frozen=True)
class SparsePoint:
    position: tuple[float, float, float]
    color: tuple[int, int, int] = field(default=(128, 128, 128))

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "color", tuple(int(v) for v in self.color))
        if not all(math.isfinite(v) for v in self.position):
            raise ValueError(f"non-finite point position {self.position}")
        if not all(0 <= c <= 255 for c in self.color):
            raise ValueError(f"point color {self.color} outside [0, 255]")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalizes first."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a proper rotation matrix."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _normalized(q: Sequence[float]) -> tuple[float, ...]:
    norm = math.sqrt(sum(v * v for v in q))
    if norm == 0 or not math.isfinite(norm):
        raise ColmapFormatError(f"degenerate quaternion {tuple(q)}")
    # leave already-unit quaternions bit-exact so write/parse round-trips
    if abs(norm - 1.0) <= 1e-12:
        return tuple(float(v) for v in q)
    return tuple(float(v) / norm for v in q)


def _warn_distortion(intr: CameraIntrinsics, where: str) -> None:
    if intr.radial_k != 0.0:
        logger.warning("%s: radial distortion k=%g is ignored; images are assumed undistorted", where, intr.radial_k)


# --------------------------------------------------------------------------- binary


class _Reader:
    def __init__(self, fh: BinaryIO, path: Path):
        self.fh = fh
        self.path = path

    def read(self, fmt: str, what: str):
        size = struct.calcsize("<" + fmt)
        offset = self.fh.tell()
        data = self.fh.read(size)
        if len(data) != size:
            raise ColmapFormatError(
                f"{self.path.name}: truncated {what} at byte offset {offset} "
                f"(needed {size} bytes, got {len(data)})"
            )
        return struct.unpack("<" + fmt, data)

    def read_cstring(self, what: str) -> str:
        offset = self.fh.tell()
        buf = bytearray()
        while True:
            c = self.fh.read(1)
            if not c:
                raise ColmapFormatError(f"{self.path.name}: truncated {what} at byte offset {offset}")
            if c == b"\x00":
                return buf.decode("utf-8")
            buf += c


def _model_from_id(model_id: int, where: str) -> CameraModel:
    for model, mid in _MODEL_IDS.items():
        if mid == model_id:
            return model
    name = _ALL_MODEL_NAMES.get(model_id, "UNKNOWN")
    raise ColmapFormatError(f"{where}: unsupported camera model {name} (id {model_id})")


def _read_cameras_binary(path: Path) -> dict[int, CameraIntrinsics]:
    cameras = {}
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        (count,) = r.read("Q", "record count")
        for i in range(count):
            what = f"camera record {i}"
            cam_id, model_id, width, height = r.read("iiQQ", what)
            model = _model_from_id(model_id, f"{path.name} camera {cam_id}")
            params = r.read("d" * _NUM_PARAMS[model], what)
            cameras[cam_id] = CameraIntrinsics.from_params(model, width, height, params)
    return cameras


def _read_images_binary(path: Path) -> list[tuple]:
    images = []
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        (count,) = r.read("Q", "record count")
        for i in range(count):
            what = f"image record {i}"
            rec = r.read("idddddddi", what)
            image_id, qvec, tvec, cam_id = rec[0], rec[1:5], rec[5:8], rec[8]
            name = r.read_cstring(what)
            (n2d,) = r.read("Q", what)
            if n2d:
                r.read("ddq" * n2d, what)
            images.append((image_id, qvec, tvec, cam_id, name))
    return images


def _read_points_binary(path: Path) -> list[SparsePoint]:
    points = []
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        (count,) = r.read("Q", "record count")
        for i in range(count):
            what = f"point record {i}"
            rec = r.read("QdddBBBd", what)
            (track_len,) = r.read("Q", what)
            if track_len:
                r.read("ii" * track_len, what)
            points.append(SparsePoint(rec[1:4], rec[4:7]))
    return points


def _write_binary(cams: dict[int, CameraIntrinsics], frames, points, out: Path) -> None:
    with open(out / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(cams)))
        for cam_id, intr in cams.items():
            fh.write(struct.pack("<iiQQ", cam_id, _MODEL_IDS[intr.model], intr.width, intr.height))
            fh.write(struct.pack("<" + "d" * len(intr.params()), *intr.params()))
    with open(out / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(frames)))
        for frame, cam_id in frames:
            fh.write(struct.pack("<idddddddi", frame.frame_id, *frame.rotation, *frame.translation, cam_id))
            fh.write(frame.image_name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", 0))
    with open(out / "points3D.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(points)))
        for i, p in enumerate(points, start=1):
            fh.write(struct.pack("<QdddBBBd", i, *p.position, *p.color, 0.0))
            fh.write(struct.pack("<Q", 0))


# --------------------------------------------------------------------------- text


def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield lineno, stripped


def _read_cameras_text(path: Path) -> dict[int, CameraIntrinsics]:
    cameras = {}
    for lineno, line in _data_lines(path):
        elems = line.split()
        try:
            cam_id, name, width, height = int(elems[0]), elems[1], int(elems[2]), int(elems[3])
            params = [float(v) for v in elems[4:]]
        except (IndexError, ValueError) as exc:
            raise ColmapFormatError(f"{path.name}:{lineno}: malformed camera line") from exc
        try:
            model = CameraModel(name)
        except ValueError:
            raise ColmapFormatError(f"{path.name}:{lineno}: unsupported camera model {name}") from None
        cameras[cam_id] = CameraIntrinsics.from_params(model, width, height, params)
    return cameras


def _read_images_text(path: Path) -> list[tuple]:
    images = []
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    i = 0
    while i < len(raw):
        line = raw[i].strip()
        lineno = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            image_id = int(elems[0])
            qvec = tuple(float(v) for v in elems[1:5])
            tvec = tuple(float(v) for v in elems[5:8])
            cam_id = int(elems[8])
            name = " ".join(elems[9:])
            if len(qvec) != 4 or len(tvec) != 3 or not name:
                raise ValueError
        except (IndexError, ValueError) as exc:
            raise ColmapFormatError(f"{path.name}:{lineno}: malformed image line") from exc
        images.append((image_id, qvec, tvec, cam_id, name))
        # the following line holds this image's 2D observations (possibly empty)
        i += 1
    return images


def _read_points_text(path: Path) -> list[SparsePoint]:
    points = []
    for lineno, line in _data_lines(path):
        elems = line.split()
        try:
            xyz = tuple(float(v) for v in elems[1:4])
            rgb = tuple(int(v) for v in elems[4:7])
            if len(xyz) != 3 or len(rgb) != 3:
                raise ValueError
        except ValueError as exc:
            raise ColmapFormatError(f"{path.name}:{lineno}: malformed point line") from exc
        points.append(SparsePoint(xyz, rgb))
    return points


def _write_text(cams: dict[int, CameraIntrinsics], frames, points, out: Path) -> None:
    with open(out / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write(f"# Number of cameras: {len(cams)}\n")
        for cam_id, intr in cams.items():
            params = " ".join(repr(v) for v in intr.params())
            fh.write(f"{cam_id} {intr.model.value} {intr.width} {intr.height} {params}\n")
    with open(out / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(frames)}\n")
        for frame, cam_id in frames:
            pose = " ".join(repr(v) for v in (*frame.rotation, *frame.translation))
            fh.write(f"{frame.frame_id} {pose} {cam_id} {frame.image_name}\n\n")
    with open(out / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        fh.write(f"# Number of points: {len(points)}\n")
        for i, p in enumerate(points, start=1):
            xyz = " ".join(repr(v) for v in p.position)
            fh.write(f"{i} {xyz} {p.color[0]} {p.color[1]} {p.color[2]} 0.0\n")


# --------------------------------------------------------------------------- public API

_FILES = ("cameras", "images", "points3D")


def detect_format(model_dir: str | Path) -> ModelFormat:
    d = Path(model_dir)
    if all((d / f"{n}.bin").exists() for n in _FILES):
        return ModelFormat.BINARY
    if all((d / f"{n}.txt").exists() for n in _FILES):
        return ModelFormat.TEXT
    for ext in (".bin", ".txt"):
        missing = [f"{n}{ext}" for n in _FILES if not (d / f"{n}{ext}").exists()]
        if len(missing) < len(_FILES):
            raise FileNotFoundError(f"incomplete COLMAP model in {d}: missing {d / missing[0]}")
    raise FileNotFoundError(f"no COLMAP model in {d}: missing {d / 'cameras.bin'} (or cameras.txt)")


def parse_colmap_model(
    model_dir: str | Path, format: ModelFormat | str = ModelFormat.AUTO
) -> tuple[list[CameraFrame], list[SparsePoint]]:
    """Load frames (sorted by image id) and sparse points from a model directory.

    AUTO picks binary when a complete binary model is present.
    """
    d = Path(model_dir)
    fmt = ModelFormat(format.upper() if isinstance(format, str) else format)
    if fmt == ModelFormat.AUTO:
        fmt = detect_format(d)
    ext = ".bin" if fmt == ModelFormat.BINARY else ".txt"
    for name in _FILES:
        if not (d / f"{name}{ext}").exists():
            raise FileNotFoundError(f"missing COLMAP file {d / (name + ext)}")

    if fmt == ModelFormat.BINARY:
        cams = _read_cameras_binary(d / "cameras.bin")
        images = _read_images_binary(d / "images.bin")
        points = _read_points_binary(d / "points3D.bin")
    else:
        cams = _read_cameras_text(d / "cameras.txt")
        images = _read_images_text(d / "images.txt")
        points = _read_points_text(d / "points3D.txt")

    frames = []
    seen = set()
    for image_id, qvec, tvec, cam_id, name in images:
        if cam_id not in cams:
            raise ColmapFormatError(f"image {image_id} ({name}) references unknown camera {cam_id}")
        if image_id in seen:
            raise ColmapFormatError(f"duplicate image id {image_id}")
        seen.add(image_id)
        intr = cams[cam_id]
        _warn_distortion(intr, f"camera {cam_id}")
        frames.append(CameraFrame(image_id, intr, _normalized(qvec), tvec, name))
    frames.sort(key=lambda f: f.frame_id)
    return frames, points


def write_colmap_model(
    frames: Sequence[CameraFrame],
    points: Sequence[SparsePoint],
    model_dir: str | Path,
    format: ModelFormat | str = ModelFormat.BINARY,
) -> None:
    """Write frames and points as a COLMAP sparse model.

    Frames sharing identical intrinsics share one camera record; camera ids
    are assigned 1.. in first-use order. Point ids are 1..N in list order.
    """
    fmt = ModelFormat(format.upper() if isinstance(format, str) else format)
    if fmt == ModelFormat.AUTO:
        raise ValueError("write_colmap_model needs an explicit BINARY or TEXT format")
    ids = set()
    for f in frames:
        norm = math.sqrt(sum(v * v for v in f.rotation))
        if abs(norm - 1.0) >= QUAT_TOL:
            raise ValueError(f"frame {f.frame_id}: quaternion norm {norm!r} is not 1")
        if f.frame_id in ids:
            raise ValueError(f"duplicate frame id {f.frame_id}")
        if any(c in f.image_name for c in "\x00\n") or f.image_name != f.image_name.strip() or not f.image_name:
            raise ValueError(f"frame {f.frame_id}: image name {f.image_name!r} cannot be stored")
        ids.add(f.frame_id)

    cams: dict[int, CameraIntrinsics] = {}
    cam_ids: dict[CameraIntrinsics, int] = {}
    assigned = []
    for f in frames:
        if f.intrinsics not in cam_ids:
            cam_ids[f.intrinsics] = len(cam_ids) + 1
            cams[cam_ids[f.intrinsics]] = f.intrinsics
        assigned.append((f, cam_ids[f.intrinsics]))

    out = Path(model_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == ModelFormat.BINARY:
        _write_binary(cams, assigned, list(points), out)
    else:
        _write_text(cams, assigned, list(points), out)
