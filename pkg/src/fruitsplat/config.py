"""JSON pipeline configuration.

Schema (every section optional except ``data``)::

    {
      "data": {"model_dir": "sparse", "image_dir": "images",
               "strawberry_mask_dir": "masks/strawberry", "bruise_mask_dir": "masks/bruise",
               "format": "auto"},
      "init": {"opacity": 0.1, "knn_k": 3},
      "train": {<TrainConfig fields>},
      "render": {"near_clip": 0.01, "background": [0, 0, 0], "tile_size": 16},
      "analysis": {"strawberry_threshold": 0.5, "bruise_threshold": 0.5},
      "holdout_every": 8,
      "output_dir": "run"
    }

Relative paths resolve against the directory holding the config file.
Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .colmap import ModelFormat
from .rasterizer import RenderConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    model_dir: Path
    image_dir: Path
    strawberry_mask_dir: Optional[Path] = None
    bruise_mask_dir: Optional[Path] = None
    format: ModelFormat = ModelFormat.AUTO


@dataclass(frozen=True)
class InitConfig:
    opacity: float = 0.1
    knn_k: int = 3

    def __post_init__(self):
        if not 0.0 < self.opacity < 1.0:
            raise ConfigError(f"init.opacity must lie in (0, 1), got {self.opacity}")
        if self.knn_k < 1:
            raise ConfigError(f"init.knn_k must be >= 1, got {self.knn_k}")


@dataclass(frozen=True)
class AnalysisConfig:
    strawberry_threshold: float = 0.5
    bruise_threshold: float = 0.5

    def __post_init__(self):
        for name in ("strawberry_threshold", "bruise_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"analysis.{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    init: InitConfig = field(default_factory=InitConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    holdout_every: int = 8
    output_dir: Path = Path("run")

    def __post_init__(self):
        if self.holdout_every < 0:
            raise ConfigError(f"holdout_every must be >= 0, got {self.holdout_every}")

    def validate_paths(self) -> None:
        """Every referenced input path must exist."""
        d = self.data
        for name in ("model_dir", "image_dir", "strawberry_mask_dir", "bruise_mask_dir"):
            p = getattr(d, name)
            if p is not None and not Path(p).is_dir():
                raise FileNotFoundError(f"data.{name}: directory {p} does not exist")

    def to_json(self, relative_to: Path | None = None) -> str:
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            if relative_to is not None:
                try:
                    return p.resolve().relative_to(Path(relative_to).resolve()).as_posix()
                except ValueError:
                    pass
            return p.as_posix()

        d = self.data
        doc = {
            "data": {
                "model_dir": rel(d.model_dir),
                "image_dir": rel(d.image_dir),
                "strawberry_mask_dir": rel(d.strawberry_mask_dir),
                "bruise_mask_dir": rel(d.bruise_mask_dir),
                "format": d.format.value.lower(),
            },
            "init": asdict(self.init),
            "train": asdict(self.train),
            "render": {
                "near_clip": self.render.near_clip,
                "background": list(self.render.background),
                "tile_size": self.render.tile_size,
            },
            "analysis": asdict(self.analysis),
            "holdout_every": self.holdout_every,
            "output_dir": rel(self.output_dir),
        }
        return json.dumps(doc, indent=2) + "\n"


def _section(doc: dict, key: str, allowed: set[str]) -> dict:
    sec = doc.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{key} must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"{key}: unknown keys {sorted(unknown)}")
    return sec


def _build(cls, section: str, values: dict[str, Any]):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(doc: dict, base_dir: Path | str = ".") -> PipelineConfig:
    base = Path(base_dir)
    top = {"data", "init", "train", "render", "analysis", "holdout_every", "output_dir"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "data" not in doc:
        raise ConfigError("missing required section 'data'")

    def path(v):
        return None if v is None else base / Path(v)

    data = _section(doc, "data", {f.name for f in fields(DataConfig)})
    for key in ("model_dir", "image_dir"):
        if key not in data:
            raise ConfigError(f"data.{key} is required")
    try:
        fmt = ModelFormat(str(data.get("format", "auto")).upper())
    except ValueError:
        raise ConfigError(f"data.format must be one of binary/text/auto, got {data['format']!r}") from None
    data_cfg = DataConfig(
        model_dir=path(data["model_dir"]),
        image_dir=path(data["image_dir"]),
        strawberry_mask_dir=path(data.get("strawberry_mask_dir")),
        bruise_mask_dir=path(data.get("bruise_mask_dir")),
        format=fmt,
    )

    train = _build(TrainConfig, "train", _section(doc, "train", {f.name for f in fields(TrainConfig)}))
    render_sec = dict(_section(doc, "render", {"near_clip", "background", "tile_size"}))
    if "background" in render_sec:
        render_sec["background"] = tuple(float(c) for c in render_sec["background"])
    render = _build(RenderConfig, "render", render_sec)
    init = _build(InitConfig, "init", _section(doc, "init", {f.name for f in fields(InitConfig)}))
    analysis = _build(AnalysisConfig, "analysis", _section(doc, "analysis", {f.name for f in fields(AnalysisConfig)}))
    holdout = doc.get("holdout_every", 8)
    if not isinstance(holdout, int) or isinstance(holdout, bool):
        raise ConfigError(f"holdout_every must be an integer, got {holdout!r}")
    return PipelineConfig(data_cfg, train, render, init, analysis, holdout,
                          path(doc.get("output_dir", "run")))


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc, path.parent)


def with_overrides(cfg: PipelineConfig, *, steps: int | None = None, seed: int | None = None,
                   output_dir: str | Path | None = None, holdout_every: int | None = None) -> PipelineConfig:
    """Command-line flags take precedence over file values."""
    train = cfg.train
    if steps is not None:
        train = _build(TrainConfig, "train", {**asdict(train), "steps": steps})
    if seed is not None:
        train = replace(train, seed=seed)
    out = cfg.output_dir if output_dir is None else Path(output_dir)
    hold = cfg.holdout_every if holdout_every is None else holdout_every
    return replace(cfg, train=train, output_dir=out, holdout_every=hold)
