"""Bruise percentages from trained clouds and stiffness retention from probe forces."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .gaussians import GaussianCloud, import_ply

DEFAULT_DISPLACEMENT_MM = 1.25


class EmptyFilterError(ValueError):
    """No Gaussian passed the strawberry threshold."""


@dataclass(frozen=True)
class FilteredPointCloud:
    positions: np.ndarray  # (N, 3)
    bruise_scores: np.ndarray  # (N,)
    strawberry_threshold: float
    source: str = ""

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def points(self) -> list[tuple[tuple[float, float, float], float]]:
        return [(tuple(p), float(b)) for p, b in zip(self.positions, self.bruise_scores)]


def _check_ratio(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")


def filter_strawberry(cloud: GaussianCloud, strawberry_threshold: float = 0.5) -> FilteredPointCloud:
    """Keep Gaussians whose strawberry probability is at least the threshold."""
    _check_ratio("strawberry threshold", strawberry_threshold)
    keep = cloud.strawberry_scores >= strawberry_threshold
    if not np.any(keep):
        raise EmptyFilterError(f"no strawberry points above threshold {strawberry_threshold}")
    return FilteredPointCloud(
        positions=cloud.means[keep].copy(),
        bruise_scores=cloud.bruise_scores[keep],
        strawberry_threshold=strawberry_threshold,
        source=str(cloud.metadata.get("source", "")),
    )


def bruise_percentage(pc: FilteredPointCloud, bruise_threshold: float = 0.5) -> float:
    _check_ratio("bruise threshold", bruise_threshold)
    if len(pc) == 0:
        raise EmptyFilterError("bruise percentage of an empty point cloud is undefined")
    return 100.0 * int(np.count_nonzero(pc.bruise_scores >= bruise_threshold)) / len(pc)


@dataclass(frozen=True)
class DamageReport:
    pre_bruise_pct: float
    post_bruise_pct: float
    delta_pct: float
    pre_count: int
    post_count: int
    thresholds: dict = field(default_factory=dict)
    pre_source: str = ""
    post_source: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [
            ("", "points", "bruise %"),
            ("pre", str(self.pre_count), format_percent(self.pre_bruise_pct)),
            ("post", str(self.post_count), format_percent(self.post_bruise_pct)),
            ("delta", "", format_percent(self.delta_pct, signed=True)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        lines.append(f"thresholds: strawberry >= {self.thresholds.get('strawberry')}, "
                     f"bruise >= {self.thresholds.get('bruise')}")
        return "\n".join(lines)


def format_percent(value: float, signed: bool = False) -> str:
    """Render a percentage keeping small magnitudes readable (0.003%, 20.68%)."""
    digits = 2 if abs(value) >= 0.01 or value == 0 else 3
    text = f"{value:+.{digits}f}" if signed else f"{value:.{digits}f}"
    return text + "%"


def compare_damage(pre: FilteredPointCloud, post: FilteredPointCloud, bruise_threshold: float = 0.5) -> DamageReport:
    """Bruise percentages of both clouds and their difference (post minus pre).

    The sign is kept: a negative delta means less detected bruising after
    manipulation.
    """
    pre_pct = bruise_percentage(pre, bruise_threshold)
    post_pct = bruise_percentage(post, bruise_threshold)
    return DamageReport(
        pre_bruise_pct=pre_pct,
        post_bruise_pct=post_pct,
        delta_pct=post_pct - pre_pct,
        pre_count=len(pre),
        post_count=len(post),
        thresholds={"strawberry": pre.strawberry_threshold, "bruise": bruise_threshold},
        pre_source=pre.source,
        post_source=post.source,
    )


def analyze_plys(pre_ply: str | Path, post_ply: str | Path, strawberry_threshold: float = 0.5,
                 bruise_threshold: float = 0.5) -> DamageReport:
    pre = filter_strawberry(import_ply(pre_ply), strawberry_threshold)
    post = filter_strawberry(import_ply(post_ply), strawberry_threshold)
    return compare_damage(pre, post, bruise_threshold)


# --------------------------------------------------------------------------- stiffness


class Phase(str, Enum):
    PRE = "PRE"
    POST = "POST"


@dataclass(frozen=True)
class StiffnessRecord:
    fruit_id: str
    phase: Phase
    point_forces: tuple[float, ...]
    displacement: float = DEFAULT_DISPLACEMENT_MM

    def __post_init__(self):
        phase = self.phase if isinstance(self.phase, Phase) else Phase(str(self.phase).upper())
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "point_forces", tuple(float(f) for f in self.point_forces))
        if not self.point_forces:
            raise ValueError(f"{self.fruit_id}/{self.phase.value}: no force measurements")
        if any(f < 0 or not np.isfinite(f) for f in self.point_forces):
            raise ValueError(f"{self.fruit_id}/{self.phase.value}: forces must be finite and >= 0")
        if not self.displacement > 0:
            raise ValueError(f"{self.fruit_id}/{self.phase.value}: displacement must be positive")

    def spring_constants(self) -> np.ndarray:
        """Per-point spring constants in N/mm."""
        return np.asarray(self.point_forces) / self.displacement

    def mean_stiffness(self) -> float:
        return float(np.mean(self.spring_constants()))


def stiffness_retention(pre: StiffnessRecord, post: StiffnessRecord) -> float:
    """Post-manipulation mean spring constant as a percentage of the pre value."""
    if pre.fruit_id != post.fruit_id:
        raise ValueError(f"fruit mismatch: {pre.fruit_id!r} vs {post.fruit_id!r}")
    k_pre = pre.mean_stiffness()
    if k_pre == 0:
        raise ZeroDivisionError(f"{pre.fruit_id}: pre-manipulation stiffness is zero")
    # ratio first so identical records give exactly 100
    return 100.0 * (post.mean_stiffness() / k_pre)


STIFFNESS_COLUMNS = ("fruit_id", "phase", "point_index", "force_newtons", "displacement_mm")


class StiffnessCSVError(ValueError):
    pass


def read_stiffness_csv(path: str | Path) -> dict[str, dict[Phase, StiffnessRecord]]:
    """Group probe rows into one record per (fruit, phase).

    Rows of a record must share one displacement.
    """
    rows: dict[tuple[str, Phase], list[tuple[int, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != STIFFNESS_COLUMNS:
            raise StiffnessCSVError(f"{path}:1: expected header {','.join(STIFFNESS_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(STIFFNESS_COLUMNS):
                    raise ValueError(f"expected {len(STIFFNESS_COLUMNS)} fields, got {len(row)}")
                fruit = row[0].strip()
                if not fruit:
                    raise ValueError("empty fruit_id")
                phase = Phase(row[1].strip().upper())
                idx, force, disp = int(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise StiffnessCSVError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault((fruit, phase), []).append((idx, force, disp))

    records: dict[str, dict[Phase, StiffnessRecord]] = {}
    for (fruit, phase), entries in rows.items():
        entries.sort()
        disps = {d for _, _, d in entries}
        if len(disps) != 1:
            raise StiffnessCSVError(f"{path}: {fruit}/{phase.value} mixes displacements {sorted(disps)}")
        rec = StiffnessRecord(fruit, phase, [f for _, f, _ in entries], disps.pop())
        records.setdefault(fruit, {})[phase] = rec
    return records


@dataclass(frozen=True)
class StiffnessSummary:
    fruit_id: str
    pre_k: float
    post_k: float
    retention_pct: float
    n_points_pre: int
    n_points_post: int


def summarize_stiffness(records: dict[str, dict[Phase, StiffnessRecord]]) -> list[StiffnessSummary]:
    out = []
    for fruit in sorted(records):
        phases = records[fruit]
        missing = [p.value for p in Phase if p not in phases]
        if missing:
            raise ValueError(f"{fruit}: missing {'/'.join(missing)} measurements")
        pre, post = phases[Phase.PRE], phases[Phase.POST]
        out.append(StiffnessSummary(fruit, pre.mean_stiffness(), post.mean_stiffness(),
                                    stiffness_retention(pre, post), len(pre.point_forces), len(post.point_forces)))
    return out
