"""Tactile image differencing and contact detection against an undeformed reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TactileFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    sensor_id: str = "dt0"
    timestamp: float = 0.0

    def __post_init__(self):
        img = np.asarray(self.image, dtype=float)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"tactile image must be HxWx3, got {img.shape}")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class ContactConfig:
    tau: float
    reference: TactileFrame

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def _check_pair(frame: TactileFrame, reference: TactileFrame, check_sensor: bool) -> None:
    if frame.image.shape != reference.image.shape:
        raise ValueError(f"tactile size mismatch: {frame.image.shape} vs reference {reference.image.shape}")
    if check_sensor and frame.sensor_id != reference.sensor_id:
        raise ValueError(f"sensor mismatch: {frame.sensor_id!r} vs reference {reference.sensor_id!r}")


def diff_image(frame: TactileFrame, reference: TactileFrame) -> np.ndarray:
    """Per-pixel mean over channels of the absolute difference to the reference."""
    _check_pair(frame, reference, check_sensor=True)
    return np.abs(frame.image - reference.image).mean(axis=2)


def grayscale(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=float) @ LUMA_WEIGHTS


def contact_energy(frame: TactileFrame, reference: TactileFrame) -> float:
    """Sum of squared grayscale differences (intensities in [0, 1])."""
    _check_pair(frame, reference, check_sensor=False)
    d = grayscale(frame.image) - grayscale(reference.image)
    return float(np.sum(d * d))


def detect_contact(frame: TactileFrame, config: ContactConfig) -> bool:
    """True when the contact energy strictly exceeds ``tau``."""
    return contact_energy(frame, config.reference) > config.tau


def calibrate_tau(no_contact: list[TactileFrame], reference: TactileFrame, k_sigma: float = 5.0) -> float:
    """Threshold at mean + k sigma of energies over a clip known to be contact free."""
    if not no_contact:
        raise ValueError("calibration needs at least one no-contact frame")
    energies = np.array([contact_energy(f, reference) for f in no_contact])
    tau = float(energies.mean() + k_sigma * energies.std())
    # an all-identical clip would give tau = 0, which never stays false
    return tau if tau > 0 else float(np.finfo(float).tiny)
