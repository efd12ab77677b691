"""Small SE(2) helpers shared across the planner and simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose:
    """An SE(2) pose: position in meters, heading in radians."""

    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValueError(f"pose must be finite, got {self}")

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map points from the pose's local frame into the world frame."""
        return points @ rotation_matrix(self.heading).T + self.xy
