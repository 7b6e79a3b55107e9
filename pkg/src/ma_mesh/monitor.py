"""Radially symmetric sech^2 monitor functions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _sech2_tanh(u):
    # Overflow-free sech^2 and tanh via exp(-2|u|).
    e = np.exp(-2.0 * np.abs(u))
    sech2 = 4.0 * e / (1.0 + e) ** 2
    tanh = np.sign(u) * (1.0 - e) / (1.0 + e)
    return sech2, tanh


@dataclass(frozen=True)
class MonitorSpec:
    """m(x) = 1 + alpha1 * sech^2(alpha2 * (|x|^2 - alpha3^2))."""

    alpha1: float
    alpha2: float
    alpha3: float
    name: str = "custom"

    def __post_init__(self):
        if not self.alpha1 > -1.0:
            raise ValueError(f"alpha1 must exceed -1 to keep m > 0, got {self.alpha1}")

    @classmethod
    def ring(cls) -> "MonitorSpec":
        return cls(10.0, 200.0, 0.25, "ring")

    @classmethod
    def bell(cls) -> "MonitorSpec":
        return cls(50.0, 100.0, 0.0, "bell")

    @classmethod
    def uniform(cls) -> "MonitorSpec":
        return cls(0.0, 0.0, 0.0, "uniform")

    @classmethod
    def preset(cls, name: str) -> "MonitorSpec":
        presets = {"ring": cls.ring, "bell": cls.bell, "uniform": cls.uniform}
        try:
            return presets[name]()
        except KeyError:
            raise ValueError(
                f"unknown monitor preset {name!r}; expected one of {sorted(presets)}"
            ) from None

    def _argument(self, points):
        points = np.asarray(points, dtype=float)
        r2 = np.sum(points**2, axis=-1)
        return points, self.alpha2 * (r2 - self.alpha3**2)

    def __call__(self, points) -> np.ndarray:
        return eval_monitor(self, points)


def eval_monitor(spec: MonitorSpec, points) -> np.ndarray:
    """Monitor values at an array of 2D points (last axis of length 2)."""
    _, u = spec._argument(points)
    sech2, _ = _sech2_tanh(u)
    return 1.0 + spec.alpha1 * sech2


def monitor_grad_analytic(spec: MonitorSpec, points) -> np.ndarray:
    """Exact gradient of the monitor, -4 a1 a2 sech^2(u) tanh(u) x."""
    points, u = spec._argument(points)
    sech2, tanh = _sech2_tanh(u)
    return (-4.0 * spec.alpha1 * spec.alpha2 * sech2 * tanh)[..., None] * points
