"""Least-squares fits of periodic readout curves."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InvalidArgument

TWO_PI = 2 * math.pi


@dataclass
class PeriodicFit:
    """y ~ A f(x - x0) + C with A >= 0 where the shape allows a sign flip."""

    amplitude: float
    phase: float
    offset: float
    sse: float
    shape: str

    @property
    def peak(self) -> float:
        return abs(self.amplitude) + abs(self.offset)

    def __call__(self, x):
        return self.amplitude * SHAPES[self.shape](np.asarray(x, float) - self.phase) + self.offset


def _cos3(u):
    return np.cos(u) ** 3


def _cos2sin(u):
    return 1.5 * math.sqrt(3) * np.cos(u) ** 2 * np.sin(u)


SHAPES: dict[str, Callable] = {
    "cos": np.cos,
    "cos2": lambda u: np.cos(2 * u),
    "cos3": _cos3,
    "cos2sin": _cos2sin,
}


def fit_harmonic(x, y, order: int = 1, with_offset: bool = True, weights=None) -> PeriodicFit:
    """Linear least squares for A cos(order (x - x0)) + C; exact for noiseless input."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if order < 1:
        raise InvalidArgument("harmonic order must be >= 1")
    cols = [np.cos(order * x), np.sin(order * x)]
    if with_offset:
        cols.append(np.ones_like(x))
    design = np.stack(cols, axis=1)
    w = np.ones_like(x) if weights is None else np.asarray(weights, float)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    c, s = coef[0], coef[1]
    offset = float(coef[2]) if with_offset else 0.0
    amp = math.hypot(c, s)
    phase = math.atan2(s, c) / order if amp > 0 else 0.0
    resid = y - design @ coef
    shape = "cos" if order == 1 else ("cos2" if order == 2 else f"harm{order}")
    fit = PeriodicFit(amp, phase, offset, float(resid @ (w * resid)), shape)
    return fit


def _linear_amp_offset(f_vals: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    design = np.stack([f_vals, np.ones_like(f_vals)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return float(coef[0]), float(coef[1]), float(resid @ resid)


def fit_shape(x, y, shape: str, n_grid: int = 256) -> PeriodicFit:
    """A f(x - x0) + C for a fixed shape: phase grid, linear (A, C), then a bounded polish."""
    if shape in ("cos", "cos2"):
        return fit_harmonic(x, y, 1 if shape == "cos" else 2)
    if shape not in SHAPES:
        raise InvalidArgument(f"unknown fit shape {shape!r}")
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    f = SHAPES[shape]
    grid = np.linspace(0, TWO_PI, n_grid, endpoint=False)
    sse = [_linear_amp_offset(f(x - g), y)[2] for g in grid]
    best = grid[int(np.argmin(sse))]
    step = TWO_PI / n_grid
    res = minimize_scalar(lambda g: _linear_amp_offset(f(x - g), y)[2],
                          bounds=(best - step, best + step), method="bounded",
                          options={"xatol": 1e-12})
    x0 = float(res.x) % TWO_PI
    amp, off, err = _linear_amp_offset(f(x - x0), y)
    return PeriodicFit(amp, x0, off, err, shape)


def check_coverage(angles, period: float, min_points: int = 8) -> None:
    a = np.sort(np.mod(np.asarray(angles, float), TWO_PI))
    if a.size < min_points:
        raise InvalidArgument(f"need at least {min_points} angles, got {a.size}")
    gaps = np.diff(np.concatenate([a, [a[0] + TWO_PI]]))
    # the sampled points must cover a full period without a hole wider than it
    span = TWO_PI - gaps.max()
    if span + span / (a.size - 1) < period - 1e-9:
        raise InvalidArgument("angle sweep does not cover one period")
