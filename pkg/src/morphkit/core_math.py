"""Interpolation and clamping primitives shared by the engine and the metric suite.

Everything here is a pure function on floats or numpy arrays. The two slerp
variants are the workhorses: `slerp_vec` interpolates latents and cached
features along the great circle between them, `slerp_scalar_sim` interpolates
two cosine similarities by treating each as the cosine of an angle (the 1-D
restriction of spherical interpolation; a linear mode exists for sensitivity
studies).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this value of sin(theta) the two vectors are treated as parallel and
# slerp degrades to lerp, avoiding division blow-up.
SLERP_PARALLEL_EPS = 1e-7

# Scalar similarities may stray outside [-1, 1] by at most this much before
# they are rejected instead of clipped.
SIM_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class InterpWeights:
    """Normalized interpolation weights for a K-frame morph.

    alphas[k] = (k+1)/(K+1), strictly inside (0, 1) and symmetric about 0.5:
    alphas[k] + alphas[K-1-k] == 1. The endpoints themselves are never
    regenerated as frames.
    """

    k: int
    alphas: tuple[float, ...]

    def __len__(self) -> int:
        return self.k

    def __getitem__(self, i: int) -> float:
        return self.alphas[i]


def interp_weights(k: int) -> InterpWeights:
    """Return the K normalized interpolation weights (k+1)/(K+1).

    Raises ValueError for K < 1.
    """
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise ValueError(f"frame count must be an integer, got {k!r}")
    if k < 1:
        raise ValueError(f"frame count must be >= 1, got {k}")
    return InterpWeights(k=int(k), alphas=tuple((i + 1) / (k + 1) for i in range(k)))


def slerp_vec(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation between two 1-D vectors.

    Interpolates along the great circle by the angle
    theta = arccos(<a,b> / (|a| |b|)):

        sin((1-alpha) theta) / sin(theta) * a + sin(alpha theta) / sin(theta) * b

    Falls back to linear interpolation when sin(theta) < 1e-7 (near-parallel
    inputs). Both vectors must be nonzero and of equal length.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("slerp_vec expects 1-D vectors; flatten features first")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp_vec is undefined for zero vectors")
    cos_theta = float(np.dot(a, b) / (na * nb))
    cos_theta = min(1.0, max(-1.0, cos_theta))
    theta = math.acos(cos_theta)
    sin_theta = math.sin(theta)
    if sin_theta < SLERP_PARALLEL_EPS:
        return (1.0 - alpha) * a + alpha * b
    wa = math.sin((1.0 - alpha) * theta) / sin_theta
    wb = math.sin(alpha * theta) / sin_theta
    return wa * a + wb * b


def slerp_scalar_sim(sa: float, sb: float, alpha: float, mode: str = "angle") -> float:
    """Interpolate two cosine similarities.

    In the default "angle" mode each similarity is read as the cosine of an
    angle and the angles are interpolated:

        cos((1-alpha) * arccos(sa) + alpha * arccos(sb))

    "linear" blends the raw values instead. Inputs must be within 1e-9 of
    [-1, 1]; values inside the tolerance band are clipped.
    """
    sa = _check_similarity(sa, "sa")
    sb = _check_similarity(sb, "sb")
    if mode == "linear":
        return (1.0 - alpha) * sa + alpha * sb
    if mode != "angle":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    angle = (1.0 - alpha) * math.acos(sa) + alpha * math.acos(sb)
    return math.cos(angle)


def _check_similarity(value: float, name: str) -> float:
    value = float(value)
    if math.isnan(value) or abs(value) > 1.0 + SIM_RANGE_TOL:
        raise ValueError(f"{name}={value} is outside [-1, 1]")
    return min(1.0, max(-1.0, value))


def clamp01(x: float) -> float:
    """Clamp a finite real to the unit interval: min(1, max(0, x))."""
    x = float(x)
    if math.isnan(x):
        raise ValueError("clamp01 is undefined for NaN")
    return min(1.0, max(0.0, x))
