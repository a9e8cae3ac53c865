"""Frequency-band analysis of cached features across layers and timesteps.

Each feature map is Fourier-transformed per channel and its magnitude
spectrum is split into a low band (radial frequency below a cutoff fraction
of the Nyquist radius) and the complementary high band; the two masks
partition every bin exactly once. Profiles average the band magnitudes over
all cache entries sharing a layer position (down blocks ascending, mid, up
blocks ascending) or a timestep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feature_cache import FeatureCache, StageId

DEFAULT_CUTOFF = 0.25
NYQUIST_RADIUS = 0.5  # cycles per sample


@dataclass
class BandProfile:
    """Low/high band magnitudes along one axis (layer order or timestep)."""

    axis: str
    points: list[tuple[int, float, float]]  # (position, low, high)

    def positions(self) -> list[int]:
        return [p for p, _, _ in self.points]


def band_masks(height: int, width: int,
               cutoff_fraction: float = DEFAULT_CUTOFF) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (low, high) masks over the 2-D DFT bins; an exact partition."""
    if height < 2 or width < 2:
        raise ValueError(f"spatial dims must be >= 2, got {height}x{width}")
    if not 0.0 < cutoff_fraction < 1.0:
        raise ValueError(f"cutoff fraction must be in (0, 1), got {cutoff_fraction}")
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    low = radius < cutoff_fraction * NYQUIST_RADIUS
    return low, ~low


def band_energy(feature_map: np.ndarray, band: str,
                cutoff_fraction: float = DEFAULT_CUTOFF) -> float:
    """Mean spectral magnitude of one band over all channels of a feature map.

    Accepts (H, W) or (C, H, W); magnitudes (not power) are averaged over the
    masked bins and channels, matching a masked-FFT band measurement.
    """
    feature_map = np.asarray(feature_map, dtype=np.float64)
    if feature_map.ndim == 2:
        feature_map = feature_map[None]
    if feature_map.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W), got {feature_map.shape}")
    _, h, w = feature_map.shape
    low, high = band_masks(h, w, cutoff_fraction)
    if band == "low":
        mask = low
    elif band == "high":
        mask = high
    else:
        raise ValueError(f"band must be 'low' or 'high', got {band!r}")
    spectrum = np.abs(np.fft.fft2(feature_map, axes=(-2, -1)))
    return float(spectrum[:, mask].mean())


def layer_positions(cache: FeatureCache) -> dict[StageId, int]:
    """Map each cached StageId to its forward-order layer index."""
    return {sid: i for i, sid in enumerate(cache.stage_ids())}


def profile(cache: FeatureCache, axis: str,
            cutoff_fraction: float = DEFAULT_CUTOFF) -> BandProfile:
    """Band magnitudes averaged along layers or timesteps of a cache.

    axis="layer" emits one point per cached block in forward order;
    axis="timestep" emits one point per cached timestep, ascending.
    """
    if len(cache) == 0:
        raise ValueError("cannot profile an empty cache")
    if axis == "layer":
        positions = layer_positions(cache)
        groups: dict[int, list] = {i: [] for i in positions.values()}
        for sid, t in cache.keys():
            groups[positions[sid]].append(cache.get(sid, t))
    elif axis == "timestep":
        groups = {}
        for sid, t in cache.keys():
            groups.setdefault(t, []).append(cache.get(sid, t))
    else:
        raise ValueError(f"axis must be 'layer' or 'timestep', got {axis!r}")

    points = []
    for position in sorted(groups):
        maps = groups[position]
        low = float(np.mean([band_energy(m, "low", cutoff_fraction) for m in maps]))
        high = float(np.mean([band_energy(m, "high", cutoff_fraction) for m in maps]))
        points.append((position, low, high))
    return BandProfile(axis=axis, points=points)
