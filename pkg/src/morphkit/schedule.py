"""Noise schedule construction and the inversion-to-denoising timestep mapping.

The schedule follows the scaled-linear convention of common latent-diffusion
backbones: betas are linearly spaced in sqrt-space, alpha_bar is the running
product of (1 - beta). T_inv is an ascending, evenly spaced subset of
[0, T_max); T_dng is the same subset reversed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_T_MAX = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class IdmMap:
    """Parameters of the inversion-to-denoising timestep mapping."""

    n_inv: int
    n_dng: int
    t_inv: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """alpha_bar sequence plus the inversion and denoising timestep lists."""

    t_max: int
    alpha_bar: np.ndarray = field(repr=False)
    t_inv: tuple[int, ...]
    t_dng: tuple[int, ...]

    @property
    def n_inv(self) -> int:
        return len(self.t_inv)

    @property
    def n_dng(self) -> int:
        return len(self.t_dng)

    def alpha_bar_at(self, t: int | None) -> float:
        """alpha_bar for timestep t; t=None denotes the clean image (1.0)."""
        if t is None:
            return 1.0
        if not 0 <= t < self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max})")
        return float(self.alpha_bar[t])

    def idm(self) -> IdmMap:
        return IdmMap(n_inv=self.n_inv, n_dng=self.n_dng, t_inv=self.t_inv)


def build_schedule(
    t_max: int = DEFAULT_T_MAX,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    n_inv: int = 50,
    n_dng: int = 50,
) -> NoiseSchedule:
    """Build a scaled-linear noise schedule with evenly spaced timestep subsets.

    alpha_bar[t] = prod_{i<=t} (1 - beta_i) with beta linearly spaced between
    beta_start and beta_end in sqrt-space. Raises ValueError for invalid
    ranges.
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )
    if not (1 <= n_inv <= t_max):
        raise ValueError(f"n_inv must be in [1, t_max], got {n_inv}")
    if not (1 <= n_dng <= t_max):
        raise ValueError(f"n_dng must be in [1, t_max], got {n_dng}")
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), t_max) ** 2
    alpha_bar = np.cumprod(1.0 - betas)
    t_inv = _even_timesteps(t_max, n_inv)
    t_dng = tuple(reversed(_even_timesteps(t_max, n_dng)))
    return NoiseSchedule(t_max=t_max, alpha_bar=alpha_bar, t_inv=t_inv, t_dng=t_dng)


def _even_timesteps(t_max: int, n: int) -> tuple[int, ...]:
    # linspace over [0, t_max-1]; spacing >= 1 keeps the rounded list strict.
    return tuple(int(round(x)) for x in np.linspace(0.0, float(t_max - 1), n))


def round_half_away_from_zero(x: float) -> int:
    """Round to nearest integer with halves away from zero (not banker's)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def idm_map(tau: int, idm: IdmMap) -> int:
    """Map a denoising step index to the inversion timestep whose cache it uses.

    Returns T_inv[round(tau * (N_inv - 1) / (N_dng - 1))] with half-away-from-
    zero rounding. N_dng = 1 maps to T_inv[0] by convention. The mapping is
    monotone in tau and hits both endpoints: tau=0 -> T_inv[0] and
    tau = N_dng - 1 -> T_inv[N_inv - 1].
    """
    if not 0 <= tau <= idm.n_dng - 1:
        raise ValueError(f"tau {tau} outside [0, {idm.n_dng - 1}]")
    if idm.n_dng == 1:
        return idm.t_inv[0]
    index = round_half_away_from_zero(tau * (idm.n_inv - 1) / (idm.n_dng - 1))
    return idm.t_inv[index]
