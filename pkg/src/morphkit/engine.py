"""Inversion with feature caching, then guided denoising of the morph frames.

For a pair (A, B) the run is: deterministic DDIM inversion of each endpoint
while caching every block's features; spherical interpolation of the terminal
latents at the K morph weights; and per frame a denoising loop that adds
slerp-blended cached features as residuals (weighted by lambda per stage,
timestep-matched through the inversion-to-denoising mapping, and gated per
stage to early or late steps) and routes cross-attention through the
two-branch anchored attention while the early-step window is active.

Setting every lambda to zero and using an empty anchor reduces the run to
plain interpolated-latent denoising, bit for bit; that path is the ablation
baseline.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core_math import InterpWeights, interp_weights, slerp_vec
from .denoiser import DenoiseHooks, LatentDiffusionAdapter, ToyBackend
from .errors import BackendError
from .feature_cache import FeatureCache, Stage, StageId, blend_cache
from .prompting import (
    AttentionInputs,
    HashingTextEmbedder,
    PromptTriplet,
    combine_branches,
    embed_triplet,
    sap_attention,
)
from .schedule import IdmMap, NoiseSchedule, build_schedule, idm_map


@dataclass
class MorphConfig:
    """Run parameters; defaults follow the reference full-scale setup."""

    k: int = 5
    lambda_d: float = 0.4
    lambda_m: float = 0.4
    lambda_u: float = 0.4
    sap_stage_fraction: float = 0.5
    guidance: float = 0.75
    resolution: int = 768
    t_max: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    n_inv: int = 50
    n_dng: int = 50
    backend: str = "toy"
    toy_seed: int = 0
    aci: bool = True
    sap: bool = True
    branch_combine: str = "linear"
    sap_site_scope: str = "all"
    d_gate: tuple[float, float] = (0.0, 1.0)
    m_gate: tuple[float, float] = (0.0, 0.5)
    u_gate: tuple[float, float] = (0.5, 1.0)
    workers: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"frame count must be >= 1, got {self.k}")
        for name in ("lambda_d", "lambda_m", "lambda_u"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not 0.0 <= self.sap_stage_fraction <= 1.0:
            raise ValueError("sap_stage_fraction must be in [0, 1]")
        if self.backend not in ("toy", "adapter"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.branch_combine not in ("linear", "slerp"):
            raise ValueError(f"unknown branch_combine {self.branch_combine!r}")
        if self.sap_site_scope not in ("all", "early"):
            raise ValueError(f"unknown sap_site_scope {self.sap_site_scope!r}")

    def lambdas(self) -> dict[Stage, float]:
        return {Stage.D: self.lambda_d, Stage.M: self.lambda_m, Stage.U: self.lambda_u}

    def stage_gates(self) -> dict[Stage, tuple[float, float]]:
        return {Stage.D: self.d_gate, Stage.M: self.m_gate, Stage.U: self.u_gate}


@dataclass
class LatentTrajectory:
    """Latents visited along one inversion or denoising run."""

    latents: np.ndarray
    timesteps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.latents)

    @property
    def terminal(self) -> np.ndarray:
        return self.latents[-1]


@dataclass
class MorphSequence:
    """Decoded morph frames plus everything needed to evaluate the run."""

    frames: list[np.ndarray]
    alphas: InterpWeights
    triplet: PromptTriplet
    config: MorphConfig
    latent_path: np.ndarray  # (K+2, *latent_shape): z_A, z_0..z_{K-1}, z_B
    timing: dict[str, float] = field(default_factory=dict)


def ddim_transport(x: np.ndarray, eps: np.ndarray,
                   alpha_bar_src: float, alpha_bar_dst: float) -> np.ndarray:
    """One deterministic DDIM move between noise levels.

    Reconstructs the clean estimate at the source level and re-noises it at
    the destination level:

        x0  = (x - sqrt(1 - a_src) eps) / sqrt(a_src)
        out = sqrt(a_dst) x0 + sqrt(1 - a_dst) eps

    Denoising steps use (a_t, a_{t-1}); inversion swaps the two, making the
    update its own algebraic inverse for a fixed eps. Equal levels are the
    fixed point of the update (for any eps), short-circuited to keep that
    identity exact in floating point.
    """
    if alpha_bar_src == alpha_bar_dst:
        return np.array(x, dtype=np.float64, copy=True)
    x0 = (x - math.sqrt(1.0 - alpha_bar_src) * eps) / math.sqrt(alpha_bar_src)
    return math.sqrt(alpha_bar_dst) * x0 + math.sqrt(1.0 - alpha_bar_dst) * eps


def aci_residuals(cache_a: FeatureCache, cache_b: FeatureCache, alpha_k: float,
                  tau: int, lambdas: dict[Stage, float], idm: IdmMap,
                  stages=None) -> dict[StageId, np.ndarray]:
    """Residuals to inject at denoising step tau: lambda_S times the blended
    cache at the mapped inversion timestep.

    `stages` restricts which stages are produced (the per-stage timestep gate);
    stages with lambda == 0 are dropped so injection stays a strict no-op.
    """
    active = set(stages) if stages is not None else {Stage.D, Stage.M, Stage.U}
    active = {s for s in active if lambdas.get(s, 0.0) > 0.0}
    if not active:
        return {}
    t = idm_map(tau, idm)
    blended = blend_cache(cache_a, cache_b, alpha_k, t)
    return {sid: lambdas[sid.stage] * feat for sid, feat in blended.items()
            if sid.stage in active}


def morph_latents(z_a: np.ndarray, z_b: np.ndarray,
                  alphas: InterpWeights) -> list[np.ndarray]:
    """Spherically interpolated latents for every morph weight."""
    flat_a, flat_b = z_a.ravel(), z_b.ravel()
    degenerate = np.linalg.norm(flat_a) == 0.0 or np.linalg.norm(flat_b) == 0.0
    out = []
    for alpha in alphas.alphas:
        if degenerate:
            mixed = (1.0 - alpha) * flat_a + alpha * flat_b
        else:
            mixed = slerp_vec(flat_a, flat_b, alpha)
        out.append(mixed.reshape(z_a.shape))
    return out


class MorphEngine:
    """Binds a backend, a noise schedule, and a run configuration."""

    def __init__(self, backend, schedule: NoiseSchedule, config: MorphConfig):
        self.backend = backend
        self.schedule = schedule
        self.config = config
        desc = getattr(backend, "descriptor", None)
        if desc is not None and desc.t_max != schedule.t_max:
            raise ValueError(
                f"backend t_max {desc.t_max} != schedule t_max {schedule.t_max}"
            )
        self._embedder = HashingTextEmbedder(
            dim=desc.text_dim if desc is not None else 16
        )

    @classmethod
    def from_config(cls, config: MorphConfig) -> "MorphEngine":
        if config.backend == "toy":
            backend = ToyBackend(seed=config.toy_seed, guidance=config.guidance,
                                 t_max=config.t_max)
        elif config.backend == "adapter":
            backend = LatentDiffusionAdapter()
            raise BackendError(
                "backend 'adapter' is a contract without weights; use 'toy' or "
                "attach a real backbone via MorphEngine(backend, ...)"
            )
        sched = build_schedule(t_max=config.t_max, beta_start=config.beta_start,
                               beta_end=config.beta_end, n_inv=config.n_inv,
                               n_dng=config.n_dng)
        return cls(backend, sched, config)

    # -- inversion ----------------------------------------------------------

    def invert(self, image: np.ndarray, cache: FeatureCache | None = None,
               text_embedding: np.ndarray | None = None) -> LatentTrajectory:
        """DDIM-invert an image, recording every block feature into `cache`.

        The trajectory holds the latent after each inversion step, ending in
        the terminal latent z_X. The cache (when given) must start empty and
        is complete over every (StageId, t in T_inv) afterwards.
        """
        if cache is not None and len(cache) != 0:
            raise ValueError("inversion requires an empty cache")
        if text_embedding is None:
            text_embedding = self._embedder.embed_padded("")
        x = self.backend.encode(image)
        latents = []
        prev_t: int | None = None
        for t in self.schedule.t_inv:
            hooks = DenoiseHooks(feature_taps=_tap_into(cache, t))
            eps = self.backend.predict_noise(x, t, text_embedding, hooks)
            x = ddim_transport(x, eps,
                               alpha_bar_src=self.schedule.alpha_bar_at(prev_t),
                               alpha_bar_dst=self.schedule.alpha_bar_at(t))
            latents.append(x)
            prev_t = t
        return LatentTrajectory(latents=np.stack(latents), timesteps=self.schedule.t_inv)

    # -- denoising ----------------------------------------------------------

    def denoise_step(self, latent: np.ndarray, tau: int,
                     text_embedding: np.ndarray,
                     hooks: DenoiseHooks | None = None) -> np.ndarray:
        """One DDIM denoising update from T_dng[tau] toward the next level."""
        if not 0 <= tau < self.schedule.n_dng:
            raise ValueError(f"tau {tau} outside [0, {self.schedule.n_dng})")
        t = self.schedule.t_dng[tau]
        next_t = self.schedule.t_dng[tau + 1] if tau + 1 < self.schedule.n_dng else None
        eps = self.backend.predict_noise(latent, t, text_embedding, hooks)
        return ddim_transport(latent, eps,
                              alpha_bar_src=self.schedule.alpha_bar_at(t),
                              alpha_bar_dst=self.schedule.alpha_bar_at(next_t))

    def denoise(self, latent: np.ndarray, text_embedding: np.ndarray,
                hook_factory: Callable[[int], DenoiseHooks | None] | None = None,
                ) -> LatentTrajectory:
        """Run the full denoising loop; hook_factory(tau) supplies per-step hooks."""
        x = latent
        latents = []
        for tau in range(self.schedule.n_dng):
            hooks = hook_factory(tau) if hook_factory is not None else None
            x = self.denoise_step(x, tau, text_embedding, hooks)
            latents.append(x)
        return LatentTrajectory(latents=np.stack(latents), timesteps=self.schedule.t_dng)

    # -- full pipeline --------------------------------------------------------

    def generate_sequence(self, image_a: np.ndarray, image_b: np.ndarray,
                          prompts: PromptTriplet | None = None,
                          k: int | None = None) -> MorphSequence:
        """Produce the K-frame morph between two images (the full pipeline)."""
        config = self.config if k is None else replace(self.config, k=k)
        triplet = prompts if prompts is not None else PromptTriplet.empty()
        if triplet.e_a is None:
            triplet = embed_triplet(triplet, self._embedder)

        t0 = time.perf_counter()
        cache_a = FeatureCache("A", timesteps=self.schedule.t_inv)
        cache_b = FeatureCache("B", timesteps=self.schedule.t_inv)
        traj_a = self.invert(image_a, cache_a, triplet.e_a)
        traj_b = self.invert(image_b, cache_b, triplet.e_b)
        t_invert = time.perf_counter() - t0

        stage_ids = self.backend.descriptor.stage_ids()
        for cache in (cache_a, cache_b):
            if not cache.is_complete(stage_ids):
                raise RuntimeError(f"cache {cache.image_id!r} incomplete after inversion")

        alphas = interp_weights(config.k)
        z_list = morph_latents(traj_a.terminal, traj_b.terminal, alphas)

        t0 = time.perf_counter()
        indices = range(config.k)
        runner = lambda i: self._denoise_frame(z_list[i], alphas[i], triplet,
                                               cache_a, cache_b, config)
        workers = config.workers
        if self.backend.descriptor.serial_only:
            workers = 1
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                frames = list(pool.map(runner, indices))
        else:
            frames = [runner(i) for i in indices]
        t_denoise = time.perf_counter() - t0

        latent_path = np.stack([traj_a.terminal, *z_list, traj_b.terminal])
        return MorphSequence(frames=frames, alphas=alphas, triplet=triplet,
                             config=config, latent_path=latent_path,
                             timing={"inversion_s": t_invert,
                                     "denoise_s": t_denoise,
                                     "total_s": t_invert + t_denoise})

    def reconstruct(self, image: np.ndarray,
                    prompts: PromptTriplet | None = None) -> np.ndarray:
        """Single-image sanity path: the pipeline applied to the pair (X, X)."""
        return self.generate_sequence(image, image, prompts, k=1).frames[0]

    # -- internals ------------------------------------------------------------

    def _denoise_frame(self, z_k: np.ndarray, alpha_k: float,
                       triplet: PromptTriplet, cache_a: FeatureCache,
                       cache_b: FeatureCache, config: MorphConfig) -> np.ndarray:
        idm = self.schedule.idm()
        n_dng = self.schedule.n_dng
        lambdas = config.lambdas()
        gates = config.stage_gates()
        blended_text = (1.0 - alpha_k) * triplet.e_a + alpha_k * triplet.e_b
        anchor = triplet.e_anchor if (config.sap and triplet.e_anchor is not None) else None
        if anchor is not None and len(anchor) == 0:
            anchor = None
        sap_sites = self._sap_sites(config)

        def hook_factory(tau: int) -> DenoiseHooks:
            residuals = None
            if config.aci:
                active = [s for s in (Stage.D, Stage.M, Stage.U)
                          if _gate_open(gates[s], tau, n_dng)]
                residuals = aci_residuals(cache_a, cache_b, alpha_k, tau,
                                          lambdas, idm, stages=active) or None
            anchor_now = anchor if tau < config.sap_stage_fraction * n_dng else None
            override = self._make_attention_override(
                triplet.e_a, triplet.e_b, anchor_now, alpha_k,
                config.branch_combine, sap_sites)
            return DenoiseHooks(feature_residuals=residuals, attn_override=override)

        trajectory = self.denoise(z_k, blended_text, hook_factory)
        return self.backend.decode(trajectory.terminal)

    def _sap_sites(self, config: MorphConfig) -> set[StageId]:
        sites = self.backend.descriptor.attn_sites
        if config.sap_site_scope == "early":
            sites = sites[: max(1, math.ceil(len(sites) / 2))]
        return set(sites)

    def _make_attention_override(self, e_a, e_b, e_anchor, alpha_k,
                                 combine_mode, sap_sites):
        def override(site: StageId, q: np.ndarray, kv_project) -> np.ndarray:
            if e_anchor is not None and site in sap_sites:
                k_anc, v_anc = kv_project(e_anchor)
            else:
                d = q.shape[1]
                k_anc = np.zeros((0, d))
                v_anc = np.zeros((0, d))
            k_a, v_a = kv_project(e_a)
            k_b, v_b = kv_project(e_b)
            attn_a = sap_attention(AttentionInputs(q, k_a, v_a, k_anc, v_anc))
            attn_b = sap_attention(AttentionInputs(q, k_b, v_b, k_anc, v_anc))
            return combine_branches(attn_a, attn_b, alpha_k, combine_mode)

        return override


def _gate_open(gate: tuple[float, float], tau: int, n_dng: int) -> bool:
    lo, hi = gate
    return lo * n_dng <= tau < hi * n_dng


def _tap_into(cache: FeatureCache | None, t: int):
    if cache is None:
        return None

    def tap(sid: StageId, feature: np.ndarray) -> None:
        cache.put(sid, t, feature)

    return tap
