"""Diffusion backend contract plus a deterministic toy backend.

Every backend exposes `descriptor`, `predict_noise`, `encode`, and `decode`.
`predict_noise` walks the block chain D -> M -> U in order, invoking the
optional feature tap once per block, adding the optional per-block residual
after each block output, and routing its cross-attention sites through the
optional attention override.

The toy backend is a miniature seeded U-Net over a 4x8x8 latent: three down
blocks (stride-2 average pooling with a 2x2 floor + fixed pseudorandom channel
mix), one mid block with a single cross-attention site, and three mirrored up
blocks (nearest upsample + fixed mix). All weights come from a splitmix-style
PRNG, so every output is bit-reproducible from the config seed. encode/decode
are a fixed invertible affine map (2x2 patchify + channel mix + bias), which
makes inversion round trips exact up to float error.

A real latent-diffusion backbone attaches through the same contract: declare a
descriptor (latent 4x96x96 for 768x768 inputs with an /8 VAE, the backbone's
block counts and feature shapes, and its cross-attention sites), wrap its
U-Net forward so taps/residuals/overrides fire at the declared points, and set
`serial_only` if the model cannot run concurrent forwards. Classifier-free
guidance on that path is the usual two-forward blend with strength taken from
the run config; weights themselves are not part of this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BackendError, ShapeError
from .feature_cache import Stage, StageId
from .prompting import plain_attention

MASK64 = (1 << 64) - 1

# Callback types used by DenoiseHooks.
FeatureTap = Callable[[StageId, np.ndarray], None]
KvProjector = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
AttnOverride = Callable[[StageId, np.ndarray, KvProjector], np.ndarray]


class SplitMix64:
    """splitmix64 PRNG; the single source of all toy-backend weights."""

    GOLDEN = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + self.GOLDEN) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        raw = np.array([self.next_u64() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * (raw / 2.0**64)).reshape(shape)


@dataclass(frozen=True, eq=False)
class BackendDescriptor:
    """Static facts the engine needs about a backend."""

    latent_shape: tuple[int, int, int]
    stage_blocks: dict[Stage, int]
    feature_shapes: dict[StageId, tuple[int, ...]]
    attn_dim: int
    attn_sites: tuple[StageId, ...]
    image_shape: tuple[int, int]
    text_dim: int
    t_max: int
    serial_only: bool = False

    def stage_ids(self) -> list[StageId]:
        out = []
        for stage in (Stage.D, Stage.M, Stage.U):
            out.extend(StageId(stage, b) for b in range(self.stage_blocks[stage]))
        return out


@dataclass
class DenoiseHooks:
    """Optional instrumentation for one predict_noise call.

    feature_taps receives (StageId, block output) in forward order;
    feature_residuals[sid] is added to that block's output before it feeds the
    next block; attn_override replaces the attention computation at each
    declared cross-attention site. All fields may be None (plain denoising).
    """

    feature_taps: FeatureTap | None = None
    feature_residuals: dict[StageId, np.ndarray] | None = None
    attn_override: AttnOverride | None = None


class ToyBackend:
    """Seeded miniature denoiser; see the module docstring for the layout."""

    LATENT_SHAPE = (4, 8, 8)
    IMAGE_SHAPE = (16, 16)
    TEXT_DIM = 16
    ATTN_DIM = 16
    HIDDEN = 8
    TEMB_AMP = 0.15
    OUTPUT_GAIN = 0.12

    def __init__(self, seed: int = 0, guidance: float = 0.75, t_max: int = 1000):
        self.seed = int(seed)
        self.guidance = float(guidance)
        self.t_max = int(t_max)
        rng = SplitMix64(self.seed)
        c, h, w = self.LATENT_SHAPE
        hid = self.HIDDEN

        # encode/decode: invertible channel mix + bias over 2x2 patches.
        self._patch_mix = np.eye(c) + 0.5 * rng.uniform((c, c), -0.5, 0.5)
        self._patch_inv = np.linalg.inv(self._patch_mix)
        self._patch_bias = rng.uniform((c,), -0.1, 0.1)

        # Down path sizes with a 2x2 floor; up path mirrors them back.
        self._d_sizes = []
        size = h
        for _ in range(3):
            size = max(2, size // 2)
            self._d_sizes.append(size)
        self._u_sizes = [self._d_sizes[1], self._d_sizes[0], h]

        def mix(cout, cin, gain):
            return rng.uniform((cout, cin)) * (gain / math.sqrt(cin))

        self._weights = {
            StageId(Stage.D, 0): (mix(hid, c, 0.9), rng.uniform((hid,), -0.1, 0.1)),
            StageId(Stage.D, 1): (mix(hid, hid, 0.9), rng.uniform((hid,), -0.1, 0.1)),
            StageId(Stage.D, 2): (mix(hid, hid, 0.9), rng.uniform((hid,), -0.1, 0.1)),
            StageId(Stage.M, 0): (mix(hid, hid, 0.9), rng.uniform((hid,), -0.1, 0.1)),
            StageId(Stage.U, 0): (mix(hid, hid, 0.9), rng.uniform((hid,), -0.1, 0.1)),
            StageId(Stage.U, 1): (mix(hid, hid, 0.45), rng.uniform((hid,), -0.1, 0.1)),
            StageId(Stage.U, 2): (mix(c, hid, 0.45), rng.uniform((c,), -0.1, 0.1)),
        }
        self._head = mix(c, c, 1.0)
        self._wq = rng.uniform((hid, self.ATTN_DIM)) / math.sqrt(hid)
        self._wk = rng.uniform((self.TEXT_DIM, self.ATTN_DIM)) / math.sqrt(self.TEXT_DIM)
        self._wv = rng.uniform((self.TEXT_DIM, self.ATTN_DIM)) / math.sqrt(self.TEXT_DIM)
        self._wo = rng.uniform((self.ATTN_DIM, hid)) / math.sqrt(self.ATTN_DIM)
        self._temb_freq = rng.uniform((c,), 0.5, 4.0)
        self._temb_phase = rng.uniform((c,), 0.0, 2.0 * math.pi)

        feature_shapes = {}
        for i, s in enumerate(self._d_sizes):
            feature_shapes[StageId(Stage.D, i)] = (hid, s, s)
        feature_shapes[StageId(Stage.M, 0)] = (hid, self._d_sizes[-1], self._d_sizes[-1])
        for i, s in enumerate(self._u_sizes[:-1]):
            feature_shapes[StageId(Stage.U, i)] = (hid, s, s)
        feature_shapes[StageId(Stage.U, 2)] = (c, h, w)

        self.descriptor = BackendDescriptor(
            latent_shape=self.LATENT_SHAPE,
            stage_blocks={Stage.D: 3, Stage.M: 1, Stage.U: 3},
            feature_shapes=feature_shapes,
            attn_dim=self.ATTN_DIM,
            attn_sites=(StageId(Stage.M, 0),),
            image_shape=self.IMAGE_SHAPE,
            text_dim=self.TEXT_DIM,
            t_max=self.t_max,
        )

    # -- image <-> latent --------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.IMAGE_SHAPE:
            raise ValueError(
                f"expected image shape {self.IMAGE_SHAPE}, got {image.shape}"
            )
        h, w = self.IMAGE_SHAPE
        patches = image.reshape(h // 2, 2, w // 2, 2).transpose(1, 3, 0, 2)
        patches = patches.reshape(4, h // 2, w // 2)
        mixed = np.einsum("ij,jhw->ihw", self._patch_mix, patches)
        return mixed + self._patch_bias[:, None, None]

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != self.LATENT_SHAPE:
            raise ValueError(
                f"expected latent shape {self.LATENT_SHAPE}, got {latent.shape}"
            )
        centered = latent - self._patch_bias[:, None, None]
        patches = np.einsum("ij,jhw->ihw", self._patch_inv, centered)
        h, w = self.IMAGE_SHAPE
        image = patches.reshape(2, 2, h // 2, w // 2).transpose(2, 0, 3, 1).reshape(h, w)
        return np.clip(image, 0.0, 1.0)

    # -- denoising ---------------------------------------------------------

    def predict_noise(self, latent: np.ndarray, t: int,
                      text_embedding: np.ndarray | None = None,
                      hooks: DenoiseHooks | None = None) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != self.LATENT_SHAPE:
            raise ShapeError(
                f"expected latent shape {self.LATENT_SHAPE}, got {latent.shape}"
            )
        if not 0 <= int(t) < self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max})")
        hooks = hooks or DenoiseHooks()

        x = latent + self._temb(int(t))[:, None, None]
        for sid in self.descriptor.stage_ids():
            x = self._run_block(sid, x, text_embedding, hooks)
            if hooks.feature_taps is not None:
                hooks.feature_taps(sid, x.copy())
            if hooks.feature_residuals is not None and sid in hooks.feature_residuals:
                residual = np.asarray(hooks.feature_residuals[sid], dtype=np.float64)
                if residual.shape != x.shape:
                    raise ShapeError(
                        f"residual for {sid} has shape {residual.shape}, "
                        f"feature is {x.shape}"
                    )
                x = x + residual
        return np.einsum("ij,jhw->ihw", self._head, x) * self.OUTPUT_GAIN

    def _temb(self, t: int) -> np.ndarray:
        phase = 2.0 * math.pi * self._temb_freq * (t / self.t_max) + self._temb_phase
        return self.TEMB_AMP * np.sin(phase)

    def _run_block(self, sid: StageId, x: np.ndarray,
                   text_embedding: np.ndarray | None,
                   hooks: DenoiseHooks) -> np.ndarray:
        weight, bias = self._weights[sid]
        if sid.stage is Stage.D:
            x = _avg_pool_to(x, self._d_sizes[sid.block])
        elif sid.stage is Stage.U:
            x = _nearest_upsample_to(x, self._u_sizes[sid.block])
        x = np.einsum("ij,jhw->ihw", weight, x) + bias[:, None, None]
        x = np.tanh(x)
        if sid in self.descriptor.attn_sites:
            x = x + self.guidance * self._cross_attention(sid, x, text_embedding, hooks)
        return x

    def _cross_attention(self, sid: StageId, feat: np.ndarray,
                         text_embedding: np.ndarray | None,
                         hooks: DenoiseHooks) -> np.ndarray:
        c, h, w = feat.shape
        tokens = feat.reshape(c, h * w).T
        q = tokens @ self._wq

        def kv_project(embedding: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            embedding = np.asarray(embedding, dtype=np.float64)
            if embedding.ndim != 2 or embedding.shape[1] != self.TEXT_DIM:
                raise ShapeError(
                    f"text embedding must be (tokens, {self.TEXT_DIM}), "
                    f"got {embedding.shape}"
                )
            return embedding @ self._wk, embedding @ self._wv

        if hooks.attn_override is not None:
            out = hooks.attn_override(sid, q, kv_project)
        else:
            if text_embedding is None or len(text_embedding) == 0:
                raise ValueError("cross-attention needs a text embedding or an override")
            k, v = kv_project(text_embedding)
            out = plain_attention(q, k, v)
        return (out @ self._wo).T.reshape(c, h, w)


def _avg_pool_to(x: np.ndarray, size: int) -> np.ndarray:
    c, h, w = x.shape
    if h == size:
        return x
    factor = h // size
    return x.reshape(c, size, factor, size, factor).mean(axis=(2, 4))


def _nearest_upsample_to(x: np.ndarray, size: int) -> np.ndarray:
    c, h, w = x.shape
    if h == size:
        return x
    factor = size // h
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


class LatentDiffusionAdapter:
    """Contract placeholder for a real latent-diffusion backbone.

    Instantiating it is allowed (so configs can be validated); any call that
    needs model weights raises, since weights are outside this package.
    """

    def __init__(self, **_: object):
        self.descriptor = None

    def _unavailable(self) -> BackendError:
        return BackendError(
            "the latent-diffusion adapter ships as a contract only; attach a "
            "backbone implementing descriptor/predict_noise/encode/decode"
        )

    def predict_noise(self, *args, **kwargs):
        raise self._unavailable()

    def encode(self, *args, **kwargs):
        raise self._unavailable()

    def decode(self, *args, **kwargs):
        raise self._unavailable()
