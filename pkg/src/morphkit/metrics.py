"""Morphing-oriented metrics: the global/local consistency scores plus the
classical path metrics (Frechet distances, path perceptual distance, PPL).

The consistency scores work on a SimilarityMatrix: per-frame similarities to
each endpoint plus the four endpoint similarities, all in [-1, 1] from a
pluggable provider. The global score compares each frame's measured
similarities against the spherically interpolated endpoint trend; the local
score compares them against the average of the temporal neighbors. Every
per-frame term is clamped to [0, 1], the two factors (one per endpoint)
multiply, and the final score is the mean over the K frames. The combined
score is the geometric mean of the two and is reported both raw and x100.

Similarity and distance providers are contracts; the shipped stand-ins are a
deterministic image-embedding stub with cosine similarity and a plain
Euclidean pixel distance. Network-based providers (diffusion-feature
similarity, learned perceptual distance, Inception features) plug in through
the same two-argument callables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_math import clamp01, interp_weights, slerp_scalar_sim
from .errors import NumericalError

EIG_NEG_TOL = 1e-6


@dataclass
class SimilarityMatrix:
    """Endpoint-to-frame similarities for one morph sequence."""

    s_a: np.ndarray  # s(A, I_k), length K
    s_b: np.ndarray  # s(B, I_k), length K
    s_aa: float
    s_ab: float
    s_ba: float
    s_bb: float

    def __post_init__(self):
        self.s_a = np.asarray(self.s_a, dtype=np.float64)
        self.s_b = np.asarray(self.s_b, dtype=np.float64)
        if self.s_a.shape != self.s_b.shape or self.s_a.ndim != 1:
            raise ValueError("s_a and s_b must be 1-D and the same length")
        values = np.concatenate([self.s_a, self.s_b,
                                 [self.s_aa, self.s_ab, self.s_ba, self.s_bb]])
        if np.any(np.abs(values) > 1.0 + 1e-9):
            raise ValueError("similarities must lie in [-1, 1]")

    @property
    def k(self) -> int:
        return len(self.s_a)


@dataclass
class MetricReport:
    """All scores for one sequence; display values are x100."""

    gcs: float
    lcs: float
    glcs: float
    gamma: float
    g_per_frame: np.ndarray
    g_sharpened: np.ndarray
    l_per_frame: np.ndarray
    fid_local: float | None = None
    fid_global: float | None = None
    lpips_path: float | None = None
    ppl: float | None = None
    provider_ids: dict[str, str] = field(default_factory=dict)

    @property
    def glcs_display(self) -> float:
        return 100.0 * self.glcs

    def to_dict(self) -> dict:
        return {
            "gcs": self.gcs,
            "lcs": self.lcs,
            "glcs": self.glcs,
            "glcs_display": self.glcs_display,
            "gamma": self.gamma,
            "per_frame": {
                "g": self.g_per_frame.tolist(),
                "g_sharpened": self.g_sharpened.tolist(),
                "l": self.l_per_frame.tolist(),
            },
            "fid_local": self.fid_local,
            "fid_global": self.fid_global,
            "lpips_path": self.lpips_path,
            "ppl": self.ppl,
            "provider_ids": self.provider_ids,
        }


def gcs(sim: SimilarityMatrix, gamma: float = 1.0,
        trend_mode: str = "angle") -> tuple[float, np.ndarray, np.ndarray]:
    """Global consistency score.

    The expected trend for endpoint X is the similarity-space slerp from
    s(X, A) to s(X, B) at each frame weight; the per-frame term multiplies the
    clamped agreement with both trends and is sharpened by the exponent gamma.
    Returns (score, raw per-frame terms, sharpened per-frame terms).
    """
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    alphas = interp_weights(sim.k)
    g = np.empty(sim.k)
    for k in range(sim.k):
        exp_a = slerp_scalar_sim(sim.s_aa, sim.s_ab, alphas[k], mode=trend_mode)
        exp_b = slerp_scalar_sim(sim.s_ba, sim.s_bb, alphas[k], mode=trend_mode)
        g[k] = (clamp01(1.0 - abs(sim.s_a[k] - exp_a))
                * clamp01(1.0 - abs(sim.s_b[k] - exp_b)))
    g_sharpened = g**gamma
    return float(np.mean(g_sharpened)), g, g_sharpened


def lcs(sim: SimilarityMatrix) -> tuple[float, np.ndarray]:
    """Local consistency score.

    Each frame's expected similarity is its neighbor average (boundary frames
    use their single neighbor); a single frame scores 1 by convention.
    """
    k = sim.k
    if k == 1:
        return 1.0, np.ones(1)
    l = np.empty(k)
    for i in range(k):
        exp_a = _neighbor_expectation(sim.s_a, i)
        exp_b = _neighbor_expectation(sim.s_b, i)
        l[i] = (clamp01(1.0 - abs(sim.s_a[i] - exp_a))
                * clamp01(1.0 - abs(sim.s_b[i] - exp_b)))
    return float(np.mean(l)), l


def _neighbor_expectation(values: np.ndarray, i: int) -> float:
    if i == 0:
        return float(values[1])
    if i == len(values) - 1:
        return float(values[-2])
    return 0.5 * (float(values[i - 1]) + float(values[i + 1]))


def glcs(gcs_value: float, lcs_value: float) -> float:
    """Geometric mean of the global and local scores."""
    for name, value in (("gcs", gcs_value), ("lcs", lcs_value)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    return math.sqrt(gcs_value * lcs_value)


# -- feature distributions ----------------------------------------------------


@dataclass
class FeatureSet:
    """Embedding vectors with their mean and covariance."""

    vectors: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_vectors(cls, vectors) -> "FeatureSet":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.size == 0:
            raise ValueError("feature set must be non-empty")
        mean = vectors.mean(axis=0)
        if len(vectors) == 1:
            cov = np.zeros((vectors.shape[1], vectors.shape[1]))
        else:
            cov = np.cov(vectors, rowvar=False)
        return cls(vectors=vectors, mean=mean, cov=np.atleast_2d(cov))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below -1e-6 are rejected; small negatives inside the
    tolerance are clipped to zero.
    """
    eigvals, eigvecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if np.any(eigvals < -EIG_NEG_TOL):
        raise NumericalError(
            f"matrix is indefinite beyond tolerance (min eigenvalue {eigvals.min()})"
        )
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(real: FeatureSet, gen: FeatureSet) -> float:
    """Frechet distance between two Gaussian fits:

        |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})

    The cross square root is computed symmetrically as
    (S1^{1/2} S2 S1^{1/2})^{1/2}, whose trace equals Tr((S1 S2)^{1/2}).
    """
    if real.mean.shape != gen.mean.shape:
        raise ValueError(
            f"dimension mismatch: {real.mean.shape} vs {gen.mean.shape}"
        )
    diff = real.mean - gen.mean
    s1_half = _psd_sqrt(real.cov)
    cross = _psd_sqrt(s1_half @ gen.cov @ s1_half)
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov)
                  - 2.0 * np.trace(cross))
    return max(0.0, value)


def fid_local(pairs, feature_provider) -> float:
    """Mean per-pair Frechet distance between endpoint and frame embeddings.

    `pairs` is an iterable of (image_a, image_b, frames); the provider maps an
    image to an embedding vector.
    """
    distances = []
    for image_a, image_b, frames in pairs:
        if len(frames) < 1:
            raise ValueError("each pair needs at least one frame")
        real = FeatureSet.from_vectors([feature_provider(image_a),
                                        feature_provider(image_b)])
        gen = FeatureSet.from_vectors([feature_provider(f) for f in frames])
        distances.append(frechet_distance(real, gen))
    if not distances:
        raise ValueError("fid_local needs at least one pair")
    return float(np.mean(distances))


def fid_global(pairs, feature_provider) -> float:
    """Frechet distance between all pooled endpoints and all pooled frames."""
    real, gen = [], []
    for image_a, image_b, frames in pairs:
        real.append(feature_provider(image_a))
        real.append(feature_provider(image_b))
        gen.extend(feature_provider(f) for f in frames)
    if not real or not gen:
        raise ValueError("fid_global needs endpoints and frames")
    return frechet_distance(FeatureSet.from_vectors(real),
                            FeatureSet.from_vectors(gen))


# -- path metrics --------------------------------------------------------------


def lpips_path(path_points, distance_provider) -> float:
    """Sum of perceptual distances along the ordered path A, I_1..I_K, B."""
    if len(path_points) < 2:
        raise ValueError("path needs at least two points")
    return float(sum(distance_provider(path_points[i - 1], path_points[i])
                     for i in range(1, len(path_points))))


def ppl(path_points, latent_steps, distance_provider) -> float:
    """Mean perceptual distance per squared latent step along the morph path.

    `latent_steps` holds the latent codes w_n matching path_points. A zero
    latent step contributes 0 when the image distance is also 0 (identical
    points) and inf otherwise.
    """
    if len(path_points) < 2:
        raise ValueError("path needs at least two points")
    if len(latent_steps) != len(path_points):
        raise ValueError("need one latent code per path point")
    terms = []
    for i in range(1, len(path_points)):
        dist = distance_provider(path_points[i - 1], path_points[i])
        step = float(np.linalg.norm(np.asarray(latent_steps[i - 1], dtype=np.float64).ravel()
                                    - np.asarray(latent_steps[i], dtype=np.float64).ravel()))
        if step == 0.0:
            terms.append(0.0 if dist == 0.0 else math.inf)
        else:
            terms.append(dist / step**2)
    return float(np.mean(terms))


# -- providers ------------------------------------------------------------------


class StubImageEmbedder:
    """Deterministic image embedding: flatten + fixed pseudorandom projection.

    A desk-scale stand-in for a learned feature space; the projection matrix
    depends only on (seed, input size, output dim) so embeddings are stable
    across runs. Callable as provider(image) -> vector.
    """

    def __init__(self, dim: int = 32, seed: int = 7):
        self.dim = dim
        self.seed = seed
        self._projections: dict[int, np.ndarray] = {}

    def __call__(self, image: np.ndarray) -> np.ndarray:
        flat = np.asarray(image, dtype=np.float64).ravel()
        return self._projection(flat.size) @ flat

    def _projection(self, n: int) -> np.ndarray:
        if n not in self._projections:
            from .denoiser import SplitMix64

            rng = SplitMix64(self.seed * 1_000_003 + n)
            self._projections[n] = rng.uniform((self.dim, n)) / math.sqrt(n)
        return self._projections[n]

    @property
    def provider_id(self) -> str:
        return f"stub-embed-{self.dim}d-seed{self.seed}"


class CosineSimilarityProvider:
    """Bounded similarity s(X, Y) in [-1, 1]: cosine over an embedding.

    The default embedding is the deterministic stub; a diffusion-feature
    similarity drops in by passing its own embed callable.
    """

    def __init__(self, embed=None):
        self.embed = embed if embed is not None else StubImageEmbedder()

    def __call__(self, x: np.ndarray, y: np.ndarray) -> float:
        ex = np.asarray(self.embed(x), dtype=np.float64)
        ey = np.asarray(self.embed(y), dtype=np.float64)
        nx, ny = np.linalg.norm(ex), np.linalg.norm(ey)
        if nx == 0.0 or ny == 0.0:
            raise ValueError("embedding collapsed to the zero vector")
        return float(np.clip(ex @ ey / (nx * ny), -1.0, 1.0))

    @property
    def provider_id(self) -> str:
        inner = getattr(self.embed, "provider_id", type(self.embed).__name__)
        return f"cosine[{inner}]"


class EuclideanDistance:
    """Plain L2 pixel distance; the desk-scale perceptual-distance stand-in."""

    def __call__(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(x, dtype=np.float64).ravel()
                                    - np.asarray(y, dtype=np.float64).ravel()))

    provider_id = "euclidean"


def similarity_matrix(image_a: np.ndarray, image_b: np.ndarray, frames,
                      sim_provider) -> SimilarityMatrix:
    """Measure all endpoint/frame similarities with one provider."""
    return SimilarityMatrix(
        s_a=np.array([sim_provider(image_a, f) for f in frames]),
        s_b=np.array([sim_provider(image_b, f) for f in frames]),
        s_aa=sim_provider(image_a, image_a),
        s_ab=sim_provider(image_a, image_b),
        s_ba=sim_provider(image_b, image_a),
        s_bb=sim_provider(image_b, image_b),
    )


def evaluate_sequence(image_a: np.ndarray, image_b: np.ndarray, frames,
                      gamma: float = 1.0, sim_provider=None,
                      distance_provider=None, feature_provider=None,
                      latent_path=None, trend_mode: str = "angle") -> MetricReport:
    """Full metric report for one stored or in-memory morph sequence."""
    sim_provider = sim_provider if sim_provider is not None else CosineSimilarityProvider()
    distance_provider = distance_provider if distance_provider is not None else EuclideanDistance()
    feature_provider = feature_provider if feature_provider is not None else StubImageEmbedder()

    sim = similarity_matrix(image_a, image_b, frames, sim_provider)
    gcs_value, g_raw, g_sharp = gcs(sim, gamma=gamma, trend_mode=trend_mode)
    lcs_value, l_raw = lcs(sim)
    pair = [(image_a, image_b, list(frames))]
    path_points = [image_a, *frames, image_b]
    report = MetricReport(
        gcs=gcs_value, lcs=lcs_value, glcs=glcs(gcs_value, lcs_value),
        gamma=gamma, g_per_frame=g_raw, g_sharpened=g_sharp, l_per_frame=l_raw,
        fid_local=fid_local(pair, feature_provider),
        fid_global=fid_global(pair, feature_provider),
        lpips_path=lpips_path(path_points, distance_provider),
        provider_ids={
            "similarity": getattr(sim_provider, "provider_id", type(sim_provider).__name__),
            "distance": getattr(distance_provider, "provider_id", type(distance_provider).__name__),
            "features": getattr(feature_provider, "provider_id", type(feature_provider).__name__),
        },
    )
    if latent_path is not None:
        report.ppl = ppl(path_points, list(latent_path), distance_provider)
    return report
