"""Multi-scale feature cache recorded during inversion, with slerp blending.

One cache holds the features of one image: keys are (stage, block, timestep)
and every entry for a given (stage, block) shares the shape fixed by its first
insert. Entries are float32, the element type of the on-disk format.

Disk format `.chimcache` (all integers little-endian):

    magic     8 bytes  b"CHIMCACH"
    version   u32      currently 1
    image_id  u32 length + UTF-8 bytes
    timesteps u8 flag, then u32 count + u32 values when flag == 1
    shapes    u32 count, then per stage-block: stage char (1 byte),
              u32 block, u8 ndim, ndim x u32 dims
    entries   u32 count, then sorted by (stage, block, t): stage char,
              u32 block, u32 t, then numel x f32 values
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core_math import slerp_vec
from .errors import CacheCorruptionError, CacheFormatError, DuplicateEntryError, ShapeError

MAGIC = b"CHIMCACH"
FORMAT_VERSION = 1

_STAGE_ORDER = {"D": 0, "M": 1, "U": 2}


class Stage(str, Enum):
    """U-Net block groups: down-sampling, mid, up-sampling."""

    D = "D"
    M = "M"
    U = "U"


@dataclass(frozen=True, order=True)
class StageId:
    """One block within a stage; the unit at which features are cached."""

    stage: Stage
    block: int

    def __post_init__(self):
        if self.block < 0:
            raise ValueError(f"block index must be >= 0, got {self.block}")

    def sort_key(self) -> tuple[int, int]:
        return (_STAGE_ORDER[self.stage.value], self.block)

    def __str__(self) -> str:
        return f"{self.stage.value}{self.block}"


class FeatureCache:
    """Features of one image keyed by (StageId, inversion timestep).

    The first insert for a StageId fixes its shape; later inserts must match.
    Overwriting an existing key raises DuplicateEntryError. Writes happen only
    during inversion (single writer); afterwards the cache is read-only and
    safe to share across concurrent denoising runs.
    """

    def __init__(self, image_id: str = "", timesteps=None):
        self.image_id = image_id
        self.timesteps = tuple(int(t) for t in timesteps) if timesteps is not None else None
        self.shape_table: dict[StageId, tuple[int, ...]] = {}
        self._entries: dict[tuple[StageId, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def put(self, stage_id: StageId, t: int, feature: np.ndarray) -> None:
        t = int(t)
        if self.timesteps is not None and t not in self.timesteps:
            raise ValueError(f"timestep {t} not in the cache's inversion timesteps")
        key = (stage_id, t)
        if key in self._entries:
            raise DuplicateEntryError(f"entry ({stage_id}, t={t}) already cached")
        feature = np.asarray(feature, dtype=np.float32)
        declared = self.shape_table.get(stage_id)
        if declared is None:
            self.shape_table[stage_id] = feature.shape
        elif feature.shape != declared:
            raise ShapeError(
                f"{stage_id} expects shape {declared}, got {feature.shape}"
            )
        self._entries[key] = feature

    def get(self, stage_id: StageId, t: int) -> np.ndarray:
        try:
            return self._entries[(stage_id, int(t))]
        except KeyError:
            raise KeyError(f"no cached feature for ({stage_id}, t={t})") from None

    def has(self, stage_id: StageId, t: int) -> bool:
        return (stage_id, int(t)) in self._entries

    def stage_ids(self) -> list[StageId]:
        return sorted(self.shape_table, key=StageId.sort_key)

    def cached_timesteps(self) -> list[int]:
        return sorted({t for _, t in self._entries})

    def is_complete(self, stage_ids, timesteps=None) -> bool:
        """True when every (StageId, t) pair is present."""
        ts = timesteps if timesteps is not None else self.timesteps
        if ts is None:
            raise ValueError("no timestep list to check completeness against")
        return all(self.has(sid, t) for sid in stage_ids for t in ts)

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        ident = self.image_id.encode("utf-8")
        buf.write(struct.pack("<I", len(ident)))
        buf.write(ident)
        if self.timesteps is None:
            buf.write(struct.pack("<B", 0))
        else:
            buf.write(struct.pack("<BI", 1, len(self.timesteps)))
            for t in self.timesteps:
                buf.write(struct.pack("<I", t))
        shapes = sorted(self.shape_table.items(), key=lambda kv: kv[0].sort_key())
        buf.write(struct.pack("<I", len(shapes)))
        for sid, shape in shapes:
            buf.write(sid.stage.value.encode("ascii"))
            buf.write(struct.pack("<IB", sid.block, len(shape)))
            for dim in shape:
                buf.write(struct.pack("<I", dim))
        entries = sorted(self._entries.items(), key=lambda kv: (kv[0][0].sort_key(), kv[0][1]))
        buf.write(struct.pack("<I", len(entries)))
        for (sid, t), feature in entries:
            buf.write(sid.stage.value.encode("ascii"))
            buf.write(struct.pack("<II", sid.block, t))
            buf.write(feature.astype("<f4", copy=False).tobytes())
        return buf.getvalue()


def load_cache(path) -> FeatureCache:
    """Read a `.chimcache` file; inverse of FeatureCache.save."""
    return cache_from_bytes(Path(path).read_bytes())


def cache_from_bytes(blob: bytes) -> FeatureCache:
    reader = _Reader(blob)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CacheFormatError("bad magic; not a .chimcache file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CacheFormatError(f"unsupported cache format version {version}")
    image_id = reader.take(reader.u32()).decode("utf-8")
    timesteps = None
    if reader.u8() == 1:
        timesteps = tuple(reader.u32() for _ in range(reader.u32()))
    cache = FeatureCache(image_id=image_id, timesteps=timesteps)
    shape_table: dict[StageId, tuple[int, ...]] = {}
    for _ in range(reader.u32()):
        sid = StageId(Stage(reader.take(1).decode("ascii")), reader.u32())
        shape_table[sid] = tuple(reader.u32() for _ in range(reader.u8()))
    for _ in range(reader.u32()):
        sid = StageId(Stage(reader.take(1).decode("ascii")), reader.u32())
        t = reader.u32()
        if sid not in shape_table:
            raise CacheCorruptionError(f"entry {sid} has no declared shape")
        shape = shape_table[sid]
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        cache.put(sid, t, values)
    if reader.remaining() != 0:
        raise CacheCorruptionError(f"{reader.remaining()} trailing bytes after entries")
    return cache


class _Reader:
    def __init__(self, blob: bytes):
        self._blob = blob
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._blob):
            raise CacheCorruptionError("truncated cache file")
        out = self._blob[self._pos : self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def remaining(self) -> int:
        return len(self._blob) - self._pos


@dataclass
class BlendedCache:
    """Slerp-blended features for one morph index across all timesteps."""

    k: int
    alpha: float
    values: dict[tuple[StageId, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_caches(cls, cache_a: FeatureCache, cache_b: FeatureCache,
                    k: int, alpha: float, timesteps) -> "BlendedCache":
        blended = cls(k=k, alpha=alpha)
        for t in timesteps:
            for sid, feature in blend_cache(cache_a, cache_b, alpha, t).items():
                blended.values[(sid, int(t))] = feature
        return blended


def blend_cache(cache_a: FeatureCache, cache_b: FeatureCache,
                alpha_k: float, t: int) -> dict[StageId, np.ndarray]:
    """Blend two caches at one timestep: slerp over flattened features.

    Returns a map StageId -> blended array with the shared shape. Both caches
    must declare identical shape tables and hold the requested timestep.
    Zero-norm features fall back to lerp (slerp is undefined there).
    """
    if cache_a.shape_table != cache_b.shape_table:
        raise ShapeError("caches declare different shape tables")
    out: dict[StageId, np.ndarray] = {}
    for sid in cache_a.stage_ids():
        fa = cache_a.get(sid, t).astype(np.float64).ravel()
        fb = cache_b.get(sid, t).astype(np.float64).ravel()
        if np.linalg.norm(fa) == 0.0 or np.linalg.norm(fb) == 0.0:
            mixed = (1.0 - alpha_k) * fa + alpha_k * fb
        else:
            mixed = slerp_vec(fa, fb, alpha_k)
        out[sid] = mixed.reshape(cache_a.shape_table[sid])
    return out
