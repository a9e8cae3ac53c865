import struct

import numpy as np
import pytest

from morphkit.core_math import slerp_vec
from morphkit.errors import (
    CacheCorruptionError,
    CacheFormatError,
    DuplicateEntryError,
    ShapeError,
)
from morphkit.feature_cache import (
    FeatureCache,
    Stage,
    StageId,
    BlendedCache,
    blend_cache,
    cache_from_bytes,
    load_cache,
)

D0 = StageId(Stage.D, 0)
M0 = StageId(Stage.M, 0)
U1 = StageId(Stage.U, 1)


def make_cache(image_id="A", seed=0, timesteps=(0, 5), shapes=None):
    shapes = shapes or {D0: (2, 4, 4), M0: (3, 2, 2), U1: (2, 8, 8)}
    rng = np.random.default_rng(seed)
    cache = FeatureCache(image_id, timesteps=timesteps)
    for sid, shape in shapes.items():
        for t in timesteps:
            cache.put(sid, t, rng.normal(0, 1, shape).astype(np.float32))
    return cache


def test_put_get_roundtrip(rng):
    cache = FeatureCache("A", timesteps=(3,))
    feature = rng.normal(0, 1, (2, 4, 4)).astype(np.float32)
    cache.put(D0, 3, feature)
    out = cache.get(D0, 3)
    assert out.dtype == np.float32
    assert (out == feature).all()


def test_put_duplicate_key():
    cache = FeatureCache("A", timesteps=(0,))
    cache.put(D0, 0, np.zeros((2, 2), np.float32))
    with pytest.raises(DuplicateEntryError):
        cache.put(D0, 0, np.ones((2, 2), np.float32))


def test_put_shape_mismatch():
    cache = FeatureCache("A", timesteps=(0, 1))
    cache.put(D0, 0, np.zeros((2, 2), np.float32))
    with pytest.raises(ShapeError):
        cache.put(D0, 1, np.zeros((2, 3), np.float32))


def test_put_unknown_timestep():
    cache = FeatureCache("A", timesteps=(0, 1))
    with pytest.raises(ValueError):
        cache.put(D0, 7, np.zeros((2, 2), np.float32))


def test_get_missing_key():
    cache = FeatureCache("A", timesteps=(0,))
    with pytest.raises(KeyError):
        cache.get(D0, 0)


def test_completeness():
    cache = make_cache()
    assert cache.is_complete([D0, M0, U1])
    assert not cache.is_complete([D0, M0, U1, StageId(Stage.U, 2)])


def test_stage_id_ordering():
    ids = [U1, M0, D0, StageId(Stage.D, 1)]
    assert sorted(ids, key=StageId.sort_key) == [D0, StageId(Stage.D, 1), M0, U1]


# -- blending -------------------------------------------------------------------


def test_blend_equal_caches_is_identity():
    cache = make_cache(seed=5)
    for alpha in (0.1, 0.5, 0.9):
        blended = blend_cache(cache, cache, alpha, 0)
        for sid in cache.stage_ids():
            assert np.allclose(blended[sid], cache.get(sid, 0), atol=1e-9)


def test_blend_alpha_zero_limit():
    cache_a = make_cache("A", seed=1)
    cache_b = make_cache("B", seed=2)
    blended = blend_cache(cache_a, cache_b, 1e-9, 5)
    for sid in cache_a.stage_ids():
        assert np.abs(blended[sid] - cache_a.get(sid, 5)).max() < 1e-6


def test_blend_orthogonal_unit_norm():
    # orthogonal unit-norm features at alpha=0.5 stay unit norm
    cache_a = FeatureCache("A", timesteps=(0,))
    cache_b = FeatureCache("B", timesteps=(0,))
    fa = np.zeros(16, np.float32)
    fb = np.zeros(16, np.float32)
    fa[0] = 1.0
    fb[1] = 1.0
    cache_a.put(D0, 0, fa.reshape(4, 4))
    cache_b.put(D0, 0, fb.reshape(4, 4))
    blended = blend_cache(cache_a, cache_b, 0.5, 0)
    assert np.linalg.norm(blended[D0]) == pytest.approx(1.0, abs=1e-6)


def test_blend_matches_flat_slerp(rng):
    cache_a = make_cache("A", seed=3)
    cache_b = make_cache("B", seed=4)
    blended = blend_cache(cache_a, cache_b, 0.3, 0)
    for sid in cache_a.stage_ids():
        expected = slerp_vec(
            cache_a.get(sid, 0).astype(np.float64).ravel(),
            cache_b.get(sid, 0).astype(np.float64).ravel(),
            0.3,
        ).reshape(blended[sid].shape)
        assert np.allclose(blended[sid], expected, atol=1e-12)


def test_blend_swap_symmetry():
    cache_a = make_cache("A", seed=6)
    cache_b = make_cache("B", seed=7)
    for alpha in (0.2, 0.5, 0.8):
        fwd = blend_cache(cache_a, cache_b, alpha, 5)
        rev = blend_cache(cache_b, cache_a, 1.0 - alpha, 5)
        for sid in fwd:
            assert np.abs(fwd[sid] - rev[sid]).max() < 1e-9


def test_blend_zero_features_falls_back_to_lerp():
    cache_a = FeatureCache("A", timesteps=(0,))
    cache_b = FeatureCache("B", timesteps=(0,))
    cache_a.put(D0, 0, np.zeros((2, 2), np.float32))
    cache_b.put(D0, 0, np.full((2, 2), 2.0, np.float32))
    blended = blend_cache(cache_a, cache_b, 0.25, 0)
    assert np.allclose(blended[D0], 0.5)


def test_blend_missing_key_and_shape_mismatch():
    cache_a = make_cache("A")
    cache_b = make_cache("B")
    with pytest.raises(KeyError):
        blend_cache(cache_a, cache_b, 0.5, 99)
    other = make_cache("C", shapes={D0: (2, 2)})
    with pytest.raises(ShapeError):
        blend_cache(cache_a, other, 0.5, 0)


def test_blended_cache_covers_all_timesteps():
    cache_a = make_cache("A", seed=8)
    cache_b = make_cache("B", seed=9)
    blended = BlendedCache.from_caches(cache_a, cache_b, k=1, alpha=0.5,
                                       timesteps=(0, 5))
    assert len(blended.values) == 2 * len(cache_a.stage_ids())


# -- serialization ----------------------------------------------------------------


def test_save_load_bit_identical(tmp_path):
    cache = make_cache(image_id="toy-A", seed=11)
    path = tmp_path / "toy.chimcache"
    cache.save(path)
    loaded = load_cache(path)
    assert loaded.image_id == cache.image_id
    assert loaded.timesteps == cache.timesteps
    assert loaded.shape_table == cache.shape_table
    assert set(loaded.keys()) == set(cache.keys())
    for sid, t in cache.keys():
        a = cache.get(sid, t)
        b = loaded.get(sid, t)
        assert a.dtype == b.dtype == np.float32
        assert a.tobytes() == b.tobytes()


def test_corrupted_magic_rejected(tmp_path):
    cache = make_cache()
    blob = bytearray(cache.to_bytes())
    blob[:8] = b"NOTACACH"
    with pytest.raises(CacheFormatError):
        cache_from_bytes(bytes(blob))


def test_unsupported_version_rejected():
    blob = bytearray(make_cache().to_bytes())
    blob[8:12] = struct.pack("<I", 999)
    with pytest.raises(CacheFormatError):
        cache_from_bytes(bytes(blob))


def test_truncated_file_rejected():
    blob = make_cache().to_bytes()
    with pytest.raises(CacheCorruptionError):
        cache_from_bytes(blob[: len(blob) - 7])


def test_trailing_garbage_rejected():
    blob = make_cache().to_bytes()
    with pytest.raises(CacheCorruptionError):
        cache_from_bytes(blob + b"xx")


def test_file_size_formula(tmp_path):
    shapes = {D0: (2, 4, 4), M0: (3, 2, 2), U1: (2, 8, 8)}
    timesteps = (0, 5, 9)
    cache = make_cache(image_id="AB", timesteps=timesteps, shapes=shapes)
    path = tmp_path / "sized.chimcache"
    cache.save(path)

    header = 8 + 4  # magic + version
    header += 4 + len(b"AB")  # image id
    header += 1 + 4 + 4 * len(timesteps)  # timestep flag + count + values
    header += 4 + sum(1 + 4 + 1 + 4 * len(shape) for shape in shapes.values())
    header += 4  # entry count
    per_entry_key = 1 + 4 + 4
    payload = sum(
        (per_entry_key + 4 * int(np.prod(shape))) * len(timesteps)
        for shape in shapes.values()
    )
    assert path.stat().st_size == header + payload
