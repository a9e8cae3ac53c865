"""Acceptance gate: every release criterion at its stated tolerance.

Each test covers one numbered criterion and prints a PASS line (visible with
pytest -s or -v). Everything runs on the toy backend with no external
services; the VLM is never contacted.
"""

import hashlib
import math
from pathlib import Path

import numpy as np
import pytest

from morphkit.analysis import band_energy, profile
from morphkit.cli import main as cli_main
from morphkit.core_math import interp_weights
from morphkit.engine import MorphConfig, MorphEngine
from morphkit.feature_cache import FeatureCache, Stage, StageId, cache_from_bytes
from morphkit.metrics import (
    FeatureSet,
    SimilarityMatrix,
    frechet_distance,
    gcs,
    glcs,
    lcs,
    similarity_matrix,
)
from morphkit.prompting import (
    AttentionInputs,
    PromptTriplet,
    parse_vlm_response,
    plain_attention,
    sap_attention,
)
from morphkit.schedule import IdmMap, idm_map


def ok(n, text):
    print(f"PASS criterion {n}: {text}")


# -- criterion 1: metric oracle equivalence ------------------------------------------


def consistency_oracle(s_a, s_b, s_aa, s_ab, s_ba, s_bb, gamma=1.0):
    """Straight-line transcription of the score definitions (no shared code)."""
    big_k = len(s_a)
    clamp = lambda x: min(1.0, max(0.0, x))
    sim_slerp = lambda x, y, a: math.cos((1 - a) * math.acos(x) + a * math.acos(y))
    g_terms = []
    for k in range(big_k):
        alpha_k = (k + 1) / (big_k + 1)
        bar_a = sim_slerp(s_aa, s_ab, alpha_k)
        bar_b = sim_slerp(s_ba, s_bb, alpha_k)
        g_terms.append(clamp(1 - abs(s_a[k] - bar_a)) * clamp(1 - abs(s_b[k] - bar_b)))
    gcs_value = sum(g**gamma for g in g_terms) / big_k
    if big_k == 1:
        lcs_value = 1.0
    else:
        l_terms = []
        for k in range(big_k):
            if k == 0:
                tilde_a, tilde_b = s_a[1], s_b[1]
            elif k == big_k - 1:
                tilde_a, tilde_b = s_a[big_k - 2], s_b[big_k - 2]
            else:
                tilde_a = 0.5 * (s_a[k - 1] + s_a[k + 1])
                tilde_b = 0.5 * (s_b[k - 1] + s_b[k + 1])
            l_terms.append(clamp(1 - abs(s_a[k] - tilde_a))
                           * clamp(1 - abs(s_b[k] - tilde_b)))
        lcs_value = sum(l_terms) / big_k
    return gcs_value, lcs_value, math.sqrt(gcs_value * lcs_value)


def random_sim(rng, k):
    return SimilarityMatrix(
        s_a=rng.uniform(-1, 1, k), s_b=rng.uniform(-1, 1, k),
        s_aa=float(rng.uniform(-1, 1)), s_ab=float(rng.uniform(-1, 1)),
        s_ba=float(rng.uniform(-1, 1)), s_bb=float(rng.uniform(-1, 1)))


def package_scores(sim, gamma=1.0):
    g, _, _ = gcs(sim, gamma=gamma)
    l, _ = lcs(sim)
    return g, l, glcs(g, l)


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(20260810)
    for i in range(200):
        k = int(rng.choice([1, 2, 3, 5, 14]))
        gamma = float(rng.choice([1.0, 2.0, 3.0]))
        sim = random_sim(rng, k)
        got = package_scores(sim, gamma)
        want = consistency_oracle(sim.s_a.tolist(), sim.s_b.tolist(), sim.s_aa,
                                  sim.s_ab, sim.s_ba, sim.s_bb, gamma)
        assert all(abs(g - w) < 1e-9 for g, w in zip(got, want))

    sim3 = SimilarityMatrix(s_a=[0.9, 0.5, 0.1], s_b=[0.1, 0.5, 0.9],
                            s_aa=1.0, s_ab=0.0, s_ba=0.0, s_bb=1.0)
    lcs_value, _ = lcs(sim3)
    _, hand, _ = consistency_oracle([0.9, 0.5, 0.1], [0.1, 0.5, 0.9],
                                    1.0, 0.0, 0.0, 1.0)
    assert lcs_value == hand
    assert lcs_value == pytest.approx(0.57333, abs=1e-5)
    ok(1, "GCS/LCS/GLCS match oracle on 200 instances; K=3 hand case exact")


# -- criterion 2: bounds, reversal, gamma ----------------------------------------------


def test_criterion_2_bounds_and_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(100):
        k = int(rng.choice([1, 2, 3, 5, 14]))
        sim = random_sim(rng, k)
        g, l, combined = package_scores(sim)
        assert 0.0 <= g <= 1.0 and 0.0 <= l <= 1.0 and 0.0 <= combined <= 1.0
        reversed_sim = SimilarityMatrix(
            s_a=sim.s_b[::-1].copy(), s_b=sim.s_a[::-1].copy(),
            s_aa=sim.s_bb, s_ab=sim.s_ba, s_ba=sim.s_ab, s_bb=sim.s_aa)
        for f, r in zip(package_scores(sim), package_scores(reversed_sim)):
            assert abs(f - r) < 1e-9
        g1, raw, _ = gcs(sim, gamma=1.0)
        g2, _, _ = gcs(sim, gamma=2.0)
        assert g2 <= g1 + 1e-15
        if np.any((raw > 0) & (raw < 1)):
            assert g2 < g1
    ok(2, "scores bounded, reversal-invariant (1e-9), gamma-monotone on 100 instances")


# -- criterion 3: the timestep-mapping law ----------------------------------------------


def test_criterion_3_idm_law():
    for n_inv in range(2, 65):
        for n_dng in range(2, 65):
            idm = IdmMap(n_inv=n_inv, n_dng=n_dng, t_inv=tuple(range(n_inv)))
            indices = [idm_map(tau, idm) for tau in range(n_dng)]
            assert indices[0] == 0
            assert indices[-1] == n_inv - 1
            assert all(i2 >= i1 for i1, i2 in zip(indices, indices[1:]))
            if n_inv == n_dng:
                assert indices == list(range(n_inv))
    idm = IdmMap(n_inv=25, n_dng=50, t_inv=tuple(range(25)))
    assert idm_map(25, idm) == 12
    ok(3, "IDM endpoints+monotone on [2,64]^2, identity when equal, 50/25@25 -> 12")


# -- criterion 4: ablation no-ops by file hash --------------------------------------------


def _write_pair(tmp_path):
    from morphkit.reporting import save_image

    rng = np.random.default_rng(99)
    path_a, path_b = tmp_path / "a.png", tmp_path / "b.png"
    save_image(rng.uniform(0.1, 0.9, (16, 16)), path_a)
    save_image(rng.uniform(0.1, 0.9, (16, 16)), path_b)
    return str(path_a), str(path_b)


def _cli_run(pair, out, *extra):
    args = ["run", "--pair", *pair, "--frames", "5", "--out", str(out),
            "--steps", "8", "--seed", "42",
            "--caption-a", "a bright blob", "--caption-b", "a dark blob",
            *extra]
    assert cli_main(args) == 0


def _hashes(out):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(out).glob("frame_*.png"))}


def test_criterion_4_ablation_noops(tmp_path):
    pair = _write_pair(tmp_path)
    _cli_run(pair, tmp_path / "lam0", "--lambda", "0", "--anchor", "a shared blob")
    _cli_run(pair, tmp_path / "noaci", "--no-aci", "--anchor", "a shared blob")
    assert _hashes(tmp_path / "lam0") == _hashes(tmp_path / "noaci")

    _cli_run(pair, tmp_path / "emptyanc", "--anchor", "")
    _cli_run(pair, tmp_path / "nosap", "--no-sap")
    assert _hashes(tmp_path / "emptyanc") == _hashes(tmp_path / "nosap")
    ok(4, "lambda=0 == no-ACI and empty anchor == plain attention, by file hash")


# -- criterion 5: inversion fidelity --------------------------------------------------------


def test_criterion_5_inversion_fidelity():
    engine = MorphEngine.from_config(MorphConfig(n_inv=10, n_dng=10, toy_seed=42))
    rng = np.random.default_rng(5)
    image = rng.uniform(0.02, 0.98, (16, 16))
    embedding = engine._embedder.embed_padded("round trip probe")
    trajectory = engine.invert(image, None, embedding)
    recon = engine.backend.decode(engine.denoise(trajectory.terminal, embedding).terminal)
    rel_err = np.linalg.norm(recon - image) / np.linalg.norm(image)
    assert rel_err < 1e-3
    ok(5, f"invert->denoise round trip at N=10: relative error {rel_err:.2e} < 1e-3")


# -- criterion 6: degenerate morph and swap symmetry ------------------------------------------


def test_criterion_6_degenerate_and_swap():
    config = MorphConfig(k=5, n_inv=10, n_dng=10, toy_seed=42)
    engine = MorphEngine.from_config(config)
    rng = np.random.default_rng(6)
    image_a = rng.uniform(0.1, 0.9, (16, 16))
    image_b = rng.uniform(0.1, 0.9, (16, 16))
    triplet = PromptTriplet(anchor="one shared shape", caption_a="left shape",
                            caption_b="right shape")

    same = engine.generate_sequence(image_a, image_a, PromptTriplet(
        anchor="one shared shape", caption_a="same", caption_b="same"))
    worst = max(np.abs(same.frames[i] - same.frames[j]).max()
                for i in range(5) for j in range(i))
    assert worst < 1e-4

    mirrored = PromptTriplet(anchor=triplet.anchor, caption_a=triplet.caption_b,
                             caption_b=triplet.caption_a)
    fwd = engine.generate_sequence(image_a, image_b, triplet)
    rev = engine.generate_sequence(image_b, image_a, mirrored)
    swap_worst = max(np.abs(f1 - f2).max()
                     for f1, f2 in zip(fwd.frames, reversed(rev.frames)))
    assert swap_worst < 1e-4
    ok(6, f"A=B pairwise diff {worst:.1e} < 1e-4; swap symmetry {swap_worst:.1e} < 1e-4")


# -- criterion 7: GLCS orders smoothness ---------------------------------------------------------


def _unit(v):
    return v / np.linalg.norm(v)


def _unit_slerp(a, b, alpha):
    cos = float(np.clip(a @ b, -1, 1))
    theta = math.acos(cos)
    if math.sin(theta) < 1e-7:
        return _unit((1 - alpha) * a + alpha * b)
    return (math.sin((1 - alpha) * theta) * a + math.sin(alpha * theta) * b) \
        / math.sin(theta)


def _glcs_of(e_a, e_b, frames):
    provider = lambda x, y: float(np.clip(_unit(x) @ _unit(y), -1, 1))
    sim = similarity_matrix(e_a, e_b, frames, provider)
    g, _, _ = gcs(sim)
    l, _ = lcs(sim)
    return glcs(g, l)


def test_criterion_7_smoothness_ordering():
    k = 9
    alphas = interp_weights(k).alphas
    for seed in range(50):
        rng = np.random.default_rng(seed)
        e_a = _unit(rng.normal(0, 1, 8))
        perp = rng.normal(0, 1, 8)
        perp = _unit(perp - (perp @ e_a) * e_a)
        theta = 0.8 * math.pi
        e_b = math.cos(theta) * e_a + math.sin(theta) * perp
        smooth = [_unit_slerp(e_a, e_b, a) for a in alphas]

        mid = k // 2
        away = rng.normal(0, 1, 8)
        away = _unit(away - (away @ smooth[mid]) * smooth[mid])
        jump = list(smooth)
        jump[mid] = math.cos(0.35) * smooth[mid] + math.sin(0.35) * away

        while True:
            perm = rng.permutation(k)
            if not (perm == np.arange(k)).all():
                break
        shuffled = [smooth[i] for i in perm]

        s_smooth = _glcs_of(e_a, e_b, smooth)
        s_jump = _glcs_of(e_a, e_b, jump)
        s_shuffled = _glcs_of(e_a, e_b, shuffled)
        assert s_smooth > s_jump > s_shuffled, f"seed {seed}"
    ok(7, "GLCS(smooth) > GLCS(jump) > GLCS(shuffle), strict over 50 seeds")


# -- criterion 8: Frechet distance ------------------------------------------------------------------


def test_criterion_8_frechet():
    import scipy.linalg

    rng = np.random.default_rng(8)
    for dim in (3, 8):
        for _ in range(10):
            fs1 = FeatureSet.from_vectors(rng.normal(0, 1, (40, dim)))
            fs2 = FeatureSet.from_vectors(
                rng.uniform(-1, 1, dim) + 1.4 * rng.normal(0, 1, (35, dim)))
            got = frechet_distance(fs1, fs2)
            covmean = scipy.linalg.sqrtm(fs1.cov @ fs2.cov)
            if np.iscomplexobj(covmean):
                covmean = covmean.real
            diff = fs1.mean - fs2.mean
            want = float(diff @ diff + np.trace(fs1.cov) + np.trace(fs2.cov)
                         - 2 * np.trace(covmean))
            assert abs(got - want) < 1e-6

    fs = FeatureSet.from_vectors(rng.normal(0, 1, (30, 5)))
    assert frechet_distance(fs, fs) < 1e-8

    vectors = rng.normal(0, 1, (50, 4))
    shift = np.array([0.7, -1.1, 2.0, 0.4])
    shifted = FeatureSet.from_vectors(vectors + shift)
    base = FeatureSet.from_vectors(vectors)
    assert abs(frechet_distance(base, shifted) - float(shift @ shift)) < 1e-8
    ok(8, "Frechet matches dense oracle (1e-6); d(P,P)=0; mean-shift closed form (1e-8)")


# -- criterion 9: anchored attention math -------------------------------------------------------------


def test_criterion_9_sap_math():
    rng = np.random.default_rng(9)
    from morphkit.prompting import _softmax_rows

    for _ in range(50):
        weights = _softmax_rows(rng.normal(0, 6, (5, 11)))
        assert np.abs(weights.sum(axis=1) - 1.0).max() < 1e-6

    q = rng.normal(0, 1, (4, 16))
    k = rng.normal(0, 1, (8, 16))
    v = rng.normal(0, 1, (8, 16))
    empty = np.zeros((0, 16))
    anchored = sap_attention(AttentionInputs(q, k, v, empty, empty))
    assert anchored.tobytes() == plain_attention(q, k, v).tobytes()

    out = plain_attention(np.array([[1.0]]), np.array([[1.0], [0.0]]),
                          np.array([[1.0], [0.0]]))
    assert abs(float(out[0, 0]) - math.e / (math.e + 1.0)) < 1e-12
    ok(9, "softmax rows sum to 1 (1e-6); n_a=0 bit-exact; hand case e/(e+1) (1e-12)")


# -- criterion 10: frequency analysis -----------------------------------------------------------------


def test_criterion_10_frequency_analysis():
    assert band_energy(np.full((8, 8), 2.5), "high") == 0.0

    idx = np.arange(8)
    board = (-1.0) ** (idx[:, None] + idx[None, :])
    assert band_energy(board, "high") > 100 * max(band_energy(board, "low"), 1e-12)

    rng = np.random.default_rng(10)
    layout = [StageId(Stage.D, 0), StageId(Stage.D, 1), StageId(Stage.D, 2),
              StageId(Stage.M, 0), StageId(Stage.U, 0), StageId(Stage.U, 1),
              StageId(Stage.U, 2)]
    cache = FeatureCache("synthetic", timesteps=(0, 1))
    for position, sid in enumerate(layout):
        scale = 0.0 if position == 0 else 2.5**position
        for t in (0, 1):
            feature = 1.0 + scale * rng.normal(0, 1, (2, 8, 8))
            cache.put(sid, t, feature.astype(np.float32))
    highs = [p[2] for p in profile(cache, "layer").points]
    assert all(h2 > h1 for h1, h2 in zip(highs, highs[1:]))
    ok(10, "constant map: high band 0; checkerboard high-dominant; ramp profile monotone")


# -- criterion 11: cache serialization ------------------------------------------------------------------


def test_criterion_11_serialization(tmp_path):
    engine = MorphEngine.from_config(MorphConfig(n_inv=6, n_dng=6, toy_seed=42))
    rng = np.random.default_rng(11)
    cache = FeatureCache("A", timesteps=engine.schedule.t_inv)
    engine.invert(rng.uniform(0, 1, (16, 16)), cache)

    path = tmp_path / "roundtrip.chimcache"
    cache.save(path)
    from morphkit.feature_cache import load_cache

    loaded = load_cache(path)
    assert set(loaded.keys()) == set(cache.keys())
    for key in cache.keys():
        assert loaded.get(*key).tobytes() == cache.get(*key).tobytes()

    blob = bytearray(path.read_bytes())
    blob[:8] = b"XXXXXXXX"
    from morphkit.errors import CacheFormatError

    with pytest.raises(CacheFormatError):
        cache_from_bytes(bytes(blob))
    ok(11, "chimcache save/load bit-identical on a toy inversion; bad magic rejected")


# -- criterion 12: VLM response grammar -------------------------------------------------------------------


ACCEPT_FIXTURES = [
    # plain well-formed block
    "Anchor-prompt: a dog on grass\nCaption A: a small dog\nCaption B: a large dog\n",
    # preamble prose
    "Here is my analysis.\nThe images share a subject.\n"
    "Anchor-prompt: two vehicles\nCaption A: a red car\nCaption B: a blue truck\n",
    # epilogue prose
    "Anchor-prompt: a tree\nCaption A: an oak\nCaption B: a pine\n"
    "I hope this helps!\n",
    # leading whitespace before labels
    "  Anchor-prompt: a boat at sea\n  Caption A: a sailboat\n  Caption B: a ferry\n",
    # bracketed placeholders
    "Anchor-prompt: [a bridge]\nCaption A: [a stone bridge]\nCaption B: [a steel bridge]\n",
    # CRLF endings
    "Anchor-prompt: a face\r\nCaption A: a young face\r\nCaption B: an old face\r\n",
    # blank lines between labels
    "Anchor-prompt: a bird\n\nCaption A: a sparrow\n\nCaption B: a crow\n",
    # long captions with punctuation
    "Anchor-prompt: a market scene, crowded\n"
    "Caption A: stalls with fruit; people walking by\n"
    "Caption B: stalls with fabric; people standing around\n",
    # colon inside the value
    "Anchor-prompt: theme: shared geometry\nCaption A: left: a cube\nCaption B: right: a sphere\n",
    # labels out of order (each is located independently)
    "Caption B: a night scene\nAnchor-prompt: a skyline\nCaption A: a day scene\n",
]

REJECT_FIXTURES = [
    "",  # empty response
    "Caption A: a dog\nCaption B: a cat\n",  # missing anchor
    "Anchor-prompt: pets\nCaption B: a cat\n",  # missing caption A
    "Anchor-prompt: pets\nCaption A: a dog\n",  # missing caption B
    "The two images both show animals outdoors.\n",  # no labels at all
    "anchor-prompt: pets\ncaption a: a dog\ncaption b: a cat\n",  # wrong case
    "Anchor prompt: pets\nCaption A: a dog\nCaption B: a cat\n",  # missing hyphen
    "Anchor-prompt: pets\n",  # anchor only
    "see the Anchor-prompt: inline mention\nCaption A: a\nCaption B: b\n",  # not line-anchored
    "Anchor-prompt pets\nCaption A a dog\nCaption B a cat\n",  # missing colons
]


def test_criterion_12_parser_grammar():
    from morphkit.errors import VlmParseError

    assert len(ACCEPT_FIXTURES) + len(REJECT_FIXTURES) == 20
    for text in ACCEPT_FIXTURES:
        triplet = parse_vlm_response(text)
        assert triplet.anchor and triplet.caption_a and triplet.caption_b
    for text in REJECT_FIXTURES:
        with pytest.raises(VlmParseError):
            parse_vlm_response(text)
    ok(12, "20-case fixture set: 10 accepted, 10 rejected")
