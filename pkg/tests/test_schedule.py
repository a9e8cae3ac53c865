import numpy as np
import pytest

from morphkit.schedule import (
    IdmMap,
    build_schedule,
    idm_map,
    round_half_away_from_zero,
)


def test_default_schedule_shape():
    sched = build_schedule(t_max=1000, n_inv=50, n_dng=50)
    assert len(sched.t_inv) == 50
    assert len(sched.t_dng) == 50
    assert sched.t_dng == tuple(reversed(sched.t_inv))
    assert sched.t_inv[0] == 0 and sched.t_inv[-1] == 999
    assert all(0 <= t < 1000 for t in sched.t_inv)
    assert all(t2 > t1 for t1, t2 in zip(sched.t_inv, sched.t_inv[1:]))


def test_alpha_bar_monotone_decreasing():
    sched = build_schedule()
    assert sched.alpha_bar[0] > 0.999
    assert sched.alpha_bar[-1] < 0.01
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar <= 1))


def test_single_inversion_step():
    sched = build_schedule(n_inv=1, n_dng=1)
    assert sched.t_inv == (0,)


def test_alpha_bar_at():
    sched = build_schedule()
    assert sched.alpha_bar_at(None) == 1.0
    assert sched.alpha_bar_at(0) == pytest.approx(1.0 - 0.00085)
    with pytest.raises(ValueError):
        sched.alpha_bar_at(1000)


def test_build_schedule_validation():
    with pytest.raises(ValueError):
        build_schedule(beta_start=0.0)
    with pytest.raises(ValueError):
        build_schedule(beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        build_schedule(beta_end=1.0)
    with pytest.raises(ValueError):
        build_schedule(t_max=10, n_inv=11)


def test_rounding_half_away_from_zero():
    assert round_half_away_from_zero(0.5) == 1
    assert round_half_away_from_zero(1.5) == 2
    assert round_half_away_from_zero(2.5) == 3
    assert round_half_away_from_zero(2.4) == 2
    assert round_half_away_from_zero(-0.5) == -1


# -- the timestep mapping law ---------------------------------------------------


def test_idm_identity_when_counts_match():
    sched = build_schedule(n_inv=50, n_dng=50)
    idm = sched.idm()
    for tau in range(50):
        assert idm_map(tau, idm) == sched.t_inv[tau]


def test_idm_documented_case():
    # N_dng=50, N_inv=25, tau=25: index round(25*24/49) = round(12.2449) = 12
    sched = build_schedule(n_inv=25, n_dng=50)
    assert 25 * 24 / 49 == pytest.approx(12.2449, abs=1e-4)
    assert idm_map(25, sched.idm()) == sched.t_inv[12]


def test_idm_endpoints():
    for n_inv, n_dng in ((5, 9), (9, 5), (2, 64), (64, 2)):
        sched = build_schedule(n_inv=n_inv, n_dng=n_dng)
        idm = sched.idm()
        assert idm_map(0, idm) == sched.t_inv[0]
        assert idm_map(n_dng - 1, idm) == sched.t_inv[n_inv - 1]


def test_idm_monotone_sampled():
    for n_inv, n_dng in ((3, 17), (17, 3), (13, 13), (31, 8)):
        idm = IdmMap(n_inv=n_inv, n_dng=n_dng,
                     t_inv=tuple(range(n_inv)))
        values = [idm_map(tau, idm) for tau in range(n_dng)]
        assert values == sorted(values)


def test_idm_reaches_every_index_when_dng_dominates():
    for n_inv, n_dng in ((4, 8), (7, 21), (16, 64)):
        idm = IdmMap(n_inv=n_inv, n_dng=n_dng, t_inv=tuple(range(n_inv)))
        hit = {idm_map(tau, idm) for tau in range(n_dng)}
        assert hit == set(range(n_inv))


def test_idm_single_denoise_step_convention():
    idm = IdmMap(n_inv=5, n_dng=1, t_inv=(0, 10, 20, 30, 40))
    assert idm_map(0, idm) == 0


def test_idm_rejects_out_of_range():
    idm = IdmMap(n_inv=5, n_dng=5, t_inv=(0, 1, 2, 3, 4))
    with pytest.raises(ValueError):
        idm_map(-1, idm)
    with pytest.raises(ValueError):
        idm_map(5, idm)
