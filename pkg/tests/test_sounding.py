import math

import numpy as np
import pytest

from rissense.channel import SceneConfig, draw_scene, synthesize_channel
from rissense.dictionary import build_fsprd, build_ptm
from rissense.geometry import SubcarrierGrid, near_response
from rissense.sounding import (
    PilotObservation,
    SoundingFrame,
    assemble_frame,
    build_ris_phases,
    build_w_nris,
    build_w_ris,
    dbm_to_watts,
    equivalent_matrix,
    noise_power_linear,
    pilot_amplitude,
    receive,
    selector_output_indices,
)

GRID = SubcarrierGrid(0.1e12, 10e9, 16)
SCENE = draw_scene(SceneConfig(n_bs=32, n_ris=32), 5)


def frame_for(scene, seed=0, **kw):
    kw.setdefault("p_nris", 4)
    kw.setdefault("p_ris", 4)
    kw.setdefault("n_rf", 2)
    kw.setdefault("p_tx_dbm", 30.0)
    return assemble_frame(scene, GRID, rng_seed=seed, **kw)


def test_power_conversions():
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert noise_power_linear(10e9, 16) == pytest.approx(
        10 ** ((-174 - 30) / 10) * 10e9 / 16)
    assert pilot_amplitude(30.0, 16) == pytest.approx(0.25)


def test_w_nris_constant_modulus():
    w = build_w_nris(3, 17, 4, 0)
    assert len(w) == 3 and w[0].shape == (4, 17)
    for mat in w:
        np.testing.assert_allclose(np.abs(mat), 0.5, rtol=0, atol=1e-12)
    again = build_w_nris(3, 17, 4, 0)
    assert all(np.array_equal(a, b) for a, b in zip(w, again))


def test_w_nris_selector_row_odd():
    w = build_w_nris(2, 5, 4, 1, pgd_row=True)
    expect = np.zeros(5)
    expect[2] = 0.5
    np.testing.assert_array_equal(w[0][0], expect)
    # remaining rows untouched
    np.testing.assert_allclose(np.abs(w[0][1:]), 0.5, rtol=0, atol=1e-12)
    assert selector_output_indices(5) == (2,)


def test_w_nris_selector_row_even():
    w = build_w_nris(1, 4, 4, 1, pgd_row=True)
    expect = np.zeros(4)
    expect[1] = expect[2] = 0.5
    np.testing.assert_array_equal(w[0][0], expect)
    assert selector_output_indices(4) == (1, 2)


def test_w_ris_center_mode_rows_identical():
    w = build_w_ris(3, SCENE.bs, SCENE.ris, GRID, 2, mode="center")
    first = w[0][0]
    for mat in w:
        for row in mat:
            np.testing.assert_array_equal(row, first)
    theta, r = SCENE.bs.bearing_to(SCENE.ris.reference_xy)
    expect = math.sqrt(32 / 2) * np.conj(near_response(SCENE.bs, GRID.center_freq, theta, r))
    np.testing.assert_allclose(first, expect, rtol=0, atol=0)


def test_w_ris_spread_mode_frequencies():
    n_rf, p = 2, 4
    w = build_w_ris(p, SCENE.bs, SCENE.ris, GRID, n_rf, mode="spread")
    theta, r = SCENE.bs.bearing_to(SCENE.ris.reference_xy)
    # last row of the last slot must sit exactly at the upper band edge
    f_top = GRID.center_freq + GRID.bandwidth / 2
    expect = math.sqrt(32 / 2) * np.conj(near_response(SCENE.bs, f_top, theta, r))
    np.testing.assert_allclose(w[-1][-1], expect, rtol=1e-12, atol=0)
    # and all rows are pairwise distinct
    rows = np.vstack(w)
    assert np.unique(rows.round(12), axis=0).shape[0] == p * n_rf


def test_w_ris_mode_validation():
    with pytest.raises(ValueError):
        build_w_ris(2, SCENE.bs, SCENE.ris, GRID, 2, mode="wat")


def test_ris_phase_schedule():
    phases = build_ris_phases(8, 1250, 3)
    flat = np.concatenate(phases)
    assert set(np.unique(flat)) == {-1.0, 1.0}
    assert abs(flat.mean()) < 0.05
    assert all(np.array_equal(a, b)
               for a, b in zip(phases, build_ris_phases(8, 1250, 3)))


def test_frame_validate_passes():
    fr = frame_for(SCENE, seed=2)
    assert fr.validate()
    assert fr.stacked_nris.shape == (8, 32)
    assert fr.stacked_leak.shape == (8, 32)
    assert fr.stacked_ris(0).shape == (8, 32)


def test_frame_validate_catches_bad_phase():
    fr = frame_for(SCENE, seed=2)
    fr.ris_phases = tuple(p.copy() for p in fr.ris_phases)
    fr.ris_phases[0][3] = 0.5
    with pytest.raises(AssertionError):
        fr.validate()


def test_receive_noise_free_selector():
    # single slot, single RF chain: the selector row reads the middle element
    scene = draw_scene(SceneConfig(n_bs=33, n_ris=32), 1)
    fr = assemble_frame(scene, GRID, p_nris=1, p_ris=1, n_rf=1, p_tx_dbm=30.0,
                        rng_seed=0, pgd_row=True)
    fr.noise_power = 0.0
    h_bu = synthesize_channel(scene, scene.bs, GRID, 2)
    h_ru = synthesize_channel(scene, scene.ris, GRID, 3)
    obs = receive((h_bu, h_ru), fr, 99)
    for m in (0, 7, 15):
        assert obs.y_nris[m, 0] == pytest.approx(
            fr.pilot_amp * h_bu.per_subcarrier[m, 16], rel=1e-12)


def test_receive_linear_in_pilot_amp():
    fr = frame_for(SCENE, seed=4)
    fr.noise_power = 0.0
    h_bu = synthesize_channel(SCENE, SCENE.bs, GRID, 2)
    h_ru = synthesize_channel(SCENE, SCENE.ris, GRID, 3)
    obs1 = receive((h_bu, h_ru), fr, 0)
    fr2 = frame_for(SCENE, seed=4)
    fr2.noise_power = 0.0
    fr2.pilot_amp = 2.0 * fr.pilot_amp
    obs2 = receive((h_bu, h_ru), fr2, 0)
    np.testing.assert_allclose(obs2.y_nris, 2.0 * obs1.y_nris, rtol=1e-12)
    np.testing.assert_allclose(obs2.y_ris, 2.0 * obs1.y_ris, rtol=1e-12)


def test_receive_reflected_channel_isolation():
    # zero reflected channel: the surface-on stack reduces to the leak term
    fr = frame_for(SCENE, seed=4)
    fr.noise_power = 0.0
    h_bu = synthesize_channel(SCENE, SCENE.bs, GRID, 2)
    zero_ru = np.zeros((16, 32), dtype=complex)
    obs = receive((h_bu, zero_ru), fr, 0)
    expect = fr.pilot_amp * (h_bu.per_subcarrier @ fr.stacked_leak.T)
    np.testing.assert_allclose(obs.y_ris, expect, rtol=1e-12, atol=1e-30)


def test_receive_additive_in_channel():
    fr = frame_for(SCENE, seed=4)
    fr.noise_power = 0.0
    h1 = synthesize_channel(SCENE, SCENE.bs, GRID, 2).per_subcarrier
    h2 = synthesize_channel(SCENE, SCENE.bs, GRID, 7).per_subcarrier
    ru = synthesize_channel(SCENE, SCENE.ris, GRID, 3).per_subcarrier
    obs_sum = receive((h1 + h2, ru), fr, 0)
    obs_1 = receive((h1, ru), fr, 0)
    obs_2 = receive((h2, np.zeros_like(ru)), fr, 0)
    np.testing.assert_allclose(obs_sum.y_nris, obs_1.y_nris + obs_2.y_nris, rtol=1e-10)
    np.testing.assert_allclose(obs_sum.y_ris, obs_1.y_ris + obs_2.y_ris, rtol=1e-10)


def test_receive_dimension_mismatch():
    fr = frame_for(SCENE, seed=4)
    bad = np.zeros((16, 31), dtype=complex)
    good = np.zeros((16, 32), dtype=complex)
    with pytest.raises(ValueError):
        receive((bad, good), fr, 0)


def test_noise_coloring_variance():
    fr = frame_for(SCENE, seed=8)
    h0 = np.zeros((16, 32), dtype=complex)
    rows = np.vstack([fr.stacked_nris, fr.stacked_leak])
    draws = []
    for seed in range(40):
        obs = receive((h0, h0), fr, seed)
        draws.append(np.hstack([obs.y_nris, obs.y_ris]))
    stacked = np.concatenate(draws, axis=0)  # 640 rows of samples per column
    var = np.mean(np.abs(stacked) ** 2, axis=0)
    expect = fr.noise_power * np.linalg.norm(rows, axis=1) ** 2
    assert np.all(np.abs(var / expect - 1.0) < 0.1)


def test_equivalent_matrix_shapes_and_identity():
    fs = build_fsprd(SCENE.bs, GRID, 3, 1)
    fr = frame_for(SCENE, seed=4)
    tilde = equivalent_matrix(fr, fs, link="direct")
    assert len(tilde) == 16 and tilde[0].shape == (8, fs.num_columns)
    col = fr.stacked_nris @ fs.matrix(5)[:, 17]
    np.testing.assert_allclose(tilde[5][:, 17], col, rtol=1e-12)
    # identity frame: the sensing matrix is the dictionary itself
    eye_frame = SoundingFrame((np.eye(32, dtype=complex),), (), (), None, 1.0, 0.0)
    ident = equivalent_matrix(eye_frame, fs, link="direct")
    np.testing.assert_array_equal(ident[3], fs.matrix(3))


def test_equivalent_matrix_reflected_and_flat():
    fr = frame_for(SCENE, seed=4)
    fs_ris = build_fsprd(SCENE.ris, GRID, 3, 1)
    tilde = equivalent_matrix(fr, fs_ris, link="reflected")
    assert len(tilde) == 16 and tilde[0].shape == (8, fs_ris.num_columns)
    np.testing.assert_allclose(tilde[2], fr.stacked_ris(2) @ fs_ris.matrix(2),
                               rtol=0, atol=0)
    ptm = build_ptm(SCENE.bs, GRID, 3, 1)
    flat = equivalent_matrix(fr, ptm, link="direct")
    assert flat[0] is flat[15]  # one shared product across the band
    with pytest.raises(ValueError):
        equivalent_matrix(fr, fs_ris, link="direct")
