import math

import numpy as np
import pytest

from rissense.channel import (
    SceneConfig,
    draw_scene,
    absorption_amplitude,
    los_gain,
    synthesize_channel,
    synthesize_bs_ris_channel,
    reconstruct,
    in_sector,
    effective_surface_area,
)
from rissense.geometry import SubcarrierGrid, near_steering

GRID = SubcarrierGrid(0.1e12, 10e9, 64)
DESK = SceneConfig(n_bs=64, n_ris=64)


def test_draw_scene_deterministic():
    a = draw_scene(DESK, 42)
    b = draw_scene(DESK, 42)
    assert a == b
    c = draw_scene(DESK, 43)
    assert a.scatterers_bs != c.scatterers_bs


def test_draw_scene_fixed_coordinates():
    sc = draw_scene(DESK, 0)
    assert sc.ue_xy == (5.96, -10.1)
    assert sc.bs.reference_xy == (-10 * math.sqrt(2), 0.0)
    assert sc.ris.reference_xy == (10 * math.sqrt(2), 0.0)


def test_draw_scene_sector_support():
    cfg = SceneConfig(n_bs=8, n_ris=8, ue_xy=None)
    for seed in range(1000):
        sc = draw_scene(cfg, seed)
        assert in_sector(sc.ue_xy, sc.sector_radius)
        for p in sc.scatterers_bs + sc.scatterers_ris:
            assert in_sector(p, sc.sector_radius)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(bs_xy=(0.0, 0.0), ris_xy=(0.0, 0.0))
    with pytest.raises(ValueError):
        SceneConfig(paths_per_cluster=0)
    with pytest.raises(ValueError):
        SceneConfig(sector_radius=-1.0)


def test_los_gain_inverse_distance_law():
    # pure Friis: halving rule is exact once absorption is switched off
    g1 = los_gain(GRID, 3, 10.0, absorption_db_per_km=0.0)
    g2 = los_gain(GRID, 3, 20.0, absorption_db_per_km=0.0)
    assert abs(g1) / abs(g2) == pytest.approx(2.0, rel=1e-12)


def test_absorption_factor_over_1km():
    assert absorption_amplitude(1000.0) == pytest.approx(10 ** (-0.45 / 20), rel=1e-12)
    withabs = abs(los_gain(GRID, 0, 1000.0))
    noabs = abs(los_gain(GRID, 0, 1000.0, absorption_db_per_km=0.0))
    assert withabs / noabs == pytest.approx(10 ** (-0.45 / 20), rel=1e-12)


def test_los_gain_reflected_symmetry():
    kw = dict(reflected=True, surface_area=0.1472)
    a = los_gain(GRID, 5, 12.0, second_distance=25.0, **kw)
    b = los_gain(GRID, 5, 25.0, second_distance=12.0, **kw)
    assert abs(a) == pytest.approx(abs(b), rel=1e-14)


def test_los_gain_phase_and_errors():
    g = los_gain(GRID, 0, 10.0, phase=1.3)
    assert np.angle(g) == pytest.approx(1.3)
    with pytest.raises(ValueError):
        los_gain(GRID, 0, -1.0)
    with pytest.raises(ValueError):
        los_gain(GRID, 0, 10.0, reflected=True)  # missing second hop


def test_path_count_and_flags():
    sc = draw_scene(DESK, 1)
    ch = synthesize_channel(sc, sc.bs, GRID, 11)
    assert len(ch.paths) == 1 + 3 * 6
    assert ch.paths[0].is_los and ch.paths[0].cluster_id == 0
    assert ch.paths[0].r_total == ch.paths[0].r_last_hop
    for p in ch.paths[1:]:
        assert not p.is_los
        assert p.r_total > p.r_last_hop
        assert len(p.gains) == GRID.num_subcarriers
        assert np.all(np.isfinite(p.gains)) and np.all(np.abs(p.gains) > 0)
    assert {p.cluster_id for p in ch.paths[1:]} == {1, 2, 3}


def test_channel_deterministic():
    sc = draw_scene(DESK, 2)
    a = synthesize_channel(sc, sc.ris, GRID, 5)
    b = synthesize_channel(sc, sc.ris, GRID, 5)
    np.testing.assert_array_equal(a.per_subcarrier, b.per_subcarrier)


def test_reconstruction_identity():
    sc = draw_scene(DESK, 3)
    for arr in (sc.bs, sc.ris):
        ch = synthesize_channel(sc, arr, GRID, 5)
        rec = reconstruct(ch, arr, GRID)
        err = np.linalg.norm(rec - ch.per_subcarrier) / np.linalg.norm(ch.per_subcarrier)
        assert err <= 1e-10


def test_zero_scatterer_reduction():
    cfg = SceneConfig(n_bs=64, n_ris=64, clusters_per_link=0)
    sc = draw_scene(cfg, 4)
    ch = synthesize_channel(sc, sc.bs, GRID, 9)
    assert len(ch.paths) == 1
    p = ch.paths[0]
    # magnitudes are the direct Friis form on every subcarrier
    for m in (0, 31, 63):
        assert abs(p.gains[m]) == pytest.approx(abs(los_gain(GRID, m, p.r_total)), rel=1e-12)
    # and the per-subcarrier vector is exactly gain * travel phase * steering
    for m in (0, 63):
        steer = near_steering(sc.bs, GRID, m, p.theta, p.r_last_hop)
        travel = np.exp(-2j * np.pi * GRID.frequency(m) / 299792458.0 * p.r_total)
        np.testing.assert_allclose(ch.per_subcarrier[m], p.gains[m] * travel * steer,
                                   rtol=1e-9, atol=0)


def test_los_norm_independent_of_direction():
    # unit-norm steering times a scalar gain: ||h[m]|| must not depend on theta
    cfg = SceneConfig(n_bs=64, n_ris=64, clusters_per_link=0)
    norms = []
    for ue in [(5.96, -10.1), (-3.0, -22.45), (9.0, -20.58)]:
        # keep the range identical (22.497 m) while the bearing changes
        r = math.hypot(ue[0] + 10 * math.sqrt(2), ue[1])
        cfg_u = SceneConfig(n_bs=64, n_ris=64, clusters_per_link=0, ue_xy=ue)
        sc = draw_scene(cfg_u, 0)
        ch = synthesize_channel(sc, sc.bs, GRID, 0)
        norms.append(np.linalg.norm(ch.per_subcarrier[0]) * r)
    assert np.ptp(norms) / norms[0] < 1e-3


def test_energy_ordering_los_dominates():
    for seed in (0, 1, 2):
        sc = draw_scene(DESK, seed)
        for arr in (sc.bs, sc.ris):
            ch = synthesize_channel(sc, arr, GRID, seed + 1000)
            p_los = np.abs(ch.paths[0].gains) ** 2
            for p in ch.paths[1:]:
                assert np.all(p_los > np.abs(p.gains) ** 2)


def test_channel_wrong_array_rejected():
    sc = draw_scene(DESK, 0)
    other = draw_scene(SceneConfig(n_bs=32, n_ris=32), 0).bs
    with pytest.raises(ValueError):
        synthesize_channel(sc, other, GRID, 0)


def test_channel_degenerate_ue():
    cfg = SceneConfig(n_bs=8, n_ris=8, ue_xy=(-10 * math.sqrt(2), 0.0))
    sc = draw_scene(cfg, 0)
    with pytest.raises(ValueError):
        synthesize_channel(sc, sc.bs, GRID, 0)


def test_anchor_channel_reciprocity():
    sc = draw_scene(DESK, 0)
    fwd = synthesize_bs_ris_channel(sc.bs, sc.ris, GRID)
    rev = synthesize_bs_ris_channel(sc.ris, sc.bs, GRID)
    assert fwd.shape == (64, 64, 64)
    for m in (0, 40):
        np.testing.assert_array_equal(rev.matrix(m).T, fwd.matrix(m))


def test_anchor_channel_magnitude_monotone():
    sc = draw_scene(DESK, 0)
    fwd = synthesize_bs_ris_channel(sc.bs, sc.ris, GRID)
    mag = np.abs(fwd.matrix(0)).ravel()
    assert np.all(mag > 0)
    order = np.argsort(fwd.distances.ravel())
    # non-increasing along distance (ties between symmetric element pairs)
    assert np.all(np.diff(mag[order]) <= 0)
    assert mag[order][-1] < mag[order][0]


def test_anchor_channel_near_rank_one():
    sc = draw_scene(DESK, 0)
    sv = np.linalg.svd(synthesize_bs_ris_channel(sc.bs, sc.ris, GRID).matrix(0),
                       compute_uv=False)
    assert sv[1] / sv[0] < 0.1


def test_anchor_channel_materialize_matches_lazy():
    sc = draw_scene(SceneConfig(n_bs=16, n_ris=16), 0)
    grid = SubcarrierGrid(0.1e12, 10e9, 4)
    ch = synthesize_bs_ris_channel(sc.bs, sc.ris, grid)
    full = ch.materialize()
    for m in range(4):
        np.testing.assert_array_equal(full[m], ch[m])


def test_effective_surface_area():
    sc = draw_scene(DESK, 0)
    d = sc.ris.spacing
    assert effective_surface_area(sc.ris) == pytest.approx((64 * d) ** 2, rel=1e-14)
