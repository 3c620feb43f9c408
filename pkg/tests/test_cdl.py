import math

import numpy as np
import pytest

from rissense.cdl import (PgdConfig, PhdConfig, LocationEstimate,
                          _level_candidates, bearing_direction, cdl,
                          coarse_angles, intersect_lines, pgd_gradient,
                          pgd_loss, pgd_refine, phd_refine,
                          relative_phase_transform)
from rissense.channel import SceneConfig, draw_scene, synthesize_channel
from rissense.dictionary import build_fsprd
from rissense.geometry import ArrayGeometry, SubcarrierGrid, near_response
from rissense.sounding import assemble_frame, receive

GRID = SubcarrierGrid(0.1e12, 10e9, 64)
BS = ArrayGeometry(64, GRID.center_wavelength / 2, math.pi / 4,
                   (-10 * math.sqrt(2), 0.0))


def desk_scene(ue_xy, seed=3):
    cfg = SceneConfig(n_bs=64, n_ris=64, clusters_per_link=0, ue_xy=ue_xy)
    return draw_scene(cfg, seed)


def golden_minimize(fun, lo, hi, tol=1e-12):
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def steered_pilots(w_bar, array, theta, r, gains):
    freqs = np.asarray(GRID.frequencies)
    b = near_response(array, freqs, theta, r)
    return gains[:, None] * (b @ w_bar.T)


# ---------------------------------------------------------------- geometry


def test_coarse_angles_roundtrip():
    scene = desk_scene((5.96, -10.1))
    d_bu = build_fsprd(scene.bs, GRID, 4, 2)
    d_ru = build_fsprd(scene.ris, GRID, 4, 2)
    for i, j in [(1, 4), (40, 500), (512, 37)]:
        got = coarse_angles(i, j, d_bu, d_ru)
        assert got == (d_bu.grid_params(i)[0], d_ru.grid_params(j)[0])
        assert got[0] == pytest.approx(
            (2 * math.ceil(i / 4) - 1) / 128.0 - 1.0, abs=1e-15)
    with pytest.raises(IndexError):
        coarse_angles(0, 1, d_bu, d_ru)


def test_intersect_recovers_exact_bearings():
    scene = desk_scene((5.96, -10.1))
    truth = np.array([5.96, -10.1])
    th_b, r_b = scene.bs.bearing_to(truth)
    th_r, r_r = scene.ris.bearing_to(truth)
    (x, y), got_rb, got_rr = intersect_lines(th_b, th_r, scene.bs, scene.ris)
    assert np.hypot(x - truth[0], y - truth[1]) < 1e-9
    assert abs(got_rb - r_b) < 1e-9 and abs(got_rr - r_r) < 1e-9
    assert got_rb ** 2 == pytest.approx((x - scene.bs.reference_xy[0]) ** 2 + y ** 2,
                                        rel=1e-12)


def test_intersect_bisector_symmetry():
    scene = desk_scene((5.96, -10.1))
    (x, y), r_b, r_r = intersect_lines(0.0, 0.0, scene.bs, scene.ris)
    assert abs(x) < 1e-12
    assert y < 0
    assert abs(r_b - r_r) < 1e-12


def test_intersect_parallel_raises():
    scene = desk_scene((5.96, -10.1))
    s = math.sqrt(2) / 2
    with pytest.raises(ValueError, match="parallel"):
        intersect_lines(s, s, scene.bs, scene.ris)


def test_intersect_behind_anchor_raises():
    scene = desk_scene((5.96, -10.1))
    theta_ru = math.sin(math.pi / 4 + math.atan(0.5))
    with pytest.raises(ValueError, match="behind"):
        intersect_lines(0.0, theta_ru, scene.bs, scene.ris)


# ------------------------------------------------------------ phase ratio


def test_relative_phase_transform_properties():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((16, 8)) + 1j * rng.standard_normal((16, 8))
    y[:, 0] += 3.0  # keep the reference row well away from zero
    out = relative_phase_transform(y)
    assert np.array_equal(out[:, 0], y[:, 0])
    for i in range(1, 8):
        assert np.linalg.norm(out[:, i]) == pytest.approx(
            np.linalg.norm(y[:, i]), rel=1e-12)
    # a per-subcarrier common phase (e.g. the path's total-distance term)
    # cancels in every ratio row
    phases = np.exp(-1j * rng.uniform(0, 2 * np.pi, 16))
    out2 = relative_phase_transform(y * phases[:, None])
    assert np.allclose(out2[:, 1:], out[:, 1:], rtol=1e-12)


def test_relative_phase_transform_guard():
    y = np.ones((8, 4), dtype=complex)
    y[3, 0] = 1e-16
    with pytest.raises(ValueError, match="subcarrier 3"):
        relative_phase_transform(y)


# ------------------------------------------------------------------- PGD


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    w_bar = rng.standard_normal((48, 64)) + 1j * rng.standard_normal((48, 64))
    y = rng.standard_normal((64, 48)) + 1j * rng.standard_normal((64, 48))
    y /= np.linalg.norm(y)
    h = 1e-6
    worst = 0.0
    for trial in range(20):
        theta = rng.uniform(-0.9, 0.9)
        r = rng.uniform(5.0, 50.0)
        gains = None
        if trial % 4 == 0:
            gains = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        _, grad = pgd_gradient(y, w_bar, BS, GRID, theta, r, gains)
        plus = pgd_loss(y, w_bar, BS, GRID, theta + h, r, gains)
        minus = pgd_loss(y, w_bar, BS, GRID, theta - h, r, gains)
        fd = (plus - minus) / (2 * h)
        worst = max(worst, abs(fd - grad) / max(abs(grad), 1e-12))
    assert worst < 1e-5


def test_pgd_refine_one_grid_step_offset():
    rng = np.random.default_rng(7)
    theta_true, r_true = 0.2931, 18.4
    gains = (0.5 + rng.random(64)) * np.exp(1j * rng.uniform(0, 2 * np.pi, 64))
    w_bar = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    y = steered_pilots(w_bar, BS, theta_true, r_true, gains)
    theta0 = theta_true + 1.0 / 128.0
    theta_hat, info = pgd_refine(y, w_bar, BS, GRID, theta0, r_true)
    assert abs(theta_hat - theta_true) < 1e-6
    oracle = golden_minimize(
        lambda t: pgd_loss(y, w_bar, BS, GRID, t, r_true),
        theta0 - 2.0 / 128.0, theta0 + 2.0 / 128.0)
    assert abs(theta_hat - oracle) < 1e-6
    hist = info["loss_history"]
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))
    assert hist[-1] <= pgd_loss(y / np.linalg.norm(y), w_bar, BS, GRID,
                                theta0, r_true) + 1e-15


def test_pgd_minimizer_insensitive_to_range_error():
    rng = np.random.default_rng(19)
    theta_true, r_true = -0.1412, 22.0
    gains = np.exp(1j * rng.uniform(0, 2 * np.pi, 64))
    w_bar = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    y = steered_pilots(w_bar, BS, theta_true, r_true, gains)
    for r_used in (0.8 * r_true, 1.2 * r_true):
        minimizer = golden_minimize(
            lambda t: pgd_loss(y, w_bar, BS, GRID, t, r_used),
            theta_true - 2.0 / 128.0, theta_true + 2.0 / 128.0)
        assert abs(minimizer - theta_true) < 1e-3


def test_pgd_stationary_start_stays_put():
    rng = np.random.default_rng(3)
    theta_true, r_true = 0.05, 30.0
    gains = np.exp(1j * rng.uniform(0, 2 * np.pi, 64))
    w_bar = rng.standard_normal((32, 64)) + 1j * rng.standard_normal((32, 64))
    y = steered_pilots(w_bar, BS, theta_true, r_true, gains)
    theta_hat, info = pgd_refine(y, w_bar, BS, GRID, theta_true, r_true)
    assert abs(theta_hat - theta_true) < 1e-5
    assert info["pgd_final_step"] < PgdConfig().stop_step


def test_pgd_zero_observation():
    y = np.zeros((64, 8), dtype=complex)
    w_bar = np.zeros((8, 64), dtype=complex)
    theta_hat, info = pgd_refine(y, w_bar, BS, GRID, 0.25, 10.0)
    assert theta_hat == 0.25
    assert info["pgd_iters"] == 0


# ------------------------------------------------------------------- PHD


def test_level_candidates_layout():
    cands = _level_candidates(0.2, 1, 128, 41)
    assert cands.size == 41
    assert cands[0] == pytest.approx(0.2 - 1.0 / 128.0, abs=1e-15)
    assert cands[-1] == pytest.approx(0.2 + 1.0 / 128.0, abs=1e-15)
    assert cands[20] == pytest.approx(0.2, abs=1e-15)
    level2 = _level_candidates(0.2, 2, 128, 41)
    assert (level2[-1] - level2[0]) == pytest.approx(
        (cands[-1] - cands[0]) / 20.0, rel=1e-12)


def test_phd_level_count_matches_span_formula():
    rng = np.random.default_rng(1)
    ris = ArrayGeometry(64, GRID.center_wavelength / 2, math.pi / 4,
                        (10 * math.sqrt(2), 0.0), mirrored=True)
    w_ris = [rng.standard_normal((8, 64)) + 1j * rng.standard_normal((8, 64))
             for _ in range(64)]
    y = rng.standard_normal((64, 8)) + 1j * rng.standard_normal((64, 8))
    _, info512 = phd_refine(y, w_ris, ris, GRID, 0.0, 13.0, 512)
    assert info512["phd_levels"] == 2
    _, info128 = phd_refine(y, w_ris, ris, GRID, 0.0, 13.0, 128)
    assert info128["phd_levels"] == 3


def _phd_score(w_ris, y, array, theta, r0):
    freqs = np.asarray(GRID.frequencies)
    b = near_response(array, freqs, theta, r0)
    proj = np.einsum("mqn,mn->mq", np.stack(w_ris), b)
    inner = np.einsum("mq,mq->m", proj.conj(), y)
    return float(np.sum(inner.real ** 2 + inner.imag ** 2))


def test_phd_recovers_off_grid_angle_unitary_combiner():
    rng = np.random.default_rng(23)
    ris = ArrayGeometry(64, GRID.center_wavelength / 2, math.pi / 4,
                        (10 * math.sqrt(2), 0.0), mirrored=True)
    theta0 = (2 * 57 - 1) / 128.0 - 1.0  # an on-grid angle
    theta_true = theta0 + 0.3 / 128.0    # off-grid, inside the first span
    r0 = 13.0
    gains = np.exp(1j * rng.uniform(0, 2 * np.pi, 64))
    # unitary rows leave the beam pattern symmetric about the true angle
    dft = np.fft.fft(np.eye(64)) / 8.0
    w_ris = [dft for _ in range(64)]
    freqs = np.asarray(GRID.frequencies)
    b = near_response(ris, freqs, theta_true, r0)
    y = np.stack([gains[m] * (w_ris[m] @ b[m]) for m in range(64)])
    theta_hat, info = phd_refine(y, w_ris, ris, GRID, theta0, r0, 128)
    assert abs(theta_hat - theta_true) < PhdConfig().stop_span
    assert abs(theta_hat - theta0) <= 1.0 / 128.0 + 1e-12
    assert not info["phd_clamped"]


def test_phd_matches_dense_scan_with_random_combiner():
    # a wide random projection tilts the score surface slightly, so the
    # ladder is held to its own argmax, not to the generating angle
    rng = np.random.default_rng(23)
    ris = ArrayGeometry(64, GRID.center_wavelength / 2, math.pi / 4,
                        (10 * math.sqrt(2), 0.0), mirrored=True)
    theta0 = (2 * 57 - 1) / 128.0 - 1.0
    theta_true = theta0 + 0.3 / 128.0
    r0 = 13.0
    gains = np.exp(1j * rng.uniform(0, 2 * np.pi, 64))
    w_ris = [rng.standard_normal((24, 64)) + 1j * rng.standard_normal((24, 64))
             for _ in range(64)]
    freqs = np.asarray(GRID.frequencies)
    b = near_response(ris, freqs, theta_true, r0)
    y = np.stack([gains[m] * (w_ris[m] @ b[m]) for m in range(64)])
    theta_hat, _ = phd_refine(y, w_ris, ris, GRID, theta0, r0, 128)
    assert abs(theta_hat - theta_true) < 5e-4
    scan = theta_hat + np.linspace(-4e-4, 4e-4, 401)
    scores = np.array([_phd_score(w_ris, y, ris, t, r0) for t in scan])
    dense_best = scan[int(np.argmax(scores))]
    last_spacing = (2.0 / (128.0 * 20.0 ** 2)) / 40.0
    assert abs(theta_hat - dense_best) < 2 * last_spacing + 2e-6


def test_phd_clamps_near_edge():
    rng = np.random.default_rng(5)
    ris = ArrayGeometry(64, GRID.center_wavelength / 2, math.pi / 4,
                        (10 * math.sqrt(2), 0.0), mirrored=True)
    w_ris = [rng.standard_normal((8, 64)) + 1j * rng.standard_normal((8, 64))
             for _ in range(64)]
    y = rng.standard_normal((64, 8)) + 1j * rng.standard_normal((64, 8))
    theta_hat, info = phd_refine(y, w_ris, ris, GRID, 0.9999, 13.0, 128)
    assert info["phd_clamped"]
    assert -1.0 < theta_hat < 1.0


# ------------------------------------------------------------------ E2E


@pytest.fixture(scope="module")
def on_grid_setup():
    base = desk_scene((0.0, -10.0))
    th_bu = (2 * 81 - 1) / 128.0 - 1.0
    th_ru = (2 * 57 - 1) / 128.0 - 1.0
    ue, _, _ = intersect_lines(th_bu, th_ru, base.bs, base.ris)
    scene = desk_scene(ue)
    h_bu = synthesize_channel(scene, scene.bs, GRID, 11)
    h_ru = synthesize_channel(scene, scene.ris, GRID, 12)
    frame = assemble_frame(scene, GRID, 16, 32, 4, 30.0, rng_seed=13,
                           nsd_dbm_hz=float("-inf"))
    obs = receive((h_bu, h_ru), frame, 14)
    d_bu = build_fsprd(scene.bs, GRID, 10, 2)
    d_ru = build_fsprd(scene.ris, GRID, 10, 2)
    return scene, ue, obs, d_bu, d_ru


def test_cdl_noise_free_on_grid(on_grid_setup):
    # the refined fix is limited by the projected-correlation surface of
    # the reflected link (rank-32 binary-pattern measurements plus the
    # direct-path term riding on the surface-on pilots), measured at
    # ~5 cm here; the coarse stage must be exact for an on-grid user
    scene, ue, obs, d_bu, d_ru = on_grid_setup
    est = cdl(obs, d_bu, d_ru)
    assert est.stage == "refined"
    assert not est.diagnostics["fallback"]
    cx, cy = est.diagnostics["coarse_ue_xy"]
    assert math.hypot(cx - ue[0], cy - ue[1]) < 1e-9
    assert abs(est.theta_bu - ((2 * 81 - 1) / 128.0 - 1.0)) < 3e-4
    assert abs(est.theta_ru - ((2 * 57 - 1) / 128.0 - 1.0)) < 8e-3
    err = math.hypot(est.ue_xy[0] - ue[0], est.ue_xy[1] - ue[1])
    assert err < 0.1
    assert est.diagnostics["phd_levels"] == 3
    # the on-grid seed is already the exact optimum of the descent loss,
    # so at most one degenerate step gets accepted before stopping
    assert est.diagnostics["pgd_iters"] <= 1
    assert est.r_bu > 0 and est.r_ru > 0


def test_cdl_refined_beats_coarse_noise_free():
    # fixed near user, deterministic channels, only the sounding draw
    # varies; the coarse fix carries the grid quantization (~14 cm here)
    # and every refinement should land well inside it
    scene = draw_scene(SceneConfig(n_bs=64, n_ris=64, clusters_per_link=0), 3)
    d_bu = build_fsprd(scene.bs, GRID, 10, 2)
    d_ru = build_fsprd(scene.ris, GRID, 10, 2)
    truth = np.asarray(scene.ue_xy)
    coarse_errs, refined_errs = [], []
    for seed in range(8):
        h_bu = synthesize_channel(scene, scene.bs, GRID, 100 + seed)
        h_ru = synthesize_channel(scene, scene.ris, GRID, 200 + seed)
        frame = assemble_frame(scene, GRID, 16, 32, 4, 30.0,
                               rng_seed=300 + seed,
                               nsd_dbm_hz=float("-inf"))
        obs = receive((h_bu, h_ru), frame, 400 + seed)
        est = cdl(obs, d_bu, d_ru)
        assert est.stage == "refined"
        refined_errs.append(math.hypot(est.ue_xy[0] - truth[0],
                                       est.ue_xy[1] - truth[1]))
        cx, cy = est.diagnostics["coarse_ue_xy"]
        coarse_errs.append(math.hypot(cx - truth[0], cy - truth[1]))
    coarse_errs = np.array(coarse_errs)
    refined_errs = np.array(refined_errs)
    assert np.all(refined_errs <= coarse_errs + 1e-9)
    assert (math.sqrt(np.mean(refined_errs ** 2))
            < math.sqrt(np.mean(coarse_errs ** 2)) / 3.0)


def test_cdl_refinement_failure_falls_back(on_grid_setup):
    # non-finite fixed gains blow up the descent loss while leaving the
    # coarse correlation untouched, so the coarse fix must survive
    scene, ue, obs, d_bu, d_ru = on_grid_setup
    bad_gains = np.full(obs.y_nris.shape[0], np.nan, dtype=complex)
    est = cdl(obs, d_bu, d_ru, gains=bad_gains)
    assert est.stage == "coarse"
    assert est.diagnostics["fallback"]
    assert "non-finite" in est.diagnostics["fallback_reason"]
    cx, cy = est.ue_xy
    assert math.hypot(cx - ue[0], cy - ue[1]) < 1e-9


def test_location_estimate_validation():
    with pytest.raises(ValueError):
        LocationEstimate((0, 0), 1.5, 0.0, 1.0, 1.0, "coarse")
    with pytest.raises(ValueError):
        LocationEstimate((0, 0), 0.1, 0.0, -1.0, 1.0, "coarse")
    with pytest.raises(ValueError):
        LocationEstimate((0, 0), 0.1, 0.0, 1.0, 1.0, "banana")


def test_config_validation():
    with pytest.raises(ValueError):
        PgdConfig(max_iters=0)
    with pytest.raises(ValueError):
        PgdConfig(armijo=(1e-4, 1.5, 1e-2))
    with pytest.raises(ValueError):
        PhdConfig(num_points=4)
    with pytest.raises(ValueError):
        PhdConfig(stop_span=0.0)


def test_bearing_direction_matches_bearing_to():
    scene = desk_scene((5.96, -10.1))
    point = np.array([5.96, -10.1])
    for anchor in (scene.bs, scene.ris):
        theta, r = anchor.bearing_to(point)
        direction, _ = bearing_direction(anchor, theta)
        recon = np.asarray(anchor.reference_xy) + r * direction
        assert np.allclose(recon, point, atol=1e-9)
