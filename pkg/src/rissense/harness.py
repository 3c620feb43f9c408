"""Monte Carlo harness: experiment configuration, deterministic trial
execution, aggregate metrics, and CSV/JSON result files."""

import dataclasses
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from rissense.cdl import PgdConfig, PhdConfig, cdl
from rissense.channel import SceneConfig, draw_scene, synthesize_channel
from rissense.dictionary import build_fsprd, build_ptm
from rissense.estimation import OmpConfig, genie_ls, gmmv_omp, nmse_db
from rissense.geometry import SPEED_OF_LIGHT, SubcarrierGrid
from rissense.pdl import pdl
from rissense.sounding import assemble_frame, receive

ALL_SCHEMES = ("ce", "cdl", "pdl")
_SWEEP_FIELDS = ("power_dbm", "n_bs", "n_ris", "bandwidth_hz")


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: scene, arrays, grid, sounding budget, algorithm
    knobs, sweep axis, and seeding.  Defaults are the full-scale profile;
    ``desk_profile()`` shrinks them to something a laptop finishes."""

    # scene
    bs_xy: tuple = (-10.0 * math.sqrt(2.0), 0.0)
    ris_xy: tuple = (10.0 * math.sqrt(2.0), 0.0)
    sector_radius: float = 100.0
    ue_mode: str = "fixed"           # "fixed" re-uses ue_xy, "random" redraws
    ue_xy: tuple = (5.96, -10.1)
    clusters_per_link: int = 3
    paths_per_cluster: int = 6
    # arrays
    n_bs: int = 256
    n_ris: int = 256
    n_rf: int = 4
    # grid
    center_freq_hz: float = 0.1e12
    bandwidth_hz: float = 10e9
    num_subcarriers: int = 2048
    decimate_to: int = 64            # estimation/AoA tone count
    # sounding budget (slot counts per phase, per scheme family)
    p_nris_cdl: int = 16
    p_ris_cdl: int = 32
    p_nris_pdl: int = 8
    p_ris_pdl: int = 16
    ris_mode: str = "spread"
    nsd_dbm_hz: float = -174.0
    # estimator knobs (max_iters keeps 1 + n_select*(max_iters-1) at or
    # below the stacked combiner's row count, so the per-subcarrier
    # least-squares fit never goes underdetermined)
    omp_n_select: int = 6
    omp_stop_ratio: float = 0.85
    omp_max_iters: int = 11
    pgd_max_iters: int = 20
    pgd_stop_step: float = 1e-7
    phd_num_points: int = 41
    phd_stop_span: float = 2e-5
    hbar: float = 0.1
    varsigma: int = 2
    rings: int = 10
    pdl_ray_count: int = 64
    pdl_delay_levels: int = 3
    pdl_coarse_points: int = 512
    # sweep
    power_dbm: tuple = (15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0)
    sweep_field: str = "power_dbm"   # or n_bs / n_ris / bandwidth_hz
    sweep_values: tuple = ()         # axis values when not sweeping power
    trials: int = 100
    master_seed: int = 1

    def __post_init__(self):
        counts = (self.clusters_per_link >= 0 and self.paths_per_cluster >= 1
                  and min(self.n_bs, self.n_ris, self.n_rf) >= 1
                  and min(self.p_nris_cdl, self.p_ris_cdl,
                          self.p_nris_pdl, self.p_ris_pdl) >= 1
                  and min(self.rings, self.varsigma, self.num_subcarriers,
                          self.decimate_to, self.pdl_ray_count,
                          self.pdl_coarse_points) >= 1
                  and self.pdl_delay_levels >= 0 and self.trials >= 0)
        if not counts:
            raise ValueError("all counts must be positive")
        if self.num_subcarriers % self.decimate_to != 0:
            raise ValueError("decimate_to must divide num_subcarriers")
        if self.ue_mode not in ("fixed", "random"):
            raise ValueError("ue_mode must be 'fixed' or 'random'")
        if self.sweep_field not in _SWEEP_FIELDS:
            raise ValueError(f"sweep_field must be one of {_SWEEP_FIELDS}")
        if self.sweep_field == "power_dbm":
            if len(self.power_dbm) == 0:
                raise ValueError("power sweep list is empty")
        elif len(self.sweep_values) == 0:
            raise ValueError("sweep_values is empty")
        if len(self.power_dbm) == 0:
            raise ValueError("power_dbm needs at least one operating point")

    def sweep_axis(self):
        """The active sweep values, one per sweep point."""
        if self.sweep_field == "power_dbm":
            return tuple(float(v) for v in self.power_dbm)
        return tuple(float(v) for v in self.sweep_values)


def paper_profile() -> ExperimentConfig:
    """Full-scale configuration; documents intent, hours of compute."""
    return ExperimentConfig()


def desk_profile() -> ExperimentConfig:
    """Shrunk configuration meant to finish on a single core.

    Budgets scale with the arrays: 8 surface-off slots keep the stacked
    combiner compressive (32 rows against 64 elements), the greedy
    selection is capped at the row count so the restricted least squares
    stays determined, and the angle grid is oversampled 4x so the
    frequency-selective dictionary's best column sits within a beamwidth
    quarter of any source.  The coarse subcarrier comb (64 tones over
    the full band) leaves the delay stage a 6.4 ns unambiguous window,
    far below the sector's propagation delays, so the delay-based
    localizer generally cannot produce a fix at this scale; its
    failures are recorded per trial.
    """
    return dataclasses.replace(
        ExperimentConfig(),
        n_bs=64, n_ris=64, num_subcarriers=64, decimate_to=64,
        p_nris_cdl=8, p_ris_cdl=16, p_nris_pdl=8, p_ris_pdl=8,
        varsigma=4, omp_max_iters=6, trials=50)


PROFILES = {"paper": paper_profile, "desk": desk_profile}


@dataclass
class TrialRecord:
    """Flat per-trial results row; ``None`` marks a metric that was not
    produced (scheme not requested, or failed — see ``failure``)."""

    sweep_index: int
    sweep_value: float
    trial: int
    seed: int
    nmse_gmmv_bu: float = None
    nmse_gmmv_ru: float = None
    nmse_psomp_bu: float = None
    nmse_psomp_ru: float = None
    nmse_la_bu: float = None
    nmse_la_ru: float = None
    nmse_genie_bu: float = None
    nmse_genie_ru: float = None
    cdl_coarse_theta_err_rad: float = None
    cdl_theta_err_rad: float = None
    cdl_r_err_m: float = None
    cdl_coarse_pos_err_m: float = None
    cdl_pos_err_m: float = None
    cdl_stage: str = None
    pdl_theta_err_rad: float = None
    pdl_r_err_m: float = None
    pdl_pos_err_m: float = None
    pdl_stage: str = None
    pdl_tau_nris_s: float = None
    pdl_tau_ris_s: float = None
    pdl_hyp_a: float = None
    pdl_hyp_c: float = None
    pdl_branch: str = None
    ce_seconds: float = None
    cdl_seconds: float = None
    pdl_seconds: float = None
    failure: str = ""


CSV_COLUMNS = tuple(f.name for f in dataclasses.fields(TrialRecord))

# Dictionaries depend only on geometry/grid/codebook knobs, so they are
# shared across trials (and across sweep points that do not touch them).
_DICT_CACHE = {}
# Above this many stored complex entries the frequency-selective stack is
# kept lazy (columns synthesized on demand) instead of materialized.
_EAGER_LIMIT = 3.2e7


def _cached_dictionary(kind, array, grid, rings, varsigma, hbar):
    key = (kind, array.num_elements, array.spacing, array.orientation,
           tuple(array.reference_xy), array.mirrored, grid.center_freq,
           grid.bandwidth, grid.num_subcarriers, rings, varsigma, hbar)
    if key not in _DICT_CACHE:
        if kind == "fsprd":
            size = rings * varsigma * array.num_elements \
                * array.num_elements * grid.num_subcarriers
            _DICT_CACHE[key] = build_fsprd(array, grid, rings, varsigma, hbar,
                                           lazy=size > _EAGER_LIMIT)
        else:
            _DICT_CACHE[key] = build_ptm(array, grid, rings, varsigma, hbar)
    return _DICT_CACHE[key]


def _trial_seeds(master, sweep_index, trial_index):
    """Eight 64-bit words: a row id plus one seed per random stage."""
    seq = np.random.SeedSequence((int(master), int(sweep_index),
                                  int(trial_index)))
    return [int(v) for v in seq.generate_state(8, dtype=np.uint64)]


def _effective(config, sweep_index):
    """(n_bs, n_ris, bandwidth_hz, power_dbm, sweep_value) at one point."""
    value = config.sweep_axis()[sweep_index]
    n_bs, n_ris = config.n_bs, config.n_ris
    bw, power = config.bandwidth_hz, float(config.power_dbm[0])
    if config.sweep_field == "power_dbm":
        power = value
    elif config.sweep_field == "n_bs":
        n_bs = int(value)
    elif config.sweep_field == "n_ris":
        n_ris = int(value)
    else:
        bw = value
    return n_bs, n_ris, bw, power, value


def _angle_error(theta_hat, theta_true):
    """Signed arcsine-domain angle error in radians."""
    return (math.asin(min(1.0, max(-1.0, theta_hat)))
            - math.asin(min(1.0, max(-1.0, theta_true))))


def _cancel_leak(y_ris, frame, h_bu_hat):
    """Remove the direct channel's contribution from the surface-on
    observation using a direct-channel estimate."""
    return y_ris - h_bu_hat @ frame.stacked_leak.T


def _location_errors(est, scene):
    """(theta_err, r_err, pos_err) of a location estimate against the
    scene's ground truth, direct link angles."""
    theta_true, r_true = scene.bs.bearing_to(scene.ue_xy)
    pos = math.hypot(est.ue_xy[0] - scene.ue_xy[0],
                     est.ue_xy[1] - scene.ue_xy[1])
    return (_angle_error(est.theta_bu, theta_true), est.r_bu - r_true, pos)


def run_trial(config, sweep_index, trial_index, schemes=ALL_SCHEMES):
    """One fully seeded trial; every failure lands in the record, never
    raises."""
    n_bs, n_ris, bw, power, sweep_value = _effective(config, sweep_index)
    seeds = _trial_seeds(config.master_seed, sweep_index, trial_index)
    (seed_id, s_scene, s_hbu, s_hru,
     s_frame_cdl, s_rx_cdl, s_frame_pdl) = seeds[:7]
    s_rx_pdl = seeds[7]
    rec = TrialRecord(sweep_index=sweep_index, sweep_value=sweep_value,
                      trial=trial_index, seed=seed_id)
    failures = []

    scene_cfg = SceneConfig(
        n_bs=n_bs, n_ris=n_ris,
        spacing=SPEED_OF_LIGHT / config.center_freq_hz / 2.0,
        bs_xy=tuple(config.bs_xy), ris_xy=tuple(config.ris_xy),
        sector_radius=config.sector_radius,
        clusters_per_link=config.clusters_per_link,
        paths_per_cluster=config.paths_per_cluster,
        ue_xy=tuple(config.ue_xy) if config.ue_mode == "fixed" else None)
    scene = draw_scene(scene_cfg, s_scene)
    full_grid = SubcarrierGrid(config.center_freq_hz, bw,
                               config.num_subcarriers)
    work_grid = full_grid.decimate(config.decimate_to)
    rows = np.arange(0, config.num_subcarriers,
                     config.num_subcarriers // config.decimate_to)
    ch_bu = synthesize_channel(scene, scene.bs, full_grid, s_hbu)
    ch_ru = synthesize_channel(scene, scene.ris, full_grid, s_hru)
    h_bu = ch_bu.per_subcarrier[rows]
    h_ru = ch_ru.per_subcarrier[rows]

    loc = None
    if "ce" in schemes or "cdl" in schemes:
        frame = assemble_frame(scene, work_grid, config.p_nris_cdl,
                               config.p_ris_cdl, config.n_rf, power,
                               s_frame_cdl, ris_mode=config.ris_mode,
                               nsd_dbm_hz=config.nsd_dbm_hz)
        obs = receive((h_bu, h_ru), frame, s_rx_cdl)
        m_work = work_grid.num_subcarriers
        w_ru = [frame.stacked_ris(m) for m in range(m_work)]
        fs_bu = _cached_dictionary("fsprd", scene.bs, work_grid, config.rings,
                                   config.varsigma, config.hbar)
        fs_ru = _cached_dictionary("fsprd", scene.ris, work_grid, config.rings,
                                   config.varsigma, config.hbar)
        omp_cfg = OmpConfig(n_select=config.omp_n_select,
                            stop_ratio=config.omp_stop_ratio,
                            max_iters=config.omp_max_iters)

        est_bu = est_ru = None
        t0 = time.perf_counter()
        if "ce" in schemes:
            try:
                est_bu = gmmv_omp(obs.y_nris, frame.stacked_nris, fs_bu, omp_cfg)
                rec.nmse_gmmv_bu = nmse_db(h_bu, est_bu.h_hat)
                est_ru = gmmv_omp(_cancel_leak(obs.y_ris, frame, est_bu.h_hat),
                                  w_ru, fs_ru, omp_cfg)
                rec.nmse_gmmv_ru = nmse_db(h_ru, est_ru.h_hat)
            except Exception as exc:
                failures.append(f"gmmv: {exc}")
            try:
                pt_bu = _cached_dictionary("ptm", scene.bs, work_grid,
                                           config.rings, config.varsigma,
                                           config.hbar)
                pt_ru = _cached_dictionary("ptm", scene.ris, work_grid,
                                          config.rings, config.varsigma,
                                          config.hbar)
                ps_bu = gmmv_omp(obs.y_nris, frame.stacked_nris, pt_bu, omp_cfg)
                rec.nmse_psomp_bu = nmse_db(h_bu, ps_bu.h_hat)
                ps_ru = gmmv_omp(_cancel_leak(obs.y_ris, frame, ps_bu.h_hat),
                                 w_ru, pt_ru, omp_cfg)
                rec.nmse_psomp_ru = nmse_db(h_ru, ps_ru.h_hat)
            except Exception as exc:
                failures.append(f"psomp: {exc}")
            try:
                gen_bu = genie_ls(obs.y_nris, frame.stacked_nris, fs_bu,
                                  ch_bu.paths)
                rec.nmse_genie_bu = nmse_db(h_bu, gen_bu.h_hat)
                gen_ru = genie_ls(_cancel_leak(obs.y_ris, frame, h_bu),
                                  w_ru, fs_ru, ch_ru.paths)
                rec.nmse_genie_ru = nmse_db(h_ru, gen_ru.h_hat)
            except Exception as exc:
                failures.append(f"genie: {exc}")
        rec.ce_seconds = time.perf_counter() - t0

        if "cdl" in schemes:
            t0 = time.perf_counter()
            try:
                coarse = None
                if est_bu is not None and est_ru is not None:
                    coarse = (est_bu.coarse_index, est_ru.coarse_index)
                loc = cdl(obs, fs_bu, fs_ru,
                          pgd_config=PgdConfig(max_iters=config.pgd_max_iters,
                                               stop_step=config.pgd_stop_step),
                          phd_config=PhdConfig(num_points=config.phd_num_points,
                                               stop_span=config.phd_stop_span),
                          coarse_indices=coarse)
                rec.cdl_stage = loc.stage
                (rec.cdl_theta_err_rad, rec.cdl_r_err_m,
                 rec.cdl_pos_err_m) = _location_errors(loc, scene)
                if loc.stage == "refined":
                    d = loc.diagnostics
                    rec.cdl_coarse_theta_err_rad = _angle_error(
                        d["coarse_theta_bu"],
                        scene.bs.bearing_to(scene.ue_xy)[0])
                    rec.cdl_coarse_pos_err_m = math.hypot(
                        d["coarse_ue_xy"][0] - scene.ue_xy[0],
                        d["coarse_ue_xy"][1] - scene.ue_xy[1])
                else:
                    rec.cdl_coarse_theta_err_rad = rec.cdl_theta_err_rad
                    rec.cdl_coarse_pos_err_m = rec.cdl_pos_err_m
            except Exception as exc:
                failures.append(f"cdl: {exc}")
            rec.cdl_seconds = time.perf_counter() - t0

            # location-assisted estimation: re-run the greedy recovery with
            # the refined bearing grafted in as an extra dictionary column
            if "ce" in schemes:
                t0 = time.perf_counter()
                try:
                    hook_bu = hook_ru = None
                    if loc is not None and loc.stage == "refined":
                        hook_bu = lambda idx, d, p=(loc.theta_bu, loc.r_bu): p
                        hook_ru = lambda idx, d, p=(loc.theta_ru, loc.r_ru): p
                    la_cfg_bu = dataclasses.replace(
                        omp_cfg, localization_hook=hook_bu)
                    la_cfg_ru = dataclasses.replace(
                        omp_cfg, localization_hook=hook_ru)
                    la_bu = gmmv_omp(obs.y_nris, frame.stacked_nris, fs_bu,
                                     la_cfg_bu)
                    rec.nmse_la_bu = nmse_db(h_bu, la_bu.h_hat)
                    la_ru = gmmv_omp(_cancel_leak(obs.y_ris, frame, la_bu.h_hat),
                                     w_ru, fs_ru, la_cfg_ru)
                    rec.nmse_la_ru = nmse_db(h_ru, la_ru.h_hat)
                except Exception as exc:
                    failures.append(f"la: {exc}")
                rec.ce_seconds += time.perf_counter() - t0

    if "pdl" in schemes:
        t0 = time.perf_counter()
        try:
            frame_p = assemble_frame(scene, full_grid, config.p_nris_pdl,
                                     config.p_ris_pdl, config.n_rf, power,
                                     s_frame_pdl, ris_mode=config.ris_mode,
                                     nsd_dbm_hz=config.nsd_dbm_hz)
            obs_p = receive((ch_bu.per_subcarrier, ch_ru.per_subcarrier),
                            frame_p, s_rx_pdl)
            # the per-tone surface stacks only serve observation synthesis;
            # dropping them keeps full-grid frames within memory
            frame_p._ris_stack_cache.clear()
            est_p = pdl(obs_p, sector_radius=config.sector_radius,
                        ray_count=config.pdl_ray_count,
                        delay_levels=config.pdl_delay_levels,
                        coarse_points=config.pdl_coarse_points,
                        aoa_stride=config.num_subcarriers // config.decimate_to,
                        pgd_config=PgdConfig(max_iters=config.pgd_max_iters,
                                             stop_step=config.pgd_stop_step))
            rec.pdl_stage = est_p.stage
            (rec.pdl_theta_err_rad, rec.pdl_r_err_m,
             rec.pdl_pos_err_m) = _location_errors(est_p, scene)
            d = est_p.diagnostics
            rec.pdl_tau_nris_s = d["tau_nris"]
            rec.pdl_tau_ris_s = d["tau_ris"]
            a, _, c_h, branch = d["hyperbola"]
            rec.pdl_hyp_a, rec.pdl_hyp_c, rec.pdl_branch = a, c_h, branch
        except Exception as exc:
            failures.append(f"pdl: {exc}")
        rec.pdl_seconds = time.perf_counter() - t0

    rec.failure = "; ".join(failures)
    return rec


def _pool_task(args):
    config, sweep_index, trial_index, schemes = args
    return run_trial(config, sweep_index, trial_index, schemes)


def run_experiment(config, schemes=ALL_SCHEMES, workers=1):
    """All sweep points x trials, in deterministic (sweep, trial) order.

    Seeding is keyed on (master_seed, sweep_index, trial_index), so the
    records are identical whatever the worker count.
    """
    for s in schemes:
        if s not in ALL_SCHEMES:
            raise ValueError(f"unknown scheme {s!r}")
    tasks = [(config, si, ti, tuple(schemes))
             for si in range(len(config.sweep_axis()))
             for ti in range(config.trials)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_pool_task, tasks, chunksize=8))
    else:
        records = [_pool_task(t) for t in tasks]
    return records


def rmse(values):
    """Root of the mean squared value, or None for an empty group."""
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return None
    return math.sqrt(sum(v * v for v in vals) / len(vals))


def mean_nmse_db(values):
    """Energy-mean of dB values: 10*log10(mean of linear ratios).

    Averaging in the linear domain keeps one near-perfect trial (floored
    around -300 dB) from dominating the aggregate."""
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return None
    return 10.0 * math.log10(sum(10.0 ** (v / 10.0) for v in vals) / len(vals))


def cdf_points(values):
    """Sorted (value, empirical quantile k/n) pairs."""
    vals = sorted(v for v in values if v is not None and math.isfinite(v))
    n = len(vals)
    return [(v, (k + 1) / n) for k, v in enumerate(vals)]


_NMSE_FIELDS = ("nmse_gmmv_bu", "nmse_gmmv_ru", "nmse_psomp_bu",
                "nmse_psomp_ru", "nmse_la_bu", "nmse_la_ru",
                "nmse_genie_bu", "nmse_genie_ru")
_RMSE_FIELDS = ("cdl_coarse_theta_err_rad", "cdl_theta_err_rad",
                "cdl_r_err_m", "cdl_coarse_pos_err_m", "cdl_pos_err_m",
                "pdl_theta_err_rad", "pdl_r_err_m", "pdl_pos_err_m")
_CDF_FIELDS = ("cdl_pos_err_m", "pdl_pos_err_m")


def summarize(records):
    """Aggregate table: per sweep point, energy-mean NMSE per estimator and
    RMSE per error metric (None where every trial is missing), plus
    empirical CDFs of the position errors."""
    by_sweep = {}
    for r in records:
        by_sweep.setdefault(r.sweep_index, []).append(r)
    table = []
    cdf = {name: {} for name in _CDF_FIELDS}
    for si in sorted(by_sweep):
        group = by_sweep[si]
        row = {"sweep_index": si,
               "sweep_value": group[0].sweep_value,
               "count": len(group),
               "failed": sum(1 for r in group if r.failure)}
        for name in _NMSE_FIELDS:
            row[name] = mean_nmse_db(getattr(r, name) for r in group)
        for name in _RMSE_FIELDS:
            row["rmse_" + name] = rmse(getattr(r, name) for r in group)
        table.append(row)
        for name in _CDF_FIELDS:
            pts = cdf_points(getattr(r, name) for r in group)
            if pts:
                cdf[name][str(si)] = pts
    return {"per_sweep": table, "cdf": cdf}


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def write_csv(records, fileobj):
    """Fixed column order, floats at 12 significant digits; commas inside
    failure text are quote-escaped."""
    import csv

    out = csv.writer(fileobj, lineterminator="\n")
    out.writerow(CSV_COLUMNS)
    for r in records:
        out.writerow([_cell(getattr(r, name)) for name in CSV_COLUMNS])


def records_to_csv(records):
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()


def _json_value(value):
    # mirror the CSV's 12-significant-digit float formatting
    if isinstance(value, float):
        return float(f"{value:.12g}")
    return value


def write_json(records, fileobj, summary=None):
    """Records (and optionally their summary) as deterministic JSON."""
    payload = {"records": [
        {k: _json_value(getattr(r, k)) for k in CSV_COLUMNS}
        for r in records]}
    if summary is not None:
        payload["summary"] = json.loads(
            json.dumps(summary), parse_float=lambda s: float(f"{float(s):.12g}"))
    json.dump(payload, fileobj, sort_keys=True, indent=1)
    fileobj.write("\n")
