"""Localization from per-link propagation delays, without channel estimation.

Each pilot phase yields a delay through a noise-subspace spectrum built on
the denoised frequency-autocorrelation of the stacked measurements.  The
difference of the two delays pins the user to one branch of a hyperbola
whose foci are the two anchors; a small bank of steering atoms anchored on
that curve turns the direct-link correlation into a coarse bearing, the
gradient refinement from the two-bearing pipeline polishes the angle, and
the bearing is intersected with the curve for the final fix.
"""

import math
from dataclasses import dataclass

import numpy as np

from rissense.cdl import LocationEstimate, bearing_direction, pgd_refine
from rissense.dictionary import PolarDictionary, _atom_stack
from rissense.geometry import (SPEED_OF_LIGHT, ArrayGeometry, SubcarrierGrid,
                               effective_rayleigh_freq)

DEGENERATE_TDOA = 1e-12
BRANCHES = ("toward-bs", "toward-ris", "degenerate-bisector")


@dataclass(frozen=True)
class Hyperbola:
    """Locus of constant range difference to the two anchors.

    ``a`` and ``b`` are the semi-transverse and semi-conjugate axes in
    meters, ``c_h`` the half focal distance; the anchors sit at
    (-c_h, 0) and (+c_h, 0).  ``branch`` names the half the user lies
    on; a vanishing range difference degenerates to the bisector x = 0.
    """

    a: float
    b: float
    c_h: float
    branch: str

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.c_h <= 0 or self.b <= 0:
            raise ValueError("axes must be positive")
        if not 0.0 <= self.a < self.c_h:
            raise ValueError("need 0 <= a < c_h")
        if self.branch == "degenerate-bisector" and self.a != 0.0:
            raise ValueError("degenerate branch requires a = 0")

    def equation_residual(self, xy) -> float:
        """Defect of the standard-form equation at a point (0 when on
        the curve); for the degenerate bisector this is just x."""
        x, y = xy
        if self.branch == "degenerate-bisector":
            return x
        return x * x / (self.a * self.a) - y * y / (self.b * self.b) - 1.0


@dataclass(frozen=True)
class DelayEstimate:
    tau: float  # seconds
    spectrum_peak: float
    search_resolution: float  # seconds
    low_confidence: bool = False

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("delay must be nonnegative")
        if self.search_resolution <= 0:
            raise ValueError("resolution must be positive")


def combiner_noise_gain(mats) -> float:
    """Total squared row norm of the combiners behind a pilot stack.

    White antenna noise passed through rows w_q lands on the measurements
    with total variance sigma^2 * sum_q ||w_q||^2; with unit-norm rows
    this is just the measurement count (slots times chains).
    """
    return float(sum(np.sum(np.abs(np.asarray(w)) ** 2) for w in mats))


def denoised_autocorr(y, sigma2: float, noise_gain: float) -> np.ndarray:
    """Frequency-indexed Gram of the pilot stack minus the expected
    noise contribution sigma^2 * noise_gain on the diagonal.

    ``y`` has one row per subcarrier; the result is M x M Hermitian.
    """
    y = np.asarray(y, dtype=complex)
    if y.ndim != 2:
        raise ValueError("expect a (subcarriers, measurements) stack")
    gram = y @ y.conj().T
    return gram - sigma2 * noise_gain * np.eye(y.shape[0])


def noise_projector(y_tilde, signal_rank: int):
    """Projector onto the noise subspace of the denoised autocorrelation.

    The first ``signal_rank`` columns are regressed onto the rest; the
    stacked solution with an identity tail spans the orthogonal
    complement of the row space (the matrix is Hermitian, so that is the
    signal subspace).  Solved through QR so rank-deficient Grams do not
    blow up; returns (projector, condition estimate of the basis).
    """
    y_tilde = np.asarray(y_tilde, dtype=complex)
    m = y_tilde.shape[0]
    if y_tilde.shape != (m, m):
        raise ValueError("autocorrelation must be square")
    if not 0 < signal_rank < m:
        raise ValueError("need 0 < signal_rank < subcarrier count")
    lead = y_tilde[:, :signal_rank]
    tail = y_tilde[:, signal_rank:]
    prop = np.linalg.lstsq(lead, tail, rcond=None)[0]
    g = np.vstack([prop, -np.eye(m - signal_rank)])
    q, r = np.linalg.qr(g)
    diag = np.abs(np.diag(r))
    cond = float(diag.max() / diag.min()) if diag.min() > 0 else math.inf
    return q @ q.conj().T, cond


def _spectrum(p_g, freqs, taus):
    # inverse quadratic form of the probe tone against the noise projector
    probes = np.exp(2j * np.pi * np.outer(taus, freqs))
    quad = np.einsum("rm,rm->r", probes @ p_g, probes.conj()).real
    return 1.0 / np.maximum(quad, 1e-300)


def _pick_peak(values) -> int:
    # the probe family is exactly periodic on a uniform frequency comb
    # (period M/bandwidth), so aliased peaks are exact ties up to float
    # dust; resolve toward the smallest delay for a deterministic,
    # principal-value estimate
    peak = float(values.max())
    near = np.nonzero(values >= peak * (1.0 - 1e-9))[0]
    return int(near[0])


def delay_estimate(p_g, freqs, tau_max: float, levels: int = 3,
                   coarse_points: int = 512, zoom: float = 10.0) -> DelayEstimate:
    """Hierarchical peak search of the delay spectrum on [0, tau_max].

    On a uniform comb the probe family repeats with period
    1/(subcarrier spacing), so delays beyond that period alias exactly
    onto the principal zone regardless of noise; the tie rule (smallest
    delay wins) therefore restricts the effective search to
    [0, min(tau_max, period)], and the scan covers only that.  A coarse
    pass is refined ``levels`` times, shrinking the spacing by ``zoom``
    around the running peak.  A spectrum whose coarse peak is less than
    twice the median is flagged low-confidence.
    """
    if tau_max <= 0:
        raise ValueError("tau_max must be positive")
    if levels < 0 or coarse_points < 2:
        raise ValueError("need levels >= 0 and at least two coarse points")
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size < 2:
        raise ValueError("need at least two subcarriers")
    t_hi = min(tau_max, 1.0 / float(freqs[1] - freqs[0]))
    taus = np.linspace(0.0, t_hi, coarse_points)
    spacing = taus[1] - taus[0]
    values = _spectrum(p_g, freqs, taus)
    flat = float(values.max()) < 2.0 * float(np.median(values))
    best = _pick_peak(values)
    tau, peak = float(taus[best]), float(values[best])
    for _ in range(levels):
        taus = np.clip(np.linspace(tau - spacing, tau + spacing,
                                   2 * int(zoom) + 1), 0.0, t_hi)
        spacing = spacing / zoom
        values = _spectrum(p_g, freqs, taus)
        best = _pick_peak(values)
        tau, peak = float(taus[best]), float(values[best])
    return DelayEstimate(tau, peak, spacing, flat)


def tdoa_hyperbola(tau_nris: float, tau_ris: float, r_b2r: float,
                   bs: ArrayGeometry, ris: ArrayGeometry) -> Hyperbola:
    """Range-difference curve from the two link delays.

    The reflected-link delay includes the fixed anchor-to-anchor hop, so
    the difference tau_nris - (tau_ris - r_b2r/c) measures
    (r_direct - r_reflected)/c.  A positive difference means the direct
    path is longer, i.e. the user sits nearer the reflecting anchor, so
    the branch opens toward it (checked against exact geometry in the
    tests).  Expects the anchors mirrored about the origin on the x-axis.
    """
    bx, by = bs.reference_xy
    rx, ry = ris.reference_xy
    if abs(by) > 1e-9 or abs(ry) > 1e-9 or abs(bx + rx) > 1e-9 or rx <= 0:
        raise ValueError("anchors must sit on the x-axis mirrored about 0")
    if abs(math.dist(bs.reference_xy, ris.reference_xy) - r_b2r) > 1e-6:
        raise ValueError("r_b2r does not match the anchor separation")
    c_h = r_b2r / 2.0
    tau = tau_nris - (tau_ris - r_b2r / SPEED_OF_LIGHT)
    if abs(tau) < DEGENERATE_TDOA:
        return Hyperbola(0.0, c_h, c_h, "degenerate-bisector")
    a = SPEED_OF_LIGHT * abs(tau) / 2.0
    if a >= c_h:
        raise ValueError("delay difference places the user outside the "
                         "focal geometry")
    b = math.sqrt(c_h * c_h - a * a)
    branch = "toward-ris" if tau > 0 else "toward-bs"
    return Hyperbola(a, b, c_h, branch)


def line_hyperbola_intersect(theta: float, hyp: Hyperbola,
                             array: ArrayGeometry):
    """Point where the bearing ray at sine-angle ``theta`` meets the
    chosen branch, plus its distance from the anchor.

    The ray is parameterized by arc length, so the quadratic roots are
    distances directly; roots behind the anchor or on the opposite
    branch are discarded, and of several valid hits the one below the
    axis (the service sector) and nearest the anchor wins.
    """
    (dx, dy), _ = bearing_direction(array, theta)
    px, py = array.reference_xy
    if hyp.branch == "degenerate-bisector":
        if abs(dx) < 1e-15:
            raise ValueError("bearing parallel to the bisector")
        roots = [-px / dx]
    else:
        a2, b2 = hyp.a * hyp.a, hyp.b * hyp.b
        qa = dx * dx / a2 - dy * dy / b2
        qb = 2.0 * (px * dx / a2 - py * dy / b2)
        qc = px * px / a2 - py * py / b2 - 1.0
        if abs(qa) < 1e-15:
            if abs(qb) < 1e-15:
                raise ValueError("bearing misses the curve")
            roots = [-qc / qb]
        else:
            disc = qb * qb - 4.0 * qa * qc
            if disc < 0:
                raise ValueError("bearing misses the curve")
            sq = math.sqrt(disc)
            roots = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)]
    hits = []
    for t in roots:
        if t <= 1e-12:
            continue
        x, y = px + t * dx, py + t * dy
        if hyp.branch == "toward-ris" and x < hyp.a - 1e-9:
            continue
        if hyp.branch == "toward-bs" and x > -hyp.a + 1e-9:
            continue
        hits.append((t, (x, y)))
    if not hits:
        raise ValueError("no intersection on the expected branch ahead of "
                         "the anchor")
    below = [h for h in hits if h[1][1] <= 0.0]
    t, point = min(below if below else hits, key=lambda h: h[0])
    return point, t


def sector_ray_fan(bs: ArrayGeometry, sector_radius: float,
                   count: int) -> np.ndarray:
    """Sine-angles of ``count`` rays covering the service wedge as seen
    from the anchor, evenly spaced with a half-step inset at both ends."""
    if count < 1:
        raise ValueError("need at least one ray")
    edge = np.linspace(0.0, sector_radius, 257)[1:]
    arc = np.linspace(-3 * math.pi / 4, -math.pi / 4, 257)
    boundary = np.concatenate([
        np.stack([edge * math.cos(-3 * math.pi / 4),
                  edge * math.sin(-3 * math.pi / 4)], axis=1),
        np.stack([edge * math.cos(-math.pi / 4),
                  edge * math.sin(-math.pi / 4)], axis=1),
        np.stack([sector_radius * np.cos(arc),
                  sector_radius * np.sin(arc)], axis=1),
    ])
    thetas = np.array([bs.bearing_to(p)[0] for p in boundary])
    lo, hi = float(thetas.min()), float(thetas.max())
    step = (hi - lo) / count
    return lo + step * (np.arange(count) + 0.5)


def hyperbola_dictionary(hyp: Hyperbola, array: ArrayGeometry,
                         grid: SubcarrierGrid, ray_thetas,
                         hbar: float = 0.1):
    """Steering atoms anchored where each bearing ray meets the curve.

    Rays that miss the branch are skipped, so the returned bank may hold
    fewer columns than rays.  Returns (dictionary, anchor points); the
    bank's grid metadata carries each surviving ray's (theta, distance).
    """
    thetas, ranges, anchors = [], [], []
    for theta in np.asarray(ray_thetas, dtype=float):
        try:
            point, dist = line_hyperbola_intersect(float(theta), hyp, array)
        except ValueError:
            continue
        thetas.append(float(theta))
        ranges.append(dist)
        anchors.append(point)
    if not thetas:
        raise ValueError("no ray reaches the expected branch")
    thetas = np.asarray(thetas)
    ranges = np.asarray(ranges)
    stack = _atom_stack(array, grid, thetas, ranges)
    atoms = tuple(stack[m] for m in range(grid.num_subcarriers))
    z_center = effective_rayleigh_freq(array, grid.center_freq, 0.0, hbar)[1]
    bank = PolarDictionary(array, grid, 1, 1, True, z_center,
                           thetas, ranges, atoms)
    return bank, anchors


def coarse_aoa_on_hyperbola(y, w_bar, bank: PolarDictionary):
    """Bearing of the best-correlated curve-anchored atom.

    Scores each column by the absolute projected correlation summed over
    subcarriers; ties go to the lowest index.  Returns (theta, index).
    """
    y = np.asarray(y, dtype=complex)
    w_bar = np.asarray(w_bar, dtype=complex)
    if y.shape[0] != bank.grid.num_subcarriers:
        raise ValueError("pilot rows do not match the bank's subcarriers")
    scores = np.zeros(bank.num_columns)
    for m in range(bank.grid.num_subcarriers):
        proj = w_bar @ bank.matrix(m)
        scores += np.abs(proj.conj().T @ y[m])
    idx = int(np.argmax(scores))
    return float(bank.base_thetas[idx]), idx


def pdl(observation, sector_radius: float = 100.0, ray_count: int = 64,
        delay_levels: int = 3, coarse_points: int = 512,
        aoa_stride: int = 1, pgd_config=None, gains=None,
        delay_override=None) -> LocationEstimate:
    """Full delay-first localization pipeline on one pilot observation.

    Per-link delays feed the range-difference curve; a ray fan over the
    service sector anchors a partial atom bank on it, the direct-link
    correlation picks the coarse bearing, the shared gradient refinement
    polishes it, and the refined bearing is intersected with the curve.
    The delay stage uses every subcarrier while the bearing stages may
    run on a decimated stack (``aoa_stride``).  ``delay_override``
    replaces the estimated (tau_nris, tau_ris) pair, which isolates the
    geometric stages from the spectrum search.  A refinement failure
    falls back to the coarse fix with the reason recorded; earlier
    failures propagate.
    """
    frame = observation.frame
    if frame.bs_ris is None:
        raise ValueError("frame lacks the anchor-hop channel")
    bs = frame.bs_ris.receiver
    ris = frame.bs_ris.transmitter
    grid = frame.bs_ris.grid
    sigma2 = frame.noise_power
    tau_max = 2.0 * sector_radius / SPEED_OF_LIGHT

    def link_delay(y, mats):
        rank = y.shape[1]
        if rank >= grid.num_subcarriers:
            raise ValueError("measurement count must stay below the "
                             "subcarrier count for the noise subspace")
        tilde = denoised_autocorr(y, sigma2, combiner_noise_gain(mats))
        p_g, cond = noise_projector(tilde, rank)
        est = delay_estimate(p_g, grid.frequencies, tau_max, delay_levels,
                             coarse_points)
        return est, cond

    if delay_override is not None:
        res = tau_max / (coarse_points - 1) / 10.0 ** delay_levels
        delay_nris = DelayEstimate(float(delay_override[0]), math.inf, res)
        delay_ris = DelayEstimate(float(delay_override[1]), math.inf, res)
        cond_nris = cond_ris = 1.0
    else:
        delay_nris, cond_nris = link_delay(observation.y_nris, frame.w_nris)
        delay_ris, cond_ris = link_delay(observation.y_ris, frame.w_ris)
    r_b2r = math.dist(bs.reference_xy, ris.reference_xy)
    hyp = tdoa_hyperbola(delay_nris.tau, delay_ris.tau, r_b2r, bs, ris)

    if aoa_stride < 1 or grid.num_subcarriers % aoa_stride:
        raise ValueError("aoa_stride must divide the subcarrier count")
    aoa_grid = grid.decimate(grid.num_subcarriers // aoa_stride)
    y_aoa = observation.y_nris[::aoa_stride]
    rays = sector_ray_fan(bs, sector_radius, ray_count)
    bank, anchors = hyperbola_dictionary(hyp, bs, aoa_grid, rays)
    theta0, idx = coarse_aoa_on_hyperbola(y_aoa, frame.stacked_nris, bank)
    ue0 = anchors[idx]
    r0 = float(bank.base_ranges[idx])
    theta_ru0, r_ru0 = ris.bearing_to(np.asarray(ue0))

    diagnostics = {
        "tau_nris": delay_nris.tau, "tau_ris": delay_ris.tau,
        "delay_resolution": delay_nris.search_resolution,
        "delay_low_confidence": (delay_nris.low_confidence
                                 or delay_ris.low_confidence),
        "projector_cond": (cond_nris, cond_ris),
        "hyperbola": (hyp.a, hyp.b, hyp.c_h, hyp.branch),
        "ray_index": idx, "ray_count": bank.num_columns,
    }

    try:
        # Raw pilots, for the same reason as in the bearing pipeline: the
        # free per-subcarrier gain of the descent loss already soaks up the
        # common phase of each tone.
        theta_hat, pgd_info = pgd_refine(y_aoa, frame.stacked_nris, bs,
                                         aoa_grid, theta0, r0, pgd_config,
                                         gains)
        ue, r_bu = line_hyperbola_intersect(theta_hat, hyp, bs)
    except ValueError as exc:
        diagnostics.update({"fallback": True, "fallback_reason": str(exc)})
        return LocationEstimate(ue0, theta0, theta_ru0, r0, r_ru0, "coarse",
                                diagnostics)

    theta_ru, r_ru = ris.bearing_to(np.asarray(ue))
    diagnostics.update(pgd_info)
    diagnostics.update({"fallback": False, "coarse_ue_xy": ue0,
                        "coarse_theta_bu": theta0, "coarse_r_bu": r0})
    return LocationEstimate(ue, theta_hat, theta_ru, r_bu, r_ru, "refined",
                            diagnostics)
