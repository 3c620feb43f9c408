"""Two-anchor localization from channel-sounding pilots.

Coarse sine-angles come from the first correlation pass of the sparse
estimator on each link; intersecting the two bearing lines gives a first
position fix.  The direct-path angle is then polished by gradient descent
on a phase-normalized loss, the reflected-path angle by a hierarchical
candidate search, and the lines are intersected again.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import correlation_energy
from .geometry import element_ranges, near_response
from .sounding import equivalent_matrix

REFERENCE_GUARD = 1e-15
PARALLEL_GUARD = 1e-12
THETA_EDGE = 1e-9  # keep candidate angles strictly inside (-1, 1)


class RefinementError(ValueError):
    """Numeric failure inside an angle-refinement loop; carries the loss
    trajectory seen so far."""

    def __init__(self, message, loss_history=None):
        super().__init__(message)
        self.loss_history = list(loss_history or [])


@dataclass
class PgdConfig:
    """Gradient-refinement knobs: iteration cap, the |step * gradient|
    termination threshold, and the Armijo backtracking triple
    (sufficient-decrease constant, shrink factor, initial step)."""

    max_iters: int = 20
    stop_step: float = 1e-7
    armijo: tuple = (1e-4, 0.5, 1e-2)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.stop_step <= 0:
            raise ValueError("stop_step must be positive")
        c1, shrink, step0 = self.armijo
        if c1 <= 0 or step0 <= 0 or not 0.0 < shrink < 1.0:
            raise ValueError("armijo constants out of range")


@dataclass
class PhdConfig:
    """Hierarchical-search knobs: candidates per level (odd), the span
    threshold that ends the recursion, and a defensive level cap."""

    num_points: int = 41
    stop_span: float = 2e-5
    max_levels: int = 64

    def __post_init__(self):
        if self.num_points < 3 or self.num_points % 2 == 0:
            raise ValueError("num_points must be odd and at least 3")
        if self.stop_span <= 0:
            raise ValueError("stop_span must be positive")
        if self.max_levels < 1:
            raise ValueError("max_levels must be at least 1")


@dataclass
class LocationEstimate:
    """A position fix with the per-anchor bearing parameters behind it.

    ``stage`` is "coarse" (grid angles only) or "refined"; diagnostics
    carry pgd_iters, pgd_final_step, phd_levels, loss_history and, after
    a fallback, the reason the refinement was abandoned.
    """

    ue_xy: tuple
    theta_bu: float
    theta_ru: float
    r_bu: float
    r_ru: float
    stage: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (-1.0 < self.theta_bu < 1.0 and -1.0 < self.theta_ru < 1.0):
            raise ValueError("sine-angles must lie in (-1, 1)")
        if not (self.r_bu > 0 and self.r_ru > 0):
            raise ValueError("ranges must be positive")
        if self.stage not in ("coarse", "refined"):
            raise ValueError("stage must be 'coarse' or 'refined'")


def coarse_angles(index_nris, index_ris, dict_bu, dict_ru):
    """Sine-angles behind the two first-pass argmax columns (one-based
    indices, one per link)."""
    return dict_bu.grid_params(index_nris)[0], dict_ru.grid_params(index_ris)[0]


def bearing_direction(anchor, theta):
    """Unit vector of the bearing ray from an anchor toward the sensing
    sector for a given sine-angle."""
    phi = math.asin(theta)
    if anchor.mirrored:
        angle = math.pi - anchor.orientation + (math.pi / 2 - phi)
    else:
        angle = anchor.orientation - (math.pi / 2 - phi)
    return np.array([math.cos(angle), math.sin(angle)]), angle


def intersect_lines(theta_bu, theta_ru, bs, ris):
    """Position from two anchor bearings, plus the two anchor distances.

    Raises ValueError when the bearing lines are parallel or when the
    intersection falls behind either anchor (negative range along the
    bearing direction).
    """
    d_b, ang_b = bearing_direction(bs, theta_bu)
    d_r, ang_r = bearing_direction(ris, theta_ru)
    k_b = math.tan(ang_b)
    k_r = math.tan(ang_r)
    if abs(k_b - k_r) < PARALLEL_GUARD:
        raise ValueError("bearing lines are parallel; no intersection")
    x_b, y_b = bs.reference_xy
    x_r, y_r = ris.reference_xy
    x = (y_r - y_b + k_b * x_b - k_r * x_r) / (k_b - k_r)
    y = y_b + k_b * (x - x_b)
    point = np.array([x, y])
    t_b = float(d_b @ (point - np.asarray(bs.reference_xy)))
    t_r = float(d_r @ (point - np.asarray(ris.reference_xy)))
    if t_b <= 0 or t_r <= 0:
        raise ValueError("bearing intersection lies behind an anchor")
    r_bu = float(np.hypot(x - x_b, y - y_b))
    r_ru = float(np.hypot(x - x_r, y - y_r))
    return (float(x), float(y)), r_bu, r_ru


def relative_phase_transform(y):
    """Divide every measurement row by the reference row and restore each
    row's energy.

    ``y`` is (M, rows) with the reference (center-element) observation in
    column 0; that column is returned unchanged.  Rows whose reference
    entry nearly vanishes make the ratio meaningless, so any
    ``|y[m, 0]| < 1e-15`` is an error naming the subcarrier.
    """
    y = np.asarray(y, dtype=complex)
    ref = y[:, 0]
    small = np.abs(ref) < REFERENCE_GUARD
    if small.any():
        m = int(np.argmax(small))
        raise ValueError(f"reference row vanishes at subcarrier {m}")
    out = np.empty_like(y)
    out[:, 0] = ref
    for i in range(1, y.shape[1]):
        ratio = y[:, i] / ref
        energy_in = float(np.linalg.norm(y[:, i]))
        energy_ratio = float(np.linalg.norm(ratio))
        if energy_ratio == 0.0:
            out[:, i] = 0.0
        else:
            out[:, i] = ratio * (energy_in / energy_ratio)
    return out


def _projected_steering(w_bar, array, grid, theta, r, with_gradient=False):
    """Rows of combiner-projected steering vectors, one per subcarrier,
    optionally with their derivative in theta."""
    freqs = np.asarray(grid.frequencies)
    b = near_response(array, freqs, theta, r)  # (M, N)
    a = b @ w_bar.T
    if not with_gradient:
        return a, None
    rn = element_ranges(array, theta, r)
    factor = r * array.element_offsets * array.spacing / rn
    k_m = 2.0 * math.pi * freqs / 299_792_458.0
    db = 1j * k_m[:, None] * factor[None, :] * b
    return a, db @ w_bar.T


def _loss_terms(y, a, gains):
    """Squared-error loss per the gain mode: least-squares per subcarrier
    when gains is None, else fixed complex gains."""
    if gains is None:
        u = np.sum(a.conj() * y, axis=1)
        g = np.sum(a.real ** 2 + a.imag ** 2, axis=1)
        g = np.where(g > 0.0, g, 1.0)
        total = float(np.sum(np.abs(y) ** 2) - np.sum(np.abs(u) ** 2 / g))
        return max(total, 0.0), u, g
    diff = y - gains[:, None] * a
    return float(np.sum(np.abs(diff) ** 2)), None, None


def pgd_loss(y, w_bar, array, grid, theta, r, gains=None):
    """Model mismatch of a single steering column against the pilots.

    ``sum_m || y[m] - gain_m * (w_bar @ b_m(theta, r)) ||^2`` with the
    per-subcarrier gain either fitted in closed form (default) or fixed
    to a supplied complex vector.
    """
    a, _ = _projected_steering(w_bar, array, grid, theta, r)
    return _loss_terms(np.asarray(y, dtype=complex), a, gains)[0]


def pgd_gradient(y, w_bar, array, grid, theta, r, gains=None):
    """Loss and its analytic derivative in theta at one point."""
    y = np.asarray(y, dtype=complex)
    a, da = _projected_steering(w_bar, array, grid, theta, r, with_gradient=True)
    if gains is None:
        loss, u, g = _loss_terms(y, a, gains)
        du = np.sum(da.conj() * y, axis=1)
        dg = 2.0 * np.sum((a.conj() * da).real, axis=1)
        grad = -float(np.sum((2.0 * (u.conj() * du).real * g
                              - np.abs(u) ** 2 * dg) / g ** 2))
        return loss, grad
    diff = gains[:, None] * a - y
    loss = float(np.sum(np.abs(diff) ** 2))
    grad = 2.0 * float(np.sum(((gains[:, None] * da).conj() * diff).real))
    return loss, grad


def _clamp_theta(theta):
    return float(np.clip(theta, -1.0 + THETA_EDGE, 1.0 - THETA_EDGE))


def pgd_refine(y, w_bar, array, grid, theta0, r0, config=None, gains=None):
    """Gradient descent on the angle with Armijo backtracking.

    The distance is frozen at ``r0``; the loss surface is flat enough in
    r that only the angle needs polishing.  Stops when |step * gradient|
    falls below the configured threshold, when backtracking cannot find
    any decrease, or at the iteration cap.  The returned angle never has
    a larger loss than the starting one.
    """
    cfg = config if config is not None else PgdConfig()
    c1, shrink, step0 = cfg.armijo
    theta = _clamp_theta(theta0)
    # Normalize the observation so the loss is O(1) regardless of transmit
    # power; the minimizer is unchanged and the step/stop thresholds keep
    # one meaning across operating points.
    y = np.asarray(y, dtype=complex)
    scale = float(np.linalg.norm(y))
    if scale == 0.0:
        return theta, {"pgd_iters": 0, "pgd_final_step": 0.0,
                       "loss_history": [0.0]}
    y = y / scale
    if gains is not None:
        gains = np.asarray(gains, dtype=complex) / scale
    loss, grad = pgd_gradient(y, w_bar, array, grid, theta, r0, gains)
    history = [loss]
    iters = 0
    final_step = 0.0
    for it in range(1, cfg.max_iters + 1):
        if not math.isfinite(grad) or not math.isfinite(loss):
            raise RefinementError("non-finite gradient in angle refinement",
                                  history)
        step = step0
        accepted = False
        for _ in range(60):
            cand = _clamp_theta(theta - step * grad)
            cand_loss = pgd_loss(y, w_bar, array, grid, cand, r0, gains)
            if cand_loss <= loss - c1 * step * grad * grad:
                accepted = True
                break
            step *= shrink
        if not accepted:
            break
        # The first acceptable step can overshoot to nearly the mirror
        # point of the minimum (the sufficient-decrease margin is tiny),
        # which stalls the descent in a slow ping-pong.  Keep shrinking
        # while the candidate loss still drops and take the best point;
        # smaller steps with lower loss keep the decrease condition.
        for _ in range(60):
            lower = step * shrink
            cand2 = _clamp_theta(theta - lower * grad)
            cand2_loss = pgd_loss(y, w_bar, array, grid, cand2, r0, gains)
            if cand2_loss >= cand_loss:
                break
            step, cand, cand_loss = lower, cand2, cand2_loss
        moved = abs(cand - theta)
        theta = cand
        loss = cand_loss
        history.append(loss)
        iters = it
        final_step = moved
        if moved < cfg.stop_step:
            break
        loss, grad = pgd_gradient(y, w_bar, array, grid, theta, r0, gains)
    return theta, {"pgd_iters": iters, "pgd_final_step": final_step,
                   "loss_history": history}


def _level_candidates(center, level, num_angles, num_points):
    """Candidate angles of one search level: ``num_points`` values
    spanning ``center ± 1/(num_angles * beta^(level-1))`` with
    ``beta = (num_points - 1)/2``."""
    beta = (num_points - 1) / 2.0
    half = 1.0 / (num_angles * beta ** (level - 1))
    step = 2.0 * half / (num_points - 1)
    return center - half + step * np.arange(num_points)


def phd_refine(y_ris, w_ris, array, grid, theta0, r0, num_angles, config=None):
    """Hierarchical angle search on the reflected link.

    Each level scores ``num_points`` candidate steering columns (built at
    the frozen distance ``r0``) by total correlation with the pilots and
    recenters on the winner; the span shrinks by beta = (num_points-1)/2
    per level and the search ends when the next span would fall below the
    configured threshold.  Candidates straying outside (-1, 1) are
    clamped and flagged.
    """
    cfg = config if config is not None else PhdConfig()
    y_ris = np.asarray(y_ris, dtype=complex)
    m_sub = grid.num_subcarriers
    freqs = np.asarray(grid.frequencies)
    w_stack = np.stack([np.asarray(w_ris[m]) for m in range(m_sub)])
    beta = (cfg.num_points - 1) / 2.0
    center = float(theta0)
    clamped = False
    levels = 0
    for level in range(1, cfg.max_levels + 1):
        cands = _level_candidates(center, level, num_angles, cfg.num_points)
        outside = (cands <= -1.0) | (cands >= 1.0)
        if outside.any():
            clamped = True
            cands = np.clip(cands, -1.0 + THETA_EDGE, 1.0 - THETA_EDGE)
        atoms = np.stack([near_response(array, freqs, float(c), r0)
                          for c in cands])  # (P, M, N_RIS)
        proj = np.einsum("mqn,pmn->pmq", w_stack, atoms, optimize=True)
        inner = np.einsum("pmq,mq->pm", proj.conj(), y_ris, optimize=True)
        scores = np.sum(inner.real ** 2 + inner.imag ** 2, axis=1)
        center = float(cands[int(np.argmax(scores))])
        levels = level
        if 2.0 / (num_angles * beta ** level) < cfg.stop_span:
            break
    return center, {"phd_levels": levels, "phd_clamped": clamped}


def cdl(observation, dict_bu, dict_ru, pgd_config=None, phd_config=None,
        gains=None, coarse_indices=None):
    """Full localization pipeline on one pilot observation.

    Correlation argmax on each link gives coarse grid angles; the bearing
    lines are intersected for a coarse fix whose distances seed the two
    refinements (gradient descent on the direct angle, hierarchical
    search on the reflected angle); the refined bearings are intersected
    again.  A refinement failure falls back to the coarse estimate with
    the reason recorded; a failed coarse intersection propagates.

    ``coarse_indices`` may supply the one-based argmax pair
    ``(index_bu, index_ru)`` from an earlier channel-estimation pass over
    the same dictionaries, skipping the correlation sweep here.
    """
    frame = observation.frame
    if frame.bs_ris is None:
        raise ValueError("frame lacks the anchor-hop channel")
    bs = frame.bs_ris.receiver
    ris = frame.bs_ris.transmitter
    grid = dict_bu.grid

    if coarse_indices is not None:
        index_bu, index_ru = int(coarse_indices[0]), int(coarse_indices[1])
        if not (1 <= index_bu <= dict_bu.num_columns
                and 1 <= index_ru <= dict_ru.num_columns):
            raise ValueError("coarse indices fall outside the dictionaries")
    else:
        w_tilde_bu = equivalent_matrix(frame, dict_bu, "direct")
        w_tilde_ru = equivalent_matrix(frame, dict_ru, "reflected")
        index_bu = int(np.argmax(correlation_energy(w_tilde_bu,
                                                    observation.y_nris))) + 1
        index_ru = int(np.argmax(correlation_energy(w_tilde_ru,
                                                    observation.y_ris))) + 1
    theta0_bu, theta0_ru = coarse_angles(index_bu, index_ru, dict_bu, dict_ru)

    ue0, r_bu0, r_ru0 = intersect_lines(theta0_bu, theta0_ru, bs, ris)
    coarse_diag = {"coarse_index_bu": index_bu, "coarse_index_ru": index_ru}

    try:
        # The pilots go in unchanged: the per-subcarrier least-squares gain
        # inside the descent loss absorbs any common phase on each tone, and
        # ratio-style preprocessing distorts the single-column model the
        # loss fits (its per-row energy restoration is not representable by
        # one gain per subcarrier, which biases the angle).
        theta_bu, pgd_info = pgd_refine(observation.y_nris, frame.stacked_nris,
                                        bs, grid, theta0_bu, r_bu0,
                                        pgd_config, gains)
        w_ris = [frame.stacked_ris(m) for m in range(grid.num_subcarriers)]
        num_angles = dict_ru.varsigma * ris.num_elements
        theta_ru, phd_info = phd_refine(observation.y_ris, w_ris, ris, grid,
                                        theta0_ru, r_ru0, num_angles,
                                        phd_config)
        ue, r_bu, r_ru = intersect_lines(theta_bu, theta_ru, bs, ris)
    except ValueError as exc:
        diagnostics = dict(coarse_diag)
        diagnostics.update({"fallback": True, "fallback_reason": str(exc)})
        return LocationEstimate(ue0, theta0_bu, theta0_ru, r_bu0, r_ru0,
                                "coarse", diagnostics)

    diagnostics = dict(coarse_diag)
    diagnostics.update(pgd_info)
    diagnostics.update(phd_info)
    diagnostics.update({"fallback": False,
                        "coarse_ue_xy": ue0,
                        "coarse_theta_bu": theta0_bu,
                        "coarse_theta_ru": theta0_ru,
                        "coarse_r_bu": r_bu0,
                        "coarse_r_ru": r_ru0})
    return LocationEstimate(ue, theta_bu, theta_ru, r_bu, r_ru, "refined",
                            diagnostics)
