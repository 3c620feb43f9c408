"""Uniform linear array geometry, steering vectors, and field-boundary math.

Conventions used throughout the package:

* angles are carried as sine-angles ``theta = sin(angle-from-broadside)``,
  converted to radians only when reporting;
* subcarrier indices are 0-based: subcarrier ``m`` sits at frequency
  ``f_c - B/2 + m * B / M``;
* steering vectors are returned as plain complex ndarrays of unit
  Euclidean norm (the 1/sqrt(N) factor is always included).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayGeometry:
    """A uniform linear array of isotropic elements in the x-y plane.

    Parameters
    ----------
    num_elements : int
        Number of elements N (>= 1).
    spacing : float
        Element spacing d in meters; the usual choice is half the center
        wavelength.
    orientation : float
        Tilt angle of the array relative to the +x axis, radians.
    reference_xy : tuple
        Coordinates of the array phase center in meters.
    mirrored : bool
        If True the element axis runs at ``pi - orientation`` instead of
        ``orientation``. Two-anchor scenes use this for the right-hand
        anchor so both broadside normals face the shared sector below the
        x-axis, which is what makes one sine-angle convention valid at
        both anchors.
    """

    num_elements: int
    spacing: float
    orientation: float = 0.0
    reference_xy: tuple = (0.0, 0.0)
    mirrored: bool = False

    def __post_init__(self):
        if self.num_elements < 1:
            raise ValueError("num_elements must be >= 1")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    @property
    def element_offsets(self) -> np.ndarray:
        """Signed element offsets delta_n = (2n - N + 1)/2, symmetric about 0."""
        n = np.arange(self.num_elements)
        return (2 * n - self.num_elements + 1) / 2.0

    @property
    def aperture(self) -> float:
        return self.num_elements * self.spacing

    @property
    def axis_unit(self) -> np.ndarray:
        """Unit vector along increasing element index."""
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        if self.mirrored:
            c = -c
        return np.array([c, s])

    def element_positions(self) -> np.ndarray:
        """(N, 2) element coordinates in meters."""
        ref = np.asarray(self.reference_xy, dtype=float)
        return ref[None, :] + self.element_offsets[:, None] * self.spacing * self.axis_unit[None, :]

    def bearing_to(self, point_xy) -> tuple:
        """Sine-angle and range of a point as seen from the array center.

        Returns ``(theta, r)`` where ``theta`` is the projection of the
        unit vector toward the point onto the element axis (i.e. the sine
        of the angle measured from broadside) and ``r`` is the distance in
        meters.
        """
        v = np.asarray(point_xy, dtype=float) - np.asarray(self.reference_xy, dtype=float)
        r = float(np.hypot(v[0], v[1]))
        if r <= 0.0:
            raise ValueError("point coincides with the array reference")
        theta = float(self.axis_unit @ (v / r))
        return theta, r


@dataclass(frozen=True)
class SubcarrierGrid:
    """An OFDM subcarrier grid: M tones spanning bandwidth B around f_c."""

    center_freq: float
    bandwidth: float
    num_subcarriers: int

    def __post_init__(self):
        if self.center_freq <= 0 or self.bandwidth <= 0:
            raise ValueError("center_freq and bandwidth must be positive")
        if self.num_subcarriers < 1:
            raise ValueError("num_subcarriers must be >= 1")
        if self.center_freq - self.bandwidth / 2 <= 0:
            raise ValueError("grid extends to nonpositive frequencies")

    @property
    def frequencies(self) -> np.ndarray:
        m = np.arange(self.num_subcarriers)
        return self.center_freq - self.bandwidth / 2 + m * self.bandwidth / self.num_subcarriers

    @property
    def wavelengths(self) -> np.ndarray:
        return SPEED_OF_LIGHT / self.frequencies

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2 * np.pi * self.frequencies / SPEED_OF_LIGHT

    @property
    def center_wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.center_freq

    def frequency(self, m: int) -> float:
        self._check_index(m)
        return self.center_freq - self.bandwidth / 2 + m * self.bandwidth / self.num_subcarriers

    def wavenumber(self, m: int) -> float:
        return 2 * np.pi * self.frequency(m) / SPEED_OF_LIGHT

    def decimate(self, count: int) -> "SubcarrierGrid":
        """Grid holding every (M/count)-th subcarrier starting at the first.

        When ``count`` divides M the decimated tones coincide exactly with
        a grid of ``count`` subcarriers over the same band, which is what
        this returns.
        """
        if count < 1 or self.num_subcarriers % count != 0:
            raise ValueError("count must divide num_subcarriers")
        return SubcarrierGrid(self.center_freq, self.bandwidth, count)

    def _check_index(self, m):
        if not 0 <= m < self.num_subcarriers:
            raise ValueError(f"subcarrier index {m} outside 0..{self.num_subcarriers - 1}")


def _check_theta(theta):
    if not -1.0 < theta < 1.0:
        raise ValueError(f"sine-angle {theta} outside (-1, 1)")


def element_ranges(array: ArrayGeometry, theta: float, r: float) -> np.ndarray:
    """Exact element-to-source distances r_n for a source at (theta, r).

    r_n = sqrt(r^2 - 2 r delta_n d theta + delta_n^2 d^2).
    """
    if r <= 0:
        raise ValueError("range r must be positive")
    delta_d = array.element_offsets * array.spacing
    sq = r * r - 2 * r * delta_d * theta + delta_d * delta_d
    if np.any(sq <= 0):
        raise ValueError("degenerate geometry: element range is nonpositive")
    return np.sqrt(sq)


def far_response(array: ArrayGeometry, freq, theta: float) -> np.ndarray:
    """Plane-wave response at one or more frequencies.

    ``freq`` may be a scalar (returns shape (N,)) or an array of F
    frequencies (returns shape (F, N)). Unit norm along the last axis.
    """
    _check_theta(theta)
    freq = np.asarray(freq, dtype=float)
    k = 2 * np.pi * freq / SPEED_OF_LIGHT
    phase = np.multiply.outer(k, theta * array.element_offsets * array.spacing)
    out = np.exp(1j * phase) / math.sqrt(array.num_elements)
    return out


def near_response(array: ArrayGeometry, freq, theta: float, r: float) -> np.ndarray:
    """Spherical-wave response at one or more frequencies.

    Element n carries exp(-j k (r_n - r)) / sqrt(N) with the exact
    per-element range r_n; the common bulk phase over distance r is
    removed, as in the channel model's steering factor.
    """
    _check_theta(theta)
    freq = np.asarray(freq, dtype=float)
    k = 2 * np.pi * freq / SPEED_OF_LIGHT
    rn = element_ranges(array, theta, r)
    phase = np.multiply.outer(k, rn - r)
    return np.exp(-1j * phase) / math.sqrt(array.num_elements)


def far_steering(array: ArrayGeometry, grid: SubcarrierGrid, m: int, theta: float) -> np.ndarray:
    """Far-field steering vector on subcarrier m (0-based)."""
    return far_response(array, grid.frequency(m), theta)


def near_steering(array: ArrayGeometry, grid: SubcarrierGrid, m: int, theta: float, r: float) -> np.ndarray:
    """Hybrid-field (spherical wavefront) steering vector on subcarrier m."""
    return near_response(array, grid.frequency(m), theta, r)


def classical_rayleigh(aperture: float, lambda_c: float) -> float:
    """Classical far-field boundary 2 A^2 / lambda."""
    if aperture <= 0 or lambda_c <= 0:
        raise ValueError("aperture and wavelength must be positive")
    return 2.0 * aperture * aperture / lambda_c


def planewave_loss(array: ArrayGeometry, freq: float, theta: float, r: float) -> float:
    """Loss of approximating a spherical wavefront by a plane wave.

    |chi - rho|^2 where chi = b^H b (= 1) and rho = a^H b are the complex
    auto- and cross-correlations of the spherical- and plane-wave
    responses. rho is kept complex before the squared magnitude of the
    difference is taken, so the phase rotation of the correlation counts
    toward the loss as well as its amplitude decay.
    """
    b = near_response(array, freq, theta, r)
    a = far_response(array, freq, theta)
    chi = np.vdot(b, b)
    rho = np.vdot(a, b)
    return float(abs(chi - rho) ** 2)


def effective_rayleigh_freq(array: ArrayGeometry, freq: float, theta: float,
                            hbar: float = 0.1) -> tuple:
    """Angle- and frequency-aware near/far boundary at an explicit frequency.

    Finds the distance Z where the plane-wave approximation loss equals
    ``hbar`` by bisection over [aperture, classical Rayleigh distance] and
    expresses it as Z = eps * (1 - theta^2) * 2 A^2 / lambda.

    Returns
    -------
    (epsilon, distance) : tuple of floats
    """
    if not 0.0 < hbar < 1.0:
        raise ValueError("hbar must lie in (0, 1)")
    _check_theta(theta)
    lam = SPEED_OF_LIGHT / freq
    aperture = array.aperture
    lo = aperture
    hi = classical_rayleigh(aperture, lam)
    f_lo = planewave_loss(array, freq, theta, lo)
    f_hi = planewave_loss(array, freq, theta, hi)
    if not (f_lo > hbar > f_hi):
        raise ValueError(
            f"no sign change on [{lo:.3f}, {hi:.3f}] m: loss({lo:.3f})={f_lo:.4g}, "
            f"loss({hi:.3f})={f_hi:.4g}, hbar={hbar}")
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if planewave_loss(array, freq, theta, mid) > hbar:
            lo = mid
        else:
            hi = mid
    distance = 0.5 * (lo + hi)
    epsilon = distance * lam / (2 * aperture * aperture * (1 - theta * theta))
    return epsilon, distance


def effective_rayleigh(array: ArrayGeometry, grid: SubcarrierGrid, m: int, theta: float,
                       hbar: float = 0.1) -> tuple:
    """Angle- and frequency-aware near/far boundary on subcarrier m.

    Returns
    -------
    (epsilon, distance) : tuple of floats
    """
    return effective_rayleigh_freq(array, grid.frequency(m), theta, hbar)


def squint_shift(grid: SubcarrierGrid, theta: float, m1: int, m2: int) -> float:
    """Far-field apparent-angle displacement between two subcarriers.

    A beam aimed at ``theta`` on subcarrier m1 appears on subcarrier m2 at
    ``theta * f_m1 / f_m2``; the returned value is the displacement
    ``theta * (f_m1 / f_m2 - 1)``.
    """
    _check_theta(theta)
    return theta * (grid.frequency(m1) / grid.frequency(m2) - 1.0)


def apparent_angle(grid: SubcarrierGrid, theta: float, m: int) -> float:
    """Beam direction (f_m / f_c) * theta of a frequency-flat weight vector."""
    _check_theta(theta)
    return theta * grid.frequency(m) / grid.center_freq
