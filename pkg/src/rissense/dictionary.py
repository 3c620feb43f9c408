"""Polar-domain dictionaries for sparse recovery over an OFDM band.

Three builders:

* ``build_fsprd`` -- frequency-selective dictionary: every column is the
  steering vector re-evaluated at each subcarrier's own frequency, so a
  physical source stays aligned with one column across the whole band.
* ``build_ptm`` -- the same (angle, ring) grid evaluated once at the
  center frequency and reused on every subcarrier (frequency-flat
  baseline).
* ``build_ftm`` -- orthonormal plane-wave (DFT) columns, angle-only
  baseline.

The angle grid holds ``varsigma * N`` points theta_i = (2i-1)/(vN) - 1
for i = 1..vN. Each angle carries S rings: ring 0 is the plane-wave
atom, ring s >= 1 sits at r = 2 * Z_c * (1 - theta^2) / s where Z_c is
the effective near/far boundary of the array at the center frequency.
Columns are ordered angle-major, ring-minor: column index k = (angle
index) * S + (ring index), zero-based internally. The public
``grid_params`` accessor speaks the one-based index convention used by
the coarse-angle readout downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from rissense.geometry import (
    SPEED_OF_LIGHT,
    ArrayGeometry,
    SubcarrierGrid,
    effective_rayleigh_freq,
    far_response,
    near_response,
)

FAR_FIELD = math.inf


def _theta_of(i1: int, v_n: int) -> float:
    # one-based angle index -> sine-angle; shared by builder and accessor
    return (2 * i1 - 1) / v_n - 1.0


def _ring_radius(theta: float, s: int, z_center: float) -> float:
    if s == 0:
        return FAR_FIELD
    return 2.0 * z_center * (1.0 - theta * theta) / s


@dataclass(frozen=True, eq=False)
class PolarDictionary:
    """Immutable atom bank: per-subcarrier matrices plus the grid map.

    The base atoms are shared between instances; appending an atom
    returns a new value that reuses the base storage, so concurrent
    readers of the original never observe a change.
    """

    array: ArrayGeometry
    grid: SubcarrierGrid
    s_rings: int
    varsigma: int
    frequency_selective: bool
    z_center: float
    base_thetas: np.ndarray  # (K0,)
    base_ranges: np.ndarray  # (K0,), inf marks plane-wave columns
    base_atoms: tuple | None  # per-subcarrier (N, K0) matrices; None = lazy
    flat_atoms: np.ndarray | None = None  # single (N, K0) matrix reused across m
    appended: tuple = ()  # ((theta, r), ...)
    appended_atoms: tuple = ()  # per-subcarrier (N, A) matrices

    @property
    def num_base(self) -> int:
        return self.base_thetas.size

    @property
    def num_columns(self) -> int:
        return self.num_base + len(self.appended)

    @property
    def grid_meta(self) -> list:
        meta = list(zip(self.base_thetas.tolist(), self.base_ranges.tolist()))
        meta.extend(self.appended)
        return meta

    def base_matrix(self, m: int) -> np.ndarray:
        if self.flat_atoms is not None:
            return self.flat_atoms
        if self.base_atoms is not None:
            return self.base_atoms[m]
        return _generate_base(self.array, self.grid.frequency(m),
                              self.base_thetas, self.base_ranges)

    def matrix(self, m: int) -> np.ndarray:
        """(N, K) atom matrix on subcarrier m, appended columns last."""
        base = self.base_matrix(m)
        if not self.appended:
            return base
        return np.hstack([base, self.appended_atoms[m]])

    @property
    def atoms(self) -> list:
        """All per-subcarrier matrices; materializes lazy dictionaries."""
        return [self.matrix(m) for m in range(self.grid.num_subcarriers)]

    def column(self, m: int, k: int) -> np.ndarray:
        if not 0 <= k < self.num_columns:
            raise IndexError(f"column {k} outside 0..{self.num_columns - 1}")
        if k < self.num_base:
            return self.base_matrix(m)[:, k]
        return self.appended_atoms[m][:, k - self.num_base]

    def grid_params(self, index: int) -> tuple:
        """(theta, r) of a one-based column index; r is inf for plane waves."""
        if not 1 <= index <= self.num_columns:
            raise IndexError(f"index {index} outside 1..{self.num_columns}")
        k = index - 1
        if k < self.num_base:
            return float(self.base_thetas[k]), float(self.base_ranges[k])
        return self.appended[k - self.num_base]


def grid_params(dictionary: PolarDictionary, index: int) -> tuple:
    """(theta, r) behind a one-based column index."""
    return dictionary.grid_params(index)


def _generate_base(array, freq, thetas, ranges) -> np.ndarray:
    cols = np.empty((array.num_elements, thetas.size), dtype=complex)
    for k in range(thetas.size):
        if math.isinf(ranges[k]):
            cols[:, k] = far_response(array, freq, thetas[k])
        else:
            cols[:, k] = near_response(array, freq, thetas[k], ranges[k])
    return cols


def _base_grid(array, grid, s_rings, varsigma, hbar):
    if s_rings < 1 or varsigma < 1:
        raise ValueError("need at least one ring and redundancy factor >= 1")
    v_n = varsigma * array.num_elements
    z_center = effective_rayleigh_freq(array, grid.center_freq, 0.0, hbar)[1]
    thetas = np.empty(v_n * s_rings)
    ranges = np.empty(v_n * s_rings)
    for i1 in range(1, v_n + 1):
        theta = _theta_of(i1, v_n)
        for s in range(s_rings):
            k = (i1 - 1) * s_rings + s
            thetas[k] = theta
            ranges[k] = _ring_radius(theta, s, z_center)
    return z_center, thetas, ranges


def build_fsprd(array: ArrayGeometry, grid: SubcarrierGrid, s_rings: int,
                varsigma: int, hbar: float = 0.1, lazy: bool = False) -> PolarDictionary:
    """Frequency-selective polar dictionary (K = varsigma*N*s_rings columns).

    With ``lazy=True`` no atoms are stored; ``matrix(m)`` regenerates the
    requested subcarrier on demand. Use it when M*N*K complex entries
    would not fit comfortably in memory.
    """
    z_center, thetas, ranges = _base_grid(array, grid, s_rings, varsigma, hbar)
    atoms = None
    if not lazy:
        stack = _atom_stack(array, grid, thetas, ranges)
        atoms = tuple(stack[m] for m in range(grid.num_subcarriers))
    return PolarDictionary(array, grid, s_rings, varsigma, True, z_center,
                           thetas, ranges, atoms)


def _atom_stack(array, grid, thetas, ranges):
    # one steering call per column, vectorized over the band, so dictionary
    # columns share the steering code path bit for bit
    freqs = grid.frequencies
    out = np.empty((grid.num_subcarriers, array.num_elements, thetas.size), dtype=complex)
    for k in range(thetas.size):
        if math.isinf(ranges[k]):
            out[:, :, k] = far_response(array, freqs, thetas[k])
        else:
            out[:, :, k] = near_response(array, freqs, thetas[k], ranges[k])
    return out


def build_ptm(array: ArrayGeometry, grid: SubcarrierGrid, s_rings: int,
              varsigma: int, hbar: float = 0.1) -> PolarDictionary:
    """Frequency-flat polar dictionary: the FSPRD grid frozen at f_c."""
    z_center, thetas, ranges = _base_grid(array, grid, s_rings, varsigma, hbar)
    flat = _generate_base(array, grid.center_freq, thetas, ranges)
    return PolarDictionary(array, grid, s_rings, varsigma, False, z_center,
                           thetas, ranges, None, flat_atoms=flat)


def build_ftm(array: ArrayGeometry, grid: SubcarrierGrid | None = None) -> PolarDictionary:
    """Orthonormal plane-wave dictionary (one ring, redundancy 1).

    Columns are evaluated at the frequency whose half wavelength equals
    the element spacing (the center frequency of a half-wave design), so
    the Gram matrix is exactly the identity.
    """
    n = array.num_elements
    freq = SPEED_OF_LIGHT / (2 * array.spacing) if grid is None else grid.center_freq
    thetas = np.array([_theta_of(i1, n) for i1 in range(1, n + 1)])
    ranges = np.full(n, FAR_FIELD)
    flat = _generate_base(array, freq, thetas, ranges)
    if grid is None:
        grid = SubcarrierGrid(freq, 1.0, 1)  # single-tone placeholder band
    return PolarDictionary(array, grid, 1, 1, False, math.nan, thetas, ranges,
                           None, flat_atoms=flat)


def append_atom(dictionary: PolarDictionary, theta: float, r: float):
    """New dictionary with a steering column at (theta, r) appended.

    Returns ``(new_dictionary, index)`` where ``index`` is the one-based
    position of the new column. The input dictionary is left untouched.
    """
    if not -1.0 < theta < 1.0:
        raise ValueError("theta outside (-1, 1)")
    if not r > 0:
        raise ValueError("r must be positive")
    grid = dictionary.grid
    if dictionary.frequency_selective:
        freqs = [grid.frequency(m) for m in range(grid.num_subcarriers)]
    else:
        freqs = [grid.center_freq] * grid.num_subcarriers
    new_cols = [near_response(dictionary.array, f, theta, r)[:, None] for f in freqs]
    if dictionary.appended_atoms:
        merged = tuple(np.hstack([old, col]) for old, col
                       in zip(dictionary.appended_atoms, new_cols))
    else:
        merged = tuple(new_cols)
    out = replace(dictionary,
                  appended=dictionary.appended + ((theta, r),),
                  appended_atoms=merged)
    return out, out.num_columns
