"""Scene generation and wideband hybrid-field channel synthesis.

A scene holds two anchor arrays on the x-axis (base station and reflecting
surface), a user terminal, and scatter clusters inside a 90-degree sector
of radius R_s below the anchors. Channels are sums of spherical-wavefront
path responses with Friis large-scale gains and molecular absorption.

Gain bookkeeping for the reflected link: the hop into the reflecting
surface carries sqrt(G_T * S_eff / 4pi) / R1 and the surface-to-BS
element channel carries sqrt(G_R) * lambda_m / (4pi R2), so the cascade
reproduces the standard reflected-link Friis form
sqrt(G_T G_R S_eff lambda_m^2) / sqrt((4pi)^3 R1^2 R2^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rissense.geometry import (
    SPEED_OF_LIGHT,
    ArrayGeometry,
    SubcarrierGrid,
    near_response,
)

ABSORPTION_DB_PER_KM = -0.45


@dataclass(frozen=True)
class SceneConfig:
    """Anchor placement and scatter statistics for random scene draws."""

    n_bs: int = 256
    n_ris: int = 256
    spacing: float = SPEED_OF_LIGHT / 0.1e12 / 2
    bs_xy: tuple = (-10 * math.sqrt(2), 0.0)
    ris_xy: tuple = (10 * math.sqrt(2), 0.0)
    bs_tilt: float = math.pi / 4
    ris_tilt: float = math.pi / 4
    sector_radius: float = 100.0
    clusters_per_link: int = 3
    paths_per_cluster: int = 6
    ue_xy: tuple | None = (5.96, -10.1)
    antenna_gains: tuple = (1.0, 1.0)
    scatter_area: float = 3.0
    absorption_db_per_km: float = ABSORPTION_DB_PER_KM

    def __post_init__(self):
        if self.clusters_per_link < 0 or self.paths_per_cluster < 1:
            raise ValueError("invalid cluster/path counts")
        if self.sector_radius <= 0:
            raise ValueError("sector_radius must be positive")
        if tuple(self.bs_xy) == tuple(self.ris_xy):
            raise ValueError("anchors must be distinct")


@dataclass(frozen=True)
class Scene:
    ue_xy: tuple
    bs: ArrayGeometry
    ris: ArrayGeometry
    scatterers_bs: tuple
    scatterers_ris: tuple
    sector_radius: float
    paths_per_cluster: int = 6
    antenna_gains: tuple = (1.0, 1.0)
    scatter_area: float = 3.0
    absorption_db_per_km: float = ABSORPTION_DB_PER_KM


@dataclass(frozen=True)
class PathComponent:
    theta: float
    r_last_hop: float
    r_total: float
    gains: np.ndarray
    is_los: bool
    cluster_id: int
    path_id: int


@dataclass
class ChannelRealization:
    """Per-subcarrier channel vectors plus the ground-truth path list."""

    per_subcarrier: np.ndarray  # (M, N) complex
    paths: list


def _sector_point(rng, radius):
    # uniform over the 90-degree sector centered on the -y axis
    phi = rng.uniform(-3 * math.pi / 4, -math.pi / 4)
    r = radius * math.sqrt(rng.uniform(0.0, 1.0))
    return (r * math.cos(phi), r * math.sin(phi))


def in_sector(xy, radius) -> bool:
    r = math.hypot(xy[0], xy[1])
    phi = math.atan2(xy[1], xy[0])
    return r <= radius and -3 * math.pi / 4 <= phi <= -math.pi / 4


def draw_scene(config: SceneConfig, rng_seed) -> Scene:
    """Build a scene: fixed anchors, configured or random UE, random clusters.

    Deterministic for a fixed seed. The reflecting surface's element axis
    is mirrored so that both anchors face the sector with one consistent
    sine-angle convention.
    """
    rng = np.random.default_rng(rng_seed)
    if config.ue_xy is not None:
        ue = tuple(config.ue_xy)
    else:
        ue = _sector_point(rng, config.sector_radius)
    scat_bs = tuple(_sector_point(rng, config.sector_radius)
                    for _ in range(config.clusters_per_link))
    scat_ris = tuple(_sector_point(rng, config.sector_radius)
                     for _ in range(config.clusters_per_link))
    bs = ArrayGeometry(config.n_bs, config.spacing, config.bs_tilt, tuple(config.bs_xy))
    ris = ArrayGeometry(config.n_ris, config.spacing, config.ris_tilt, tuple(config.ris_xy),
                        mirrored=True)
    return Scene(ue, bs, ris, scat_bs, scat_ris, config.sector_radius,
                 config.paths_per_cluster, tuple(config.antenna_gains),
                 config.scatter_area, config.absorption_db_per_km)


def absorption_amplitude(distance, db_per_km=ABSORPTION_DB_PER_KM):
    """Amplitude factor of molecular absorption over ``distance`` meters."""
    return 10.0 ** (db_per_km * (distance / 1000.0) / 20.0)


def los_gain(grid: SubcarrierGrid, m: int, distance: float, antenna_gains=(1.0, 1.0),
             phase: float = 0.0, *, reflected: bool = False, second_distance: float | None = None,
             surface_area: float | None = None,
             absorption_db_per_km: float = ABSORPTION_DB_PER_KM) -> complex:
    """Friis line-of-sight gain on subcarrier m.

    Direct link: sqrt(G_T G_R lambda_m^2) / (4 pi R). With
    ``reflected=True`` the cascaded form over (distance, second_distance)
    with the surface's effective area is used:
    sqrt(G_T G_R S lambda_m^2) / sqrt((4 pi)^3 R1^2 R2^2). Both include
    the absorption amplitude over the total travelled distance and the
    ``exp(j*phase)`` factor.
    """
    if distance <= 0:
        raise ValueError("distance must be positive")
    g_t, g_r = antenna_gains
    lam = SPEED_OF_LIGHT / grid.frequency(m)
    if reflected:
        if second_distance is None or second_distance <= 0:
            raise ValueError("reflected link needs a positive second_distance")
        if surface_area is None or surface_area <= 0:
            raise ValueError("reflected link needs a positive surface_area")
        mag = math.sqrt(g_t * g_r * surface_area * lam * lam) / math.sqrt(
            (4 * math.pi) ** 3 * distance ** 2 * second_distance ** 2)
        total = distance + second_distance
    else:
        mag = math.sqrt(g_t * g_r * lam * lam) / (4 * math.pi * distance)
        total = distance
    return mag * absorption_amplitude(total, absorption_db_per_km) * np.exp(1j * phase)


def _direct_amplitudes(grid, distance, g_t, g_r, db_per_km):
    lam = grid.wavelengths
    return (math.sqrt(g_t * g_r) * lam / (4 * math.pi * distance)
            * absorption_amplitude(distance, db_per_km))


def _direct_scatter_amplitudes(grid, r1, r2, g_t, g_r, area, db_per_km):
    lam = grid.wavelengths
    return (math.sqrt(g_t * g_r * area) * lam / ((4 * math.pi) ** 1.5 * r1 * r2)
            * absorption_amplitude(r1 + r2, db_per_km))


def _surface_hop_amplitudes(grid, r1, g_t, s_eff, db_per_km):
    amp = math.sqrt(g_t * s_eff / (4 * math.pi)) / r1 * absorption_amplitude(r1, db_per_km)
    return np.full(grid.num_subcarriers, amp)


def _surface_scatter_amplitudes(grid, r1, r2, g_t, area, s_eff, db_per_km):
    amp = (math.sqrt(g_t * area * s_eff) / (4 * math.pi * r1 * r2)
           * absorption_amplitude(r1 + r2, db_per_km))
    return np.full(grid.num_subcarriers, amp)


def effective_surface_area(ris: ArrayGeometry) -> float:
    """Effective reflection area (N_RIS * d)^2 of the surface aperture."""
    return ris.aperture ** 2


def synthesize_channel(scene: Scene, array: ArrayGeometry, grid: SubcarrierGrid,
                       rng_seed) -> ChannelRealization:
    """Ground-truth channel from the UE to one anchor array.

    The path list holds the LoS component first, then clusters of
    scattered paths. Each scattered path takes its own scatter point,
    jittered uniformly in a square of the configured scattering area
    around the cluster center, so its angle, last-hop range and total
    travelled distance stay mutually consistent. Scattered paths carry
    an i.i.d. standard complex-normal reflection coefficient; the LoS
    path a uniform phase. Both are flat across the band. Deterministic
    for a fixed (scene, seed) pair.
    """
    if array == scene.bs:
        direct = True
        scatterers = scene.scatterers_bs
    elif array == scene.ris:
        direct = False
        scatterers = scene.scatterers_ris
    else:
        raise ValueError("array does not belong to the scene")

    rng = np.random.default_rng(rng_seed)
    g_t, g_r = scene.antenna_gains
    db_km = scene.absorption_db_per_km
    s_eff = effective_surface_area(scene.ris)
    side = math.sqrt(scene.scatter_area)
    freqs = grid.frequencies

    paths = []
    theta0, r0 = array.bearing_to(scene.ue_xy)
    phase = rng.uniform(0.0, 2 * math.pi)
    if direct:
        amp = _direct_amplitudes(grid, r0, g_t, g_r, db_km)
    else:
        amp = _surface_hop_amplitudes(grid, r0, g_t, s_eff, db_km)
    paths.append(PathComponent(theta0, r0, r0, amp * np.exp(1j * phase),
                               is_los=True, cluster_id=0, path_id=0))

    ue = np.asarray(scene.ue_xy, dtype=float)
    for li, center in enumerate(scatterers, start=1):
        for gi in range(1, scene.paths_per_cluster + 1):
            point = np.asarray(center, dtype=float) + rng.uniform(-side / 2, side / 2, size=2)
            coeff = (rng.normal() + 1j * rng.normal()) / math.sqrt(2.0)
            theta, r_last = array.bearing_to(point)
            r_first = float(np.hypot(*(point - ue)))
            if r_first <= 0:
                # scatter point landed on the terminal itself; measure-zero
                continue
            if direct:
                amp = _direct_scatter_amplitudes(grid, r_first, r_last, g_t, g_r,
                                                 scene.scatter_area, db_km)
            else:
                amp = _surface_scatter_amplitudes(grid, r_first, r_last, g_t,
                                                  scene.scatter_area, s_eff, db_km)
            paths.append(PathComponent(theta, r_last, r_first + r_last, amp * coeff,
                                       is_los=False, cluster_id=li, path_id=gi))

    h = np.zeros((grid.num_subcarriers, array.num_elements), dtype=complex)
    for p in paths:
        steer = near_response(array, freqs, p.theta, p.r_last_hop)
        travel = np.exp(-2j * math.pi * freqs / SPEED_OF_LIGHT * p.r_total)
        h += (p.gains * travel)[:, None] * steer
    return ChannelRealization(h, paths)


def reconstruct(channel: ChannelRealization, array: ArrayGeometry,
                grid: SubcarrierGrid) -> np.ndarray:
    """Rebuild the per-subcarrier vectors from the path list."""
    freqs = grid.frequencies
    h = np.zeros((grid.num_subcarriers, array.num_elements), dtype=complex)
    for p in channel.paths:
        steer = near_response(array, freqs, p.theta, p.r_last_hop)
        travel = np.exp(-2j * math.pi * freqs / SPEED_OF_LIGHT * p.r_total)
        h += (p.gains * travel)[:, None] * steer
    return h


class BsRisChannel:
    """Element-to-element anchor-to-anchor channel, evaluated per subcarrier.

    Entries combine the free-space Friis amplitude at each element pair
    distance with the corresponding propagation phase. Matrices are
    produced lazily by :meth:`matrix` because the full (M, N, N_RIS)
    stack is prohibitively large at fine subcarrier resolution.
    """

    def __init__(self, receiver: ArrayGeometry, transmitter: ArrayGeometry,
                 grid: SubcarrierGrid, antenna_gains=(1.0, 1.0),
                 absorption_db_per_km=ABSORPTION_DB_PER_KM):
        self.receiver = receiver
        self.transmitter = transmitter
        self.grid = grid
        self.gain = math.sqrt(antenna_gains[0] * antenna_gains[1])
        self.db_per_km = absorption_db_per_km
        diff = (receiver.element_positions()[:, None, :]
                - transmitter.element_positions()[None, :, :])
        self.distances = np.linalg.norm(diff, axis=-1)  # (N_rx, N_tx)
        if np.any(self.distances <= 0):
            raise ValueError("overlapping anchor elements")
        self._attn = self.gain / (4 * math.pi * self.distances) \
            * absorption_amplitude(self.distances, absorption_db_per_km)

    @property
    def shape(self):
        return (self.grid.num_subcarriers, self.receiver.num_elements,
                self.transmitter.num_elements)

    def matrix(self, m: int) -> np.ndarray:
        """(N_rx, N_tx) channel matrix on subcarrier m."""
        f = self.grid.frequency(m)
        lam = SPEED_OF_LIGHT / f
        return lam * self._attn * np.exp(-2j * math.pi * f / SPEED_OF_LIGHT * self.distances)

    def __getitem__(self, m):
        return self.matrix(m)

    def materialize(self) -> np.ndarray:
        """Full (M, N_rx, N_tx) stack; only sensible at coarse grids."""
        return np.stack([self.matrix(m) for m in range(self.grid.num_subcarriers)])


def synthesize_bs_ris_channel(receiver: ArrayGeometry, transmitter: ArrayGeometry,
                              grid: SubcarrierGrid, antenna_gains=(1.0, 1.0),
                              absorption_db_per_km=ABSORPTION_DB_PER_KM) -> BsRisChannel:
    """Deterministic geometry-driven channel between the two anchor arrays.

    ``matrix(m)`` rows index the first array's elements, columns the
    second's, so swapping the arguments transposes every matrix.
    """
    return BsRisChannel(receiver, transmitter, grid, antenna_gains, absorption_db_per_km)
