"""Pilot sounding: combiners, surface phase schedules, received snapshots.

Two sounding phases share one vocabulary: the surface-off phase observes
the direct UE-BS channel through random constant-modulus combiners; the
surface-on phase observes the UE-surface channel through the cascade of
the surface phase schedule, the fixed anchor-to-anchor channel, and
combiners pointed at the surface. Observations are stacked slot-major so
row p*N_RF+i belongs to RF chain i of slot p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rissense.channel import BsRisChannel
from rissense.dictionary import PolarDictionary
from rissense.geometry import ArrayGeometry, SubcarrierGrid, near_response

NOISE_SPECTRAL_DENSITY_DBM_HZ = -174.0


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def noise_power_linear(bandwidth: float, num_subcarriers: int,
                       nsd_dbm_hz: float = NOISE_SPECTRAL_DENSITY_DBM_HZ) -> float:
    """Per-subcarrier noise power: density times per-tone bandwidth."""
    return dbm_to_watts(nsd_dbm_hz) * (bandwidth / num_subcarriers)


def pilot_amplitude(p_tx_dbm: float, num_subcarriers: int) -> float:
    """Per-subcarrier pilot amplitude sqrt(P_tx / M)."""
    return math.sqrt(dbm_to_watts(p_tx_dbm) / num_subcarriers)


def build_w_nris(num_slots: int, n: int, n_rf: int, rng_seed,
                 pgd_row: bool = False) -> tuple:
    """Random constant-modulus combiners for the surface-off phase.

    Entries are e^{j 2 pi z} / sqrt(N_RF) with z uniform. With
    ``pgd_row`` the first RF chain of the first slot becomes a center
    -element selector: the middle element for odd N, the two middle
    elements for even N, zeros elsewhere. That row feeds the gradient
    refinement downstream, which needs one uncombined phase reference.
    """
    if num_slots < 1 or n < 1 or n_rf < 1:
        raise ValueError("slot, element and chain counts must be >= 1")
    rng = np.random.default_rng(rng_seed)
    scale = 1.0 / math.sqrt(n_rf)
    z = rng.uniform(0.0, 1.0, size=(num_slots, n_rf, n))
    w = np.exp(2j * math.pi * z) * scale
    if pgd_row:
        row = np.zeros(n, dtype=complex)
        if n % 2 == 1:
            row[n // 2] = scale
        else:
            row[n // 2 - 1] = scale
            row[n // 2] = scale
        w[0, 0, :] = row
    return tuple(w[p] for p in range(num_slots))


def selector_output_indices(n: int) -> tuple:
    """Element indices the center selector row reads (one or two)."""
    return (n // 2,) if n % 2 == 1 else (n // 2 - 1, n // 2)


def build_w_ris(num_slots: int, bs: ArrayGeometry, ris: ArrayGeometry,
                grid: SubcarrierGrid, n_rf: int, mode: str = "spread") -> tuple:
    """Combiners for the surface-on phase, pointed at the surface center.

    Every row is the conjugated spherical steering vector from the BS
    toward the surface reference point, scaled by sqrt(N)/sqrt(N_RF) so
    entries keep magnitude 1/sqrt(N_RF). ``mode="center"`` evaluates all
    rows at the center frequency; ``mode="spread"`` walks row (i, p)
    through f_c - B/2 + B * ((p-1) N_RF + i) / (N_RF P), ending exactly
    at the upper band edge, so the rows tile the whole bandwidth.
    """
    if mode not in ("center", "spread"):
        raise ValueError(f"unknown mode {mode!r}")
    if num_slots < 1 or n_rf < 1:
        raise ValueError("slot and chain counts must be >= 1")
    theta, r = bs.bearing_to(ris.reference_xy)
    n = bs.num_elements
    scale = math.sqrt(n) / math.sqrt(n_rf)
    out = []
    for p1 in range(1, num_slots + 1):
        rows = np.empty((n_rf, n), dtype=complex)
        for i1 in range(1, n_rf + 1):
            if mode == "center":
                f = grid.center_freq
            else:
                f = (grid.center_freq - grid.bandwidth / 2
                     + grid.bandwidth * ((p1 - 1) * n_rf + i1) / (n_rf * num_slots))
            rows[i1 - 1] = scale * np.conj(near_response(bs, f, theta, r))
        out.append(rows)
    return tuple(out)


def build_ris_phases(num_slots: int, n_ris: int, rng_seed) -> tuple:
    """One-bit surface phase schedule: i.i.d. +-1, equiprobable."""
    rng = np.random.default_rng(rng_seed)
    signs = rng.integers(0, 2, size=(num_slots, n_ris)) * 2.0 - 1.0
    return tuple(signs[p] for p in range(num_slots))


@dataclass
class SoundingFrame:
    """Everything the receiver applies to the air interface in one frame."""

    w_nris: tuple  # surface-off combiners, each (N_RF, N)
    w_ris: tuple  # surface-on combiners, each (N_RF, N)
    ris_phases: tuple  # each (N_RIS,), +-1 entries
    bs_ris: BsRisChannel | None  # anchor-to-anchor channel for stacking
    pilot_amp: float
    noise_power: float
    _ris_stack_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_rf(self) -> int:
        return self.w_nris[0].shape[0] if self.w_nris else self.w_ris[0].shape[0]

    @property
    def stacked_nris(self) -> np.ndarray:
        """W-bar for the surface-off phase: (P_nris * N_RF, N)."""
        return np.vstack(self.w_nris)

    @property
    def stacked_leak(self) -> np.ndarray:
        """W-check applied to the direct channel during the surface-on phase."""
        return np.vstack(self.w_ris)

    def stacked_ris(self, m: int) -> np.ndarray:
        """W-bar on subcarrier m for the surface-on phase: rows of
        W^RIS[p] @ H[m] @ diag(phases[p]), stacked slot-major."""
        if m not in self._ris_stack_cache:
            if self.bs_ris is None:
                raise ValueError("frame carries no anchor-to-anchor channel")
            h = self.bs_ris.matrix(m)
            blocks = [w @ (h * phi[None, :])
                      for w, phi in zip(self.w_ris, self.ris_phases)]
            self._ris_stack_cache[m] = np.vstack(blocks)
        return self._ris_stack_cache[m]

    def validate(self):
        """Constant-modulus and one-bit constraint checks; raises on violation."""
        for name, mats in (("w_nris", self.w_nris), ("w_ris", self.w_ris)):
            for p, w in enumerate(mats):
                mags = np.abs(w) * math.sqrt(w.shape[0])
                nonzero = mags > 1e-12
                if not np.allclose(mags[nonzero], 1.0, rtol=0, atol=1e-9):
                    raise AssertionError(f"{name}[{p}] violates constant modulus")
                zero_rows = np.nonzero(~nonzero)[0]
                if zero_rows.size and not (name == "w_nris" and p == 0
                                           and set(zero_rows) == {0}):
                    raise AssertionError(f"{name}[{p}] has zeros outside the selector row")
        for p, phi in enumerate(self.ris_phases):
            if not np.all(np.isin(phi, (-1.0, 1.0))):
                raise AssertionError(f"ris_phases[{p}] not one-bit")
        return True


@dataclass
class PilotObservation:
    """Received pilot stacks: row m of each field is subcarrier m."""

    y_nris: np.ndarray  # (M, P_nris * N_RF)
    y_ris: np.ndarray  # (M, P_ris * N_RF)
    frame: SoundingFrame


def _per_subcarrier(channel) -> np.ndarray:
    return channel.per_subcarrier if hasattr(channel, "per_subcarrier") else np.asarray(channel)


def _colored_noise(rng, mats, num_subcarriers, sigma2):
    """Slot noise passed through each slot's combiner; (M, P*N_RF)."""
    if not mats or sigma2 == 0.0:
        width = sum(w.shape[0] for w in mats)
        return np.zeros((num_subcarriers, width), dtype=complex)
    parts = []
    scale = math.sqrt(sigma2 / 2.0)
    for w in mats:
        n = w.shape[1]
        raw = scale * (rng.normal(size=(num_subcarriers, n))
                       + 1j * rng.normal(size=(num_subcarriers, n)))
        parts.append(raw @ w.T)
    return np.concatenate(parts, axis=1)


def receive(channels, frame: SoundingFrame, rng_seed) -> PilotObservation:
    """Synthesize both phases' pilot observations.

    ``channels`` is a (direct, reflected) pair: the UE-BS realization and
    the UE-surface realization (either ChannelRealization or plain
    (M, N) arrays). The surface-on phase sees the reflected channel
    through the per-subcarrier surface stack plus the direct channel
    leaking through the bare combiners. Noise is drawn per slot and
    subcarrier at the elements and passed through the combiners, so it
    arrives colored. Surface-off noise is drawn before surface-on noise.
    """
    h_bu = _per_subcarrier(channels[0])
    h_ru = _per_subcarrier(channels[1])
    m_count = h_bu.shape[0]
    if h_ru.shape[0] != m_count:
        raise ValueError("channel subcarrier counts differ")
    rng = np.random.default_rng(rng_seed)
    x = frame.pilot_amp

    w_bar = frame.stacked_nris
    if w_bar.shape[1] != h_bu.shape[1]:
        raise ValueError("surface-off combiner width does not match channel")
    y_nris = x * (h_bu @ w_bar.T)
    y_nris += _colored_noise(rng, frame.w_nris, m_count, frame.noise_power)

    leak = frame.stacked_leak
    if leak.shape[1] != h_bu.shape[1]:
        raise ValueError("surface-on combiner width does not match channel")
    y_ris = x * (h_bu @ leak.T)
    for m in range(m_count):
        stack = frame.stacked_ris(m)
        if stack.shape[1] != h_ru.shape[1]:
            raise ValueError("surface stack width does not match reflected channel")
        y_ris[m] += x * (stack @ h_ru[m])
    y_ris += _colored_noise(rng, frame.w_ris, m_count, frame.noise_power)
    return PilotObservation(y_nris, y_ris, frame)


def equivalent_matrix(frame: SoundingFrame, dictionary: PolarDictionary,
                      link: str = "direct") -> list:
    """Per-subcarrier sensing matrices W-tilde[m] = W-bar[m] @ D[m]."""
    m_count = dictionary.grid.num_subcarriers
    if link == "direct":
        w_bar = frame.stacked_nris
        if w_bar.shape[1] != dictionary.array.num_elements or (
                frame.bs_ris is not None and dictionary.array != frame.bs_ris.receiver):
            raise ValueError("dictionary array does not match the surface-off combiners")
        if not dictionary.frequency_selective and not dictionary.appended:
            shared = w_bar @ dictionary.matrix(0)
            return [shared] * m_count
        return [w_bar @ dictionary.matrix(m) for m in range(m_count)]
    if link == "reflected":
        if frame.bs_ris is not None and dictionary.array != frame.bs_ris.transmitter:
            raise ValueError("dictionary array does not match the surface stack")
        out = []
        for m in range(m_count):
            stack = frame.stacked_ris(m)
            if stack.shape[1] != dictionary.array.num_elements:
                raise ValueError("dictionary array does not match the surface stack")
            out.append(stack @ dictionary.matrix(m))
        return out
    raise ValueError(f"unknown link {link!r}")


def assemble_frame(scene, grid: SubcarrierGrid, p_nris: int, p_ris: int, n_rf: int,
                   p_tx_dbm: float, rng_seed, pgd_row: bool = True,
                   ris_mode: str = "spread",
                   nsd_dbm_hz: float = NOISE_SPECTRAL_DENSITY_DBM_HZ) -> SoundingFrame:
    """Build the full sounding frame for a scene with seeded randomness."""
    from rissense.channel import synthesize_bs_ris_channel

    seq = np.random.SeedSequence(rng_seed)
    s_nris, s_phases = seq.spawn(2)
    w_nris = build_w_nris(p_nris, scene.bs.num_elements, n_rf, s_nris, pgd_row=pgd_row)
    w_ris = build_w_ris(p_ris, scene.bs, scene.ris, grid, n_rf, mode=ris_mode)
    phases = build_ris_phases(p_ris, scene.ris.num_elements, s_phases)
    bs_ris = synthesize_bs_ris_channel(scene.bs, scene.ris, grid,
                                       scene.antenna_gains,
                                       scene.absorption_db_per_km)
    return SoundingFrame(w_nris, w_ris, phases, bs_ris,
                         pilot_amplitude(p_tx_dbm, grid.num_subcarriers),
                         noise_power_linear(grid.bandwidth, grid.num_subcarriers,
                                            nsd_dbm_hz))
