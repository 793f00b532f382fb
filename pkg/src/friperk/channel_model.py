"""Synthetic sparse-common-support channels sampled on uniform DFT pilots.

Delays are stored as fractions of the frame duration. A path with delay ``u``
contributes ``exp(-2j*pi*b*u)`` to DFT bin ``b``; every phase/delay conversion
in the package uses this single convention.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import LayoutError, PlacementError

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER = 2 * np.pi * 2e9


@dataclass(frozen=True)
class PilotLayout:
    """Comb of ``2M+1`` pilots spaced ``D`` bins apart, centred on DC.

    The frame holds ``N_f = 2*M*D + 1`` bins indexed ``-M*D .. M*D``.
    """

    M: int
    D: int = 1

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise LayoutError(f"M must be a positive integer, got {self.M}")
        if int(self.D) != self.D or self.D < 1:
            raise LayoutError(f"D must be a positive integer, got {self.D}")

    @classmethod
    def from_frame(cls, N_f: int, D: int) -> "PilotLayout":
        if N_f % 2 == 0 or (N_f - 1) % (2 * D):
            raise LayoutError(f"N_f={N_f} is not of the form 2*M*{D}+1")
        return cls((N_f - 1) // (2 * D), D)

    @property
    def N_f(self) -> int:
        return 2 * self.M * self.D + 1

    @property
    def N(self) -> int:
        return 2 * self.M + 1

    @property
    def half_window(self) -> float:
        """Largest admissible ``|u|`` for aliasing-free pilot sampling."""
        return 1.0 / (2 * self.D)

    @property
    def pilot_bins(self) -> np.ndarray:
        return self.D * np.arange(-self.M, self.M + 1)

    @property
    def frame_bins(self) -> np.ndarray:
        half = self.M * self.D
        return np.arange(-half, half + 1)

    @property
    def data_bins(self) -> np.ndarray:
        bins = self.frame_bins
        return bins[bins % self.D != 0]

    def pilot_rows(self) -> np.ndarray:
        """Row indices of the pilot bins inside a full-frame array."""
        return self.pilot_bins + self.M * self.D


@dataclass(frozen=True, eq=False)
class ChannelSpec:
    delays: np.ndarray                       # (K,) frame fractions
    gains: np.ndarray                        # (K, P) complex
    antenna_positions: Optional[np.ndarray] = None   # (P, 2) metres
    carrier_angular_freq: float = DEFAULT_CARRIER
    girth: float = 0.0
    cluster_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        delays = np.atleast_1d(np.asarray(self.delays, dtype=float))
        gains = np.asarray(self.gains, dtype=complex)
        if gains.ndim == 1:
            gains = gains[:, None]
        if gains.shape[0] != delays.shape[0]:
            raise ValueError("gains must have one row per delay")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "gains", gains)

    @property
    def K(self) -> int:
        return self.delays.shape[0]

    @property
    def P(self) -> int:
        return self.gains.shape[1]

    def to_dict(self) -> dict:
        out = {
            "delays": self.delays.tolist(),
            "gains": _complex_to_list(self.gains),
            "carrier_angular_freq": self.carrier_angular_freq,
            "girth": self.girth,
        }
        if self.antenna_positions is not None:
            out["antenna_positions"] = np.asarray(self.antenna_positions).tolist()
        if self.cluster_ids is not None:
            out["cluster_ids"] = np.asarray(self.cluster_ids).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        pos = d.get("antenna_positions")
        ids = d.get("cluster_ids")
        return cls(
            delays=np.asarray(d["delays"], dtype=float),
            gains=_complex_from_list(d["gains"]),
            antenna_positions=None if pos is None else np.asarray(pos, dtype=float),
            carrier_angular_freq=float(d.get("carrier_angular_freq", DEFAULT_CARRIER)),
            girth=float(d.get("girth", 0.0)),
            cluster_ids=None if ids is None else np.asarray(ids, dtype=int),
        )


@dataclass(frozen=True, eq=False)
class PilotMeasurements:
    layout: PilotLayout
    samples: np.ndarray          # (N, P); row n+M is pilot bin n*D
    noise_variance: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=complex)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] != self.layout.N:
            raise LayoutError(
                f"expected {self.layout.N} pilot rows, got {samples.shape[0]}")
        object.__setattr__(self, "samples", samples)

    @property
    def P(self) -> int:
        return self.samples.shape[1]

    def to_dict(self) -> dict:
        return {
            "layout": {"M": self.layout.M, "D": self.layout.D, "N_f": self.layout.N_f},
            "samples": _complex_to_list(self.samples),
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PilotMeasurements":
        lay = d["layout"]
        layout = PilotLayout(int(lay["M"]), int(lay["D"]))
        if "N_f" in lay and int(lay["N_f"]) != layout.N_f:
            raise LayoutError("layout N_f inconsistent with M and D")
        return cls(layout, _complex_from_list(d["samples"]),
                   float(d.get("noise_variance", 0.0)))


def _complex_to_list(a) -> list:
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def _complex_from_list(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.shape[-1] != 2:
        raise ValueError("complex values must be encoded as [re, im] pairs")
    return a[..., 0] + 1j * a[..., 1]


def dumps(obj) -> str:
    return json.dumps(obj.to_dict())


# --------------------------------------------------------------------------
# Bessel J0 (rational fit below 8, Hankel asymptotic form above)

def bessel_j0(x):
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    out = np.empty_like(ax)

    small = ax < 8.0
    y = ax[small] ** 2
    num = 57568490574.0 + y * (-13362590354.0 + y * (651619640.7 + y * (
        -11214424.18 + y * (77392.33017 + y * -184.9052456))))
    den = 57568490411.0 + y * (1029532985.0 + y * (9494680.718 + y * (
        59272.64853 + y * (267.8532712 + y))))
    # rescale so that J0(0) is exactly 1 (the raw fit is off by ~3e-9)
    out[small] = (num / den) * (57568490411.0 / 57568490574.0)

    big = ~small
    xb = ax[big]
    z = 8.0 / xb
    y = z * z
    xx = xb - 0.785398164
    p0 = 1.0 + y * (-0.1098628627e-2 + y * (0.2734510407e-4 + y * (
        -0.2073370639e-5 + y * 0.2093887211e-6)))
    q0 = -0.1562499995e-1 + y * (0.1430488765e-3 + y * (-0.6911147651e-5 + y * (
        0.7621095161e-6 - y * 0.934935152e-7)))
    out[big] = np.sqrt(0.636619772 / xb) * (np.cos(xx) * p0 - z * np.sin(xx) * q0)
    return out if out.ndim else float(out)


def spatial_correlation(positions, carrier_angular_freq=DEFAULT_CARRIER) -> np.ndarray:
    """Antenna correlation matrix ``J0(d_mn * w_c / c)`` for narrow scatterers."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    return bessel_j0(dist * carrier_angular_freq / SPEED_OF_LIGHT)


def _psd_sqrt(R: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(R)
    if w.min() < -1e-12 * max(np.trace(R).real, 1.0):
        raise ValueError("correlation matrix is not positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


# --------------------------------------------------------------------------
# Delay placement

def default_min_separation(layout: PilotLayout) -> float:
    return 1.0 / (4 * layout.N)


def _place_delays(rng, K, width, min_sep):
    """K points on a circle of length ``width`` with pairwise gaps >= min_sep,
    returned centred in ``(-width/2, width/2]``."""
    free = width - K * min_sep
    if free <= 0:
        raise PlacementError(
            f"cannot place {K} paths {min_sep:g} apart in a window of {width:g}")
    x = np.sort(rng.uniform(0.0, free, size=K)) + min_sep * np.arange(K)
    x = np.mod(x + rng.uniform(0.0, width), width) - width / 2
    x[x <= -width / 2] += width
    return np.sort(x)


def _draw_gains(rng, powers, P, positions, carrier):
    K = powers.shape[0]
    z = (rng.standard_normal((K, P)) + 1j * rng.standard_normal((K, P))) / np.sqrt(2)
    if positions is not None:
        S = _psd_sqrt(spatial_correlation(positions, carrier))
        z = z @ S.T
    return np.sqrt(powers)[:, None] * z


def synth_scs_channel(P, K, layout: PilotLayout, decay=0.0, spatial_corr=False,
                      positions=None, carrier_angular_freq=DEFAULT_CARRIER,
                      seed=0, min_sep=None, window=None) -> ChannelSpec:
    """Rayleigh multipath channel shared by ``P`` antennas.

    Path powers decay as ``exp(-decay*k)`` and are normalised to unit total
    power. Delays are uniform over the admissible window (or ``window`` if
    narrower) with circular separation at least ``min_sep``. When
    ``spatial_corr`` is set each path's antenna gains are coloured with the
    J0 correlation of ``positions``; distinct paths stay independent.
    """
    if K < 1 or P < 1:
        raise ValueError("need K >= 1 and P >= 1")
    if spatial_corr:
        if positions is None:
            raise ValueError("spatial correlation needs antenna positions")
        if np.asarray(positions).shape[0] != P:
            raise ValueError("one position per antenna required")
    rng = np.random.default_rng(seed)
    width = 2 * layout.half_window if window is None else float(window)
    if width > 2 * layout.half_window + 1e-15:
        raise PlacementError("window wider than the admissible delay range")
    if min_sep is None:
        min_sep = default_min_separation(layout)
    delays = _place_delays(rng, K, width, min_sep)
    powers = np.exp(-decay * np.arange(K))
    powers /= powers.sum()
    gains = _draw_gains(rng, powers, P, positions if spatial_corr else None,
                        carrier_angular_freq)
    return ChannelSpec(delays, gains,
                       antenna_positions=None if positions is None else np.asarray(positions, float),
                       carrier_angular_freq=carrier_angular_freq)


def synth_clustered_channel(P, K_clusters, reflections_per_cluster, girth,
                            layout: PilotLayout, seed=0, decay=0.0,
                            intra_decay=0.5, min_sep=None) -> ChannelSpec:
    """Clusters of reflections with exponentially decaying energy.

    Each cluster leads with a Rayleigh path at ``t_k``; the remaining
    reflections sit at ``t_k + offset`` with offsets uniform in ``[0, girth]``,
    energy ``exp(-intra_decay*l)`` relative to the leader and uniform phases.
    With ``girth == 0`` and one reflection per cluster this reduces exactly to
    :func:`synth_scs_channel` with the same seed.
    """
    if girth < 0:
        raise ValueError("girth must be nonnegative")
    if reflections_per_cluster < 1:
        raise ValueError("need at least one reflection per cluster")
    full = 2 * layout.half_window
    if girth >= full:
        raise PlacementError("cluster girth exceeds the delay window")
    base = synth_scs_channel(P, K_clusters, layout, decay=decay, seed=seed,
                             min_sep=min_sep, window=full - girth)
    centers = base.delays - girth / 2
    R = reflections_per_cluster
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    delays = [centers]
    gains = [base.gains]
    ids = [np.arange(K_clusters)]
    cluster_power = np.sum(np.abs(base.gains) ** 2, axis=1) / P
    for l in range(1, R):
        offs = rng.uniform(0.0, girth, size=K_clusters)
        amp = np.sqrt(cluster_power * np.exp(-intra_decay * l))
        phase = np.exp(2j * np.pi * rng.uniform(size=(K_clusters, P)))
        mag = np.abs(rng.standard_normal((K_clusters, P)) +
                     1j * rng.standard_normal((K_clusters, P))) / np.sqrt(2)
        delays.append(centers + offs)
        gains.append(amp[:, None] * mag * phase)
        ids.append(np.arange(K_clusters))
    delays = np.concatenate(delays)
    gains = np.concatenate(gains)
    ids = np.concatenate(ids)

    delays, gains, ids = _merge_coincident(delays, gains, ids)
    order = np.argsort(delays, kind="stable")
    return ChannelSpec(delays[order], gains[order], girth=float(girth),
                       carrier_angular_freq=base.carrier_angular_freq,
                       cluster_ids=ids[order])


def _merge_coincident(delays, gains, ids, tol=1e-15):
    order = np.argsort(delays, kind="stable")
    d, g, c = delays[order], gains[order], ids[order]
    keep = np.ones(d.shape[0], dtype=bool)
    for i in range(1, d.shape[0]):
        j = i - 1
        while not keep[j]:
            j -= 1
        if d[i] - d[j] <= tol:
            g[j] = g[j] + g[i]
            keep[i] = False
    if keep.all():
        return delays, gains, ids
    return d[keep], g[keep], c[keep]


# --------------------------------------------------------------------------
# Sampling and noise

def steering(bins, delays) -> np.ndarray:
    """``exp(-2j*pi*bin*delay)`` with one row per bin and one column per delay."""
    return np.exp(-2j * np.pi * np.outer(np.asarray(bins, float), np.asarray(delays, float)))


def check_delays(delays, layout: PilotLayout):
    hw = layout.half_window
    d = np.asarray(delays, dtype=float)
    if d.size and (np.any(d > hw * (1 + 1e-12)) or np.any(d <= -hw * (1 + 1e-12))):
        raise PlacementError(f"delays must lie in (-{hw:g}, {hw:g}]")


def sample_pilots(spec: ChannelSpec, layout: PilotLayout) -> PilotMeasurements:
    check_delays(spec.delays, layout)
    samples = steering(layout.pilot_bins, spec.delays) @ spec.gains
    return PilotMeasurements(layout, samples, 0.0)


def complex_noise(rng, shape, variance) -> np.ndarray:
    scale = math.sqrt(variance / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def add_awgn(meas: PilotMeasurements, snr_db: float, seed=0) -> PilotMeasurements:
    """Add circular white Gaussian noise at ``snr_db`` relative to the mean
    pilot power over all antennas."""
    if meas.samples.size == 0:
        raise ValueError("empty measurements")
    if np.isposinf(snr_db):
        return PilotMeasurements(meas.layout, meas.samples.copy(), meas.noise_variance)
    power = float(np.mean(np.abs(meas.samples) ** 2))
    if power == 0.0:
        raise ValueError("signal power is zero; SNR is undefined")
    var = power / 10 ** (snr_db / 10)
    rng = np.random.default_rng(seed)
    noisy = meas.samples + complex_noise(rng, meas.samples.shape, var)
    return PilotMeasurements(meas.layout, noisy, meas.noise_variance + var)
