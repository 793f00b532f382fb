"""Non-sparse lowpass interpolation and the RA-ORMP discrete-sparsity baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel_model import PilotLayout, PilotMeasurements, steering
from .exceptions import PlacementError


def _window(layout: PilotLayout, delay_window):
    full = 2 * layout.half_window
    if delay_window is None:
        return full
    w = float(delay_window)
    if w <= 0:
        raise PlacementError("delay window must be positive")
    if w > full * (1 + 1e-12):
        raise PlacementError(f"delay window {w:g} exceeds the admissible {full:g} (1/D)")
    return w


def tap_delays(layout: PilotLayout) -> np.ndarray:
    """Delays of the ``N`` taps resolved by an ``N``-point transform of the pilots."""
    return np.arange(-layout.M, layout.M + 1) / (layout.N * layout.D)


def lowpass_interpolate(meas: PilotMeasurements, layout: Optional[PilotLayout] = None,
                        delay_window=None) -> np.ndarray:
    """Interpolate the pilots onto all ``N_f`` bins through the delay domain.

    The pilots are taken to ``N`` taps with an inverse DFT, taps whose delay
    falls outside ``delay_window`` (centred, frame-fraction width) are zeroed,
    and the remaining taps are evaluated on every frame bin. This is an
    orthogonal projection on the pilot samples, and it reproduces them exactly
    when the window spans the whole admissible range ``1/D``.
    """
    layout = meas.layout if layout is None else layout
    w = _window(layout, delay_window)
    x = meas.samples
    taps = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(x, axes=0), axis=0), axes=0)
    u = tap_delays(layout)
    mask = (u > -w / 2 - 1e-15) & (u <= w / 2 + 1e-15)
    return steering(layout.frame_bins, u[mask]) @ taps[mask]


def lowpass_kernel(layout: PilotLayout) -> np.ndarray:
    """Dense ``(N_f, N)`` interpolation kernel of :func:`lowpass_interpolate`
    for the full window: ``sin(pi*k/D) / (N * sin(pi*k/(N*D)))`` with
    ``k = b - n*D``, equal to one where ``k`` is a multiple of ``N*D``."""
    k = layout.frame_bins[:, None] - layout.pilot_bins[None, :]
    N, D = layout.N, layout.D
    den = N * np.sin(np.pi * k / (N * D))
    on = np.isclose(np.mod(k, N * D), 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sin(np.pi * k / D) / den
    limit = np.cos(np.pi * k / D) / np.cos(np.pi * k / (N * D))
    return np.where(on, limit, out).astype(complex)


def printed_kernel(layout: PilotLayout) -> np.ndarray:
    """``sin(pi*k/D) / sin(pi*k/N_f)`` with the removable singularity filled
    by its limit ``N_f/D``."""
    k = layout.frame_bins[:, None] - layout.pilot_bins[None, :]
    Nf, D = layout.N_f, layout.D
    on = np.mod(k, Nf) == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sin(np.pi * k / D) / np.sin(np.pi * k / Nf)
    return np.where(on, Nf / D, out)


# --------------------------------------------------------------------------
# RA-ORMP

@dataclass(frozen=True, eq=False)
class DelayGrid:
    delays: np.ndarray         # (G,) candidate delays
    dictionary: np.ndarray     # (N, G) raw columns
    normalized: np.ndarray     # (N, G) unit-norm columns
    oversample: int = 1
    window: float = 1.0

    @property
    def size(self) -> int:
        return self.delays.size


def build_delay_grid(layout: PilotLayout, delay_window=None, oversample: int = 1) -> DelayGrid:
    if int(oversample) != oversample or oversample < 1:
        raise ValueError("oversample must be an integer >= 1")
    w = _window(layout, delay_window)
    step = 1.0 / (layout.N * layout.D * oversample)
    m_max = int(np.floor(w / 2 / step + 1e-9))
    m = np.arange(-m_max, m_max + 1)
    u = m * step
    u = u[(u > -w / 2 + 1e-15) & (u <= w / 2 + 1e-15)]
    if u.size == 0:
        raise PlacementError("delay window contains no grid point")
    Phi = steering(layout.pilot_bins, u)
    return DelayGrid(u, Phi, Phi / np.linalg.norm(Phi, axis=0), int(oversample), w)


@dataclass
class OrmpResult:
    support: list                  # grid indices in selection order
    coefficients: np.ndarray       # (len(support), P)
    delays: np.ndarray
    residual_history: list = field(default_factory=list)
    collapsed: bool = False


def noise_floor_ratio(meas: PilotMeasurements, margin: float = 0.5,
                      noise_variance: Optional[float] = None) -> float:
    """Residual-energy ratio at which RA-ORMP stops when K is unknown."""
    var = meas.noise_variance if noise_variance is None else noise_variance
    energy = float(np.sum(np.abs(meas.samples) ** 2))
    if energy == 0:
        return 1.0
    return var * meas.samples.size * (1 + margin) / energy


def ra_ormp(meas: PilotMeasurements, grid: DelayGrid, K_target: Optional[int] = None,
            residual_threshold: Optional[float] = None, rank_tol: float = 1e-10) -> OrmpResult:
    """Rank-aware order-recursive matching pursuit over ``grid``.

    Each step projects the unselected atoms off the span of the selected
    ones, renormalizes them, and picks the atom best aligned with an
    orthonormal basis of the residual subspace. Stops at ``K_target`` atoms
    or once the residual energy ratio drops below ``residual_threshold``.
    """
    Y = meas.samples
    N, G = grid.dictionary.shape
    k_cap = min(N, G)
    if K_target is not None and K_target > k_cap:
        raise ValueError(f"K_target must be <= {k_cap}")
    limit = k_cap if K_target is None else K_target
    total = float(np.sum(np.abs(Y) ** 2))
    Phi = grid.dictionary
    S: list[int] = []
    Qs = np.zeros((N, 0), dtype=complex)
    C = np.zeros((0, Y.shape[1]), dtype=complex)
    history = [total]
    collapsed = False
    R = Y
    while len(S) < limit and total > 0:
        if residual_threshold is not None and history[-1] / total < residual_threshold:
            break
        U, s, _ = np.linalg.svd(R, full_matrices=False)
        r = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if s.size else 0
        if r == 0:
            collapsed = True
            break
        U = U[:, :r]
        proj = Phi - Qs @ (Qs.conj().T @ Phi)
        norms = np.linalg.norm(proj, axis=0)
        ok = norms > 1e-8 * np.sqrt(N)
        ok[S] = False
        if not ok.any():
            collapsed = True
            break
        score = np.full(G, -np.inf)
        score[ok] = np.linalg.norm((proj[:, ok] / norms[ok]).conj().T @ U, axis=1)
        best = int(np.argmax(score))
        S.append(best)
        q = proj[:, best] / norms[best]
        q = q - Qs @ (Qs.conj().T @ q)
        Qs = np.column_stack([Qs, q / np.linalg.norm(q)])
        C = np.linalg.lstsq(Phi[:, S], Y, rcond=None)[0]
        R = Y - Phi[:, S] @ C
        history.append(float(np.sum(np.abs(R) ** 2)))
    if K_target is not None and len(S) < K_target and total > 0:
        collapsed = True
    return OrmpResult(S, C, grid.delays[S], history, collapsed)
