"""Common-support recovery by rotation invariance, then per-antenna fitting.

Any basis ``V`` of the signal subspace of ``T^H T`` is ``A G`` with ``A`` the
Vandermonde matrix of ratios ``z_k = exp(-2j*pi*D*u_k)`` and ``G`` invertible.
Dropping the last row (``head``) or the first row (``tail``) gives
``tail = head @ X`` with ``X = G^{-1} diag(z) G``, so the eigenvalues of the
least-squares ``X`` carry the delays in their phase.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .channel_model import PilotLayout, PilotMeasurements, steering
from .exceptions import ConvergenceError, IllPosedSupportError

COND_LIMIT = 1e12
EIG_CAP = 64


@dataclass
class SupportEstimate:
    delays: np.ndarray           # (K,) ascending
    amplitudes: np.ndarray       # (K, P)
    residuals: np.ndarray        # (P,) residual energy per antenna
    collapsed: bool = False

    @property
    def K_hat(self) -> int:
        return self.delays.size

    def to_dict(self) -> dict:
        a = np.asarray(self.amplitudes)
        return {"K_hat": self.K_hat, "delays": self.delays.tolist(),
                "amplitudes": np.stack([a.real, a.imag], axis=-1).tolist(),
                "residuals": self.residuals.tolist(), "collapsed": self.collapsed}


def solve_rotation(V) -> np.ndarray:
    """Least-squares ``X`` in ``V[:-1] @ X = V[1:]`` via QR of ``V[:-1]``."""
    V = np.asarray(V, dtype=complex)
    if V.ndim != 2:
        raise ValueError("V must be 2-D")
    n, K = V.shape
    if K < 1 or n - 1 < K:
        raise ValueError(f"need at least K+1 rows for K={K}, got {n}")
    head, tail = V[:-1], V[1:]
    Q, R = np.linalg.qr(head)
    if np.linalg.cond(R) > COND_LIMIT:
        raise IllPosedSupportError("shift-invariance system is rank deficient")
    return np.linalg.solve(R, Q.conj().T @ tail)


# --------------------------------------------------------------------------
# small nonsymmetric eigenproblem

def hessenberg(A) -> np.ndarray:
    H = np.array(A, dtype=complex)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        nx = np.linalg.norm(x)
        if nx == 0:
            continue
        phase = x[0] / abs(x[0]) if x[0] != 0 else 1.0
        v = x
        v[0] += phase * nx
        v /= np.linalg.norm(v)
        H[k + 1:, :] -= 2.0 * np.outer(v, v.conj() @ H[k + 1:, :])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v.conj())
        H[k + 2:, k] = 0.0
    return H


def _wilkinson(a, b, c, d):
    tr = 0.5 * (a + d)
    disc = np.sqrt(0.25 * (a - d) ** 2 + b * c)
    m1, m2 = tr + disc, tr - disc
    return m1 if abs(m1 - d) < abs(m2 - d) else m2


def eig_small(X, cap: int = EIG_CAP, max_iter_per_eig: int = 40) -> np.ndarray:
    """Eigenvalues of a small complex matrix by Hessenberg reduction and
    Wilkinson-shifted QR sweeps with deflation."""
    X = np.asarray(X, dtype=complex)
    n = X.shape[0]
    if X.shape != (n, n):
        raise ValueError("matrix must be square")
    if n > cap:
        raise ValueError(f"matrix of size {n} exceeds the cap of {cap}")
    if n == 0:
        return np.zeros(0, dtype=complex)
    H = hessenberg(X)
    eps = np.finfo(float).eps
    hnorm = np.linalg.norm(H)
    hi = n - 1
    it = stall = 0
    while hi > 0:
        lo = hi
        while lo > 0:
            s = abs(H[lo - 1, lo - 1]) + abs(H[lo, lo])
            if abs(H[lo, lo - 1]) <= eps * (s if s > 0 else hnorm):
                H[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            hi -= 1
            stall = 0
            continue
        it += 1
        stall += 1
        if it > max_iter_per_eig * n:
            raise ConvergenceError("shifted QR did not converge")
        if stall % 11 == 10:
            mu = H[hi, hi] + 0.75 * abs(H[hi, hi - 1])   # exceptional shift
        else:
            mu = _wilkinson(H[hi - 1, hi - 1], H[hi - 1, hi], H[hi, hi - 1], H[hi, hi])
        B = H[lo:hi + 1, lo:hi + 1] - mu * np.eye(hi - lo + 1)
        rots = []
        for k in range(hi - lo):
            x, y = B[k, k], B[k + 1, k]
            r = np.hypot(abs(x), abs(y))
            if r == 0:
                c, s = 1.0 + 0j, 0j
            else:
                c, s = x / r, y / r
            G = np.array([[np.conj(c), np.conj(s)], [-s, c]])
            B[k:k + 2, k:] = G @ B[k:k + 2, k:]
            rots.append(G)
        for k, G in enumerate(rots):
            B[:, k:k + 2] = B[:, k:k + 2] @ G.conj().T
        H[lo:hi + 1, lo:hi + 1] = B + mu * np.eye(hi - lo + 1)
    return np.diag(H).copy()


# --------------------------------------------------------------------------

def delays_from_eigs(eigs, layout: PilotLayout, tol: float = 1e-9):
    """Delays ``-arg(z)/(2*pi*D)`` in ``(-1/(2D), 1/(2D)]``, ascending.

    Delays closer than ``tol`` are merged; the second return value flags it.
    """
    z = np.asarray(eigs, dtype=complex)
    if np.any(z == 0):
        raise ValueError("eigenvalues must be nonzero")
    hw = layout.half_window
    u = -np.angle(z) / (2 * np.pi * layout.D)
    u = np.where(u <= -hw, u + 2 * hw, u)
    u = np.sort(u)
    if u.size < 2:
        return u, False
    keep = np.concatenate([[True], np.diff(u) > tol])
    # the window is circular: the top and bottom delays may also coincide
    if u.size > 1 and keep.sum() > 1 and (u[0] + 2 * hw - u[-1]) <= tol:
        keep[-1] = False
    collapsed = not keep.all()
    if collapsed:
        warnings.warn("coincident delays merged", RuntimeWarning, stacklevel=2)
    return u[keep], collapsed


def fit_amplitudes(meas: PilotMeasurements, delays):
    """Per-antenna least-squares gains for the given support.

    Returns the ``(K, P)`` gains and the ``(P,)`` residual energies.
    """
    delays = np.asarray(delays, dtype=float)
    X = meas.samples
    K = delays.size
    if K == 0:
        return np.zeros((0, X.shape[1]), complex), np.sum(np.abs(X) ** 2, axis=0)
    if K > X.shape[0]:
        raise ValueError("more delays than pilots")
    A = steering(meas.layout.pilot_bins, delays)
    if np.linalg.cond(A) > COND_LIMIT:
        raise IllPosedSupportError("Vandermonde system is ill-conditioned")
    Q, R = np.linalg.qr(A)
    C = np.linalg.solve(R, Q.conj().T @ X)
    res = np.sum(np.abs(X - A @ C) ** 2, axis=0)
    return C, res


def support_from_basis(V, meas: PilotMeasurements) -> SupportEstimate:
    X = solve_rotation(V)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        delays, collapsed = delays_from_eigs(eig_small(X), meas.layout)
    C, res = fit_amplitudes(meas, delays)
    return SupportEstimate(delays, C, res, collapsed)


def reconstruct_full_grid(est: SupportEstimate, layout: PilotLayout) -> np.ndarray:
    """Frequency response on every frame bin ``-MD..MD`` (row ``i`` is bin ``i - MD``)."""
    if est.K_hat == 0:
        return np.zeros((layout.N_f, est.amplitudes.shape[1]), dtype=complex)
    return steering(layout.frame_bins, est.delays) @ est.amplitudes
