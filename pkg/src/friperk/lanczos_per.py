"""Lanczos tridiagonalization with online Partial Effective Rank tracking.

The Gram operator is projected on a growing Krylov subspace. After every
iteration the Ritz values of the tridiagonal matrix are mapped to the
singular-value scale of ``T`` (``sqrt(theta)``), the PER trace is refreshed
and the positive-slope detector decides whether the signal dimension has been
uncovered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConvergenceError, DenseCapExceeded
from .toeplitz_ops import DENSE_CAP, ToeplitzGramOperator, apply_gram, dense_materialize

BREAKDOWN_TOL = 1e-12
_EPS = np.finfo(float).eps


# --------------------------------------------------------------------------
# Partial effective rank

def per(sigma) -> float:
    """Exponential of the Shannon entropy of ``sigma / sum(sigma)``."""
    s = np.asarray(sigma, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("need a nonempty 1-D spectrum")
    if np.any(s < 0):
        raise ValueError("singular values must be nonnegative")
    total = s.sum()
    if total <= 0:
        raise ValueError("PER is undefined for an all-zero spectrum")
    p = s / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def per_trace(sigma) -> np.ndarray:
    """``PER_k`` of the leading ``k`` entries for every prefix length ``k``.

    Uses ``PER_k = S_k exp(-G_k / S_k)`` with ``S_k`` the prefix sum and
    ``G_k = sum_{i<=k} s_i log s_i`` so the whole trace costs O(len(sigma)).
    After scaling to ``s_1 = 1`` an equal spectrum has ``G = 0`` and a zero
    tail leaves ``S, G`` untouched, so both boundary increments come out as
    exactly 1 and 0.
    """
    s = np.asarray(sigma, dtype=float)
    if s.size == 0 or s[0] <= 0:
        raise ValueError("leading singular value must be positive")
    s = s / s[0]              # scale invariant; keeps subnormal inputs accurate
    S = np.cumsum(s)
    slog = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)
    G = np.cumsum(slog)
    return S * np.exp(-G / S)


def ritz_to_sigma(theta, dim=None) -> np.ndarray:
    """Map Gram eigenvalue estimates to singular values of ``T``.

    Values below the roundoff level ``dim * eps * max(theta)`` of a PSD
    operator (including negative ones) are set to zero.
    """
    th = np.asarray(theta, dtype=float)
    if th.size and dim is not None:
        th = np.where(th <= dim * _EPS * th.max(), 0.0, th)
    return np.sqrt(np.clip(th, 0.0, None))


@dataclass
class PerDecision:
    K_hat: Optional[int]          # None means the spectrum does not look sparse
    per_trace: np.ndarray
    L: int
    K_max: int
    eps_slope: float = 0.0
    min_drop: float = 0.0
    slope_tol: float = 0.0

    @property
    def not_sparse(self) -> bool:
        return self.K_hat is None

    def to_dict(self) -> dict:
        return {"K_hat": self.K_hat, "not_sparse": self.not_sparse,
                "per_trace": np.asarray(self.per_trace).tolist(),
                "L": self.L, "K_max": self.K_max, "eps_slope": self.eps_slope,
                "min_drop": self.min_drop, "slope_tol": self.slope_tol}


MIN_DROP = 0.05
SLOPE_TOL = 0.1
RITZ_TOL = 1e-6


def detector_fires(d, K: int, L: int, eps_slope: float = 0.0, min_drop: float = MIN_DROP,
                   slope_tol: float = SLOPE_TOL) -> bool:
    """Detector condition at ``K`` on the increments ``d[k-1] = PER_{k+1} - PER_k``.

    Two tests must hold. The drop test asks that ``d_K`` sits clearly below
    the largest earlier increment, ``d_K <= (1 - min_drop) * ref`` with
    ``ref = max(d_1..d_{K-1})`` (1 for ``K = 1``); it keeps small dips among
    comparable paths from firing. The slope test asks that the increment
    stops decreasing,
    ``d_K - mean(d_{K+1..K+L}) <= slope_tol * (ref - d_K) - eps_slope``:
    after a sharp drop the slow decay of the noise increments is tolerated in
    proportion to the drop. A zero increment always fires. With
    ``min_drop = slope_tol = 0`` only the bare slope test remains.
    """
    dK = d[K - 1]
    ref = d[:K - 1].max() if K > 1 else 1.0
    if min_drop > 0 and dK > (1.0 - min_drop) * ref:
        return False
    if dK == 0:
        return True
    return dK - d[K:K + L].mean() <= slope_tol * (ref - dK) - eps_slope


def estimate_K(trace, L: int = 3, K_max: Optional[int] = None,
               eps_slope: float = 0.0, min_drop: float = MIN_DROP,
               slope_tol: float = SLOPE_TOL) -> PerDecision:
    """Smallest ``K`` at which the PER increment stops decreasing.

    See :func:`detector_fires` for the condition; ``min_drop=0`` and
    ``slope_tol=0`` leave the bare slope test. A zero increment (exhausted
    rank) always fires. When the trace ends in a run of at least ``L + 1`` zero increments
    the rank is known exactly and the start of that run is returned before
    the slope test is consulted. Indices whose look-ahead window is not yet
    covered by ``trace`` are not evaluated.
    """
    t = np.asarray(trace, dtype=float)
    if L < 1:
        raise ValueError("window L must be >= 1")
    if not 0 <= min_drop < 1:
        raise ValueError("min_drop must lie in [0, 1)")
    if slope_tol < 0:
        raise ValueError("slope_tol must be nonnegative")
    last = len(t) - L - 1
    if K_max is None:
        K_max = last
    if min(K_max, last) < 1:
        raise ValueError(f"trace of length {len(t)} too short for L={L}")
    d = np.diff(t)
    nz = np.flatnonzero(d)
    rank = nz[-1] + 2 if nz.size else 1
    if rank <= min(K_max, last):
        # exhausted rank: the spectrum is exactly zero past index `rank`
        return PerDecision(int(rank), t, L, K_max, eps_slope, min_drop, slope_tol)
    for K in range(1, min(K_max, last) + 1):
        if detector_fires(d, K, L, eps_slope, min_drop, slope_tol):
            return PerDecision(K, t, L, K_max, eps_slope, min_drop, slope_tol)
    return PerDecision(None, t, L, K_max, eps_slope, min_drop, slope_tol)


# --------------------------------------------------------------------------
# Symmetric tridiagonal eigensolver (implicit QL with Wilkinson shifts)

def tridiag_eigh(alpha, beta, vectors: bool = False, max_iter: int = 60):
    """Eigenpairs of the real symmetric tridiagonal matrix with diagonal
    ``alpha`` and off-diagonal ``beta``, sorted by decreasing eigenvalue."""
    d = np.array(alpha, dtype=float)
    n = d.size
    e = np.zeros(n)
    e[:n - 1] = beta[:n - 1]
    z = np.eye(n) if vectors else None

    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= _EPS * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise ConvergenceError("tridiagonal QL did not converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if vectors:
                    zi1 = z[:, i + 1].copy()
                    z[:, i + 1] = s * z[:, i] + c * zi1
                    z[:, i] = c * z[:, i] - s * zi1
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0

    order = np.argsort(-d, kind="stable")
    if vectors:
        return d[order], z[:, order]
    return d[order]


# --------------------------------------------------------------------------
# Dense Hermitian reference: cyclic Jacobi in round-robin (parallel) order

def _round_robin(n):
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            arr = np.array(pairs)
            rounds.append((arr[:, 0], arr[:, 1]))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def dense_eig_reference(A, tol: float = 1e-12, max_sweeps: int = 60,
                        cap: int = DENSE_CAP):
    """All eigenpairs of a Hermitian matrix by cyclic Jacobi rotations.

    Disjoint index pairs are rotated together (Brent-Luk ordering), so each
    sweep is ``n-1`` vectorized rounds. Returns eigenvalues in decreasing
    order and the matching unit eigenvectors as columns.
    """
    A = np.array(A, dtype=complex)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if n - 1 > cap:
        raise DenseCapExceeded(f"dimension {n} exceeds the dense cap")
    scale = np.linalg.norm(A)
    if np.linalg.norm(A - A.conj().T) > 1e-8 * max(scale, 1e-300):
        raise ValueError("matrix is not Hermitian")
    A = 0.5 * (A + A.conj().T)
    V = np.eye(n, dtype=complex)
    if n == 1 or scale == 0:
        return np.real(np.diag(A)).copy(), V

    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            b = A[p, q]
            absb = np.abs(b)
            active = absb > 0
            safe = np.where(active, absb, 1.0)
            e = np.where(active, np.conj(b) / safe, 1.0)      # exp(-i*phase(b))
            zeta = (A[q, q].real - A[p, p].real) / (2.0 * safe)
            t = np.sign(zeta) + (zeta == 0)
            t = t / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            Ap, Aq = A[:, p].copy(), A[:, q]
            A[:, p] = c * Ap - (s * e) * Aq
            A[:, q] = s * Ap + (c * e) * Aq
            Rp, Rq = A[p, :].copy(), A[q, :]
            ec = np.conj(e)[:, None]
            A[p, :] = c[:, None] * Rp - (s[:, None] * ec) * Rq
            A[q, :] = s[:, None] * Rp + (c[:, None] * ec) * Rq
            Vp, Vq = V[:, p].copy(), V[:, q]
            V[:, p] = c * Vp - (s * e) * Vq
            V[:, q] = s * Vp + (c * e) * Vq
        A = 0.5 * (A + A.conj().T)
    else:
        raise ConvergenceError("Jacobi sweeps did not converge")

    w = np.real(np.diag(A))
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


# --------------------------------------------------------------------------
# Lanczos

@dataclass
class LanczosState:
    Q: np.ndarray                    # (M+1, j) orthonormal Krylov basis
    alpha: np.ndarray
    beta: np.ndarray                 # beta[i] couples q_i and q_{i+1}; last one is the residual
    per_trace: np.ndarray
    reorth_policy: str = "full"
    max_alpha_imag: float = 0.0
    breakdown: bool = False

    @property
    def j(self) -> int:
        return self.alpha.size


@dataclass
class RitzSet:
    values: np.ndarray               # decreasing
    vectors: np.ndarray              # (M+1, j)
    residual_bounds: np.ndarray

    def leading(self, k: int) -> np.ndarray:
        return self.vectors[:, :k]


@dataclass
class LanczosResult:
    state: LanczosState
    ritz: RitzSet
    decision: PerDecision
    diagnostics: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.state, self.ritz, self.decision))


def _matvec_of(op):
    if isinstance(op, ToeplitzGramOperator):
        return op.dim, (lambda v: apply_gram(op, v)), op.fft_counter
    A = np.asarray(op)
    return A.shape[0], (lambda v: A @ v), None


def random_start(dim, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return f / np.linalg.norm(f)


def lanczos_run(op, K_max: int, L: int = 3, seed=0, eps_slope: float = 0.0,
                reorth: str = "full", f0=None, detect: bool = True,
                min_drop: float = MIN_DROP, slope_tol: float = SLOPE_TOL,
                ritz_tol: float = RITZ_TOL) -> LanczosResult:
    """Lanczos on ``op`` with the PER detector evaluated after every step.

    Iterates until the detector fires (the detection index is then
    ``K_hat + L + 1`` Krylov dimensions at most), until ``K_max + L + 1``
    dimensions, or until a happy breakdown exposes an exact invariant
    subspace. After a firing the run continues, with the decision frozen,
    until the residual bounds of the leading ``K_hat`` Ritz pairs drop to
    ``ritz_tol * theta_1`` (at most ``K_max + L + 1`` further steps);
    ``ritz_tol=0`` stops at the detection index. ``op`` is a
    :class:`ToeplitzGramOperator` or any dense Hermitian matrix.
    """
    n, matvec, counter = _matvec_of(op)
    if K_max < 1 or L < 1:
        raise ValueError("K_max and L must be positive")
    if K_max + L > n:
        raise ValueError(f"K_max + L = {K_max + L} exceeds operator dimension {n}")
    if reorth not in ("full", "none"):
        raise ValueError("reorth must be 'full' or 'none'")
    if ritz_tol < 0:
        raise ValueError("ritz_tol must be nonnegative")
    fft0 = counter.count if counter is not None else 0
    j_max = min(K_max + L + 1, n)
    j_cap = min(2 * j_max, n) if detect and ritz_tol > 0 else j_max

    if f0 is None:
        # start inside range(A) so an exact rank-K operator breaks down at j = K
        q = matvec(random_start(n, seed))
        nq = np.linalg.norm(q)
        q = q / nq if nq > 0 else random_start(n, seed)
    else:
        q = np.asarray(f0, complex) / np.linalg.norm(f0)
    Q = np.zeros((n, j_cap), dtype=complex)
    alphas, betas = [], []
    ritz_history = []
    q_prev = np.zeros(n, dtype=complex)
    beta_prev = 0.0
    norm_est = 0.0
    max_imag = 0.0
    decision = None
    breakdown = False
    trace = np.zeros(0)
    fft_per_iter = []
    detect_j = None

    for j in range(j_cap):
        Q[:, j] = q
        c0 = counter.count if counter is not None else 0
        w = matvec(q)
        if counter is not None:
            fft_per_iter.append(counter.count - c0)
        if j == 0 and not np.any(w):
            state = LanczosState(Q[:, :1], np.zeros(1), np.zeros(1), np.zeros(0),
                                 reorth, 0.0, True)
            ritz = RitzSet(np.zeros(1), Q[:, :1].copy(), np.zeros(1))
            dec = PerDecision(0, np.zeros(0), L, K_max, eps_slope, min_drop, slope_tol)
            return LanczosResult(state, ritz, dec, {"zero_operator": True, "seed": seed,
                                                   "fft_calls": _delta(counter, fft0)})
        w = w - beta_prev * q_prev
        h = np.vdot(q, w)
        max_imag = max(max_imag, abs(h.imag))
        alpha = h.real
        w = w - alpha * q
        if reorth == "full":
            B = Q[:, :j + 1]
            for _ in range(2):
                w = w - B @ (B.conj().T @ w)
        beta = float(np.linalg.norm(w))
        alphas.append(alpha)

        theta = tridiag_eigh(alphas, betas)
        ritz_history.append(theta)
        norm_est = max(norm_est, float(np.max(np.abs(theta))))
        breakdown = beta <= BREAKDOWN_TOL * norm_est
        betas.append(beta)
        if decision is not None:
            # refinement: decision frozen, sharpen the leading K_hat pairs
            if breakdown or _converged(alphas, betas, decision.K_hat, ritz_tol):
                break
            q_prev, q = q, w / beta
            beta_prev = beta
            continue
        trace = per_trace(ritz_to_sigma(theta, n))

        if breakdown:
            # exact invariant subspace: the remaining spectrum is zero
            trace = np.concatenate([trace, np.full(max(K_max + L + 1 - trace.size, 0), trace[-1])])
            decision = estimate_K(trace, L, K_max, eps_slope, min_drop, slope_tol) if detect else None
            break
        if detect and trace.size >= L + 2:
            dec = estimate_K(trace, L, K_max, eps_slope, min_drop, slope_tol)
            if not dec.not_sparse:
                decision = dec
                detect_j = j + 1
                if ritz_tol == 0 or _converged(alphas, betas, dec.K_hat, ritz_tol):
                    break
        if j + 1 >= j_max and decision is None:
            break
        if j + 1 < j_cap:
            q_prev, q = q, w / beta
            beta_prev = beta

    if decision is None and detect:
        if trace.size >= L + 2:
            decision = estimate_K(trace, L, K_max, eps_slope, min_drop, slope_tol)
        else:
            decision = PerDecision(None, trace, L, K_max, eps_slope, min_drop, slope_tol)

    jj = len(alphas)
    a = np.array(alphas)
    b = np.array(betas)
    vals, S = tridiag_eigh(a, b[:jj - 1], vectors=True)
    vecs = Q[:, :jj] @ S
    bounds = np.abs(b[jj - 1] * S[-1, :])
    state = LanczosState(Q[:, :jj].copy(), a, b, trace, reorth, max_imag, breakdown)
    ritz = RitzSet(vals, vecs, bounds)
    diag = {
        "seed": seed,
        "iterations": jj,
        "detect_iterations": detect_j if detect_j is not None else jj,
        "breakdown": breakdown,
        "betas": b.tolist(),
        "ritz_values": [t.tolist() for t in ritz_history],
        "per_trace": trace.tolist(),
        "fft_calls": _delta(counter, fft0),
        "fft_calls_per_iteration": fft_per_iter,
        "max_alpha_imag": max_imag,
    }
    return LanczosResult(state, ritz, decision, diag)


def _converged(alphas, betas, k, tol) -> bool:
    th, S = tridiag_eigh(alphas, betas[:-1], vectors=True)
    return np.abs(betas[-1] * S[-1, :k]).max() <= tol * abs(th[0])


def _delta(counter, start):
    return 0 if counter is None else counter.count - start


def top_eigenvalue(op, n_iter: int = 40, seed=0) -> float:
    """Largest eigenvalue by plain Lanczos with full reorthogonalization."""
    n, _, _ = _matvec_of(op)
    n_iter = min(n_iter, n)
    res = lanczos_run(op, K_max=max(n_iter - 2, 1), L=1, seed=seed, detect=False)
    return float(res.ritz.values[0])


def fri_per_dense(op, K_max: int, L: int = 3, eps_slope: float = 0.0,
                  method: str = "jacobi", cap: int = DENSE_CAP, min_drop: float = MIN_DROP,
                  slope_tol: float = SLOPE_TOL):
    """PER detection on the exact spectrum of the materialized Gram matrix.

    ``method='jacobi'`` uses :func:`dense_eig_reference`; ``'lapack'`` uses
    ``numpy.linalg.eigh`` (for timing comparisons only).
    """
    A = dense_materialize(op, cap) if isinstance(op, ToeplitzGramOperator) else np.asarray(op)
    n = A.shape[0]
    if K_max + L > n:
        raise ValueError(f"K_max + L = {K_max + L} exceeds operator dimension {n}")
    if method == "jacobi":
        w, V = dense_eig_reference(A, cap=cap)
    elif method == "lapack":
        w, V = np.linalg.eigh(A)
        w, V = w[::-1], V[:, ::-1]
    else:
        raise ValueError(f"unknown method {method!r}")
    jj = min(K_max + L + 1, n)
    sigma = ritz_to_sigma(w[:jj], n)
    if sigma[0] == 0:
        dec = PerDecision(0, np.zeros(0), L, K_max, eps_slope, min_drop, slope_tol)
    else:
        tr = per_trace(sigma)
        if tr.size < K_max + L + 1:
            tr = np.concatenate([tr, np.full(K_max + L + 1 - tr.size, tr[-1])])
        dec = estimate_K(tr, L, K_max, eps_slope, min_drop, slope_tol)
    ritz = RitzSet(w[:jj].copy(), V[:, :jj].copy(), np.zeros(jj))
    return ritz, dec
