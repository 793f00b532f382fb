"""Implicit stacked block-Toeplitz Gram operator ``T^H T``.

Block ``p`` is the ``(M+1) x (M+1)`` Toeplitz matrix ``T_p[i, j] = h_p[(i-j)D]``
built from the pilot samples of antenna ``p``. Each block is embedded in a
circulant of size ``N+1 = 2(M+1)`` whose generator is
``h[0], h[D], ..., h[MD], 0, h[-MD], ..., h[-D]``; its DFT is computed once,
after which ``T_p^H T_p f`` costs four FFTs.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel_model import PilotMeasurements
from .exceptions import DenseCapExceeded, LayoutError

DENSE_CAP = 2048


class FFTCounter:
    """Thread-safe tally of FFT calls made through an operator."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n: int):
        with self._lock:
            self.count += n

    def reset(self):
        with self._lock:
            self.count = 0


@dataclass(frozen=True, eq=False)
class ToeplitzGramOperator:
    M: int
    P: int
    spectra: np.ndarray                    # (P, 2(M+1)) circulant eigenvalues
    generators: Optional[np.ndarray]       # (P, 2M+1) lags -M..M, None when lean
    fft_counter: FFTCounter = field(default_factory=FFTCounter)

    @property
    def dim(self) -> int:
        return self.M + 1

    @property
    def fft_len(self) -> int:
        return 2 * (self.M + 1)

    def __matmul__(self, f):
        return apply_gram(self, f)


def circulant_generator(lags: np.ndarray) -> np.ndarray:
    """Circulant embedding generator for the Toeplitz matrix with ``lags[-M..M]``.

    ``lags`` has shape ``(..., 2M+1)`` with lag ``-M`` first.
    """
    M = (lags.shape[-1] - 1) // 2
    pos = lags[..., M:]                    # lags 0..M
    neg = lags[..., :M]                    # lags -M..-1
    zero = np.zeros(lags.shape[:-1] + (1,), dtype=lags.dtype)
    return np.concatenate([pos, zero, neg], axis=-1)


def build_operator(meas, lean: bool = False) -> ToeplitzGramOperator:
    """Precompute the circulant spectra of every antenna block.

    ``meas`` is a :class:`PilotMeasurements` or a raw ``(2M+1, P)`` array.
    """
    samples = meas.samples if isinstance(meas, PilotMeasurements) else np.asarray(meas)
    samples = np.asarray(samples, dtype=complex)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    if n % 2 == 0 or n < 3:
        raise LayoutError(f"need an odd number (>= 3) of pilot rows, got {n}")
    M = (n - 1) // 2
    gens = np.ascontiguousarray(samples.T)
    spectra = np.fft.fft(circulant_generator(gens), axis=-1)
    return ToeplitzGramOperator(M, gens.shape[0], spectra, None if lean else gens)


def apply_gram(op: ToeplitzGramOperator, f) -> np.ndarray:
    """``sum_p T_p^H T_p f`` with two masked circulant products per block."""
    f = np.asarray(f)
    if f.shape != (op.dim,):
        raise ValueError(f"expected a vector of length {op.dim}, got shape {f.shape}")
    n = op.fft_len
    F = np.fft.fft(np.broadcast_to(f, (op.P, op.dim)), n, axis=-1)
    y = np.fft.ifft(op.spectra * F, axis=-1)[:, :op.dim]  # T_p f
    Y = np.fft.fft(y, n, axis=-1)
    z = np.fft.ifft(np.conj(op.spectra) * Y, axis=-1)     # T_p^H (T_p f)
    op.fft_counter.add(4 * op.P)
    out = np.zeros(op.dim, dtype=complex)
    for p in range(op.P):
        out += z[p, :op.dim]
    return out


def toeplitz_blocks(op: ToeplitzGramOperator) -> np.ndarray:
    """Dense ``(P, M+1, M+1)`` stack of the Toeplitz blocks."""
    if op.generators is None:
        raise ValueError("operator was built lean; generators are not retained")
    _check_cap(op.M)
    M = op.M
    idx = np.arange(M + 1)
    lag = idx[:, None] - idx[None, :] + M
    # contiguous copy: strided blocks would bypass BLAS in matmul
    return np.ascontiguousarray(op.generators[:, lag])


def dense_materialize(op: ToeplitzGramOperator, cap: int = DENSE_CAP) -> np.ndarray:
    _check_cap(op.M, cap)
    B = toeplitz_blocks(op).reshape(op.P * op.dim, op.dim)
    A = B.conj().T @ B
    return 0.5 * (A + A.conj().T)


def _check_cap(M, cap=DENSE_CAP):
    if M > cap:
        raise DenseCapExceeded(f"M={M} exceeds the dense cap of {cap}")
