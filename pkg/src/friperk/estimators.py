"""Full-grid channel estimators sharing one report format."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baselines import build_delay_grid, lowpass_interpolate, noise_floor_ratio, ra_ormp
from .channel_model import ChannelSpec, PilotMeasurements, steering
from .esprit import SupportEstimate, reconstruct_full_grid, support_from_basis
from .lanczos_per import MIN_DROP, RITZ_TOL, SLOPE_TOL, fri_per_dense, lanczos_run
from .toeplitz_ops import build_operator


@dataclass
class EstimationReport:
    method: str
    K_hat: Optional[int]
    delays: np.ndarray
    amplitudes: np.ndarray
    response: np.ndarray           # (N_f, P), row i is bin i - M*D
    fallback: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        a = np.asarray(self.amplitudes)
        r = np.asarray(self.response)
        return {
            "method": self.method,
            "K_hat": self.K_hat,
            "fallback": self.fallback,
            "delays": np.asarray(self.delays).tolist(),
            "amplitudes": np.stack([a.real, a.imag], axis=-1).tolist(),
            "response": np.stack([r.real, r.imag], axis=-1).tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _clamp_kmax(K_max, L, dim):
    return max(1, min(K_max, dim - L))


def _lowpass_report(meas, method, delay_window, diagnostics, K_hat=None, fallback=False):
    resp = lowpass_interpolate(meas, delay_window=delay_window)
    return EstimationReport(method, K_hat, np.zeros(0), np.zeros((0, meas.P), complex),
                            resp, fallback, diagnostics)


def _support_report(meas, method, est: SupportEstimate, diagnostics):
    diagnostics["collapsed_delays"] = est.collapsed
    diagnostics["residuals"] = est.residuals
    return EstimationReport(method, est.K_hat, est.delays, est.amplitudes,
                            reconstruct_full_grid(est, meas.layout), False, diagnostics)


def fri_perk(meas: PilotMeasurements, K_max: int = 20, L: int = 3, eps_slope: float = 0.0,
             seed=0, fallback: bool = True, delay_window=None,
             min_drop: float = MIN_DROP, slope_tol: float = SLOPE_TOL,
             ritz_tol: float = RITZ_TOL) -> EstimationReport:
    """Krylov/PER estimator; falls back to lowpass interpolation when the PER
    detector finds no sparse structure."""
    op = build_operator(meas, lean=True)
    K_max = _clamp_kmax(K_max, L, op.dim)
    res = lanczos_run(op, K_max, L, seed=seed, eps_slope=eps_slope, min_drop=min_drop,
                      slope_tol=slope_tol, ritz_tol=ritz_tol)
    diag = dict(res.diagnostics)
    diag["decision"] = res.decision.to_dict()
    diag["K_max"] = K_max
    dec = res.decision
    if dec.not_sparse:
        if not fallback:
            raise ValueError("PER detector found no sparse structure")
        return _lowpass_report(meas, "fri-perk", delay_window, diag, None, True)
    if dec.K_hat == 0:
        return EstimationReport("fri-perk", 0, np.zeros(0), np.zeros((0, meas.P), complex),
                                np.zeros((meas.layout.N_f, meas.P), complex), False, diag)
    est = support_from_basis(res.ritz.leading(dec.K_hat), meas)
    return _support_report(meas, "fri-perk", est, diag)


def fri_per_dense_estimate(meas: PilotMeasurements, K_max: int = 20, L: int = 3,
                           eps_slope: float = 0.0, method: str = "jacobi",
                           fallback: bool = True, delay_window=None,
                           min_drop: float = MIN_DROP,
                           slope_tol: float = SLOPE_TOL) -> EstimationReport:
    op = build_operator(meas)
    K_max = _clamp_kmax(K_max, L, op.dim)
    ritz, dec = fri_per_dense(op, K_max, L, eps_slope, method=method, min_drop=min_drop,
                              slope_tol=slope_tol)
    diag = {"decision": dec.to_dict(), "K_max": K_max, "eig_method": method}
    if dec.not_sparse:
        if not fallback:
            raise ValueError("PER detector found no sparse structure")
        return _lowpass_report(meas, "fri-per-dense", delay_window, diag, None, True)
    if dec.K_hat == 0:
        return EstimationReport("fri-per-dense", 0, np.zeros(0), np.zeros((0, meas.P), complex),
                                np.zeros((meas.layout.N_f, meas.P), complex), False, diag)
    est = support_from_basis(ritz.leading(dec.K_hat), meas)
    return _support_report(meas, "fri-per-dense", est, diag)


def lowpass_estimate(meas: PilotMeasurements, delay_window=None) -> EstimationReport:
    return _lowpass_report(meas, "lowpass", delay_window, {})


def ra_ormp_estimate(meas: PilotMeasurements, K_target: Optional[int] = None,
                     oversample: int = 1, margin: float = 0.5, delay_window=None,
                     noise_variance: Optional[float] = None) -> EstimationReport:
    grid = build_delay_grid(meas.layout, delay_window, oversample)
    thr = None
    if K_target is None:
        thr = noise_floor_ratio(meas, margin, noise_variance)
    res = ra_ormp(meas, grid, K_target=K_target, residual_threshold=thr)
    order = np.argsort(res.delays, kind="stable")
    delays = res.delays[order]
    coeffs = res.coefficients[order] if len(res.support) else np.zeros((0, meas.P), complex)
    resp = steering(meas.layout.frame_bins, delays) @ coeffs
    diag = {"support": [res.support[i] for i in order], "residual_history": res.residual_history,
            "collapsed": res.collapsed, "oversample": oversample}
    return EstimationReport("ra-ormp", len(res.support), delays, coeffs, resp, False, diag)


def truth_estimate(spec: ChannelSpec, meas: PilotMeasurements) -> EstimationReport:
    """Debug arm returning the ground-truth response."""
    resp = steering(meas.layout.frame_bins, spec.delays) @ spec.gains
    return EstimationReport("truth", spec.K, spec.delays, spec.gains, resp, False, {})


ESTIMATORS = ("fri-perk", "fri-per-dense", "lowpass", "ra-ormp", "truth")


def run_estimator(name: str, meas: PilotMeasurements, spec: Optional[ChannelSpec] = None,
                  K_max: int = 20, L: int = 3, eps_slope: float = 0.0, seed=0,
                  delay_window=None, oversample: int = 1, margin: float = 0.5,
                  dense_method: str = "jacobi", min_drop: float = MIN_DROP,
                  slope_tol: float = SLOPE_TOL) -> EstimationReport:
    t0 = time.perf_counter()
    if name == "fri-perk":
        rep = fri_perk(meas, K_max, L, eps_slope, seed=seed, delay_window=delay_window,
                       min_drop=min_drop, slope_tol=slope_tol)
    elif name == "fri-per-dense":
        rep = fri_per_dense_estimate(meas, K_max, L, eps_slope, method=dense_method,
                                     delay_window=delay_window, min_drop=min_drop,
                                     slope_tol=slope_tol)
    elif name == "lowpass":
        rep = lowpass_estimate(meas, delay_window)
    elif name == "ra-ormp":
        rep = ra_ormp_estimate(meas, oversample=oversample, margin=margin,
                               delay_window=delay_window)
    elif name == "truth":
        if spec is None:
            raise ValueError("truth estimator needs the channel spec")
        rep = truth_estimate(spec, meas)
    else:
        raise ValueError(f"unknown estimator {name!r}")
    rep.diagnostics["wall_time_s"] = time.perf_counter() - t0
    return rep
