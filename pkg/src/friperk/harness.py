"""Synthetic SER/MSE sweeps and timing runs over the estimators.

A trial draws one channel, samples it on the pilot comb, adds noise and sends
uncoded 4-PSK symbols on every data bin. Each estimator then produces a
full-grid response that is used to equalize and demap the data symbols.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .channel_model import (ChannelSpec, PilotLayout, PilotMeasurements, add_awgn,
                            complex_noise, sample_pilots, steering, synth_clustered_channel,
                            synth_scs_channel)
from .estimators import ESTIMATORS, run_estimator
from .exceptions import ConfigError, FriPerkError
from .lanczos_per import MIN_DROP, SLOPE_TOL
from .toeplitz_ops import DENSE_CAP

REGIMES = ("scs", "clustered", "noise-only")
SWEEP_ESTIMATORS = ESTIMATORS

# bit pair (b0, b1) -> ((1 - 2*b0) + 1j*(1 - 2*b1)) / sqrt(2); neighbours differ in one bit
QPSK = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)


# --------------------------------------------------------------------------
# configuration

@dataclass
class RegimeConfig:
    kind: str = "scs"
    K: int = 7
    decay: float = 0.0
    antenna_spacing: Optional[float] = None    # metres, uniform linear array
    clusters: int = 8
    reflections: int = 10
    girth: float = 0.0
    intra_decay: float = 0.5


@dataclass
class DetectorConfig:
    L: int = 3
    eps_slope: float = 0.0
    K_max: int = 20
    min_drop: float = MIN_DROP
    slope_tol: float = SLOPE_TOL


@dataclass
class TimingConfig:
    N: list = field(default_factory=lambda: [101, 201, 401, 1001])
    repeats: int = 5
    warmup: int = 1
    K_max: int = 10
    K: int = 5
    snr_db: float = 10.0
    estimators: list = field(default_factory=lambda: ["fri-perk", "fri-per-dense", "ra-ormp"])
    dense_method: str = "lapack"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    M: int = 50
    D: int = 3
    P: int = 4
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    snr_db: list = field(default_factory=lambda: [0.0])
    trials: int = 10
    seed: int = 0
    seeds: Optional[list] = None
    estimators: list = field(default_factory=lambda: ["fri-perk", "lowpass"])
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    oversample: int = 1
    margin: float = 0.5
    dense_method: str = "jacobi"
    timing: TimingConfig = field(default_factory=TimingConfig)
    output_dir: str = "friperk-out"

    @property
    def layout(self) -> PilotLayout:
        return PilotLayout(self.M, self.D)

    def trial_seeds(self) -> list:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.seed + t for t in range(self.trials)]

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Short digest of the settings that determine the results."""
        d = self.to_dict()
        d.pop("output_dir", None)
        d.pop("name", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        d = dict(d)
        if "N_f" in d:
            N_f = d.pop("N_f")
            D = int(d.get("D", 1))
            if not isinstance(N_f, int) or N_f % 2 == 0 or (N_f - 1) % (2 * D):
                raise ConfigError(f"N_f={N_f} is not of the form 2*M*D+1 with D={D}")
            if "M" in d and d["M"] != (N_f - 1) // (2 * D):
                raise ConfigError("N_f, M and D are inconsistent")
            d["M"] = (N_f - 1) // (2 * D)
        sub = {"regime": RegimeConfig, "detector": DetectorConfig, "timing": TimingConfig}
        kw = {}
        for k, v in d.items():
            if k in sub:
                kw[k] = _build(sub[k], v, k)
            else:
                kw[k] = v
        cfg = _build(cls, kw, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def validate(self):
        for name in ("M", "D", "P", "trials", "oversample"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.regime.kind not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime.kind!r}; pick one of {REGIMES}")
        if self.regime.K < 1 or self.regime.clusters < 1 or self.regime.reflections < 1:
            raise ConfigError("regime path counts must be positive")
        if self.regime.girth < 0 or self.regime.girth >= 1.0 / self.D:
            raise ConfigError("girth must lie in [0, 1/D)")
        if not self.snr_db:
            raise ConfigError("snr_db must list at least one value")
        try:
            self.snr_db = [float(s) for s in self.snr_db]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad snr_db entry: {e}") from e
        if not self.estimators:
            raise ConfigError("estimators must not be empty")
        for e in self.estimators:
            if e not in SWEEP_ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}; pick from {SWEEP_ESTIMATORS}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimators are listed twice")
        if self.seeds is not None and len(self.seeds) != self.trials:
            raise ConfigError("seeds must hold one entry per trial")
        det = self.detector
        if det.L < 1 or det.K_max < 1:
            raise ConfigError("detector L and K_max must be positive")
        if not 0 <= det.min_drop < 1:
            raise ConfigError("detector min_drop must lie in [0, 1)")
        if det.slope_tol < 0:
            raise ConfigError("detector slope_tol must be nonnegative")
        if self.M + 1 < det.L + 2:
            raise ConfigError("M is too small for the detector window")
        if self.dense_method not in ("jacobi", "lapack"):
            raise ConfigError("dense_method must be 'jacobi' or 'lapack'")
        t = self.timing
        if t.dense_method not in ("jacobi", "lapack"):
            raise ConfigError("timing.dense_method must be 'jacobi' or 'lapack'")
        if any(not isinstance(n, int) or n < 3 or n % 2 == 0 for n in t.N):
            raise ConfigError("timing.N must list odd pilot counts >= 3")
        if list(t.N) != sorted(t.N):
            raise ConfigError("timing.N must be ascending")
        if t.repeats < 5:
            raise ConfigError("timing.repeats must be at least 5")
        for e in t.estimators:
            if e not in ("fri-perk", "fri-per-dense", "ra-ormp", "lowpass"):
                raise ConfigError(f"estimator {e!r} cannot be timed")


def _build(cls, d, where):
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"bad {where}: {e}") from e


# --------------------------------------------------------------------------
# single trial

@dataclass
class TrialResult:
    estimator: str
    snr_db: float
    trial: int
    seed: int
    K_hat: Optional[int]
    ser: float
    mse: float
    wall_time_s: float
    fft_calls: int
    fallback: bool
    failed: bool = False
    error: str = ""

    def __post_init__(self):
        if not self.failed:
            if not (math.isnan(self.ser) or 0.0 <= self.ser <= 1.0):
                raise ValueError("SER must lie in [0, 1]")
            if self.mse < 0:
                raise ValueError("MSE must be nonnegative")


@dataclass
class TrialData:
    spec: ChannelSpec
    meas: PilotMeasurements
    truth: np.ndarray          # (N_f, P)
    bits: np.ndarray           # (n_data, P, 2)
    received: np.ndarray       # (n_data, P)


def qpsk_map(bits) -> np.ndarray:
    b = np.asarray(bits)
    return ((1 - 2 * b[..., 0]) + 1j * (1 - 2 * b[..., 1])) / np.sqrt(2)


def qpsk_demap(z) -> np.ndarray:
    z = np.asarray(z)
    return np.stack([z.real < 0, z.imag < 0], axis=-1).astype(np.int8)


def _noise_seed(seed, snr_db, stream):
    s = float(snr_db)
    code = int(round(s * 1000)) + 10 ** 6 if math.isfinite(s) else 2 ** 32 - 1
    return np.random.SeedSequence([int(seed), code, stream])


def make_channel(config: ExperimentConfig, seed) -> ChannelSpec:
    lay, reg = config.layout, config.regime
    if reg.kind == "scs":
        positions = None
        if reg.antenna_spacing is not None:
            positions = np.c_[reg.antenna_spacing * np.arange(config.P), np.zeros(config.P)]
        return synth_scs_channel(config.P, reg.K, lay, decay=reg.decay,
                                 spatial_corr=positions is not None, positions=positions,
                                 seed=seed)
    if reg.kind == "clustered":
        return synth_clustered_channel(config.P, reg.clusters, reg.reflections, reg.girth,
                                       lay, seed=seed, decay=reg.decay,
                                       intra_decay=reg.intra_decay)
    return ChannelSpec(np.zeros(0), np.zeros((0, config.P), complex))


def make_trial(config: ExperimentConfig, snr_db: float, seed) -> TrialData:
    """Channel, noisy pilots and received data symbols for one trial.

    The channel depends on ``seed`` only, so every SNR point of a trial sees
    the same channel. In the noise-only regime the pilots are pure noise of
    variance ``10**(-snr_db/10)`` (unit reference power).
    """
    lay = config.layout
    spec = make_channel(config, seed)
    clean = sample_pilots(spec, lay)
    nseed = _noise_seed(seed, snr_db, 0)
    if config.regime.kind == "noise-only":
        var = 10 ** (-snr_db / 10) if np.isfinite(snr_db) else 0.0
        rng = np.random.default_rng(nseed)
        meas = PilotMeasurements(lay, complex_noise(rng, clean.samples.shape, var), var)
    else:
        meas = add_awgn(clean, snr_db, seed=nseed)
    var = meas.noise_variance
    truth = steering(lay.frame_bins, spec.delays) @ spec.gains if spec.K else \
        np.zeros((lay.N_f, config.P), complex)
    rng = np.random.default_rng(_noise_seed(seed, snr_db, 1))
    rows = lay.data_bins + lay.M * lay.D
    bits = rng.integers(0, 2, size=(rows.size, config.P, 2)).astype(np.int8)
    noise = complex_noise(rng, (rows.size, config.P), var)
    received = qpsk_map(bits) * truth[rows] + noise
    return TrialData(spec, meas, truth, bits, received)


def symbol_error_rate(response, data: TrialData, layout: PilotLayout) -> float:
    """Per-antenna divide equalization and quadrant demapping.

    A zero estimated response is an erasure and counts as an error. Returns
    NaN when the layout has no data bins (``D == 1``).
    """
    if data.bits.shape[0] == 0:
        return float("nan")
    rows = layout.data_bins + layout.M * layout.D
    H = response[rows]
    zero = H == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(zero, 0.0, data.received / np.where(zero, 1.0, H))
    wrong = np.any(qpsk_demap(z) != data.bits, axis=-1) | zero
    return float(np.mean(wrong))


def run_trial(config: ExperimentConfig, snr_db: float, seed, trial: int = 0) -> list:
    """One :class:`TrialResult` per configured estimator; failures are recorded."""
    data = make_trial(config, snr_db, seed)
    lay = config.layout
    det = config.detector
    out = []
    for name in config.estimators:
        try:
            rep = run_estimator(name, data.meas, spec=data.spec, K_max=det.K_max, L=det.L,
                                eps_slope=det.eps_slope, seed=seed, oversample=config.oversample,
                                margin=config.margin, dense_method=config.dense_method,
                                min_drop=det.min_drop, slope_tol=det.slope_tol)
        except (FriPerkError, ValueError, np.linalg.LinAlgError) as e:
            out.append(TrialResult(name, snr_db, trial, int(seed), None, float("nan"),
                                   float("nan"), 0.0, 0, False, True, f"{type(e).__name__}: {e}"))
            continue
        ser = symbol_error_rate(rep.response, data, lay)
        mse = float(np.mean(np.abs(rep.response - data.truth) ** 2))
        out.append(TrialResult(name, snr_db, trial, int(seed), rep.K_hat, ser, mse,
                               float(rep.diagnostics.get("wall_time_s", 0.0)),
                               int(rep.diagnostics.get("fft_calls", 0)), bool(rep.fallback)))
    return out


# --------------------------------------------------------------------------
# sweeps

RESULT_COLUMNS = ["config_hash", "seed", "trial", "estimator", "snr_db", "K_hat", "ser",
                  "mse", "fft_calls", "fallback", "failed", "error"]
SUMMARY_COLUMNS = ["config_hash", "estimator", "snr_db", "trials", "failed", "mean_ser",
                   "se_ser", "median_ser", "mean_mse", "median_mse", "fallback_rate",
                   "median_K_hat"]


@dataclass
class SweepResult:
    config: ExperimentConfig
    results: list

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.results)

    def select(self, estimator, snr_db=None) -> list:
        return [r for r in self.results if r.estimator == estimator
                and (snr_db is None or r.snr_db == snr_db)]

    def summary(self) -> list:
        rows = []
        for est in self.config.estimators:
            for snr in self.config.snr_db:
                rows.append(summarize(self.select(est, snr), self.config.config_hash(), est, snr))
        return rows


def k_hat_statistic(k):
    """K_hat as a number: a NotSparse decision (no sparse component) counts as 0."""
    return 0 if k is None else int(k)


def summarize(rs: list, chash: str, estimator: str, snr_db: float) -> dict:
    ok = [r for r in rs if not r.failed]
    ser = np.array([r.ser for r in ok], dtype=float)
    mse = np.array([r.mse for r in ok], dtype=float)
    n = len(ok)

    def stat(f, a):
        a = a[~np.isnan(a)]
        return float(f(a)) if a.size else float("nan")

    se = stat(lambda a: a.std(ddof=1) / np.sqrt(a.size) if a.size > 1 else 0.0, ser)
    return {
        "config_hash": chash, "estimator": estimator, "snr_db": snr_db, "trials": len(rs),
        "failed": len(rs) - n, "mean_ser": stat(np.mean, ser), "se_ser": se,
        "median_ser": stat(np.median, ser), "mean_mse": stat(np.mean, mse),
        "median_mse": stat(np.median, mse),
        "fallback_rate": float(np.mean([r.fallback for r in ok])) if n else float("nan"),
        "median_K_hat": float(np.median([k_hat_statistic(r.K_hat) for r in ok])) if n
        else float("nan"),
    }


def _trial_job(args):
    config, snr, seed, t = args
    return run_trial(config, snr, seed, t)


def run_sweep(config: ExperimentConfig, workers: int = 1) -> SweepResult:
    """Every (estimator, SNR, trial) result, ordered by estimator, SNR, trial."""
    jobs = [(config, snr, seed, t) for snr in config.snr_db
            for t, seed in enumerate(config.trial_seeds())]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            batches = list(ex.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        batches = [_trial_job(j) for j in jobs]
    flat = [r for b in batches for r in b]
    order = {e: i for i, e in enumerate(config.estimators)}
    snr_order = {s: i for i, s in enumerate(config.snr_db)}
    flat.sort(key=lambda r: (order[r.estimator], snr_order[r.snr_db], r.trial))
    return SweepResult(config, flat)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _header(config: ExperimentConfig, what: str) -> str:
    lines = [
        f"# friperk {what}",
        f"# config_hash={config.config_hash()} name={config.name}",
        f"# config={json.dumps(config.to_dict(), sort_keys=True)}",
        "# 4-PSK Gray map: bits (b0,b1) -> ((1-2*b0) + 1j*(1-2*b1))/sqrt(2);"
        " demap by quadrant sign, per-antenna divide equalization",
        "# ser = wrong symbols / (data bins * antennas); mse = mean |H_est - H|^2 over frame bins"
        " and antennas; empty K_hat = no sparse support (fri-perk fallback, or lowpass)",
    ]
    return "\n".join(lines) + "\n"


def results_csv(sweep: SweepResult, timing_columns: bool = False) -> str:
    """Per-trial CSV text; wall-clock is left out unless asked for so that
    repeated runs are byte-identical."""
    cols = RESULT_COLUMNS + (["wall_time_s"] if timing_columns else [])
    buf = io.StringIO()
    buf.write(_header(sweep.config, "sweep results"))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    chash = sweep.config.config_hash()
    for r in sweep.results:
        row = {**asdict(r), "config_hash": chash}
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def summary_csv(sweep: SweepResult) -> str:
    buf = io.StringIO()
    buf.write(_header(sweep.config, "sweep summary"))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in sweep.summary():
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def read_csv(path) -> list:
    """Rows of a CSV written here, skipping ``#`` comment lines."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# timing

TIMING_METHODS = {"fri-perk": "fri_perk_s", "fri-per-dense": "fri_per_dense_s",
                  "ra-ormp": "ra_ormp_s", "lowpass": "lowpass_s"}


@dataclass
class TimingResult:
    config: ExperimentConfig
    rows: list                   # dicts keyed by timing_columns()
    slope: float                 # log-log slope of fri-perk time over the largest decade

    def columns(self) -> list:
        return timing_columns(self.config)


def timing_columns(config: ExperimentConfig) -> list:
    cols = ["N", "M", "P", "K_max"]
    cols += [TIMING_METHODS[e] for e in config.timing.estimators]
    if "fri-perk" in config.timing.estimators:
        cols += ["fri_perk_iterations", "fri_perk_fft_calls", "fft_calls_per_iteration"]
    return cols


def _median_time(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def run_timing(config: ExperimentConfig, seed=0) -> TimingResult:
    """Median wall-clock per estimator at each pilot count in ``timing.N``.

    Runs are sequential. Sizes above the dense cap are reported as NaN for
    the dense comparator.
    """
    tc = config.timing
    rows = []
    for N in tc.N:
        M = (N - 1) // 2
        lay = PilotLayout(M, config.D)
        K_max = max(1, min(tc.K_max, M + 1 - config.detector.L))
        K = min(tc.K, K_max)
        spec = synth_scs_channel(config.P, K, lay, seed=seed)
        meas = add_awgn(sample_pilots(spec, lay), tc.snr_db, seed=seed + 1)
        row = {"N": N, "M": M, "P": config.P, "K_max": K_max}
        for est in tc.estimators:
            col = TIMING_METHODS[est]
            if est == "fri-per-dense" and M > DENSE_CAP:
                row[col] = float("nan")
                continue

            def call(est=est):
                return run_estimator(est, meas, K_max=K_max, L=config.detector.L,
                                     eps_slope=config.detector.eps_slope, seed=seed,
                                     dense_method=tc.dense_method, oversample=config.oversample,
                                     margin=config.margin, min_drop=config.detector.min_drop,
                                     slope_tol=config.detector.slope_tol)
            row[col] = _median_time(call, tc.repeats, tc.warmup)
            if est == "fri-perk":
                rep = call()
                it = int(rep.diagnostics.get("iterations", 0))
                calls = int(rep.diagnostics.get("fft_calls", 0))
                per_it = rep.diagnostics.get("fft_calls_per_iteration", [])
                row["fri_perk_iterations"] = it
                row["fri_perk_fft_calls"] = calls
                row["fft_calls_per_iteration"] = int(per_it[0]) if per_it else 0
        rows.append(row)
    return TimingResult(config, rows, loglog_slope(rows))


def loglog_slope(rows, col="fri_perk_s") -> float:
    """Least-squares slope of log(time) against log(N) over the largest decade."""
    pts = [(r["N"], r[col]) for r in rows if col in r and np.isfinite(r[col]) and r[col] > 0]
    if len(pts) < 2:
        return float("nan")
    N = np.array([p[0] for p in pts], float)
    t = np.array([p[1] for p in pts], float)
    keep = N >= N.max() / 10
    if keep.sum() < 2:
        keep[:] = True
    return float(np.polyfit(np.log(N[keep]), np.log(t[keep]), 1)[0])


def timing_csv(res: TimingResult) -> str:
    cols = res.columns()
    buf = io.StringIO()
    buf.write(f"# friperk timing\n# config_hash={res.config.config_hash()}\n")
    buf.write(f"# median of {res.config.timing.repeats} runs after {res.config.timing.warmup}"
              f" warmup; dense comparator uses {res.config.timing.dense_method}\n")
    buf.write(f"# fri-perk log-log slope over the largest decade: {res.slope:.4f}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in res.rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def gnuplot_script(res: TimingResult, csv_name: str = "timing.csv",
                   png_name: str = "timing_gnuplot.png") -> str:
    cols = res.columns()
    series = [(c, e) for e, c in TIMING_METHODS.items()
              if e in res.config.timing.estimators]
    plots = ", \\\n     ".join(
        f"'{csv_name}' using 1:{cols.index(c) + 1} with linespoints title '{e}'"
        for c, e in series)
    return "\n".join([
        "# gnuplot timing.gp",
        "set datafile separator ','",
        "set datafile missing 'nan'",
        "set key autotitle columnhead",
        "set key top left",
        "set logscale xy",
        "set xlabel 'pilots N = 2M+1'",
        "set ylabel 'median wall-clock [s]'",
        "set grid",
        "set terminal pngcairo size 800,600",
        f"set output '{png_name}'",
        f"plot {plots}",
        "",
    ])
