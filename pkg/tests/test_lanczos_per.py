import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from friperk.channel_model import (PilotLayout, PilotMeasurements, add_awgn, sample_pilots,
                                   synth_scs_channel)
from friperk.exceptions import ConvergenceError, DenseCapExceeded
from friperk.lanczos_per import (PerDecision, dense_eig_reference, detector_fires,
                                 estimate_K, fri_per_dense, lanczos_run, per, per_trace,
                                 ritz_to_sigma, top_eigenvalue, tridiag_eigh)
from friperk.toeplitz_ops import build_operator, dense_materialize


# --------------------------------------------------------------------------
# PER

def test_per_examples():
    assert per([1, 1, 1, 1]) == pytest.approx(4.0, abs=1e-14)
    assert per([5, 0]) == pytest.approx(1.0, abs=1e-14)
    assert per([2, 1]) == pytest.approx(math.exp(math.log(3) - 2 / 3 * math.log(2)), abs=1e-14)
    assert per([2, 1]) == pytest.approx(1.88988, abs=1e-4)


def test_per_rejects_bad_input():
    with pytest.raises(ValueError):
        per([0, 0])
    with pytest.raises(ValueError):
        per([1, -1])
    with pytest.raises(ValueError):
        per([])


def test_per_scale_invariant():
    assert per([3, 2, 1]) == pytest.approx(per([30, 20, 10]), rel=1e-14)


spectra = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=2, max_size=30).map(
    lambda s: np.sort(np.array(s))[::-1]).filter(lambda s: s[0] > 0)


@settings(max_examples=300, deadline=None)
@given(spectra)
def test_per_trace_matches_prefix_per(s):
    t = per_trace(s)
    for k in range(1, len(s) + 1):
        assert t[k - 1] == pytest.approx(per(s[:k]), rel=1e-10)


@settings(max_examples=500, deadline=None)
@given(spectra)
def test_per_increment_bounds(s):
    d = np.diff(per_trace(s))
    assert np.all(d >= 0) and np.all(d <= 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20), st.integers(1, 10), st.floats(1e-3, 1e3))
def test_increment_zero_iff_tail_zero(K, tail, scale):
    rng = np.random.default_rng(K * 31 + tail)
    s = np.sort(rng.uniform(0.1, 1, K))[::-1] * scale
    t = per_trace(np.concatenate([s, np.zeros(tail)]))
    d = np.diff(t)
    assert np.all(d[K - 1:] == 0)
    assert np.all(d[:K - 1] > 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(1e-6, 1e6))
def test_increment_one_iff_equal(K, v):
    d = np.diff(per_trace(np.full(K + 1, v)))
    assert np.all(d == 1.0)
    s = np.full(K + 1, v)
    s[-1] *= 0.999
    assert np.diff(per_trace(s))[-1] < 1 - 1e-12


def test_ritz_to_sigma_clamps():
    th = np.array([4.0, 1.0, 1e-20, -1e-13])
    assert np.array_equal(ritz_to_sigma(th), [2.0, 1.0, 1e-10, 0.0])
    assert np.array_equal(ritz_to_sigma(th, dim=10), [2.0, 1.0, 0.0, 0.0])


# --------------------------------------------------------------------------
# detector

def trace_from_increments(d):
    return np.concatenate([[1.0], 1.0 + np.cumsum(d)])


def spec_rule(t, L, K_max, eps):
    d = np.diff(t)
    for K in range(1, min(K_max, len(t) - L - 1) + 1):
        if d[K - 1] - d[K:K + L].mean() <= -eps:
            return K
    return None


def test_flat_tail_returns_K():
    for K in (1, 3, 7):
        s = np.concatenate([np.linspace(2, 1, K), np.zeros(10)])
        dec = estimate_K(per_trace(s), L=3)
        assert dec.K_hat == K


def test_strictly_concave_not_sparse():
    d = np.linspace(0.99, 0.5, 20)
    dec = estimate_K(trace_from_increments(d), L=3)
    assert dec.not_sparse and dec.K_hat is None


def test_small_dip_needs_drop():
    # comparable paths with a 4% dip, then the rank collapses
    d = [0.9954, 0.955, 0.96, 0.962, 0.961, 0.05, 0.05, 0.05, 0.05]
    t = trace_from_increments(d)
    assert estimate_K(t, L=3, min_drop=0.0).K_hat == 2
    assert estimate_K(t, L=3).K_hat == 6


def test_exhausted_rank_overrides_slope():
    # a flat signal region would fire at K = 1 without the zero tail
    d = [0.93, 0.95, 0.92, 0.91, 0.90, 0.0, 0.0, 0.0, 0.0]
    assert estimate_K(trace_from_increments(d), L=3).K_hat == 6
    assert estimate_K(trace_from_increments(d[:5] + [0.9] * 4), L=3).K_hat == 1


def test_exhausted_rank_needs_L_zeros_and_K_max():
    d = [0.93, 0.95, 0.92, 0.91, 0.90, 0.0, 0.0, 0.0]
    assert estimate_K(trace_from_increments(d), L=3).K_hat == 1
    d = [0.5, 0.9, 0.9, 0.9, 0.0, 0.0, 0.0, 0.0]
    assert estimate_K(trace_from_increments(d), L=3, K_max=4).K_hat == 1
    assert estimate_K(trace_from_increments(d), L=3).K_hat == 5
    assert estimate_K(trace_from_increments([0.0] * 5), L=3).K_hat == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-6, 1), min_size=1, max_size=12), st.integers(3, 8),
       st.integers(1, 4))
def test_exhausted_rank_property(sig, zeros, L):
    zeros = max(zeros, L + 1)
    t = trace_from_increments(list(sig) + [0.0] * zeros)
    assert estimate_K(t, L=L).K_hat == len(sig) + 1


def test_drop_gate_at_k1_uses_unit_reference():
    d = [0.3, 0.31, 0.32, 0.33, 0.34]
    assert estimate_K(trace_from_increments(d), L=3).K_hat == 1
    d = [0.97, 0.98, 0.99, 0.99, 0.99]
    assert estimate_K(trace_from_increments(d), L=3).not_sparse


# strictly positive increments keep the exhausted-rank shortcut out of the way
@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-9, 1), min_size=5, max_size=25), st.integers(1, 4),
       st.floats(0, 0.05))
def test_zero_drop_is_bare_slope_rule(d, L, eps):
    t = trace_from_increments(d)
    if len(t) < L + 2:
        return
    dec = estimate_K(t, L=L, eps_slope=eps, min_drop=0.0, slope_tol=0.0)
    ref = spec_rule(t, L, len(t) - L - 1, eps)
    if ref is None:
        # the zero-increment shortcut is the only extra way to fire
        assert dec.K_hat is None or np.diff(t)[dec.K_hat - 1] == 0
    else:
        assert dec.K_hat is not None and dec.K_hat <= ref


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-9, 1), min_size=5, max_size=25), st.integers(1, 4),
       st.floats(0, 0.3), st.floats(0, 0.5))
def test_decision_is_first_firing_index(d, L, drop, tol):
    t = trace_from_increments(d)
    if len(t) < L + 2:
        return
    dec = estimate_K(t, L=L, min_drop=drop, slope_tol=tol)
    dd = np.diff(t)
    last = len(t) - L - 1
    fired = [K for K in range(1, last + 1) if detector_fires(dd, K, L, 0.0, drop, tol)]
    assert dec.K_hat == (fired[0] if fired else None)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-3, 1), min_size=6, max_size=25), st.integers(1, 4))
def test_bare_rule_concave_trace_not_sparse(d, L):
    t = trace_from_increments(np.sort(d)[::-1])
    assume(np.all(np.diff(np.diff(t)) < 0))
    assert estimate_K(t, L=L, min_drop=0.0, slope_tol=0.0).not_sparse


def test_gently_concave_trace_not_sparse():
    # a linear decline of step s has slope excess 2s against a drop of (K-1)s,
    # so it can only fire from K = 1 + 2 / slope_tol = 21 on
    for n in (8, 16, 24, 40):
        for lo in (0.85, 0.7, 0.5):
            t = trace_from_increments(np.linspace(0.99, lo, n))
            assert estimate_K(t, L=3, K_max=20).not_sparse


def test_sharp_drop_with_decaying_tail():
    # high-SNR shape: the noise increments keep shrinking after the knee
    d = [0.98, 0.97, 0.94, 0.096, 0.09, 0.088, 0.085, 0.084]
    t = trace_from_increments(d)
    assert estimate_K(t, L=3, min_drop=0.0, slope_tol=0.0).not_sparse
    assert estimate_K(t, L=3).K_hat == 4


def test_estimate_K_rejects_bad_gates():
    t = trace_from_increments([0.9, 0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        estimate_K(t, L=3, min_drop=1.0)
    with pytest.raises(ValueError):
        estimate_K(t, L=3, slope_tol=-0.1)


def test_estimate_K_respects_K_max():
    d = [0.99, 0.98, 0.97, 0.5, 0.5, 0.5, 0.5, 0.5]
    t = trace_from_increments(d)
    assert estimate_K(t, L=3).K_hat == 4
    assert estimate_K(t, L=3, K_max=3).not_sparse


def test_estimate_K_short_trace():
    with pytest.raises(ValueError):
        estimate_K([1.0, 1.5, 1.8], L=3)
    with pytest.raises(ValueError):
        estimate_K([1.0, 1.5, 1.8, 2.0, 2.1], L=0)


def test_decision_serializes():
    dec = estimate_K(per_trace(np.array([3, 2, 1, 0, 0, 0, 0.0])), L=3)
    d = dec.to_dict()
    assert d["K_hat"] == 3 and d["not_sparse"] is False and len(d["per_trace"]) == 7


# --------------------------------------------------------------------------
# eigensolvers

@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_tridiag_matches_eigvalsh(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(n), rng.standard_normal(max(n - 1, 0))
    T = np.diag(a) + np.diag(b, 1) + np.diag(b, -1)
    w, V = tridiag_eigh(a, b, vectors=True)
    ref = np.sort(np.linalg.eigvalsh(T))[::-1]
    assert np.allclose(w, ref, atol=1e-12 * max(1, np.abs(ref).max()))
    assert np.allclose(T @ V, V * w, atol=1e-10 * max(1, np.abs(ref).max()))


def test_jacobi_diagonal():
    w, V = dense_eig_reference(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(w, [3, 2, 1])
    assert np.allclose(np.abs(V), np.eye(3)[:, [0, 2, 1]])


def test_jacobi_2x2():
    w, _ = dense_eig_reference(np.array([[2.0, 1.0], [1.0, 1.0]]))
    assert np.allclose(w, [(3 + 5 ** 0.5) / 2, (3 - 5 ** 0.5) / 2], atol=1e-14)
    assert w[0] == pytest.approx(2.6180, abs=1e-4) and w[1] == pytest.approx(0.3820, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_jacobi_residual(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    A = B + B.conj().T
    w, V = dense_eig_reference(A)
    nA = np.linalg.norm(A, 2)
    assert np.linalg.norm(A @ V - V * w, axis=0).max() <= 1e-10 * nA
    assert np.allclose(w, np.sort(np.linalg.eigvalsh(A))[::-1], atol=1e-11 * nA)


def test_jacobi_rejects_nonhermitian():
    with pytest.raises(ValueError):
        dense_eig_reference(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_jacobi_cap():
    with pytest.raises(DenseCapExceeded):
        dense_eig_reference(np.eye(5), cap=3)


def test_jacobi_sweep_cap():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((12, 12))
    with pytest.raises(ConvergenceError):
        dense_eig_reference(B + B.T, max_sweeps=1)


# --------------------------------------------------------------------------
# Lanczos

def noiseless_op(K, P=4, M=40, D=3, seed=0, lean=False):
    lay = PilotLayout(M, D)
    spec = synth_scs_channel(P, K, lay, seed=seed)
    return build_operator(sample_pilots(spec, lay), lean=lean), spec


def test_identity_operator_breaks_at_one():
    M, P = 10, 3
    x = np.zeros((2 * M + 1, P), complex)
    x[M] = 1
    res = lanczos_run(build_operator(x), K_max=5, L=3)
    assert res.state.breakdown and res.state.j == 1
    assert np.allclose(res.ritz.values, P)


def test_noiseless_rank3():
    op, _ = noiseless_op(3)
    st_, ritz, dec = lanczos_run(op, K_max=10, L=3, seed=1)
    assert st_.breakdown and st_.j == 3
    w = np.linalg.eigvalsh(dense_materialize(op))[::-1][:3]
    assert np.allclose(ritz.values[:3], w, rtol=1e-8)
    assert dec.K_hat == 3


def test_zero_operator():
    res = lanczos_run(build_operator(np.zeros((9, 2))), K_max=3, L=1)
    assert res.decision.K_hat == 0


def test_dimension_check():
    with pytest.raises(ValueError):
        lanczos_run(build_operator(np.ones(9, complex)), K_max=4, L=3)


def noisy_op(seed, M=40, P=4, K=4, snr=10.0, lean=False):
    lay = PilotLayout(M, 3)
    spec = synth_scs_channel(P, K, lay, seed=seed)
    m = add_awgn(sample_pilots(spec, lay), snr, seed=seed + 100)
    return build_operator(m, lean=lean)


@pytest.mark.parametrize("seed", range(5))
def test_basis_orthonormal_and_alpha_real(seed):
    op = noisy_op(seed)
    res = lanczos_run(op, K_max=20, L=3, seed=seed, detect=False)
    Q = res.state.Q
    G = Q.conj().T @ Q
    assert np.allclose(np.diag(G).real, 1, atol=1e-10)
    assert np.max(np.abs(G - np.diag(np.diag(G)))) <= 1e-8
    scale = np.linalg.norm(dense_materialize(op), 2)
    assert res.state.max_alpha_imag <= 1e-10 * scale


@pytest.mark.parametrize("seed", range(5))
def test_ritz_interlacing_and_bounds(seed):
    op = noisy_op(seed, snr=0.0)
    res = lanczos_run(op, K_max=20, L=3, seed=seed, detect=False)
    w = np.linalg.eigvalsh(dense_materialize(op))[::-1]
    scale = w[0]
    tops = [max(t) for t in res.diagnostics["ritz_values"]]
    assert np.all(np.diff(tops) >= -1e-10 * scale)
    for t in res.diagnostics["ritz_values"]:
        assert max(t) <= w[0] + 1e-8 * scale
    for th, b in zip(res.ritz.values, res.ritz.residual_bounds):
        assert np.min(np.abs(w - th)) <= b + 1e-8 * scale
    assert np.allclose(np.linalg.norm(res.ritz.vectors, axis=0), 1, atol=1e-9)
    assert np.all(res.ritz.values >= -1e-10 * scale)


def test_reorth_none_runs():
    op = noisy_op(0)
    res = lanczos_run(op, K_max=10, L=3, reorth="none", detect=False)
    assert res.state.reorth_policy == "none" and res.state.j == 14
    with pytest.raises(ValueError):
        lanczos_run(op, K_max=10, L=3, reorth="partial")


def test_deterministic():
    op = noisy_op(3, lean=True)
    a = lanczos_run(op, K_max=15, L=3, seed=7)
    b = lanczos_run(op, K_max=15, L=3, seed=7)
    assert a.decision.K_hat == b.decision.K_hat
    assert np.array_equal(a.decision.per_trace, b.decision.per_trace)
    assert a.diagnostics["seed"] == 7


def test_fft_calls_per_iteration_and_stop_index():
    op = noisy_op(1, P=5, snr=20.0, lean=True)
    res = lanczos_run(op, K_max=15, L=3, seed=0)
    assert set(res.diagnostics["fft_calls_per_iteration"]) == {20}
    assert res.decision.K_hat == 4
    det = res.diagnostics["detect_iterations"]
    assert res.decision.K_hat + 3 + 1 <= det <= 15 + 3 + 1 and det <= res.state.j
    # one extra operator application builds the start vector
    assert res.diagnostics["fft_calls"] == 20 * (res.state.j + 1)


@pytest.mark.parametrize("seed", [11, 12])
def test_refinement_sharpens_leading_ritz_values(seed):
    lay = PilotLayout(50, 3)
    spec = synth_scs_channel(1, 5, lay, seed=seed)
    op = build_operator(add_awgn(sample_pilots(spec, lay), 12.0, seed=seed))
    w = np.linalg.eigvalsh(dense_materialize(op))[::-1]
    bare = lanczos_run(op, 15, 3, seed=seed, ritz_tol=0)
    ref = lanczos_run(op, 15, 3, seed=seed)
    k = ref.decision.K_hat
    assert bare.decision.K_hat == k
    assert np.array_equal(bare.decision.per_trace, ref.decision.per_trace)
    assert bare.state.j == bare.diagnostics["detect_iterations"] < ref.state.j
    err = lambda r: np.max(np.abs(r.ritz.values[:k] - w[:k]) / w[:k])
    assert err(bare) > 1e-6 and err(ref) < 1e-7
    assert ref.ritz.residual_bounds[:k].max() <= 1e-6 * ref.ritz.values[0]


def test_refinement_rejects_negative_tol():
    with pytest.raises(ValueError):
        lanczos_run(noisy_op(0), 10, 3, ritz_tol=-1.0)


def test_warm_start_vector():
    op, _ = noiseless_op(2)
    f0 = np.ones(op.dim, complex)
    res = lanczos_run(op, K_max=5, L=2, f0=f0)
    assert np.allclose(res.state.Q[:, 0], f0 / np.linalg.norm(f0))


def test_dense_matches_lanczos_on_exact_rank():
    for K in (1, 2, 4, 6):
        op, _ = noiseless_op(K, seed=K)
        _, _, dec = lanczos_run(op, K_max=12, L=3, seed=K)
        _, dec_d = fri_per_dense(op, K_max=12, L=3)
        assert dec.K_hat == dec_d.K_hat == K


def test_dense_lapack_and_jacobi_agree():
    op = noisy_op(4, snr=15.0)
    r1, d1 = fri_per_dense(op, 12, 3, method="jacobi")
    r2, d2 = fri_per_dense(op, 12, 3, method="lapack")
    assert d1.K_hat == d2.K_hat
    assert np.allclose(r1.values, r2.values, rtol=1e-10)
    with pytest.raises(ValueError):
        fri_per_dense(op, 12, 3, method="qr")


@pytest.mark.parametrize("seed", range(4))
def test_per_trace_matches_dense_at_converged_indices(seed):
    op = noisy_op(seed, M=60, snr=20.0)
    res = lanczos_run(op, K_max=20, L=3, seed=seed)
    k = res.decision.K_hat
    ritz_d, _ = fri_per_dense(op, 20, 3)
    td = per_trace(np.sqrt(np.clip(ritz_d.values, 0, None)))
    assert np.allclose(res.state.per_trace[:k], td[:k], rtol=1e-6)


def test_top_eigenvalue():
    op = noisy_op(2, snr=0.0)
    assert top_eigenvalue(op) == pytest.approx(np.linalg.eigvalsh(dense_materialize(op))[-1],
                                               rel=1e-10)


def test_seven_path_channel_low_snr_underestimates():
    lay = PilotLayout(50, 3)
    ks = []
    for s in range(30):
        spec = synth_scs_channel(4, 7, lay, decay=0.3, seed=s)
        m = add_awgn(sample_pilots(spec, lay), -11.0, seed=1000 + s)
        dec = lanczos_run(build_operator(m, lean=True), 20, 3, seed=s).decision
        ks.append(0 if dec.K_hat is None else dec.K_hat)
    assert np.median(ks) < 7


def test_per_decision_not_sparse_flag():
    assert PerDecision(None, np.zeros(3), 3, 5).not_sparse
    assert not PerDecision(2, np.zeros(3), 3, 5).not_sparse


def test_pure_noise_spectrum_is_not_sparse_mostly():
    lay = PilotLayout(50, 3)
    ns = 0
    for s in range(20):
        rng = np.random.default_rng(s)
        x = (rng.standard_normal((lay.N, 4)) + 1j * rng.standard_normal((lay.N, 4))) / 2 ** 0.5
        ns += lanczos_run(build_operator(PilotMeasurements(lay, x), lean=True), 20, 3,
                          seed=s).decision.not_sparse
    assert ns > 10
