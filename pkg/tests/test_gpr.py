import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crashbo import gpr
from crashbo.gpr import (
    CONSTANT, GAMMA, MATERN52, QUADRATIC, SE, SIGMA_N, SMOOTHBOX, GpConfig, GpModel,
    HyperpriorSpec, KernelSpec, MeanSpec,
)

from oracles import (
    fd_gradient_mp, gp_posterior, kernel_scalar, log_marginal_likelihood, random_gp_case,
)
from cases import perturbed_case, prior_tuple

# frozen outputs of oracles.kernel_scalar
SE_AT_ONE = 0.6065306597126334
MATERN_AT_ONE = 0.5239941088318203


def _model(kind, ls, sf2, mean_kind, coef, X, y, **kw):
    return GpModel.build(KernelSpec(kind, ls, sf2), MeanSpec(mean_kind, coef), X, y, **kw)


def test_kernel_examples():
    assert gpr.kernel_eval(KernelSpec(SE, [1.0], 1.0), [0.0], [1.0]) == pytest.approx(SE_AT_ONE, abs=1e-15)
    assert gpr.kernel_eval(KernelSpec(MATERN52, [1.0], 1.0), [0.0], [1.0]) == pytest.approx(
        MATERN_AT_ONE, abs=1e-15)
    assert kernel_scalar("SE", [1.0], 1.0, [0.0], [1.0]) == SE_AT_ONE
    assert kernel_scalar("Matern52", [1.0], 1.0, [0.0], [1.0]) == MATERN_AT_ONE


@pytest.mark.parametrize("kind", [SE, MATERN52])
def test_kernel_at_zero_distance(kind):
    spec = KernelSpec(kind, [0.3, 2.0], 1.7)
    assert gpr.kernel_eval(spec, [0.2, 0.4], [0.2, 0.4]) == 1.7


@pytest.mark.parametrize("ls", [[0.0], [-1.0], [np.inf]])
def test_kernel_rejects_bad_length_scale(ls):
    with pytest.raises(ValueError):
        KernelSpec(SE, ls, 1.0)


@pytest.mark.parametrize("kind", [SE, MATERN52])
def test_kernel_matrix_matches_scalar(kind):
    rng = np.random.default_rng(3)
    spec = KernelSpec(kind, rng.uniform(0.1, 2, 3), 0.8)
    A, B = rng.random((6, 3)), rng.random((4, 3))
    K = gpr.kernel_matrix(spec, A, B)
    ref = [[kernel_scalar(kind, spec.length_scales, 0.8, a, b) for b in B] for a in A]
    np.testing.assert_allclose(K, ref, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(gpr.kernel_matrix(spec, A, A), gpr.kernel_matrix(spec, A, A).T)


def test_mean_examples():
    assert gpr.mean_eval(MeanSpec(CONSTANT, [0.3]), [0.9, 0.1]) == 0.3
    assert gpr.mean_eval(MeanSpec(QUADRATIC, [0, 0, 0, 1, 1]), [0.5, 0.5]) == 0.5
    assert gpr.mean_eval(MeanSpec(QUADRATIC, np.zeros(5)), [0.7, 0.2]) == 0.0


def test_mean_coefficient_count():
    with pytest.raises(ValueError):
        MeanSpec(CONSTANT, [1.0, 2.0])
    with pytest.raises(ValueError):
        MeanSpec(QUADRATIC, [1.0, 2.0])
    with pytest.raises(ValueError):
        gpr.mean_eval(MeanSpec(QUADRATIC, np.zeros(5)), [0.1, 0.2, 0.3])


def test_single_point_likelihood_closed_form():
    kernel = KernelSpec(SE, [0.4], 1.3)
    y = 0.7
    value, _ = gpr.log_posterior(kernel, MeanSpec(CONSTANT, [y]), HyperpriorSpec(), [[0.2]], [y])
    prior, _ = gpr.log_hyperprior(HyperpriorSpec(), np.log([0.4]))
    expected = -0.5 * math.log(2 * math.pi * (1.3 + SIGMA_N**2))
    assert value - prior == pytest.approx(expected, rel=1e-12)


def test_likelihood_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        kind, ls, sf2, mk, coef, X, y, _ = random_gp_case(rng, n_max=10, d_max=3)
        value, _ = gpr.log_posterior(KernelSpec(kind, ls, sf2), MeanSpec(mk, coef),
                                     HyperpriorSpec(), X, y, jitter=1e-2)
        prior, _ = gpr.log_hyperprior(HyperpriorSpec(), np.log(ls))
        ref = log_marginal_likelihood(kind, ls, sf2, mk, coef, X, y, 1e-4)
        assert value - prior == pytest.approx(ref, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("kind", [SE, MATERN52])
@pytest.mark.parametrize("mean_kind", [CONSTANT, QUADRATIC])
@pytest.mark.parametrize("prior_kind", [SMOOTHBOX, GAMMA])
def test_gradient_vs_extended_precision_fd(kind, mean_kind, prior_kind):
    rng = np.random.default_rng(11)
    prior = HyperpriorSpec(kind=prior_kind)
    for _ in range(2):
        X, y, kernel, mean = perturbed_case(rng, 2, kind, mean_kind)
        _, grad = gpr.log_posterior(kernel, mean, prior, X, y)
        fd = fd_gradient_mp(kind, mean_kind, prior_tuple(prior), X, y,
                            gpr.pack(kernel, mean), SIGMA_N)
        assert np.max(np.abs(grad - fd) / np.abs(fd)) < 1e-4


def test_gradient_vs_float64_fd_with_large_jitter():
    # with a well-conditioned covariance plain float64 differences are accurate
    rng = np.random.default_rng(12)
    for kind in (SE, MATERN52):
        X, y, kernel, mean = perturbed_case(rng, 2, kind, QUADRATIC)
        prior = HyperpriorSpec(kind=GAMMA)
        vec = gpr.pack(kernel, mean)
        obj = gpr._Objective(X, y, kind, QUADRATIC, prior, jitter=0.05)
        _, grad = obj.value_and_grad(vec)
        h = 1e-5
        fd = np.array([
            (obj.value_and_grad(vec + h * e)[0] - obj.value_and_grad(vec - h * e)[0]) / (2 * h)
            for e in np.eye(vec.size)
        ])
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_smoothbox_prior_shape():
    prior = HyperpriorSpec()
    centre = 0.5 * (prior.lower + prior.upper)
    inside, _ = gpr.log_hyperprior(prior, [centre])
    nearby, _ = gpr.log_hyperprior(prior, [centre + 1.0])
    far, _ = gpr.log_hyperprior(prior, [prior.upper + 5.0])
    assert inside == pytest.approx(nearby, abs=1e-8)
    assert far < inside - 40


def test_hyperprior_validation():
    with pytest.raises(ValueError):
        HyperpriorSpec(lower=1.0, upper=0.0)
    with pytest.raises(ValueError):
        HyperpriorSpec(kind=GAMMA, shape=-1.0)


def test_prediction_matches_explicit_inverse_when_well_conditioned():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 40:
        case = random_gp_case(rng)
        kind, ls, sf2, mk, coef, X, y, Xq = case
        m = _model(*case[:7])
        K = gpr.kernel_matrix(m.kernel, X, X) + SIGMA_N**2 * np.eye(len(X))
        cond = np.linalg.cond(K)
        mu, var = m.predict_standardized(Xq)
        omu, osd = gp_posterior(kind, ls, sf2, mk, coef, X, y, Xq, SIGMA_N**2)
        scale = math.sqrt(sf2)
        if cond < 1e6:
            checked += 1
            np.testing.assert_allclose(mu, omu, rtol=1e-8)
            np.testing.assert_allclose(np.sqrt(var), osd, rtol=1e-8)
        else:
            # both sides lose about cond * eps; only check that bound
            tol = 100 * cond * np.finfo(float).eps * scale
            assert np.max(np.abs(mu - omu)) < tol * max(1.0, np.max(np.abs(y)))
            assert np.max(np.abs(var - osd**2)) < tol * scale


def test_prior_only_prediction():
    m = gpr.prior_model(2, GpConfig())
    mu, sigma = m.predict(np.array([0.3, 0.3]))
    assert mu == 0.0
    assert sigma == pytest.approx(math.sqrt(m.kernel.signal_variance + SIGMA_N**2))
    assert gpr.fit(np.empty((0, 2)), [], GpConfig(), np.random.default_rng(0)).n == 0


def test_prediction_at_training_point():
    rng = np.random.default_rng(1)
    X = rng.random((6, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1]
    m = gpr.fit(X, y, GpConfig(), rng)
    mu, sigma = m.predict(X)
    np.testing.assert_allclose(mu, y, atol=1e-3)
    assert np.all(sigma <= SIGMA_N * m.output_scale * 1.01)


def test_fit_constant_data():
    X = np.random.default_rng(2).random((5, 2))
    m = gpr.fit(X, np.full(5, 3.5), GpConfig(), np.random.default_rng(0))
    mu, _ = m.predict(np.random.default_rng(3).random((20, 2)))
    np.testing.assert_allclose(mu, 3.5, atol=1e-6)
    assert m.kernel.signal_variance < 1.0


def test_fit_deterministic():
    rng = np.random.default_rng(4)
    X, y = rng.random((8, 2)), rng.normal(size=8)
    a = gpr.fit(X, y, GpConfig(MATERN52, QUADRATIC), np.random.default_rng(7))
    b = gpr.fit(X, y, GpConfig(MATERN52, QUADRATIC), np.random.default_rng(7))
    np.testing.assert_array_equal(gpr.pack(a.kernel, a.mean), gpr.pack(b.kernel, b.mean))


def test_fit_interpolates_smooth_function():
    X = np.linspace(0, 1, 20)[:, None]
    y = np.sin(6 * X[:, 0]) + 2 * X[:, 0] ** 2
    m = gpr.fit(X, y, GpConfig(), np.random.default_rng(0))
    mu, _ = m.predict(X)
    assert np.max(np.abs(mu - y)) < 3e-2


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        gpr.fit(np.zeros((3, 1)), [1.0, np.nan, 2.0], GpConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        gpr.fit(np.zeros((3, 1)), [1.0, 2.0], GpConfig(), np.random.default_rng(0))


def test_standardize_robust():
    shift, scale = gpr.standardize([1.0, 2.0, 3.0, 4.0, 1e9])
    assert shift == 3.0
    assert scale == pytest.approx(2.0 / 1.349)
    assert gpr.standardize([2.0, 2.0]) == (2.0, 1.0)


def test_jitter_retry():
    # duplicated inputs: with a large enough signal variance only the 10x jitter factorizes
    X = np.zeros((4, 1))
    jitters = set()
    for sf2 in np.logspace(4, 10, 61):
        try:
            jitters.add(_model(SE, [1.0], sf2, CONSTANT, [0.0], X, np.ones(4)).jitter)
        except gpr.GpNumericalError:
            pass
    assert jitters == {SIGMA_N, 10 * SIGMA_N}


def test_factorization_failure_reports_hyperparameters():
    with pytest.raises(gpr.GpNumericalError) as info:
        _model(SE, [1.0], 1e15, CONSTANT, [0.0], np.zeros((3, 1)), np.ones(3))
    assert info.value.hyperparameters is not None


@given(st.integers(0, 10_000))
def test_variance_never_exceeds_prior(seed):
    rng = np.random.default_rng(seed)
    m = _model(*random_gp_case(rng, n_max=10)[:7])
    Xq = rng.random((20, m.dim))
    _, var = m.predict_standardized(Xq)
    assert np.all(var <= m.kernel.signal_variance + 1e-12)
    assert np.all(var >= 0)


def test_variance_bound_1000_pairs():
    rng = np.random.default_rng(99)
    for _ in range(200):
        m = _model(*random_gp_case(rng, n_max=10)[:7])
        _, var = m.predict_standardized(rng.random((5, m.dim)))
        assert np.all(var <= m.kernel.signal_variance * (1 + 1e-12))


@given(st.integers(0, 10_000))
def test_adding_a_point_never_increases_variance(seed):
    rng = np.random.default_rng(seed)
    kind, ls, sf2, mk, coef, X, y, Xq = random_gp_case(rng, n_max=8, d_max=3)
    ls = ls * 0.3  # keep the covariance well conditioned
    small = _model(kind, ls, sf2, mk, coef, X, y)
    x_new = rng.random((1, X.shape[1]))
    big = _model(kind, ls, sf2, mk, coef, np.vstack([X, x_new]), np.append(y, 0.0))
    _, v0 = small.predict_standardized(Xq)
    _, v1 = big.predict_standardized(Xq)
    assert np.all(v1 <= v0 + 1e-9)


@given(st.integers(0, 10_000))
def test_prediction_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    kind, ls, sf2, mk, coef, X, y, Xq = random_gp_case(rng, n_max=10, d_max=3)
    ls = ls * 0.3
    perm = rng.permutation(len(y))
    m = _model(kind, ls, sf2, mk, coef, X, y)
    a = m.predict_standardized(Xq)
    b = _model(kind, ls, sf2, mk, coef, X[perm], y[perm]).predict_standardized(Xq)
    cond = np.linalg.cond(m.chol @ m.chol.T)
    # exact in exact arithmetic; reordering the factorization costs about cond * eps
    rtol = max(1e-10, 100 * cond * np.finfo(float).eps)
    np.testing.assert_allclose(a[0], b[0], rtol=rtol, atol=rtol * max(1.0, np.abs(y).max()))
    np.testing.assert_allclose(a[1], b[1], rtol=rtol, atol=rtol * sf2)
