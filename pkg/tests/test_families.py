"""Family-level contracts: parameter maps, statistics, samplers, densities,
closed-form KL divergences (checked against quadrature), and manifold heads.
"""

import numpy as np
import pytest
from scipy import integrate, special as sp

import ssdiff.families as fam
from ssdiff.errors import (DomainBoundaryError, DomainError, KlFormulaError,
                           SamplerFailure, ScheduleError)

RNG = np.random.default_rng(20240817)


def spec_of(family, dim=1):
    return fam.FamilySpec(family, dim)


def random_domain_point(family, dim, rng):
    if family is fam.Family.GAUSSIAN:
        return rng.standard_normal(dim)
    if family is fam.Family.BETA:
        return rng.uniform(0.05, 0.95, dim)
    if family is fam.Family.DIRICHLET:
        g = rng.standard_gamma(2.0, dim)
        return g / g.sum()
    if family is fam.Family.CATEGORICAL:
        return np.eye(dim)[rng.integers(0, dim)]
    if family is fam.Family.VON_MISES:
        return rng.uniform(-3.0, 3.0, dim)
    if family is fam.Family.VON_MISES_FISHER:
        z = rng.standard_normal(dim)
        return z / np.linalg.norm(z)
    if family is fam.Family.GAMMA:
        return rng.uniform(0.2, 3.0, dim)
    if family is fam.Family.WISHART:
        a = rng.standard_normal((dim, dim + 2))
        return a @ a.T / (dim + 2) + 0.05 * np.eye(dim)
    raise AssertionError(family)


def random_point(family, dim, rng, t=1):
    spec = spec_of(family, dim)
    if family is fam.Family.GAUSSIAN:
        return fam.make_point(spec, t, alpha_bar=float(rng.uniform(0.05, 0.95)))
    if family in (fam.Family.BETA, fam.Family.DIRICHLET):
        return fam.make_point(spec, t, nu=float(rng.uniform(0.3, 40.0)))
    if family in (fam.Family.VON_MISES, fam.Family.VON_MISES_FISHER):
        return fam.make_point(spec, t, kappa=float(rng.uniform(0.3, 30.0)))
    if family is fam.Family.GAMMA:
        return fam.make_point(spec, t, alpha=float(rng.uniform(1.0, 20.0)),
                              xi=float(rng.uniform(0.05, 0.95)))
    if family is fam.Family.WISHART:
        return fam.make_point(spec, t, n=float(rng.uniform(dim + 1.0, 30.0)),
                              xi=float(rng.uniform(0.05, 0.95)))
    if family is fam.Family.CATEGORICAL:
        q = rng.dirichlet(np.full(dim, 2.0), size=dim)
        return fam.make_point(spec, t, qbar=q)
    raise AssertionError(family)


ALL_FAMILIES = [
    (fam.Family.GAUSSIAN, 2),
    (fam.Family.BETA, 2),
    (fam.Family.DIRICHLET, 3),
    (fam.Family.CATEGORICAL, 4),
    (fam.Family.VON_MISES, 2),
    (fam.Family.VON_MISES_FISHER, 3),
    (fam.Family.GAMMA, 2),
    (fam.Family.WISHART, 2),
]


# ---------------------------------------------------------------------------
# natural_params
# ---------------------------------------------------------------------------


def test_natural_params_beta_linear_map():
    spec = spec_of(fam.Family.BETA)
    pt = fam.make_point(spec, 1, nu=10.0)
    assert fam.natural_params(spec, np.array([0.3]), pt) == pytest.approx([3.0])


def test_natural_params_vmf_zero_concentration():
    spec = spec_of(fam.Family.VON_MISES_FISHER, 3)
    pt = fam.make_point(spec, 1, kappa=0.0)
    out = fam.natural_params(spec, np.array([1.0, 0.0, 0.0]), pt)
    assert out == pytest.approx([0.0, 0.0, 0.0])


def test_natural_params_wishart_hand_evaluation():
    # mu = 0.5 I + 0.5 I^{-1} = I, eta = -n/2 mu = -2 I at n=4.
    spec = spec_of(fam.Family.WISHART, 2)
    pt = fam.make_point(spec, 1, n=4.0, xi=0.5)
    out = fam.natural_params(spec, np.eye(2), pt)
    assert out == pytest.approx(-2.0 * np.eye(2))


def test_natural_params_rejects_off_manifold():
    spec = spec_of(fam.Family.BETA)
    pt = fam.make_point(spec, 1, nu=1.0)
    with pytest.raises(DomainError):
        fam.natural_params(spec, np.array([1.7]), pt)


# ---------------------------------------------------------------------------
# sufficient_stat
# ---------------------------------------------------------------------------


def test_sufficient_stat_examples():
    assert fam.sufficient_stat(spec_of(fam.Family.BETA), np.array([0.5])) \
        == pytest.approx([0.0])
    vm = fam.sufficient_stat(spec_of(fam.Family.VON_MISES), np.array([0.0]))
    np.testing.assert_allclose(vm, [[1.0, 0.0]], atol=1e-15)
    d = fam.sufficient_stat(spec_of(fam.Family.DIRICHLET, 3),
                            np.full(3, 1.0 / 3.0))
    assert d == pytest.approx(np.full(3, -np.log(3.0)))


def test_sufficient_stat_boundary_rejected():
    with pytest.raises(DomainBoundaryError):
        fam.sufficient_stat(spec_of(fam.Family.BETA), np.array([0.0]))
    with pytest.raises(DomainBoundaryError):
        fam.sufficient_stat(spec_of(fam.Family.BETA), np.array([1.0]))


# ---------------------------------------------------------------------------
# sample_forward
# ---------------------------------------------------------------------------


def test_gaussian_zero_variance_limit():
    spec = spec_of(fam.Family.GAUSSIAN)
    pt = fam.make_point(spec, 1, alpha_bar=1.0 - 1e-12)
    x0 = np.array([0.37])
    draws = np.array([fam.sample_forward(spec, x0, pt, np.random.default_rng(i))
                      for i in range(32)])
    assert np.max(np.abs(draws - x0)) < 1e-5


def test_categorical_identity_transition_returns_x0():
    spec = spec_of(fam.Family.CATEGORICAL, 4)
    pt = fam.make_point(spec, 1, qbar=np.eye(4))
    x0 = np.eye(4)[2]
    for seed in range(8):
        out = fam.sample_forward(spec, x0, pt, np.random.default_rng(seed))
        assert np.array_equal(out, x0)


def test_beta_sample_mean_against_moment_oracle():
    # Mean of Beta(1 + nu x0, 1 + nu(1-x0)) is (1 + nu x0) / (2 + nu).
    spec = spec_of(fam.Family.BETA)
    pt = fam.make_point(spec, 1, nu=50.0)
    n = 10**5
    x0 = np.full((n, 1), 0.5)
    draws = fam.sample_forward(spec, x0, pt, np.random.default_rng(0))
    expect = 26.0 / 52.0
    se = draws.std() / np.sqrt(n)
    assert abs(draws.mean() - expect) < 3 * se


@pytest.mark.parametrize("family,dim", ALL_FAMILIES)
def test_sampler_moments_match_analytic_mean(family, dim):
    if family is fam.Family.VON_MISES:
        pytest.skip("circular mean checked via resultant below")
    spec = spec_of(family, dim)
    rng = np.random.default_rng(5)
    pt = random_point(family, dim, rng)
    x0 = random_domain_point(family, dim, rng)
    n = 10**5
    batch = np.broadcast_to(x0, (n,) + x0.shape).copy()
    draws = fam.sample_forward(spec, batch, pt, rng)
    mean = fam.analytic_mean(spec, x0, pt)
    if family is fam.Family.VON_MISES_FISHER:
        direction = draws.mean(axis=0)
        direction /= np.linalg.norm(direction)
        assert direction @ x0 > 0.99
        return
    se = draws.std(axis=0, ddof=1) / np.sqrt(n) + 1e-12
    z = np.abs(draws.mean(axis=0) - mean) / se
    assert np.max(z) < 4.0


def test_von_mises_resultant_direction():
    spec = spec_of(fam.Family.VON_MISES, 1)
    pt = fam.make_point(spec, 1, kappa=5.0)
    draws = fam.sample_forward(spec, np.full((10**5, 1), 0.9), pt,
                               np.random.default_rng(2))
    resultant = np.arctan2(np.mean(np.sin(draws)), np.mean(np.cos(draws)))
    assert abs(resultant - 0.9) < 0.02


def test_domain_closure_of_forward_samples():
    rng = np.random.default_rng(11)
    for family, dim in ALL_FAMILIES:
        spec = spec_of(family, dim)
        pt = random_point(family, dim, rng)
        x0 = np.stack([random_domain_point(family, dim, rng) for _ in range(64)])
        draws = fam.sample_forward(spec, x0, pt, rng)
        fam.check_domain(spec, draws)


def test_vmf_rejection_cap_raises(monkeypatch):
    monkeypatch.setattr(fam, "REJECTION_CAP", 3)

    class StubRng:
        def beta(self, a, b, size):
            return np.full(size, 1.0 - 1e-12)  # proposals always rejected

        def random(self, size):
            return np.full(size, 1.0 - 1e-12)

        def standard_normal(self, size):
            return np.zeros(size)

    with pytest.raises(SamplerFailure) as err:
        fam._sample_vmf(np.array([[0.0, 0.0, 1.0]]), np.array([250.0]), StubRng())
    assert err.value.kappa == pytest.approx(250.0)


# ---------------------------------------------------------------------------
# log_pdf
# ---------------------------------------------------------------------------


def test_log_pdf_examples():
    beta = spec_of(fam.Family.BETA)
    pt = fam.make_point(beta, 1, nu=0.0)
    assert fam.log_pdf(beta, np.array([0.42]), np.array([0.7]), pt) \
        == pytest.approx(0.0, abs=1e-12)

    gauss = spec_of(fam.Family.GAUSSIAN)
    gpt = fam.make_point(gauss, 1, alpha_bar=0.5)
    assert fam.log_pdf(gauss, np.array([0.0]), np.array([0.0]), gpt) \
        == pytest.approx(-0.5 * np.log(2 * np.pi * 0.5))

    vmf = spec_of(fam.Family.VON_MISES_FISHER, 3)
    vpt = fam.make_point(vmf, 1, kappa=2.0)
    x0 = np.array([0.0, 0.0, 1.0])
    expect = 2.0 + np.log(2.0 / (4 * np.pi * np.sinh(2.0)))
    assert fam.log_pdf(vmf, x0, x0, vpt) == pytest.approx(expect)


@pytest.mark.parametrize("family", [fam.Family.BETA, fam.Family.GAMMA,
                                    fam.Family.VON_MISES, fam.Family.GAUSSIAN])
def test_log_pdf_normalizes_to_one(family):
    # Quadrature of exp(log_pdf) over the 1-D domain must integrate to 1.
    spec = spec_of(family, 1)
    rng = np.random.default_rng(3)
    pt = random_point(family, 1, rng)
    x0 = random_domain_point(family, 1, rng)
    lims = {fam.Family.BETA: (1e-9, 1 - 1e-9), fam.Family.GAMMA: (1e-9, 60.0),
            fam.Family.VON_MISES: (-np.pi, np.pi),
            fam.Family.GAUSSIAN: (-12.0, 12.0)}[family]
    val, _ = integrate.quad(
        lambda x: float(np.exp(fam.log_pdf(spec, np.array([x]), x0, pt))),
        *lims, limit=300)
    assert val == pytest.approx(1.0, rel=1e-6)


def test_wishart_log_pdf_against_scipy():
    from scipy import stats
    spec = spec_of(fam.Family.WISHART, 2)
    rng = np.random.default_rng(9)
    pt = fam.make_point(spec, 1, n=7.0, xi=0.3)
    x0 = random_domain_point(fam.Family.WISHART, 2, rng)
    x = random_domain_point(fam.Family.WISHART, 2, rng)
    mu = 0.3 * np.eye(2) + 0.7 * np.linalg.inv(x0)
    v = np.linalg.inv(mu) / 7.0
    ref = stats.wishart(df=7.0, scale=v).logpdf(x)
    assert fam.log_pdf(spec, x, x0, pt) == pytest.approx(ref)


# ---------------------------------------------------------------------------
# kl_step
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("family,dim", ALL_FAMILIES)
def test_kl_identity_at_x0(family, dim):
    spec = spec_of(family, dim)
    rng = np.random.default_rng(7)
    for _ in range(100):
        pt = random_point(family, dim, rng)
        x0 = random_domain_point(family, dim, rng)
        assert abs(fam.kl_step(spec, x0, x0.copy(), pt)) <= 1e-10


@pytest.mark.parametrize("family,dim", ALL_FAMILIES)
def test_kl_positivity_random_pairs(family, dim):
    spec = spec_of(family, dim)
    rng = np.random.default_rng(13)
    for _ in range(100):
        pt = random_point(family, dim, rng)
        x0 = random_domain_point(family, dim, rng)
        xp = random_domain_point(family, dim, rng)
        assert fam.kl_step(spec, x0, xp, pt) >= -1e-10


def test_gaussian_kl_hand_value():
    spec = spec_of(fam.Family.GAUSSIAN)
    pt = fam.make_point(spec, 1, alpha_bar=0.5)
    # alpha_bar (x_pred - x0)^2 / (2 (1 - alpha_bar)) = 0.5 / (2 * 0.5)
    assert fam.kl_step(spec, np.array([0.0]), np.array([1.0]), pt) \
        == pytest.approx(0.5)


def _kl_quadrature(spec, x0, xp, pt, lims):
    def integrand(x):
        xa = np.array([x])
        lq = float(fam.log_pdf(spec, xa, x0, pt))
        lp = float(fam.log_pdf(spec, xa, xp, pt))
        return np.exp(lq) * (lq - lp)

    val, _ = integrate.quad(integrand, *lims, limit=400)
    return val


def test_beta_kl_against_quadrature_example():
    spec = spec_of(fam.Family.BETA)
    pt = fam.make_point(spec, 1, nu=10.0)
    x0, xp = np.array([0.3]), np.array([0.7])
    quad = _kl_quadrature(spec, x0, xp, pt, (1e-12, 1 - 1e-12))
    assert fam.kl_step(spec, x0, xp, pt) == pytest.approx(quad, abs=1e-6)


@pytest.mark.parametrize("family", [fam.Family.BETA, fam.Family.GAMMA,
                                    fam.Family.VON_MISES, fam.Family.GAUSSIAN])
def test_kl_quadrature_equivalence_random(family):
    spec = spec_of(family, 1)
    rng = np.random.default_rng(17)
    lims = {fam.Family.BETA: (1e-12, 1 - 1e-12), fam.Family.GAMMA: (1e-10, 80.0),
            fam.Family.VON_MISES: (-np.pi, np.pi),
            fam.Family.GAUSSIAN: (-14.0, 14.0)}[family]
    for _ in range(50):
        pt = random_point(family, 1, rng)
        x0 = random_domain_point(family, 1, rng)
        xp = random_domain_point(family, 1, rng)
        closed = fam.kl_step(spec, x0, xp, pt)
        quad = _kl_quadrature(spec, x0, xp, pt, lims)
        assert closed == pytest.approx(quad, rel=1e-5, abs=1e-9)


def test_negative_kl_fails_loudly(monkeypatch):
    spec = spec_of(fam.Family.BETA)
    pt = fam.make_point(spec, 1, nu=1.0)
    monkeypatch.setattr(fam._REGISTRY[fam.Family.BETA].__class__, "kl",
                        lambda self, spec, x0, xp, params: np.array([-1.0]))
    with pytest.raises(KlFormulaError):
        fam.kl_step(spec, np.array([0.4]), np.array([0.5]), pt)


@pytest.mark.parametrize("family", [fam.Family.BETA, fam.Family.GAMMA,
                                    fam.Family.VON_MISES, fam.Family.GAUSSIAN])
def test_conditional_entropy_against_quadrature(family):
    spec = spec_of(family, 1)
    rng = np.random.default_rng(23)
    lims = {fam.Family.BETA: (1e-12, 1 - 1e-12), fam.Family.GAMMA: (1e-10, 80.0),
            fam.Family.VON_MISES: (-np.pi, np.pi),
            fam.Family.GAUSSIAN: (-14.0, 14.0)}[family]
    pt = random_point(family, 1, rng)
    x0 = random_domain_point(family, 1, rng)

    def integrand(x):
        lq = float(fam.log_pdf(spec, np.array([x]), x0, pt))
        return -np.exp(lq) * lq

    quad, _ = integrate.quad(integrand, *lims, limit=400)
    closed = float(fam.conditional_entropy(spec, x0[None], pt)[0])
    assert closed == pytest.approx(quad, rel=1e-6, abs=1e-8)


# ---------------------------------------------------------------------------
# map_to_domain
# ---------------------------------------------------------------------------


def test_head_examples():
    d = fam.map_to_domain(spec_of(fam.Family.DIRICHLET, 3), np.zeros(3))
    assert d == pytest.approx(np.full(3, 1.0 / 3.0))

    v = fam.map_to_domain(spec_of(fam.Family.VON_MISES_FISHER, 3),
                          np.array([3.0, 0.0, 0.0]))
    assert v == pytest.approx([1.0, 0.0, 0.0])

    w = fam.map_to_domain(spec_of(fam.Family.WISHART, 2),
                          np.array([1.0, 0.0, 1.0]))
    assert w == pytest.approx(np.eye(2) * (1.0 + 1e-4))


def test_head_domain_closure():
    rng = np.random.default_rng(29)
    for family, dim in ALL_FAMILIES:
        spec = spec_of(family, dim)
        raw = rng.standard_normal((50, fam.raw_output_dim(spec))) * 3.0
        out = fam.map_to_domain(spec, raw)
        if family is fam.Family.CATEGORICAL:
            assert np.allclose(np.asarray(out).sum(axis=-1), 1.0)
            continue
        if family is fam.Family.VON_MISES:
            assert np.all(np.abs(out) <= np.pi)
            continue
        fam.check_domain(spec, out)
        if family is fam.Family.WISHART:
            eig = np.linalg.eigvalsh(out)
            assert eig.min() >= 1e-4 - 1e-9


def test_vmf_zero_norm_head_error():
    with pytest.raises(DomainError):
        fam.map_to_domain(spec_of(fam.Family.VON_MISES_FISHER, 3), np.zeros(3))


def test_gamma_head_clamped():
    spec = spec_of(fam.Family.GAMMA)
    hi = fam.map_to_domain(spec, np.array([1e3]))
    lo = fam.map_to_domain(spec, np.array([-1e3]))
    assert np.asarray(hi) == pytest.approx([1e6])
    assert np.asarray(lo) == pytest.approx([1e-6])
