"""Verification harnesses: Gaussian duality, the Markov gap, the kNN
divergence estimator, coordinate maps, and the data generators."""

import numpy as np
import pytest
from scipy import integrate, special as sp, stats

import ssdiff.analysis as an
import ssdiff.families as fam
import ssdiff.schedule as sc
from ssdiff.errors import ConfigError, ScheduleError


# -- Theorem-2 harness --------------------------------------------------------


def test_kl_identity_tiny_gap_on_cosine_100():
    abar = sc.cosine_ddpm_schedule(100)[1:]
    gap = an.kl_term_identity_gap(abar, 0.7, -0.3)
    assert gap <= 1e-9


def test_reverse_moment_gap_tiny():
    abar = sc.cosine_ddpm_schedule(100)[1:]
    gap = an.reverse_moment_gap(abar, np.linspace(-2, 2, 5),
                                np.linspace(-1, 1, 5))
    assert gap <= 1e-9


def test_reduced_step_skipping_identity():
    abar = sc.cosine_ddpm_schedule(64)[1:]
    pairs = [(64, 32), (32, 8), (20, 1 + 1), (10, 3)]
    gap = an.reduced_step_moment_gap(abar, pairs, np.linspace(-2, 2, 4),
                                     np.linspace(-1, 1, 4))
    assert gap <= 1e-9


def test_forward_moments_with_pure_noise_endpoint():
    abar = sc.cosine_ddpm_schedule(60)[1:]
    rng = np.random.default_rng(0)
    out = an.forward_moment_check(abar, 0.7, 40_000, rng, t_values=[60])
    # a_T ~ 0: G_T moments are those of a standard normal.
    assert abs(out[60]["mean_z"]) < 4 and abs(out[60]["var_z"]) < 4


def test_equivalence_report_bundles_all_checks():
    abar = sc.cosine_ddpm_schedule(50)[1:]
    rep = an.gaussian_equivalence_report(abar, n_mc=30_000,
                                         rng=np.random.default_rng(1))
    assert rep["kl_identity_max_gap"] <= 1e-9
    assert rep["reverse_moment_max_gap"] <= 1e-9
    assert rep["forward_max_z"] <= 4.0


# -- Markov gap ---------------------------------------------------------------


def test_exact_reverse_bound_is_negative_entropy():
    ss = sc.ddpm_to_ss_gaussian(sc.cosine_ddpm_schedule(16)[1:])
    rep = an.markov_gap_gaussian(ss)
    assert rep.exact_bound == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5,
                                            abs=1e-12)
    assert rep.gap >= 0
    assert set(rep.components) == {"H_x0", "H_joint", "H_xT",
                                   "markov_penalty_sum"}


def test_gap_T1_matches_mc_oracle():
    ss = sc.ddpm_to_ss_gaussian(sc.cosine_ddpm_schedule(1)[1:])
    rep = an.markov_gap_gaussian(ss)
    mc = an.markov_gap_gaussian_mc(ss, 400_000, np.random.default_rng(2))
    assert mc == pytest.approx(rep.gap, rel=0.05)


def test_gap_monotone_in_T():
    gaps = []
    for T in (8, 16, 32, 64):
        ss = sc.ddpm_to_ss_gaussian(sc.cosine_ddpm_schedule(T)[1:])
        gaps.append(an.markov_gap_gaussian(ss).gap)
    assert all(g > 0 for g in gaps)
    assert all(b > a for a, b in zip(gaps, gaps[1:]))


def test_gap_vanishing_information_limit():
    # All marginals nearly independent of x0: each Markov penalty term sits at
    # the entropy of a unit Gaussian and the gap collapses.
    ss = np.full(6, 1e-10)
    rep = an.markov_gap_gaussian(ss)
    assert rep.gap == pytest.approx(0.0, abs=1e-8)
    per_step = rep.components["markov_penalty_sum"] / 6
    assert per_step == pytest.approx(0.5 * (1 + np.log(2 * np.pi)), abs=1e-8)


def test_gap_rejects_bad_alpha():
    with pytest.raises(ScheduleError):
        an.markov_gap_gaussian(np.array([0.5, 1.2]))


# -- kNN divergence -----------------------------------------------------------


def test_kl_to_data_zero_for_split_halves():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8000, 2))
    assert abs(an.kl_to_data(x[:4000], x[4000:], k=5)) <= 0.05


def test_kl_to_data_two_gaussians():
    rng = np.random.default_rng(4)
    p = rng.standard_normal((10_000, 1))
    q = rng.standard_normal((10_000, 1)) + 1.0
    assert an.kl_to_data(p, q, k=5) == pytest.approx(0.5, abs=0.1)


def test_kl_to_data_two_gammas_closed_form():
    rng = np.random.default_rng(5)
    a1, a2 = 4.0, 6.0
    p = rng.gamma(a1, 1.0, (10_000, 1))
    q = rng.gamma(a2, 1.0, (10_000, 1))
    ref = (a1 - a2) * sp.digamma(a1) - sp.gammaln(a1) + sp.gammaln(a2)
    assert an.kl_to_data(p, q, k=5) == pytest.approx(ref, abs=0.1)


def test_kl_to_data_two_dirichlets_closed_form():
    # Calibration in the small-divergence regime the metric is used in.
    rng = np.random.default_rng(6)
    al1 = np.array([4.0, 2.0, 3.0])
    al2 = np.array([3.0, 2.5, 3.0])
    p = rng.dirichlet(al1, 10_000)
    q = rng.dirichlet(al2, 10_000)
    a0, b0 = al1.sum(), al2.sum()
    ref = sp.gammaln(a0) - sp.gammaln(al1).sum() \
        - sp.gammaln(b0) + sp.gammaln(al2).sum() \
        + np.sum((al1 - al2) * (sp.digamma(al1) - sp.digamma(a0)))
    est = an.kl_to_data(p, q, k=5, geometry="simplex")
    assert est == pytest.approx(ref, abs=0.1)


def test_kl_to_data_duplicate_jitter_warns():
    x = np.repeat(np.arange(40.0), 40)[:, None]
    with pytest.warns(RuntimeWarning):
        an.kl_to_data(x, x + 0.5, k=3)


def test_coordinate_maps():
    rng = np.random.default_rng(7)
    simplex = rng.dirichlet(np.ones(3), 100)
    u = an.to_unconstrained(simplex, "simplex")
    assert u.shape == (100, 2)
    sphere = rng.standard_normal((100, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    v = an.to_unconstrained(sphere, "sphere")
    assert np.all(np.isfinite(v))
    spd = an.wishart_mixture_sampler()(rng, 50)
    w = an.to_unconstrained(spd, "spd")
    assert w.shape == (50, 3)
    with pytest.raises(ConfigError):
        an.to_unconstrained(simplex, "klein-bottle")


# -- generators ---------------------------------------------------------------


def test_generators_produce_domain_points():
    rng = np.random.default_rng(8)
    d = an.dirichlet_mixture_sampler()(rng, 200)
    fam.check_domain(fam.FamilySpec(fam.Family.DIRICHLET, 3), d)
    w = an.wishart_mixture_sampler()(rng, 200)
    fam.check_domain(fam.FamilySpec(fam.Family.WISHART, 2), w)
    v = an.vmf_mixture_sampler()(rng, 200)
    fam.check_domain(fam.FamilySpec(fam.Family.VON_MISES_FISHER, 3), v)
    img = an.beta_toyimage_sampler(8)(rng, 50)
    assert img.shape == (50, 64) and np.all((img > 0) & (img < 1))
    txt = an.markov_text_sampler(8, 16)(rng, 50)
    assert txt.shape == (50, 16, 8)
    assert np.all(txt.sum(axis=-1) == 1)


def test_latlon_conversion_unit_norm():
    ll = np.array([[0.0, 0.0], [90.0, 0.0], [-45.0, 120.0]])
    v = an.latlon_to_unit_vectors(ll)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0)
    np.testing.assert_allclose(v[0], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(v[1], [0.0, 0.0, 1.0], atol=1e-12)


def test_unknown_experiment_rejected():
    import ssdiff.engine as eng
    cfg = eng.ExperimentConfig(experiment="warp-drive", family="gaussian",
                               dim=1, T=4)
    with pytest.raises(ConfigError, match="warp-drive"):
        an._experiment_setup(cfg)


def test_plot_data_emitters():
    rng = np.random.default_rng(9)
    mats = an.wishart_mixture_sampler()(rng, 20)
    text = an.ellipse_rows_csv(mats)
    assert text.splitlines()[0] == "semi_axis_minor,semi_axis_major,angle_rad"
    assert len(text.strip().splitlines()) == 21
    hist = an.histogram2d_csv(rng.standard_normal((500, 2)), bins=8)
    lines = hist.strip().splitlines()
    assert lines[0].startswith("x_edges,") and len(lines) == 10
    counts = sum(int(c) for row in lines[2:] for c in row.split(",")[1:])
    assert counts == 500


@pytest.mark.parametrize("name,overrides", [
    ("beta_toyimage", dict(dim=16, T=6, iterations=40, n_train=256,
                           n_eval=128, hidden=(16,), normalizer_mc=1,
                           mi_budget=400, mi_kraskov_samples=2000)),
    ("categorical_toytext", dict(dim=4, T=5, iterations=40, n_train=256,
                                 n_eval=128, hidden=(16,), normalizer_mc=1,
                                 mi_budget=400, mi_kraskov_samples=2000,
                                 dataset={"length": 6, "persistence": 0.6})),
])
def test_remaining_experiment_paths_run(name, overrides, tmp_path):
    import ssdiff.engine as eng
    cfg = eng.ExperimentConfig(experiment=name, family={
        "beta_toyimage": "beta", "categorical_toytext": "categorical"}[name],
        seed=3, output_dir=str(tmp_path), **overrides)
    res = an.run_synthetic(cfg, write_outputs=True)
    assert np.all(np.isfinite(res.samples))
    if name == "categorical_toytext":
        assert "bits_per_char" in res.metrics
        assert res.metrics["bits_per_char"] > 0
