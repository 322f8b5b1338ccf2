"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test prints a PASS line on success (run with `pytest -s` to see them);
a failure raises with the criterion number in the test name. The synthetic
experiment runs (criterion 7) are the slow part of the suite.
"""

import time

import numpy as np
import pytest
from scipy import integrate, special as sp

import ssdiff.analysis as an
import ssdiff.engine as eng
import ssdiff.families as fam
import ssdiff.nnet as nnet
import ssdiff.schedule as sc
import ssdiff.tail as tl

from test_families import ALL_FAMILIES, random_domain_point, random_point
from test_tail import schedule_for


def report(num, text):
    print(f"\n[PASS] criterion {num}: {text}")


def elapsed_guard(t0, limit_s, label):
    dt = time.time() - t0
    assert dt < limit_s, f"{label} took {dt:.1f}s, budget {limit_s}s"
    return dt


# ---------------------------------------------------------------------------


def test_criterion_1_sufficiency_oracle():
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst = 0.0
    trials = 0
    for D in (2, 3):
        for T in (2, 3):
            for _ in range(5):  # 20 random stacks across the grid
                base = rng.dirichlet(np.full(D, 2.0), size=D)
                stack = [base if rng.random() < 0.5
                         else rng.dirichlet(np.full(D, 2.0), size=D)
                         for _ in range(T)]
                law = rng.dirichlet(np.ones(D))
                worst = max(worst, tl.verify_sufficiency(D, T, stack, law))
                trials += 1
    assert trials == 20
    assert worst <= 1e-10
    dt = elapsed_guard(t0, 10.0, "sufficiency enumeration")
    report(1, f"max posterior discrepancy {worst:.2e} over 20 stacks "
              f"({dt:.1f}s < 10s)")


def test_criterion_2_gaussian_equivalence():
    t0 = time.time()
    abar = sc.cosine_ddpm_schedule(100)[1:]
    rep = an.gaussian_equivalence_report(abar, n_mc=10**5,
                                         rng=np.random.default_rng(202),
                                         x0=0.7)
    assert rep["kl_identity_max_gap"] <= 1e-9
    assert rep["forward_max_z"] <= 4.0
    assert rep["reverse_moment_max_gap"] <= 1e-9
    dt = elapsed_guard(t0, 60.0, "equivalence suite")
    report(2, f"KL identity {rep['kl_identity_max_gap']:.1e}, forward "
              f"moments {rep['forward_max_z']:.2f} MC SE, reverse moments "
              f"{rep['reverse_moment_max_gap']:.1e} ({dt:.1f}s < 60s)")


def test_criterion_3_markov_gap():
    t0 = time.time()
    ss4 = sc.ddpm_to_ss_gaussian(sc.cosine_ddpm_schedule(4)[1:])
    rep4 = an.markov_gap_gaussian(ss4)
    mc = an.markov_gap_gaussian_mc(ss4, 10**6, np.random.default_rng(303))
    assert mc == pytest.approx(rep4.gap, rel=0.05)

    gaps = []
    for T in (8, 16, 32, 64):
        ss = sc.ddpm_to_ss_gaussian(sc.cosine_ddpm_schedule(T)[1:])
        gaps.append(an.markov_gap_gaussian(ss).gap)
    assert all(g > 0 for g in gaps)
    assert all(b > a for a, b in zip(gaps, gaps[1:]))

    exact = rep4.exact_bound
    assert abs(exact - (-0.5 * np.log(2 * np.pi) - 0.5)) <= 1e-12
    dt = elapsed_guard(t0, 120.0, "markov gap suite")
    report(3, f"T=4 analytic {rep4.gap:.4f} vs MC {mc:.4f}; gaps "
              f"{[round(g, 3) for g in gaps]} monotone; exact bound matches "
              f"({dt:.1f}s < 120s)")


def test_criterion_4_kl_identity_and_quadrature():
    t0 = time.time()
    rng = np.random.default_rng(404)
    worst = 0.0
    for family, dim in ALL_FAMILIES:
        spec = fam.FamilySpec(family, dim)
        for _ in range(1000):
            pt = random_point(family, dim, rng)
            x0 = random_domain_point(family, dim, rng)
            worst = max(worst, abs(fam.kl_step(spec, x0, x0.copy(), pt)))
    assert worst <= 1e-10

    lims = {fam.Family.BETA: (1e-12, 1 - 1e-12),
            fam.Family.GAMMA: (1e-10, 80.0),
            fam.Family.VON_MISES: (-np.pi, np.pi),
            fam.Family.GAUSSIAN: (-14.0, 14.0)}
    worst_rel = 0.0
    for family, lim in lims.items():
        spec = fam.FamilySpec(family, 1)
        for _ in range(12):
            pt = random_point(family, 1, rng)
            x0 = random_domain_point(family, 1, rng)
            xp = random_domain_point(family, 1, rng)
            closed = fam.kl_step(spec, x0, xp, pt)

            def integrand(x):
                xa = np.array([x])
                lq = float(fam.log_pdf(spec, xa, x0, pt))
                lp = float(fam.log_pdf(spec, xa, xp, pt))
                return np.exp(lq) * (lq - lp)

            quad, _ = integrate.quad(integrand, *lim, limit=400)
            denom = max(abs(quad), 1e-9)
            worst_rel = max(worst_rel, abs(closed - quad) / denom)
    assert worst_rel <= 1e-5
    dt = elapsed_guard(t0, 60.0, "KL identity suite")
    report(4, f"identity {worst:.1e} over 8x1000 draws; quadrature rel err "
              f"{worst_rel:.1e} ({dt:.1f}s < 60s)")


def test_criterion_5_mi_estimator_calibration():
    t0 = time.time()
    n = 10**5
    worst = 0.0
    for rho, seed in ((0.0, 1), (0.5, 2), (0.9, 3)):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, 2))
        x = z[:, :1]
        y = rho * x + np.sqrt(1 - rho**2) * z[:, 1:]
        ref = -0.5 * np.log(1 - rho**2) if rho > 0 else 0.0
        err = abs(sc.mi_kraskov(x, y, k=10) - ref)
        worst = max(worst, err)
    assert worst <= 0.05

    # Beta problem with a quadrature oracle: three well-separated atoms.
    spec = fam.FamilySpec(fam.Family.BETA, 1)
    atoms = np.array([0.1, 0.5, 0.9])
    weights = np.full(3, 1 / 3)
    nu = 50.0
    a = 1 + nu * atoms
    b = 1 + nu * (1 - atoms)

    def marginal(x):
        return float(np.sum(weights * np.exp(
            (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - sp.betaln(a, b))))

    h_marg = -integrate.quad(lambda x: marginal(x) * np.log(max(marginal(x), 1e-300)),
                             1e-12, 1 - 1e-12, limit=400)[0]
    h_cond = float(np.sum(weights * (
        sp.betaln(a, b) - (a - 1) * sp.digamma(a) - (b - 1) * sp.digamma(b)
        + (a + b - 2) * sp.digamma(a + b))))
    mi_quad = h_marg - h_cond

    def sampler(r, m):
        idx = r.choice(3, size=m, p=weights)
        return atoms[idx][:, None]

    widths = {}
    for K, M, seed in ((50, 30_000, 10), (1000, 60_000, 11)):
        lo, hi = sc.mi_dsivi_bounds(spec, {"nu": nu}, sampler, K=K, M=M,
                                    rng=np.random.default_rng(seed))
        widths[K] = hi - lo
        if K == 1000:
            assert lo <= mi_quad <= hi, (lo, mi_quad, hi)
    assert widths[1000] < widths[50]
    dt = elapsed_guard(t0, 300.0, "MI calibration")
    report(5, f"Kraskov max err {worst:.3f} <= 0.05; K=1000 sandwich "
              f"brackets {mi_quad:.4f}, width {widths[1000]:.4f} < "
              f"{widths[50]:.4f} at K=50 ({dt:.1f}s < 300s)")


def test_criterion_6_schedule_matching():
    t0 = time.time()
    # (a) Gaussian self-consistency: analytic rows, matched against the
    # transform's own MI trace, recover the transform within 2 percent.
    T = 100
    abar_ss_ref = sc.ddpm_to_ss_gaussian(sc.cosine_ddpm_schedule(T)[1:])
    target = sc.mi_gaussian_reference(abar_ss_ref, 1.0)
    nus = np.exp(np.linspace(np.log(1e-7), np.log(1e8), 256))
    mi = 0.5 * np.log1p(nus)
    table = sc.MiTable(nu=nus, mi=mi, lower=mi, upper=mi,
                       estimator=["analytic_gaussian"] * nus.size)
    spec_g = fam.FamilySpec(fam.Family.GAUSSIAN, 1)
    matched = sc.match_schedule(table, target, spec_g)
    got = matched.param_array("alpha_bar")
    rel = np.abs(got - abar_ss_ref) / abar_ss_ref
    assert np.max(rel) <= 0.02

    # (b) Beta matching against the cosine target: re-estimated MI within
    # 10 percent where 0.01 < I < 2.
    T_beta = 1000
    spec_b = fam.FamilySpec(fam.Family.BETA, 1)
    target_b = sc.cosine_target_mi(T_beta, data_variance=1.0, dims=1)

    def pixels(rng, n):
        comp = rng.random(n) < 0.5
        z = np.where(comp, -1.2, 1.2) + 0.8 * rng.standard_normal(n)
        return sp.expit(z)[:, None]

    cfg = sc.EstimatorConfig(kraskov_samples=40_000, dsivi_m=12_000,
                             rough_m=2_000)
    grid = np.exp(np.linspace(np.log(1e-4), np.log(3e7), 64))
    table_b = sc.build_mi_table(spec_b, grid, pixels, master_seed=606,
                                config=cfg)
    matched_b = sc.match_schedule(table_b, target_b, spec_b)
    nus_b = matched_b.param_array("nu")

    window = np.nonzero((target_b > 0.01) & (target_b < 2.0))[0]
    probe = window[np.linspace(0, window.size - 1, 12).astype(int)]
    worst_rel = 0.0
    for j, idx in enumerate(probe):
        lo, hi = sc.mi_dsivi_bounds(spec_b, {"nu": float(nus_b[idx])}, pixels,
                                    K=100, M=120_000,
                                    rng=np.random.default_rng(700 + j))
        est = 0.5 * (lo + hi)
        worst_rel = max(worst_rel, abs(est - target_b[idx]) / target_b[idx])
    assert worst_rel <= 0.10
    dt = elapsed_guard(t0, 600.0, "schedule matching")
    report(6, f"Gaussian transform recovered to {np.max(rel) * 100:.2f}% ; "
              f"Beta re-estimated MI within {worst_rel * 100:.1f}% of target "
              f"({dt:.0f}s < 600s)")


# -- criterion 7: synthetic experiments (slow) ---------------------------------


def test_criterion_7a_dirichlet_simplex():
    t0 = time.time()
    cfg = eng.ExperimentConfig(
        experiment="dirichlet_simplex", family="dirichlet", dim=3, T=64,
        iterations=20_000, batch_size=128, lr=4e-4, ema_decay=0.999,
        hidden=(256, 256, 256), seed=0, n_train=20_000, n_eval=8192,
        output_dir="out/accept_dirichlet")
    res = an.run_synthetic(cfg, write_outputs=True)
    assert res.metrics["kl_to_data"] <= 0.1
    assert res.metrics["max_simplex_error"] <= 1e-9

    # Reduced-step sampling degrades gracefully: 16 network evaluations stay
    # close to the 64-step quality.
    import ssdiff.tail as tl_
    net, opt, _ = eng.load_checkpoint("out/accept_dirichlet/checkpoint.npz")
    spec = fam.FamilySpec(fam.Family.DIRICHLET, 3)
    schedule = res.schedule
    norm = tl_.TailNormalizer.from_json(
        open("out/accept_dirichlet/normalizer.json").read())
    pred = eng.net_predictor(net, spec, schedule, norm, params=opt.ema)
    rng = np.random.default_rng(77)
    plan16 = np.unique(np.linspace(1, 64, 16).round().astype(int))
    reduced = eng.sample_reduced(pred, spec, schedule, norm, rng, plan16,
                                 n=8192)
    fam.check_domain(spec, reduced)
    fresh = an.dirichlet_mixture_sampler()(rng, 8192)
    kl16 = an.kl_to_data(fresh, reduced, k=5, geometry="simplex")
    assert kl16 >= res.metrics["kl_to_data"] - 0.05
    assert kl16 <= 0.3  # still in the right ballpark

    dt = elapsed_guard(t0, 1800.0, "dirichlet experiment")
    report("7a", f"dirichlet kl_to_data {res.metrics['kl_to_data']:.4f} <= 0.1, "
                 f"16-step kl {kl16:.4f} ({dt:.0f}s < 1800s)")


def test_criterion_7b_wishart_pd():
    t0 = time.time()
    cfg = eng.ExperimentConfig(
        experiment="wishart_pd", family="wishart", dim=2, T=64,
        iterations=16_000, batch_size=128, lr=4e-4, lr_decay=0.99996,
        ema_decay=0.999, hidden=(256, 256, 256), seed=0, n_train=20_000,
        n_eval=8192, loss_mode="reweighted", output_dir="out/accept_wishart")
    res = an.run_synthetic(cfg, write_outputs=False)
    assert res.metrics["pd_fraction"] == 1.0
    assert res.metrics["min_eigenvalue"] > 0
    assert res.metrics["kl_to_data"] <= 0.15
    dt = elapsed_guard(t0, 1800.0, "wishart experiment")
    report("7b", f"wishart kl_to_data {res.metrics['kl_to_data']:.4f} <= 0.15, "
                 f"100% p.d. ({dt:.0f}s < 1800s)")


def test_criterion_7c_vmf_sphere():
    t0 = time.time()
    cfg = eng.ExperimentConfig(
        experiment="vmf_sphere", family="von_mises_fisher", dim=3, T=100,
        iterations=12_000, batch_size=128, lr=4e-4, ema_decay=0.999,
        hidden=(256, 256, 256), seed=0, n_train=20_000, n_eval=8192,
        output_dir="out/accept_vmf")
    res = an.run_synthetic(cfg, write_outputs=False)
    assert res.metrics["max_norm_error"] <= 1e-9
    assert all(m >= 0.05 for m in res.metrics["mode_mass"])
    dt = elapsed_guard(t0, 1800.0, "vMF experiment")
    report("7c", f"vMF unit norms to {res.metrics['max_norm_error']:.1e}, "
                 f"mode mass {[round(m, 3) for m in res.metrics['mode_mass']]} "
                 f"({dt:.0f}s < 1800s)")


# -- criterion 8: substitute property suites -----------------------------------


def test_criterion_8_substitute_suites():
    t0 = time.time()
    # Gradient check through the full loss graph (net -> head -> KL).
    rng = np.random.default_rng(808)
    spec, schedule = schedule_for(fam.Family.DIRICHLET, 3, 4, rng)
    data = an.dirichlet_mixture_sampler()(rng, 32)
    norm = tl.fit_tail_normalizer(spec, schedule, data, n_mc=2, rng=rng)
    net = nnet.PredictorNet(nnet.NetConfig(3, 3, (16, 16), 8),
                            np.random.default_rng(5))
    for k in net.params:
        net.params[k] = rng.standard_normal(net.params[k].shape) * 0.2

    def loss_value(params):
        r = np.random.default_rng(99)
        batch = data[:8]
        t_arr = np.array([2, 3, 2, 4, 3, 2, 4, 3])
        xs = np.stack([fam.sample_forward(spec, batch, schedule.point(t), r)
                       for t in range(1, 5)])
        gs = tl.tail_suffix_sums(spec, schedule, xs)
        g = gs[t_arr - 1, np.arange(8)]
        flat = fam.flatten_tail(spec, g)
        z = (flat - norm.mean[t_arr - 1]) / norm.std[t_arr - 1]
        emb = nnet.time_embedding(t_arr, 4, 8)
        raw = nnet.forward(net, z, emb, params)
        x0h = fam.map_to_domain(spec, raw)
        return eng.training_loss(spec, schedule, batch, t_arr, x0h,
                                 eng.LossSpec("vlb"))

    params = nnet.trainable_params(net)
    grads = nnet.backward(loss_value(params), params)
    from ssdiff import autodiff as ad
    h = 1e-4
    checked, worst = 0, 0.0
    for name in sorted(net.params):
        flat = net.params[name]
        for ij in np.ndindex(*flat.shape):
            if checked >= 200:
                break
            if rng.random() < 0.6:
                continue
            orig = flat[ij]
            flat[ij] = orig + h
            lp = float(ad.value_of(loss_value(net.params)))
            flat[ij] = orig - h
            lm = float(ad.value_of(loss_value(net.params)))
            flat[ij] = orig
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(grads[name][ij] - num) / (abs(num) + 1e-8))
            checked += 1
    assert checked >= 150
    assert worst <= 1e-4

    # Reduced-step degeneracy: full plan reproduces full sampling bit-exactly.
    spec_g = fam.FamilySpec(fam.Family.GAUSSIAN, 1)
    schedule_g = sc.gaussian_schedule_from_cosine(12, 1)

    def predictor(state):
        return np.tanh(fam.flatten_tail(spec_g, state.g))

    full = eng.sample(predictor, spec_g, schedule_g, None,
                      np.random.default_rng(12), n=128)
    red = eng.sample_reduced(predictor, spec_g, schedule_g, None,
                             np.random.default_rng(12), range(1, 13), n=128)
    np.testing.assert_array_equal(full, red)

    # Zero-loss oracle for every family.
    worst_loss = 0.0
    for family, dim in ALL_FAMILIES:
        spec_f, sched_f = schedule_for(family, dim, 5, rng)
        batch = np.stack([random_domain_point(family, dim, rng)
                          for _ in range(16)])
        t_arr = rng.integers(1, 6, size=16)
        val = eng.training_loss(spec_f, sched_f, batch, t_arr, batch.copy(),
                                eng.LossSpec("vlb"))
        worst_loss = max(worst_loss, abs(float(val)))
    assert worst_loss <= 1e-10

    dt = elapsed_guard(t0, 300.0, "substitute suites")
    report(8, f"gradient check {worst:.2e} <= 1e-4 over {checked} params; "
              f"reduction degeneracy bit-exact; zero-loss oracle "
              f"{worst_loss:.1e} <= 1e-10 ({dt:.0f}s < 300s)")
