"""Verification harnesses and metrics.

Gaussian duality checks (the star-shaped process observed through its tail
statistic is a Markovian Gaussian diffusion, with matching KL terms and
reverse moments), the analytic irreducible gap of the best Markov reverse
approximation under standard-normal data, a kNN divergence estimator between
sample sets, and drivers for the synthetic experiments.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import spatial

from . import engine, families as fam, nnet, schedule as sched, tail as tailmod
from .errors import ConfigError, EstimatorError, ScheduleError
from .utils import atomic_write_text, git_describe, sha256_of, spawn_rng


# ---------------------------------------------------------------------------
# Theorem-2 equivalence harness
# ---------------------------------------------------------------------------


def kl_term_identity_gap(alpha_bar_ddpm: np.ndarray, x0: float, x_pred: float) -> float:
    """Max |KL_t^SS - KL_t^DDPM| over t=2..T for one (x0, x_pred) pair.

    The star-shaped side evaluates the family's closed form at the
    transformed schedule; the Markovian side evaluates the posterior-matching
    term from (beta_t, beta_tilde_t). Both are exact, so agreement is a
    float-rounding statement.
    """
    a = np.asarray(alpha_bar_ddpm, dtype=float)
    ss = sched.ddpm_to_ss_gaussian(a)
    diff_sq = (x0 - x_pred) ** 2

    # Star-shaped KL at step t uses the SS marginal at t-1.
    kl_ss = ss[:-1] / (2.0 * (1.0 - ss[:-1])) * diff_sq

    a_prev, a_cur = a[:-1], a[1:]
    beta = 1.0 - a_cur / a_prev
    beta_tilde = (1.0 - a_prev) / (1.0 - a_cur) * beta
    kl_ddpm = (np.sqrt(a_prev) * beta / (1.0 - a_cur)) ** 2 / (2.0 * beta_tilde) * diff_sq
    return float(np.max(np.abs(kl_ss - kl_ddpm)))


def reverse_moment_gap(alpha_bar_ddpm: np.ndarray, g_values, x_pred_values) -> float:
    """Max moment discrepancy between the tail-update reverse step and the
    Markovian posterior form, over t=2..T and the supplied (G_t, x_pred) grid.

    Our sampler: x_{t-1} ~ N(sqrt(ss_{t-1}) x_pred, 1-ss_{t-1}) folded into
    the statistic. The Markovian form: mean mu_tilde(G_t, x_pred), variance
    beta_tilde_t.
    """
    a = np.asarray(alpha_bar_ddpm, dtype=float)
    ss = sched.ddpm_to_ss_gaussian(a)
    c = sched.gaussian_tail_prefactor(ss)
    coeff = np.sqrt(ss) / (1.0 - ss)

    worst = 0.0
    for t in range(2, a.size + 1):
        i = t - 1
        for g in np.atleast_1d(g_values):
            for xp in np.atleast_1d(x_pred_values):
                s_t = g / c[i]
                mean_ours = c[i - 1] * (s_t + coeff[i - 1] * np.sqrt(ss[i - 1]) * xp)
                var_ours = (c[i - 1] * coeff[i - 1]) ** 2 * (1.0 - ss[i - 1])

                beta = 1.0 - a[i] / a[i - 1]
                beta_tilde = (1.0 - a[i - 1]) / (1.0 - a[i]) * beta
                mean_ddpm = np.sqrt(a[i - 1]) * beta / (1.0 - a[i]) * xp \
                    + np.sqrt(1.0 - beta) * (1.0 - a[i - 1]) / (1.0 - a[i]) * g
                worst = max(worst, abs(mean_ours - mean_ddpm),
                            abs(var_ours - beta_tilde))
    return float(worst)


def reduced_step_moment_gap(alpha_bar_ddpm: np.ndarray, step_pairs,
                            g_values, x_pred_values) -> float:
    """Max discrepancy between the frozen-prediction jump t2 -> t1 and the
    Markovian skipping formula.

    Our jump draws every intermediate x_s from the forward conditional at the
    frozen estimate and folds it into the statistic; in the Gaussian case its
    first two moments must match the posterior of x_{t1} given (x_{t2}, x0)
    evaluated at the frozen estimate.
    """
    a = np.asarray(alpha_bar_ddpm, dtype=float)
    ss = sched.ddpm_to_ss_gaussian(a)
    c = sched.gaussian_tail_prefactor(ss)
    coeff = np.sqrt(ss) / (1.0 - ss)
    odds_ss = ss / (1.0 - ss)

    worst = 0.0
    for t2, t1 in step_pairs:
        i2, i1 = t2 - 1, t1 - 1
        span = slice(i1, i2)
        for g in np.atleast_1d(g_values):
            for xp in np.atleast_1d(x_pred_values):
                mean_ours = c[i1] * (g / c[i2]
                                     + np.sum(coeff[span] * np.sqrt(ss[span])) * xp)
                var_ours = c[i1] ** 2 * np.sum(coeff[span] ** 2 * (1.0 - ss[span]))

                mean_ddpm = (a[i1] - a[i2]) / (np.sqrt(a[i1]) * (1.0 - a[i2])) * xp \
                    + np.sqrt(a[i2]) * (1.0 - a[i1]) \
                    / (np.sqrt(a[i1]) * (1.0 - a[i2])) * g
                var_ddpm = (1.0 - a[i1]) * (a[i1] - a[i2]) / ((1.0 - a[i2]) * a[i1])
                worst = max(worst, abs(mean_ours - mean_ddpm),
                            abs(var_ours - var_ddpm))
                # sanity: sum of ss odds over the span telescopes
                worst = max(worst, abs(np.sum(odds_ss[span])
                                       - (sched.odds(a[i1]) - sched.odds(a[i2]))))
    return float(worst)


def forward_moment_check(alpha_bar_ddpm: np.ndarray, x0: float, n_mc: int,
                         rng, t_values=None) -> dict:
    """MC moments of the scaled statistic G_t|x0 against N(sqrt(a) x0, 1-a).

    Returns per-t z-scores of the mean and variance in MC standard errors.
    """
    a = np.asarray(alpha_bar_ddpm, dtype=float)
    T = a.size
    ss = sched.ddpm_to_ss_gaussian(a)
    spec = fam.FamilySpec(fam.Family.GAUSSIAN, 1)
    schedule = _gaussian_schedule(ss)
    t_values = [1, max(1, T // 2), T] if t_values is None else t_values

    x0_batch = np.full((n_mc, 1), float(x0))
    xs = np.stack([fam.sample_forward(spec, x0_batch, schedule.point(t), rng)
                   for t in range(1, T + 1)])
    gs = tailmod.tail_suffix_sums(spec, schedule, xs)
    c = sched.gaussian_tail_prefactor(ss)

    out = {}
    for t in t_values:
        g = (c[t - 1] * gs[t - 1]).ravel()
        mean_ref = np.sqrt(a[t - 1]) * x0
        var_ref = 1.0 - a[t - 1]
        se_mean = g.std(ddof=1) / np.sqrt(n_mc)
        se_var = g.var(ddof=1) * np.sqrt(2.0 / (n_mc - 1))
        out[t] = {
            "mean_z": float((g.mean() - mean_ref) / se_mean),
            "var_z": float((g.var(ddof=1) - var_ref) / se_var),
        }
    return out


def _gaussian_schedule(alpha_bar_ss: np.ndarray) -> sched.NoiseSchedule:
    spec = fam.FamilySpec(fam.Family.GAUSSIAN, 1)
    points = [fam.make_point(spec, t, alpha_bar=float(alpha_bar_ss[t - 1]))
              for t in range(1, alpha_bar_ss.size + 1)]
    return sched.NoiseSchedule(fam.Family.GAUSSIAN, 1, points,
                               provenance="analytic_transform")


def gaussian_equivalence_report(alpha_bar_ddpm: np.ndarray, n_mc: int = 10**5,
                                rng=None, x0: float = 0.7) -> dict:
    """Bundled Theorem-2 checks on one DDPM schedule."""
    rng = np.random.default_rng(0) if rng is None else rng
    probe = np.linspace(-1.5, 1.5, 7)
    kl_gap = max(kl_term_identity_gap(alpha_bar_ddpm, a, b)
                 for a in (-1.0, 0.0, 0.7) for b in probe)
    rev_gap = reverse_moment_gap(alpha_bar_ddpm, probe, probe)
    moments = forward_moment_check(alpha_bar_ddpm, x0, n_mc, rng)
    max_z = max(max(abs(v["mean_z"]), abs(v["var_z"])) for v in moments.values())
    return {
        "kl_identity_max_gap": kl_gap,
        "reverse_moment_max_gap": rev_gap,
        "forward_moments": moments,
        "forward_max_z": max_z,
    }


# ---------------------------------------------------------------------------
# Markov-gap analysis (standard-normal data)
# ---------------------------------------------------------------------------


@dataclass
class GapReport:
    T: int
    gap: float
    exact_bound: float
    markov_bound: float
    components: dict = field(default_factory=dict)


def markov_gap_gaussian(alpha_bar_ss: np.ndarray) -> GapReport:
    """Analytic VLB deficit of the best Markovian reverse approximation.

    With standard-normal data the optimal Markov reverse kernel is the joint
    Gaussian conditional of x_{t-1} given x_t; its bound decomposes into
    entropies plus per-step penalties -1/2 [1 + log(2 pi (1 - a_{t-1} a_t))]
    (with a_0 = 1), and the exact-reverse bound is the negative data entropy.
    """
    a = np.asarray(alpha_bar_ss, dtype=float)
    if np.any(a <= 0) or np.any(a >= 1):
        raise ScheduleError("alpha_bar values must lie in (0, 1)")
    a_prev = np.concatenate([[1.0], a[:-1]])

    h_x0 = 0.5 * np.log(2 * np.pi * np.e)
    h_joint = h_x0 + np.sum(0.5 * np.log(2 * np.pi * np.e * (1.0 - a)))
    h_xT = 0.5 * np.log(2 * np.pi * np.e)  # marginal variance is exactly 1
    penalty = 0.5 * np.sum(1.0 + np.log(2 * np.pi * (1.0 - a_prev * a)))

    markov = -h_x0 + h_joint - h_xT - penalty
    exact = -0.5 * np.log(2 * np.pi) - 0.5
    return GapReport(
        T=a.size, gap=float(exact - markov), exact_bound=float(exact),
        markov_bound=float(markov),
        components={"H_x0": float(h_x0), "H_joint": float(h_joint),
                    "H_xT": float(h_xT), "markov_penalty_sum": float(penalty)})


def markov_gap_gaussian_mc(alpha_bar_ss: np.ndarray, n_samples: int, rng) -> float:
    """MC oracle for the gap: E[log q(x_{t-1}|x_{t:T}) - log q(x_{t-1}|x_t)].

    Works directly on the joint Gaussian by Schur-complement conditioning,
    independently of the entropy bookkeeping in `markov_gap_gaussian`.
    """
    a = np.asarray(alpha_bar_ss, dtype=float)
    T = a.size
    # Joint over (x0, x_1..x_T): x_t = sqrt(a_t) x0 + sqrt(1-a_t) eps_t.
    x0 = rng.standard_normal(n_samples)
    eps = rng.standard_normal((n_samples, T))
    xs = np.sqrt(a) * x0[:, None] + np.sqrt(1.0 - a) * eps

    sqrt_a = np.sqrt(a)
    cov = np.outer(sqrt_a, sqrt_a) + np.diag(1.0 - a)

    total = 0.0
    a_ext = np.concatenate([[1.0], a])  # index t: a_ext[t] is alpha_bar_t, a_0=1
    xs_ext = np.concatenate([x0[:, None], xs], axis=1)
    for t in range(1, T + 1):
        # Conditional of x_{t-1} given the tail x_{t:T} (Schur complement).
        cross = np.sqrt(a_ext[t - 1]) * sqrt_a[t - 1:]
        tail_cov = cov[t - 1:, t - 1:]
        sol = np.linalg.solve(tail_cov, cross)
        var_full = 1.0 - cross @ sol
        mean_full = xs[:, t - 1:] @ sol
        lp_full = -0.5 * np.log(2 * np.pi * var_full) \
            - (xs_ext[:, t - 1] - mean_full) ** 2 / (2 * var_full)

        rho = np.sqrt(a_ext[t - 1] * a_ext[t])
        var_markov = 1.0 - rho ** 2
        mean_markov = rho * xs_ext[:, t]
        lp_markov = -0.5 * np.log(2 * np.pi * var_markov) \
            - (xs_ext[:, t - 1] - mean_markov) ** 2 / (2 * var_markov)
        total += float(np.mean(lp_full - lp_markov))
    return total


# ---------------------------------------------------------------------------
# kNN divergence between sample sets
# ---------------------------------------------------------------------------


def to_unconstrained(points: np.ndarray, geometry: str) -> np.ndarray:
    """Map manifold samples to R^d before density-based estimation.

    simplex -> additive log-ratio; sphere -> stereographic projection from
    the south pole; spd -> log-Cholesky coordinates; none -> flatten.
    """
    x = np.asarray(points, dtype=float)
    if geometry == "none":
        return x.reshape(x.shape[0], -1)
    if geometry == "simplex":
        x = np.clip(x, 1e-12, None)
        return np.log(x[:, :-1]) - np.log(x[:, -1:])
    if geometry == "sphere":
        denom = 1.0 + x[:, -1]
        bad = denom < 1e-9
        if np.any(bad):  # points at the projection pole get nudged
            denom = np.where(bad, 1e-9, denom)
        return x[:, :-1] / denom[:, None]
    if geometry == "spd":
        chol = np.linalg.cholesky(x)
        p = x.shape[-1]
        rows, cols = np.tril_indices(p)
        flat = chol[:, rows, cols]
        diag = rows == cols
        flat[:, diag] = np.log(flat[:, diag])
        return flat
    raise ConfigError(f"unknown geometry {geometry!r}")


def kl_to_data(p_samples: np.ndarray, q_samples: np.ndarray, k: int = 5,
               geometry: str = "none") -> float:
    """kNN estimate of KL(P || Q) from samples (Wang-Kulkarni-Verdu form).

    ``p_samples`` come from the reference (data) distribution, ``q_samples``
    from the model. Manifold-valued samples are first mapped to unconstrained
    coordinates because the constraint surface biases nearest-neighbor
    distances.
    """
    x = to_unconstrained(p_samples, geometry)
    y = to_unconstrained(q_samples, geometry)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 1:
        raise EstimatorError("need at least two samples per set")
    d = x.shape[1]

    def knn_dists(xs, ys):
        tx = spatial.cKDTree(xs)
        ty = spatial.cKDTree(ys)
        rho = tx.query(xs, k=k + 1)[0][:, k]
        nu = np.atleast_2d(ty.query(xs, k=k)[0].T).T[:, -1]
        return rho, nu

    rho, nu = knn_dists(x, y)
    if np.any(rho == 0) or np.any(nu == 0):
        warnings.warn("duplicate points in kNN divergence; applying jitter",
                      RuntimeWarning)
        jit = spawn_rng(n * 2654435761 % (2**31), m)
        scale = 1e-10 * max(1.0, float(np.max(np.abs(x))))
        x = x + jit.uniform(-scale, scale, size=x.shape)
        y = y + jit.uniform(-scale, scale, size=y.shape)
        rho, nu = knn_dists(x, y)
    return float(d * np.mean(np.log(nu / rho)) + np.log(m / (n - 1)))


# ---------------------------------------------------------------------------
# Synthetic data generators
# ---------------------------------------------------------------------------


def dirichlet_mixture_sampler(alphas=None, weights=None):
    """Mixture of Dirichlet distributions on the simplex."""
    alphas = np.asarray([[14.0, 3.0, 3.0], [3.0, 14.0, 3.0], [2.0, 2.0, 8.0]]
                        if alphas is None else alphas, dtype=float)
    weights = np.full(len(alphas), 1.0 / len(alphas)) if weights is None \
        else np.asarray(weights, dtype=float)

    def sampler(rng, n):
        comp = rng.choice(len(alphas), size=n, p=weights)
        g = rng.standard_gamma(alphas[comp])
        return g / g.sum(axis=1, keepdims=True)

    return sampler


def wishart_mixture_sampler(scales=None, dofs=None, weights=None):
    """Mixture of 2x2 Wishart laws (symmetric positive definite samples)."""
    if scales is None:
        scales = np.asarray([
            [[0.06, 0.02], [0.02, 0.03]],
            [[0.03, -0.015], [-0.015, 0.05]],
            [[0.10, 0.0], [0.0, 0.10]],
        ])
    else:
        scales = np.asarray(scales, dtype=float)
    dofs = np.asarray([10.0, 14.0, 6.0] if dofs is None else dofs, dtype=float)
    weights = np.full(len(dofs), 1.0 / len(dofs)) if weights is None \
        else np.asarray(weights, dtype=float)

    def sampler(rng, n):
        comp = rng.choice(len(dofs), size=n, p=weights)
        v = scales[comp]
        return fam._sample_wishart(v, dofs[comp], rng)

    return sampler


def vmf_mixture_sampler(mus=None, kappas=None, weights=None):
    """Mixture of von Mises-Fisher clusters on the unit sphere."""
    if mus is None:
        mus = np.asarray([[1.0, 0.0, 0.0], [-0.5, 0.8, 0.0], [0.0, -0.6, 0.8]])
        mus = mus / np.linalg.norm(mus, axis=1, keepdims=True)
    else:
        mus = np.asarray(mus, dtype=float)
    kappas = np.asarray([40.0, 25.0, 60.0] if kappas is None else kappas, dtype=float)
    weights = np.full(len(kappas), 1.0 / len(kappas)) if weights is None \
        else np.asarray(weights, dtype=float)

    def sampler(rng, n):
        comp = rng.choice(len(kappas), size=n, p=weights)
        return fam._sample_vmf(mus[comp], kappas[comp], rng)

    return sampler


def gaussian_mixture_sampler(means=(-1.5, 1.5), stds=(0.6, 0.6), weights=None,
                             dim: int = 1):
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    weights = np.full(means.size, 1.0 / means.size) if weights is None \
        else np.asarray(weights, dtype=float)

    def sampler(rng, n):
        comp = rng.choice(means.size, size=n, p=weights)
        return means[comp, None] + stds[comp, None] * rng.standard_normal((n, dim))

    return sampler


def beta_toyimage_sampler(side: int = 8):
    """Image-like pixels in (0,1): soft random rectangles on a dim background."""
    def sampler(rng, n):
        out = np.full((n, side, side), 0.15)
        for i in range(n):
            h = rng.integers(2, side - 1)
            w = rng.integers(2, side - 1)
            r = rng.integers(0, side - h + 1)
            c = rng.integers(0, side - w + 1)
            out[i, r:r + h, c:c + w] = 0.85
        out += 0.03 * rng.standard_normal(out.shape)
        return np.clip(out, 0.02, 0.98).reshape(n, side * side)

    return sampler


def markov_text_sampler(vocab: int = 8, length: int = 16, persistence: float = 0.7):
    """First-order Markov token sequences, one-hot encoded (n, L, D)."""
    def sampler(rng, n):
        trans = persistence * np.eye(vocab) \
            + (1 - persistence) / vocab * np.ones((vocab, vocab))
        seq = np.empty((n, length), dtype=int)
        seq[:, 0] = rng.integers(0, vocab, size=n)
        for j in range(1, length):
            rows = trans[seq[:, j - 1]]
            u = rng.random((n, 1))
            seq[:, j] = np.minimum((u > rows.cumsum(axis=1)).sum(axis=1), vocab - 1)
        return np.eye(vocab)[seq]

    return sampler


def latlon_to_unit_vectors(latlon_deg: np.ndarray) -> np.ndarray:
    """CSV ingestion helper: (latitude, longitude) degrees -> S^2 points."""
    ll = np.asarray(latlon_deg, dtype=float)
    lat = np.radians(ll[:, 0])
    lon = np.radians(ll[:, 1])
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon),
                     np.sin(lat)], axis=1)


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

EXPERIMENTS = ("dirichlet_simplex", "wishart_pd", "vmf_sphere",
               "gaussian_sanity", "beta_toyimage", "categorical_toytext")


def _experiment_setup(config: engine.ExperimentConfig):
    """(spec, data sampler, geometry, frequencies) for a named experiment."""
    name = config.experiment
    ds = config.dataset
    if name == "dirichlet_simplex":
        spec = fam.FamilySpec(fam.Family.DIRICHLET, config.dim)
        return spec, dirichlet_mixture_sampler(ds.get("alphas"), ds.get("weights")), \
            "simplex", None
    if name == "wishart_pd":
        spec = fam.FamilySpec(fam.Family.WISHART, config.dim)
        return spec, wishart_mixture_sampler(ds.get("scales"), ds.get("dofs"),
                                             ds.get("weights")), "spd", None
    if name == "vmf_sphere":
        spec = fam.FamilySpec(fam.Family.VON_MISES_FISHER, config.dim)
        csv_path = ds.get("csv")
        if csv_path:
            latlon = np.loadtxt(csv_path, delimiter=",", skiprows=1)
            ref = latlon_to_unit_vectors(latlon)

            def sampler(rng, n):
                idx = rng.integers(0, ref.shape[0], size=n)
                return ref[idx]

            return spec, sampler, "sphere", None
        return spec, vmf_mixture_sampler(ds.get("mus"), ds.get("kappas"),
                                         ds.get("weights")), "sphere", None
    if name == "gaussian_sanity":
        spec = fam.FamilySpec(fam.Family.GAUSSIAN, config.dim)
        return spec, gaussian_mixture_sampler(dim=config.dim), "none", None
    if name == "beta_toyimage":
        spec = fam.FamilySpec(fam.Family.BETA, config.dim)
        side = int(np.sqrt(config.dim))
        return spec, beta_toyimage_sampler(side), "none", None
    if name == "categorical_toytext":
        spec = fam.FamilySpec(fam.Family.CATEGORICAL, config.dim)
        length = int(ds.get("length", 16))
        sampler = markov_text_sampler(config.dim, length,
                                      float(ds.get("persistence", 0.7)))
        freq = np.full(config.dim, 1.0 / config.dim)
        return spec, sampler, "none", freq
    raise ConfigError(f"unknown experiment {config.experiment!r} "
                      f"(one of {', '.join(EXPERIMENTS)})")


def build_experiment_schedule(spec, config, data_sampler, frequencies=None,
                              estimator_config=None) -> sched.NoiseSchedule:
    """Schedule per config: the analytic transform for Gaussian, otherwise
    MI matching against the cosine reference scaled by intrinsic dimension."""
    if config.schedule_source == "analytic_transform":
        if spec.family is not fam.Family.GAUSSIAN:
            raise ConfigError("analytic_transform only applies to the gaussian family")
        return sched.gaussian_schedule_from_cosine(config.T, spec.dim)
    if config.schedule_source != "mi_matched":
        loaded = sched.NoiseSchedule.from_json(
            open(config.schedule_source).read())
        if loaded.T != config.T:
            raise ConfigError("loaded schedule T does not match config")
        return loaded

    dims = fam.intrinsic_dim(spec)
    target = sched.cosine_target_mi(config.T, data_variance=1.0, dims=dims)
    cfg = estimator_config or sched.EstimatorConfig(
        kraskov_samples=config.mi_kraskov_samples, dsivi_m=config.mi_budget,
        rough_m=max(500, config.mi_budget // 4))
    lo, hi = float(target.min()), float(target.max())
    grid = np.exp(np.linspace(np.log(max(lo, 1e-6) / 50.0),
                              np.log(_nu_upper(spec, hi)), 64))
    table = sched.build_mi_table(
        spec, grid, data_sampler, master_seed=config.seed + 1001,
        config=cfg, frequencies=frequencies)
    return sched.match_schedule(table, target, spec)


def _nu_upper(spec, target_hi):
    """Generous upper grid end: concentration at which MI safely exceeds the
    largest target (exponential-family MI grows like log nu up there)."""
    return float(np.exp(2.0 * target_hi + 6.0))


@dataclass
class ExperimentResult:
    metrics: dict
    samples: np.ndarray
    schedule: sched.NoiseSchedule


def run_synthetic(config: engine.ExperimentConfig, write_outputs: bool = True) -> ExperimentResult:
    """Generate data, fit the schedule and normalizer, train, sample, score."""
    config.validate()
    spec, data_sampler, geometry, freq = _experiment_setup(config)
    rng = spawn_rng(config.seed, 0)

    schedule = build_experiment_schedule(spec, config, data_sampler, freq)
    train_data = data_sampler(rng, config.n_train)

    norm_mode = engine.default_norm_mode(spec)
    normalizer = None
    if norm_mode != "softmax":
        normalizer = tailmod.fit_tail_normalizer(spec, schedule, train_data,
                                                 n_mc=config.normalizer_mc, rng=rng)

    net_cfg = nnet.NetConfig(
        in_dim=_net_in_dim(spec, train_data),
        out_dim=_net_out_dim(spec, train_data),
        hidden=tuple(config.hidden), time_embed_dim=config.time_embed_dim)
    net = nnet.PredictorNet(net_cfg, spawn_rng(config.seed, 1))
    if spec.family in (fam.Family.VON_MISES_FISHER, fam.Family.WISHART):
        # The exactly-zero output of a zero-initialized final layer is
        # degenerate for these heads: the normalize head rejects it, and the
        # Cholesky head L L^T has zero gradient at L = 0 (a stationary point
        # training can never leave). A small bias breaks the symmetry.
        net.params["b_out"] = 1e-2 * spawn_rng(config.seed, 2).standard_normal(
            net.params["b_out"].shape)
    opt = nnet.OptimState(lr=config.lr, lr_decay=config.lr_decay,
                          clip_norm=config.clip_norm,
                          ema_decay=config.ema_decay).init(net.params)
    loss_spec = engine.LossSpec(mode=config.loss_mode)

    log_rows = []
    for it in range(config.iterations):
        idx = rng.integers(0, train_data.shape[0], size=config.batch_size)
        info = engine.train_step(net, opt, spec, schedule, normalizer,
                                 train_data[idx], loss_spec, rng,
                                 norm_mode=norm_mode)
        if it % 250 == 0 or it == config.iterations - 1:
            log_rows.append((it, info["loss"], info.get("lr", opt.current_lr),
                             info.get("grad_norm", float("nan"))))

    predictor = engine.net_predictor(net, spec, schedule, normalizer,
                                     params=opt.ema, norm_mode=norm_mode)
    seq_len = train_data.shape[1] if (spec.family is fam.Family.CATEGORICAL
                                      and train_data.ndim > 2) else None
    model_samples = engine.sample(predictor, spec, schedule, normalizer, rng,
                                  n=config.n_eval, frequencies=freq,
                                  seq_len=seq_len)
    eval_data = data_sampler(rng, config.n_eval)

    metrics = _score(spec, config, geometry, eval_data, model_samples,
                     predictor, schedule, normalizer, freq, rng)
    metrics["config_hash"] = config.content_hash()
    metrics["schedule_hash"] = schedule.content_hash()
    metrics["git_describe"] = git_describe()
    metrics["final_loss"] = log_rows[-1][1] if log_rows else float("nan")

    if write_outputs:
        _write_outputs(config, metrics, model_samples, schedule, log_rows,
                       net, opt, normalizer)
    return ExperimentResult(metrics=metrics, samples=model_samples, schedule=schedule)


def _net_in_dim(spec, data):
    if spec.family is fam.Family.CATEGORICAL and data.ndim > 2:
        return int(np.prod(data.shape[1:]))
    return fam.flat_tail_dim(spec)


def _net_out_dim(spec, data):
    if spec.family is fam.Family.CATEGORICAL and data.ndim > 2:
        return int(np.prod(data.shape[1:]))
    return fam.raw_output_dim(spec)


def _score(spec, config, geometry, eval_data, model_samples, predictor,
           schedule, normalizer, freq, rng) -> dict:
    metrics = {"experiment": config.experiment, "n_eval": int(eval_data.shape[0])}
    f = spec.family
    if f is fam.Family.VON_MISES_FISHER:
        norms = np.linalg.norm(model_samples, axis=-1)
        metrics["max_norm_error"] = float(np.max(np.abs(norms - 1.0)))
        metrics["mode_mass"] = _mode_mass(model_samples, config)
    if f is fam.Family.WISHART:
        eig = np.linalg.eigvalsh(model_samples)
        metrics["pd_fraction"] = float(np.mean(eig[..., 0] > 0))
        metrics["min_eigenvalue"] = float(eig[..., 0].min())
    if f is fam.Family.DIRICHLET:
        metrics["max_simplex_error"] = float(
            np.max(np.abs(model_samples.sum(axis=-1) - 1.0)))
    if f is fam.Family.CATEGORICAL:
        ev = engine.elbo(predictor, spec, schedule, normalizer,
                         eval_data[:128], n_mc=2, rng=rng,
                         recon="categorical_exact", frequencies=freq)
        metrics["bits_per_char"] = ev["bits_per_dim"]
        metrics["elbo_nats"] = ev["elbo_nats"]
    if f in (fam.Family.DIRICHLET, fam.Family.WISHART, fam.Family.GAUSSIAN,
             fam.Family.VON_MISES_FISHER):
        metrics["kl_to_data"] = kl_to_data(eval_data, model_samples, k=5,
                                           geometry=geometry)
    return metrics


def _mode_mass(samples, config) -> list:
    mus = config.dataset.get("mus")
    if mus is None:
        mus = np.asarray([[1.0, 0.0, 0.0], [-0.5, 0.8, 0.0], [0.0, -0.6, 0.8]])
        mus = mus / np.linalg.norm(mus, axis=1, keepdims=True)
    else:
        mus = np.asarray(mus, dtype=float)
    assign = np.argmax(samples @ mus.T, axis=1)
    return [float(np.mean(assign == i)) for i in range(len(mus))]


def histogram2d_csv(xy: np.ndarray, bins: int = 48) -> str:
    """Plot-ready 2-D histogram: bin edges then one count row per x-bin."""
    counts, xe, ye = np.histogram2d(xy[:, 0], xy[:, 1], bins=bins)
    lines = ["x_edges," + ",".join(repr(float(v)) for v in xe),
             "y_edges," + ",".join(repr(float(v)) for v in ye)]
    for i in range(bins):
        lines.append(f"row{i}," + ",".join(str(int(c)) for c in counts[i]))
    return "\n".join(lines) + "\n"


def ellipse_rows_csv(mats: np.ndarray) -> str:
    """2x2 SPD matrices as drawable ellipses: semi-axes and rotation angle."""
    w, q = np.linalg.eigh(mats)
    angle = np.arctan2(q[:, 1, 1], q[:, 0, 1])
    lines = ["semi_axis_minor,semi_axis_major,angle_rad"]
    for i in range(mats.shape[0]):
        lines.append(f"{np.sqrt(w[i, 0])!r},{np.sqrt(w[i, 1])!r},{float(angle[i])!r}")
    return "\n".join(lines) + "\n"


def _plot_data(spec, samples) -> tuple[str, str] | None:
    """(filename, csv text) of the family's figure data, if it has one."""
    f = spec.family
    if f is fam.Family.WISHART and spec.dim == 2:
        return "ellipses.csv", ellipse_rows_csv(samples)
    if f is fam.Family.DIRICHLET and spec.dim == 3:
        # Barycentric projection of the simplex onto the plane.
        xy = np.stack([samples[:, 1] + 0.5 * samples[:, 2],
                       np.sqrt(3) / 2 * samples[:, 2]], axis=1)
        return "histogram2d.csv", histogram2d_csv(xy)
    if f is fam.Family.VON_MISES_FISHER and spec.dim == 3:
        lon = np.arctan2(samples[:, 1], samples[:, 0])
        lat = np.arcsin(np.clip(samples[:, 2], -1, 1))
        return "histogram2d.csv", histogram2d_csv(np.stack([lon, lat], axis=1))
    return None


def _write_outputs(config, metrics, samples, schedule, log_rows, net, opt,
                   normalizer):
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    stamp = {"config_hash": config.content_hash(), "git_describe": git_describe()}
    atomic_write_text(os.path.join(out, "metrics.json"),
                      json.dumps({**metrics, **stamp}, indent=1, default=float))
    atomic_write_text(os.path.join(out, "schedule.json"), schedule.to_json())
    lines = ["step,loss,lr,grad_norm"]
    lines += [f"{s},{l},{lr},{gn}" for s, l, lr, gn in log_rows]
    atomic_write_text(os.path.join(out, "train_log.csv"), "\n".join(lines) + "\n")
    flat = samples.reshape(samples.shape[0], -1)
    header = ",".join(f"x{i}" for i in range(flat.shape[1]))
    body = "\n".join(",".join(repr(float(v)) for v in row) for row in flat)
    atomic_write_text(os.path.join(out, "samples.csv"), header + "\n" + body + "\n")
    spec = fam.FamilySpec(fam.Family(config.family), config.dim)
    plot = _plot_data(spec, samples)
    if plot is not None:
        atomic_write_text(os.path.join(out, plot[0]), plot[1])
    if normalizer is not None:
        atomic_write_text(os.path.join(out, "normalizer.json"), normalizer.to_json())
    engine.save_checkpoint(os.path.join(out, "checkpoint.npz"), net, opt,
                           schedule.content_hash(),
                           "" if normalizer is None else normalizer.content_hash(),
                           config.to_dict())
