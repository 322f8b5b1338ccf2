"""Noise schedules: the cosine reference, the Gaussian DDPM <-> star-shaped
transform, mutual-information estimation, and lookup-table schedule matching.

The matching pipeline follows the heuristic of equating information decay:
build a table of I(x0; x_nu) over a grid of the family's concentration
parameter, then invert it at the per-step targets produced by the equivalent
Gaussian schedule. Estimators are switched by MI regime: a kNN (Kraskov)
estimator when information is high, sandwich bounds on the semi-implicit
marginal entropy in the middle regimes, and an exponential-curve fit below
the resolution of the sandwich.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import spatial, special as sp

from . import families as fam
from .errors import EstimatorError, ScheduleError
from .utils import isotonic_increasing, sha256_of, spawn_rng, work_pool_size

# MI regime thresholds (nats) and the mixture sizes used inside each regime.
REGIME_KRASKOV = 2.0
REGIME_MID = 0.5
REGIME_LOW = 0.002
DSIVI_K_HIGH = 1000
DSIVI_K_MID = 100
DSIVI_K_TAIL = 50
PAPER_SAMPLE_BUDGET = 10**8          # M = budget / K in the reference setup
KRASKOV_SAMPLES = 10**5
KRASKOV_K = 10


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Ordered per-timestep family parameters, indexed t = 1..T."""

    family: fam.Family
    dim: int
    points: list
    provenance: str = "user_supplied"
    mi_trace: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.points)

    def point(self, t: int):
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")
        return self.points[t - 1]

    def param_array(self, key: str) -> np.ndarray:
        return np.array([float(p.params[key]) for p in self.points])

    def validate(self) -> None:
        spec = fam.FamilySpec(self.family, self.dim)
        ops_validate = fam.make_point  # re-derives and validates every point
        for t, p in enumerate(self.points, start=1):
            if p.t != t:
                raise ScheduleError("schedule points must be indexed 1..T in order")
            ops_validate(spec, t, **p.params)
        self._check_monotone()
        if self.provenance == "mi_matched" and self.mi_trace is not None:
            trace = np.asarray(self.mi_trace)
            if np.any(np.diff(trace) > 0.02):
                raise ScheduleError("mi_matched trace must be non-increasing in t "
                                    "(0.02 nat tolerance)")

    def _check_monotone(self) -> None:
        f = self.family
        decreasing = {"gaussian": "alpha_bar", "beta": "nu", "dirichlet": "nu",
                      "von_mises": "kappa", "von_mises_fisher": "kappa",
                      "gamma": "alpha", "wishart": "n"}
        key = decreasing.get(f.value)
        if key is not None:
            vals = self.param_array(key)
            if np.any(np.diff(vals) > 1e-12):
                raise ScheduleError(f"{key} must be non-increasing in t")
            if np.any(vals[:-1] <= 0):
                raise ScheduleError(f"{key} must be strictly positive for t < T")
        if f in (fam.Family.GAMMA, fam.Family.WISHART):
            xi = self.param_array("xi")
            if np.any(np.diff(xi) < -1e-12):
                raise ScheduleError("xi must be non-decreasing in t")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(v):
            return v.tolist() if isinstance(v, np.ndarray) else v

        return {
            "version": 1,
            "family": self.family.value,
            "dim": self.dim,
            "T": self.T,
            "provenance": self.provenance,
            "points": [
                {"t": p.t, "params": {k: enc(v) for k, v in p.params.items()},
                 "a_t": p.a_t}
                for p in self.points
            ],
            "mi_trace": None if self.mi_trace is None else list(map(float, self.mi_trace)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        family = fam.Family(d["family"])
        spec = fam.FamilySpec(family, int(d["dim"]))
        points = []
        for rec in d["points"]:
            params = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else v)
                      for k, v in rec["params"].items()}
            points.append(fam.make_point(spec, rec["t"], **params))
        trace = d.get("mi_trace")
        sched = cls(family=family, dim=int(d["dim"]), points=points,
                    provenance=d.get("provenance", "user_supplied"),
                    mi_trace=None if trace is None else np.asarray(trace, dtype=float))
        if sched.T != int(d["T"]):
            raise ScheduleError("T does not match the number of points")
        return sched

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        return cls.from_dict(json.loads(text))

    def content_hash(self) -> str:
        return sha256_of(self.to_dict())


def cosine_ddpm_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Cosine alpha-bar sequence, shape (T+1,) with the t=0 convention of 1.

    f(t) = cos^2((t/T + s)/(1 + s) * pi/2), alpha_bar_t = f(t)/f(0), with the
    per-step betas clipped at ``max_beta`` before rebuilding the cumulative
    product.
    """
    if T < 1:
        raise ScheduleError("T must be at least 1")
    ts = np.arange(T + 1) / T
    f = np.cos((ts + s) / (1 + s) * np.pi / 2) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, max_beta)
    abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return abar


def odds(alpha_bar):
    alpha_bar = np.asarray(alpha_bar, dtype=float)
    return alpha_bar / (1.0 - alpha_bar)


def ddpm_to_ss_gaussian(alpha_bar_ddpm: np.ndarray) -> np.ndarray:
    """Map a DDPM alpha-bar sequence (t=1..T) to its star-shaped counterpart.

    odds(ss_t) = odds(ddpm_t) - odds(ddpm_{t+1}), with odds(ddpm_{T+1}) = 0.
    """
    a = np.asarray(alpha_bar_ddpm, dtype=float)
    if a.ndim != 1 or a.size < 1:
        raise ScheduleError("alpha_bar sequence must be one-dimensional")
    if np.any(a <= 0) or np.any(a >= 1):
        raise ScheduleError("alpha_bar values must lie strictly in (0, 1)")
    if np.any(np.diff(a) >= 0):
        raise ScheduleError("alpha_bar must be strictly decreasing")
    w = odds(a)
    diff = w - np.append(w[1:], 0.0)
    if np.any(diff <= 0):
        raise ScheduleError("negative odds difference; input schedule invalid")
    return diff / (1.0 + diff)


def ss_to_ddpm_gaussian(alpha_bar_ss: np.ndarray) -> np.ndarray:
    """Recover the dual DDPM schedule: odds(ddpm_t) = sum_{s>=t} odds(ss_s)."""
    w = odds(np.asarray(alpha_bar_ss, dtype=float))
    acc = np.cumsum(w[::-1])[::-1]
    return acc / (1.0 + acc)


def gaussian_tail_prefactor(alpha_bar_ss: np.ndarray) -> np.ndarray:
    """c_t multiplying the raw Gaussian tail sum so G_t matches the dual DDPM."""
    ab_ddpm = ss_to_ddpm_gaussian(alpha_bar_ss)
    return (1.0 - ab_ddpm) / np.sqrt(ab_ddpm)


def gaussian_schedule_from_cosine(T: int, dim: int = 1) -> NoiseSchedule:
    """Star-shaped Gaussian schedule equivalent to the cosine DDPM."""
    abar_ss = ddpm_to_ss_gaussian(cosine_ddpm_schedule(T)[1:])
    spec = fam.FamilySpec(fam.Family.GAUSSIAN, dim)
    points = [fam.make_point(spec, t, alpha_bar=float(abar_ss[t - 1]))
              for t in range(1, T + 1)]
    return NoiseSchedule(fam.Family.GAUSSIAN, dim, points,
                         provenance="analytic_transform")


def mi_gaussian_reference(alpha_bar, data_variance: float = 1.0) -> np.ndarray:
    """I(x0; x_t) per dimension for Gaussian marginals and Gaussian data."""
    if data_variance <= 0:
        raise ScheduleError("data variance must be positive")
    a = np.asarray(alpha_bar, dtype=float)
    if np.any(a >= 1.0):
        raise EstimatorError("alpha_bar = 1 has infinite mutual information")
    return 0.5 * np.log1p(data_variance * odds(a))


# ---------------------------------------------------------------------------
# Mutual-information estimators
# ---------------------------------------------------------------------------


def mi_kraskov(x0_samples: np.ndarray, xt_samples: np.ndarray, k: int = KRASKOV_K) -> float:
    """KSG estimator (variant 1) with max-norm balls.

    Deterministic given the inputs: the tie-breaking jitter is seeded from a
    hash of the data.
    """
    x = np.atleast_2d(np.asarray(x0_samples, dtype=float))
    y = np.atleast_2d(np.asarray(xt_samples, dtype=float))
    if x.ndim == 2 and x.shape[0] == 1 and x.shape[1] > 1 and np.asarray(x0_samples).ndim == 1:
        x = x.T
    if y.ndim == 2 and y.shape[0] == 1 and y.shape[1] > 1 and np.asarray(xt_samples).ndim == 1:
        y = y.T
    n = x.shape[0]
    if y.shape[0] != n:
        raise EstimatorError("sample counts must match")
    if n < 100:
        raise EstimatorError("need at least 100 samples")
    if k >= n:
        raise EstimatorError("k must be smaller than the sample count")

    z = np.concatenate([x, y], axis=1)
    tree = spatial.cKDTree(z)
    dist, _ = tree.query(z, k=k + 1, p=np.inf)
    eps = dist[:, k]
    if np.any(eps == 0.0):
        warnings.warn("duplicate points; applying 1e-12 jitter", RuntimeWarning)
        seed = int.from_bytes(
            np.ascontiguousarray(z).tobytes()[:8] or b"\0", "little") & 0xFFFFFFFF
        jit = spawn_rng(seed, n)
        scale = 1e-12 * max(1.0, float(np.max(np.abs(z))))
        x = x + jit.uniform(-scale, scale, size=x.shape)
        y = y + jit.uniform(-scale, scale, size=y.shape)
        z = np.concatenate([x, y], axis=1)
        tree = spatial.cKDTree(z)
        dist, _ = tree.query(z, k=k + 1, p=np.inf)
        eps = dist[:, k]

    r = np.nextafter(eps, 0.0)  # strictly-inside-the-ball counting
    tx = spatial.cKDTree(x)
    ty = spatial.cKDTree(y)
    nx = np.asarray(tx.query_ball_point(x, r, p=np.inf, return_length=True)) - 1
    ny = np.asarray(ty.query_ball_point(y, r, p=np.inf, return_length=True)) - 1
    return float(sp.digamma(k) + sp.digamma(n)
                 - np.mean(sp.digamma(nx + 1) + sp.digamma(ny + 1)))


def mi_dsivi_bounds(spec: fam.FamilySpec, params, data_sampler, K: int,
                    M: int | None = None, rng=None, chunk: int = 512,
                    return_se: bool = False):
    """Sandwich bounds on I(x0; x_t) = H[x_t] - H[x_t | x0].

    The marginal q(x_t) is semi-implicit; its entropy is bracketed by
    Monte-Carlo mixtures of K (upper MI bound) and K+1 (lower, including the
    generating x0) conditional densities. The conditional entropy is closed
    form per family, which lets the log-conditional act as an exactly
    mean-zero control variate; the per-draw bound terms then collapse to
    pointwise log-ratios log q(x_t|x0^0) - log qbar_K(x_t), whose variance
    tracks the pointwise information instead of the raw entropy.
    """
    if M is None:
        M = max(1, PAPER_SAMPLE_BUDGET // K)
    rng = np.random.default_rng() if rng is None else rng
    params = params.params if isinstance(params, fam.SchedulePoint) else params

    lo_terms = np.empty(M)
    hi_terms = np.empty(M)
    done = 0
    while done < M:
        m = min(chunk, M - done)
        panel = data_sampler(rng, m * (K + 1))
        panel = np.asarray(panel, dtype=float).reshape((m, K + 1) + panel.shape[1:])
        x0_gen = panel[:, 0]
        xt = fam.sample_forward(spec, x0_gen, params, rng)
        logq = fam.log_pdf(spec, xt[:, None], panel, params)  # (m, K+1)
        log_cond = logq[:, 0]
        # E[log_cond + H_cond(x0^0)] = 0 per draw (closed-form centering), so
        # subtracting the mixture log-density yields the MI bounds directly.
        lo_terms[done:done + m] = log_cond - (sp.logsumexp(logq, axis=1) - np.log(K + 1))
        hi_terms[done:done + m] = log_cond - (sp.logsumexp(logq[:, 1:], axis=1) - np.log(K))
        done += m

    lower = lo_terms.mean()
    upper = hi_terms.mean()
    se = np.sqrt((lo_terms.var(ddof=1) + hi_terms.var(ddof=1)) / M)
    if lower > upper + 3 * se:
        raise EstimatorError(
            f"sandwich inverted: lower {lower:.4f} > upper {upper:.4f} + 3se")
    lower = max(lower, 0.0)
    upper = max(upper, lower)
    if return_se:
        return lower, upper, se
    return lower, upper


def mi_categorical(qbars, token_frequencies, M: int = 100_000, rng=None) -> float:
    """Exact-form Monte-Carlo MI between x0 and the categorical tail statistic.

    ``qbars`` is one row-stochastic matrix (single-step statistic) or the
    list of matrices for steps t..T. Uses q(G|x0) proportional to exp{x0 G},
    which cancels the tail-multiplicity factor.
    """
    rng = np.random.default_rng() if rng is None else rng
    mats = [np.asarray(q, dtype=float) for q in
            (qbars if isinstance(qbars, (list, tuple)) else [qbars])]
    d = mats[0].shape[0]
    freq = np.asarray(token_frequencies, dtype=float)
    if freq.shape != (d,) or abs(freq.sum() - 1.0) > 1e-9 or np.any(freq < 0):
        raise EstimatorError("token frequencies must be a distribution over D")
    with np.errstate(divide="ignore"):
        log_freq = np.log(freq)
        logqs = [np.log(q) for q in mats]

    x0 = rng.choice(d, size=M, p=freq)
    g = np.zeros((M, d))
    for q, logq in zip(mats, logqs):
        rows = q[x0]
        u = rng.random((M, 1))
        xs = np.minimum((u > rows.cumsum(axis=1)).sum(axis=1), d - 1)
        g += logq[:, xs].T
    score = g[np.arange(M), x0] - sp.logsumexp(g + log_freq, axis=1)
    return float(score.mean())


# ---------------------------------------------------------------------------
# Lookup table and matching
# ---------------------------------------------------------------------------


@dataclass
class MiTable:
    """Monotone mutual-information lookup over a concentration grid."""

    nu: np.ndarray
    mi: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    estimator: list
    k_mix: int = DSIVI_K_HIGH
    m_samples: int = 0

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        self.mi = np.asarray(self.mi, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.mi + 1e-12) or np.any(self.mi > self.upper + 1e-12):
            raise EstimatorError("table rows must satisfy lower <= mi <= upper")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["nu", "mi", "lower", "upper", "estimator"])
        for i in range(self.nu.size):
            writer.writerow([repr(float(self.nu[i])), repr(float(self.mi[i])),
                             repr(float(self.lower[i])), repr(float(self.upper[i])),
                             self.estimator[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, k_mix: int = DSIVI_K_HIGH, m_samples: int = 0) -> "MiTable":
        rows = list(csv.reader(io.StringIO(text)))
        body = rows[1:]
        return cls(
            nu=np.array([float(r[0]) for r in body]),
            mi=np.array([float(r[1]) for r in body]),
            lower=np.array([float(r[2]) for r in body]),
            upper=np.array([float(r[3]) for r in body]),
            estimator=[r[4] for r in body],
            k_mix=k_mix, m_samples=m_samples,
        )


def params_from_nu(spec: fam.FamilySpec, nu: float, *, alpha_T: float = 2.0,
                   n_T: float | None = None) -> dict:
    """Map the scalar matching parameter onto the family's schedule params.

    Larger nu always means less noise (higher mutual information). Gamma and
    Wishart couple their two parameters through nu so the boundary conditions
    hold at both ends; Categorical mixes the identity with the uniform row.
    """
    f = spec.family
    if f in (fam.Family.BETA, fam.Family.DIRICHLET):
        return {"nu": float(nu)}
    if f in (fam.Family.VON_MISES, fam.Family.VON_MISES_FISHER):
        return {"kappa": float(nu)}
    if f is fam.Family.GAUSSIAN:
        return {"alpha_bar": float(nu / (1.0 + nu))}
    if f is fam.Family.GAMMA:
        alpha = alpha_T + nu
        return {"alpha": float(alpha), "xi": float(alpha_T / alpha)}
    if f is fam.Family.WISHART:
        base = float(spec.dim + 1) if n_T is None else float(n_T)
        n = base + nu
        return {"n": float(n), "xi": float(base / n)}
    if f is fam.Family.CATEGORICAL:
        omega = nu / (1.0 + nu)
        d = spec.dim
        qbar = omega * np.eye(d) + (1.0 - omega) * np.full((d, d), 1.0 / d)
        return {"qbar": qbar}
    raise ScheduleError(f"no nu parameterization for {f.value}")


@dataclass
class EstimatorConfig:
    """Per-regime estimator settings; defaults follow the reference recipe.

    ``dsivi_m`` is the Monte-Carlo sample count at K=1000; other mixture
    sizes scale it by 1000/K, preserving the constant M*K budget of the
    reference recipe (lower-information rows get proportionally more
    samples, which they need).
    """

    kraskov_samples: int = KRASKOV_SAMPLES
    kraskov_k: int = KRASKOV_K
    dsivi_m: int | None = None       # None -> PAPER_SAMPLE_BUDGET / 1000
    rough_k: int = 32
    rough_m: int = 2048
    thresholds: tuple = (REGIME_KRASKOV, REGIME_MID, REGIME_LOW)

    def m_for(self, k_mix: int) -> int:
        base = self.dsivi_m if self.dsivi_m is not None \
            else PAPER_SAMPLE_BUDGET // DSIVI_K_HIGH
        return max(1, int(base * DSIVI_K_HIGH / k_mix))


def _estimate_row(spec, nu_val, data_sampler, cfg: EstimatorConfig, rng,
                  frequencies=None):
    """(mi, lower, upper, estimator_id) for one grid row."""
    params = params_from_nu(spec, nu_val)
    if spec.family is fam.Family.CATEGORICAL:
        freq = np.full(spec.dim, 1.0 / spec.dim) if frequencies is None else frequencies
        m = cfg.dsivi_m or 10**5
        val = mi_categorical(params["qbar"], freq, M=m, rng=rng)
        return max(val, 0.0), max(val, 0.0), max(val, 0.0), "categorical_mc"

    rough_lo, rough_hi = mi_dsivi_bounds(spec, params, data_sampler,
                                         K=cfg.rough_k, M=cfg.rough_m, rng=rng)
    rough = 0.5 * (rough_lo + rough_hi)
    hi_thr, mid_thr, low_thr = cfg.thresholds

    if rough > hi_thr:
        n = cfg.kraskov_samples
        x0 = np.asarray(data_sampler(rng, n), dtype=float)
        xt = fam.sample_forward(spec, x0, params, rng)
        val = mi_kraskov(_mi_coords(spec, x0), _mi_coords(spec, xt), k=cfg.kraskov_k)
        return val, val, val, "kraskov"

    k_mix = DSIVI_K_HIGH if rough >= mid_thr else \
        (DSIVI_K_MID if rough >= low_thr else DSIVI_K_TAIL)
    lo, hi = mi_dsivi_bounds(spec, params, data_sampler, K=k_mix,
                             M=cfg.m_for(k_mix), rng=rng)
    est = "dsivi_tail" if rough < low_thr else f"dsivi_k{k_mix}"
    return 0.5 * (lo + hi), lo, hi, est


def _mi_coords(spec: fam.FamilySpec, x: np.ndarray) -> np.ndarray:
    """Coordinates handed to the kNN estimator (vech for matrices)."""
    if spec.family is fam.Family.WISHART:
        rows, cols = np.triu_indices(spec.dim)
        return x[..., rows, cols]
    return x.reshape(x.shape[0], -1)


def build_mi_table(spec: fam.FamilySpec, nu_grid, data_sampler, *,
                   master_seed: int = 0, config: EstimatorConfig | None = None,
                   frequencies=None, target_range=None) -> MiTable:
    """Estimate I(x0; x_nu) on a grid, isotonic-smooth, and fit the low tail.

    Rows run in parallel under a work pool; each row owns an RNG stream
    seeded from (master_seed, row index), so results do not depend on the
    worker count.
    """
    cfg = config or EstimatorConfig()
    nu_grid = np.asarray(nu_grid, dtype=float)
    if np.any(np.diff(nu_grid) <= 0):
        raise ScheduleError("nu grid must be strictly increasing")

    def run(i):
        rng = spawn_rng(master_seed, i)
        return _estimate_row(spec, nu_grid[i], data_sampler, cfg, rng, frequencies)

    n_workers = min(work_pool_size(), nu_grid.size)
    if n_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(run, range(nu_grid.size)))
    else:
        rows = [run(i) for i in range(nu_grid.size)]

    mi = np.array([r[0] for r in rows])
    lo = np.array([r[1] for r in rows])
    hi = np.array([r[2] for r in rows])
    est = [r[3] for r in rows]

    # Exponential-curve fit through the noisy low-MI rows: log mi is close to
    # linear in log nu there, and the raw sandwich estimates are dominated by
    # noise below the low threshold.
    low_thr = cfg.thresholds[2]
    fit_band = (mi > low_thr) & (mi < 50 * low_thr)
    replace_rows = mi < low_thr
    if np.count_nonzero(fit_band) >= 2 and np.any(replace_rows):
        a, b = np.polyfit(np.log(nu_grid[fit_band]),
                          np.log(np.maximum(mi[fit_band], 1e-300)), 1)
        fitted = np.exp(a * np.log(nu_grid[replace_rows]) + b)
        mi[replace_rows] = fitted
        lo[replace_rows] = np.minimum(lo[replace_rows], fitted)
        hi[replace_rows] = np.maximum(hi[replace_rows], fitted)
        for i in np.nonzero(replace_rows)[0]:
            est[i] = "exp_fit"

    mi = isotonic_increasing(mi)
    lo = np.minimum(lo, mi)
    hi = np.maximum(hi, mi)

    if target_range is not None:
        t_lo, t_hi = float(np.min(target_range)), float(np.max(target_range))
        if t_lo < mi[0] or t_hi > mi[-1]:
            raise EstimatorError(
                f"grid covers MI [{mi[0]:.4g}, {mi[-1]:.4g}] but targets need "
                f"[{t_lo:.4g}, {t_hi:.4g}]; widen the nu grid")

    m_used = cfg.dsivi_m if cfg.dsivi_m is not None else 0
    return MiTable(nu=nu_grid, mi=mi, lower=lo, upper=hi, estimator=est,
                   k_mix=DSIVI_K_HIGH, m_samples=m_used)


def invert_mi_table(table: MiTable, target: float) -> float:
    """nu whose table MI equals target; linear interpolation in (log nu, MI)."""
    mi, nus = table.mi, table.nu
    if target <= mi[0]:
        return float(nus[0])
    if target >= mi[-1]:
        return float(nus[-1])
    j = int(np.searchsorted(mi, target, side="left"))
    lo_i, hi_i = j - 1, j
    span = mi[hi_i] - mi[lo_i]
    w = 0.0 if span <= 0 else (target - mi[lo_i]) / span
    log_nu = (1 - w) * np.log(nus[lo_i]) + w * np.log(nus[hi_i])
    return float(np.exp(log_nu))


def table_mi_at(table: MiTable, nu_val: float) -> float:
    """Forward interpolation of the smoothed table at nu."""
    return float(np.interp(np.log(nu_val), np.log(table.nu), table.mi))


def match_schedule(table: MiTable, target_mi, spec: fam.FamilySpec,
                   **param_kwargs) -> NoiseSchedule:
    """Invert the lookup table at each per-step target; monotone result."""
    target = np.asarray(target_mi, dtype=float)
    if np.any(np.diff(target) > 1e-9):
        raise ScheduleError("target MI sequence must be non-increasing in t")
    if np.any(target < table.mi[0] - 1e-12) or np.any(target > table.mi[-1] + 1e-12):
        warnings.warn("target MI outside table range; clamping to the boundary",
                      RuntimeWarning)
    nus = np.array([invert_mi_table(table, v) for v in target])
    nus = np.maximum.accumulate(nus[::-1])[::-1]  # enforce monotone parameters
    points = [fam.make_point(spec, t, **params_from_nu(spec, nus[t - 1], **param_kwargs))
              for t in range(1, target.size + 1)]
    trace = np.array([table_mi_at(table, v) for v in nus])
    return NoiseSchedule(spec.family, spec.dim, points, provenance="mi_matched",
                         mi_trace=trace)


def cosine_target_mi(T: int, data_variance: float = 1.0, dims: int = 1) -> np.ndarray:
    """Per-step MI targets from the star-shaped twin of the cosine schedule."""
    abar_ss = ddpm_to_ss_gaussian(cosine_ddpm_schedule(T)[1:])
    return dims * mi_gaussian_reference(abar_ss, data_variance)
