"""Noising-distribution families with linear natural-parameter structure.

Each family defines a conditional law q(x_t | x0) = h_t(x_t) exp{eta_t(x0)^T
T(x_t) - Omega_t(x0)} whose natural parameter is affine in a fixed feature of
x0, eta_t(x0) = A_t f(x0) + b_t. That structure is what makes the running
tail statistic G_t = sum_s A_s^T T(x_s) sufficient for the whole tail, and it
pins down everything this module exposes: per-step samplers, log-densities,
closed-form KL divergences between two conditionals that differ only in x0,
and the head that maps an unconstrained network output back onto the data
manifold.

Parameter conventions (the ``params`` dict of a SchedulePoint):

==================  =============================  =========================
family              params                         tail coefficient a_t
==================  =============================  =========================
gaussian            alpha_bar                      sqrt(ab)/(1-ab)
beta                nu                             nu
dirichlet           nu                             nu
categorical         qbar (D x D row-stochastic)    matrix: log qbar columns
von_mises           kappa                          kappa
von_mises_fisher    kappa                          kappa
gamma               alpha, xi                      alpha*(1-xi)
wishart             n, xi                          n*(1-xi)
==================  =============================  =========================

For Gamma the natural parameter tied to T(x)=x is -beta_t(x0); the tail
statistic uses the sign-flipped coefficient alpha_t*(1-xi_t), an invertible
relabeling that preserves sufficiency. Same for Wishart.

Shape conventions. A point of the scalar families (gaussian, beta, gamma,
von_mises) is an array of independent channels, shape (..., dim); dirichlet,
von_mises_fisher and categorical points are (..., dim); wishart points are
(..., dim, dim). Schedule parameters are floats in a SchedulePoint; batched
code may instead pass arrays already shaped to broadcast against the channel
layout ((B, 1) for scalar families, (B,) for vector families, (B,) for
wishart). Predicted points may be autodiff Vars; the KL formulas are written
against the dispatching math in `autodiff`, so one code path serves plain
evaluation and training.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import special as sp

from . import autodiff as ad
from .errors import (
    DomainBoundaryError,
    DomainError,
    KlFormulaError,
    NumericalOverflowError,
    SamplerFailure,
    ScheduleError,
)

EPS_INTERIOR = 1e-12          # clamp for logs/logits near the boundary
WISHART_JITTER = 1e-4         # scalar matrix added by the Cholesky head
GAMMA_HEAD_LO, GAMMA_HEAD_HI = 1e-6, 1e6
REJECTION_CAP = 1_000_000     # proposal rounds before a sampler gives up
KL_NEGATIVE_TOL = -1e-10
CATEGORICAL_LOG_FLOOR = -1e9  # stands in for log(0) in one-hot contractions


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BETA = "beta"
    DIRICHLET = "dirichlet"
    CATEGORICAL = "categorical"
    VON_MISES = "von_mises"
    VON_MISES_FISHER = "von_mises_fisher"
    GAMMA = "gamma"
    WISHART = "wishart"


@dataclass(frozen=True)
class FamilySpec:
    """A family plus its ambient dimension.

    ``dim`` means: number of scalar channels for gaussian/beta/gamma/von_mises,
    simplex size K for dirichlet, vocabulary D for categorical, sphere
    dimension K for von_mises_fisher, matrix side p for wishart.
    """

    family: Family
    dim: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ScheduleError("dim must be a positive integer")
        if self.family in (Family.DIRICHLET, Family.CATEGORICAL,
                           Family.VON_MISES_FISHER) and self.dim < 2:
            raise ScheduleError(f"{self.family.value} needs dim >= 2")


@dataclass(frozen=True)
class SchedulePoint:
    """One timestep of a noise schedule.

    ``a_t`` is the scalar coefficient multiplying T(x) in the tail statistic;
    None for the categorical family whose coefficient is the matrix log(qbar).
    """

    t: int
    params: Mapping[str, Any]
    a_t: float | None = None


def make_point(spec: FamilySpec, t: int, **params) -> SchedulePoint:
    """Build a SchedulePoint, deriving the tail coefficient from params."""
    ops = _ops(spec)
    ops.validate_params(spec, params)
    return SchedulePoint(t=int(t), params=dict(params), a_t=ops.coefficient(params))


def _ops(spec: FamilySpec) -> "_FamilyOps":
    return _REGISTRY[spec.family]


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _col(v):
    """Expand a (B,) parameter against a trailing event axis."""
    v = _arr(v)
    return v[..., None] if v.ndim else v


def _mat(v):
    v = _arr(v)
    return v[..., None, None] if v.ndim else v


def _bessel_ratio(order: float, kappa):
    """I_order(k) / I_{order-1}(k), safe at k=0 where the ratio vanishes."""
    kappa = _arr(kappa)
    num = sp.ive(order, kappa)
    den = sp.ive(order - 1, kappa)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return ratio if kappa.ndim else float(ratio)


def _log_vmf_const(k_dim: int, kappa):
    """log C_K(kappa) of the vMF density on the unit sphere in R^K."""
    kappa = _arr(kappa)
    nu = k_dim / 2.0 - 1.0
    uniform = nu * np.log(2.0) - (k_dim / 2.0) * np.log(2 * np.pi) + sp.gammaln(k_dim / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        general = nu * np.log(kappa) - (k_dim / 2.0) * np.log(2 * np.pi) \
            - (np.log(sp.ive(nu, kappa)) + kappa)
    out = np.where(kappa > 1e-12, general, uniform)
    return out if kappa.ndim else float(out)


def _onehot_index(x):
    """Category indices from one-hot rows; validates one-hotness."""
    x = _arr(x)
    ok = np.isclose(x.sum(axis=-1), 1.0, atol=1e-9).all() \
        and not np.any((x != 0) & ~np.isclose(x, 1.0))
    if not ok:
        raise DomainError("categorical points must be one-hot vectors")
    return np.argmax(x, axis=-1)


# ---------------------------------------------------------------------------
# Per-family operations
# ---------------------------------------------------------------------------


class _FamilyOps:
    """Interface implemented once per family. Stateless."""

    required = ()
    event_ndim = 1

    def validate_params(self, spec, params):
        for key in self.required:
            if key not in params:
                raise ScheduleError(f"{spec.family.value} schedule point needs '{key}'")

    def coefficient(self, params):
        raise NotImplementedError


class _Gaussian(_FamilyOps):
    required = ("alpha_bar",)

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        ab = float(params["alpha_bar"])
        if not (0.0 < ab < 1.0):
            raise ScheduleError("gaussian alpha_bar must lie in (0, 1)")

    def coefficient(self, params):
        ab = float(params["alpha_bar"])
        return np.sqrt(ab) / (1.0 - ab)

    def tail_shape(self, spec):
        return (spec.dim,)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim

    def check_domain(self, spec, x):
        if not np.all(np.isfinite(_arr(x))):
            raise DomainError("gaussian points must be finite")

    def natural(self, spec, x0, params):
        ab = _arr(params["alpha_bar"])
        return np.sqrt(ab) / (1.0 - ab) * _arr(x0)

    def stat(self, spec, x):
        return _arr(x)

    def sample(self, spec, x0, params, rng):
        ab = _arr(params["alpha_bar"])
        x0 = _arr(x0)
        shape = np.broadcast_shapes(x0.shape, ab.shape)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(shape)

    def log_pdf(self, spec, x, x0, params):
        ab = _arr(params["alpha_bar"])
        var = 1.0 - ab
        return -0.5 * np.log(2 * np.pi * var) - (_arr(x) - np.sqrt(ab) * _arr(x0)) ** 2 / (2 * var)

    def kl(self, spec, x0, xp, params):
        ab = _arr(params["alpha_bar"])
        diff = xp - _arr(x0)
        return diff * diff * (ab / (2.0 * (1.0 - ab)))

    def head(self, spec, raw):
        return raw

    def stationary(self, spec, params, rng, n, frequencies=None):
        return rng.standard_normal((n, spec.dim))

    def mean(self, spec, x0, params):
        return np.sqrt(_arr(params["alpha_bar"])) * _arr(x0)

    def tail_term(self, spec, x, params):
        ab = _arr(params["alpha_bar"])
        return np.sqrt(ab) / (1.0 - ab) * _arr(x)

    def conditional_entropy(self, spec, x0, params):
        ab = _arr(params["alpha_bar"])
        h = 0.5 * np.log(2 * np.pi * np.e * (1.0 - ab))
        return np.broadcast_to(h, np.shape(_arr(x0))).sum(axis=-1)

    def tail_to_domain(self, spec, g):
        return _arr(g)


class _Beta(_FamilyOps):
    required = ("nu",)

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        if float(params["nu"]) < 0:
            raise ScheduleError("beta nu must be non-negative")

    def coefficient(self, params):
        return float(params["nu"])

    def tail_shape(self, spec):
        return (spec.dim,)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim

    def check_domain(self, spec, x, interior=False):
        x = _arr(x)
        lo, hi = (EPS_INTERIOR, 1 - EPS_INTERIOR) if interior else (0.0, 1.0)
        if np.any(x < lo) or np.any(x > hi):
            cls = DomainBoundaryError if interior else DomainError
            raise cls("beta points must lie in (0, 1)")

    def _ab(self, x0, params):
        nu = _arr(params["nu"])
        x0 = _arr(x0)
        return 1.0 + nu * x0, 1.0 + nu * (1.0 - x0)

    def natural(self, spec, x0, params):
        return _arr(params["nu"]) * _arr(x0)

    def stat(self, spec, x):
        self.check_domain(spec, x, interior=True)
        x = _arr(x)
        return np.log(x) - np.log1p(-x)

    def sample(self, spec, x0, params, rng):
        a, b = self._ab(x0, params)
        return rng.beta(a, b)

    def log_pdf(self, spec, x, x0, params):
        a, b = self._ab(x0, params)
        x = np.clip(_arr(x), EPS_INTERIOR, 1 - EPS_INTERIOR)
        return (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - sp.betaln(a, b)

    def kl(self, spec, x0, xp, params):
        nu = _arr(params["nu"])
        a0, b0 = self._ab(x0, params)
        ap = 1.0 + nu * xp
        bp = 1.0 + nu * (1.0 - xp)
        log_bp = ad.lgamma(ap) + ad.lgamma(bp) - ad.lgamma(ap + bp)
        log_b0 = sp.betaln(a0, b0)
        return (log_bp - log_b0) + nu * (_arr(x0) - xp) * (sp.digamma(a0) - sp.digamma(b0))

    def head(self, spec, raw):
        return ad.sigmoid(raw)

    def stationary(self, spec, params, rng, n, frequencies=None):
        # Exactly uniform at nu_T = 0; matched schedules end near enough zero
        # that the uniform law is the stationary distribution in practice.
        return rng.uniform(0.0, 1.0, size=(n, spec.dim))

    def mean(self, spec, x0, params):
        a, b = self._ab(x0, params)
        return a / (a + b)

    def tail_term(self, spec, x, params):
        x = np.clip(_arr(x), EPS_INTERIOR, 1 - EPS_INTERIOR)
        return _arr(params["nu"]) * (np.log(x) - np.log1p(-x))

    def conditional_entropy(self, spec, x0, params):
        a, b = self._ab(x0, params)
        h = sp.betaln(a, b) - (a - 1) * sp.digamma(a) - (b - 1) * sp.digamma(b) \
            + (a + b - 2) * sp.digamma(a + b)
        return h.sum(axis=-1)

    def tail_to_domain(self, spec, g):
        return sp.expit(_arr(g))


class _Dirichlet(_FamilyOps):
    required = ("nu",)

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        if float(params["nu"]) < 0:
            raise ScheduleError("dirichlet nu must be non-negative")

    def coefficient(self, params):
        return float(params["nu"])

    def tail_shape(self, spec):
        return (spec.dim,)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim - 1

    def check_domain(self, spec, x, interior=False):
        x = _arr(x)
        if np.any(x < 0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > 1e-9):
            raise DomainError("dirichlet points must lie on the probability simplex")
        if interior and np.any(x < EPS_INTERIOR):
            raise DomainBoundaryError("dirichlet point on the simplex boundary")

    def _alpha(self, x0, params):
        return 1.0 + _col(params["nu"]) * _arr(x0)

    def natural(self, spec, x0, params):
        return _col(params["nu"]) * _arr(x0)

    def stat(self, spec, x):
        self.check_domain(spec, x, interior=True)
        return np.log(_arr(x))

    def sample(self, spec, x0, params, rng):
        g = rng.standard_gamma(self._alpha(x0, params))
        return g / g.sum(axis=-1, keepdims=True)

    def log_pdf(self, spec, x, x0, params):
        alpha = self._alpha(x0, params)
        x = np.clip(_arr(x), EPS_INTERIOR, 1.0)
        logb = sp.gammaln(alpha).sum(axis=-1) - sp.gammaln(alpha.sum(axis=-1))
        return ((alpha - 1) * np.log(x)).sum(axis=-1) - logb

    def kl(self, spec, x0, xp, params):
        nu = _col(params["nu"])
        a0 = self._alpha(x0, params)
        apred = 1.0 + nu * xp
        term = ad.lgamma(apred) - sp.gammaln(a0) + nu * (_arr(x0) - xp) * sp.digamma(a0)
        return term.sum(axis=-1)

    def head(self, spec, raw):
        return ad.softmax(raw, axis=-1)

    def stationary(self, spec, params, rng, n, frequencies=None):
        g = rng.standard_gamma(1.0, size=(n, spec.dim))
        return g / g.sum(axis=-1, keepdims=True)

    def mean(self, spec, x0, params):
        alpha = self._alpha(x0, params)
        return alpha / alpha.sum(axis=-1, keepdims=True)

    def tail_term(self, spec, x, params):
        x = np.clip(_arr(x), EPS_INTERIOR, 1.0)
        return _col(params["nu"]) * np.log(x)

    def conditional_entropy(self, spec, x0, params):
        alpha = self._alpha(x0, params)
        a0 = alpha.sum(axis=-1)
        logb = sp.gammaln(alpha).sum(axis=-1) - sp.gammaln(a0)
        return logb + (a0 - spec.dim) * sp.digamma(a0) \
            - ((alpha - 1) * sp.digamma(alpha)).sum(axis=-1)

    def tail_to_domain(self, spec, g):
        return sp.softmax(_arr(g), axis=-1)


class _Categorical(_FamilyOps):
    required = ("qbar",)

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        q = _arr(params["qbar"])
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ScheduleError("categorical qbar must be a square matrix")
        if np.any(q < -1e-15) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-12):
            raise ScheduleError("categorical qbar rows must sum to 1")

    def coefficient(self, params):
        return None

    def tail_shape(self, spec):
        return (spec.dim,)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim - 1

    def check_domain(self, spec, x):
        _onehot_index(x)

    @staticmethod
    def _log_qbar(params):
        # Zero transition entries map to a large negative sentinel so one-hot
        # contractions obey the 0*log(0)=0 convention instead of yielding NaN.
        with np.errstate(divide="ignore"):
            logq = np.log(_arr(params["qbar"]))
        return np.maximum(logq, CATEGORICAL_LOG_FLOOR)

    def natural(self, spec, x0, params):
        return _arr(x0) @ self._log_qbar(params)

    def stat(self, spec, x):
        self.check_domain(spec, x)
        return _arr(x)

    def _probs(self, x0, params):
        q = _arr(params["qbar"])
        x0 = _arr(x0)
        if q.ndim == 2:
            return x0 @ q
        # Per-datum matrices: x0 (B, ..., D) against q (B, D, D).
        qe = q.reshape((q.shape[0],) + (1,) * (x0.ndim - 2) + q.shape[1:])
        return (x0[..., None, :] @ qe)[..., 0, :]

    def sample(self, spec, x0, params, rng):
        p = self._probs(x0, params)
        c = p.cumsum(axis=-1)
        u = rng.random(p.shape[:-1] + (1,))
        idx = np.minimum((u > c).sum(axis=-1), p.shape[-1] - 1)
        return np.eye(p.shape[-1])[idx]

    def log_pdf(self, spec, x, x0, params):
        p = self._probs(x0, params)
        idx = _onehot_index(x)
        sel = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
        with np.errstate(divide="ignore"):
            return np.log(sel)

    def kl(self, spec, x0, xp, params):
        q = _arr(params["qbar"])
        p0 = self._probs(x0, params)
        if ad.is_var(xp):
            if q.ndim == 2:
                pp = xp @ ad.as_var(q)
            else:
                qe = q.reshape((q.shape[0],) + (1,) * (xp.ndim - 2) + q.shape[1:])
                xe = xp.reshape(xp.shape[:-1] + (1, xp.shape[-1]))
                pp = (xe @ qe)[..., 0, :]
        else:
            pp = self._probs(xp, params)
        with np.errstate(divide="ignore", invalid="ignore"):
            entropy_part = np.where(p0 > 0, p0 * np.log(p0), 0.0).sum(axis=-1)
        return entropy_part - (p0 * ad.log(pp)).sum(axis=-1)

    def head(self, spec, raw):
        return ad.softmax(raw, axis=-1)

    def stationary(self, spec, params, rng, n, frequencies=None):
        q = _arr(params["qbar"])
        freq = np.full(spec.dim, 1.0 / spec.dim) if frequencies is None else _arr(frequencies)
        p = freq @ q
        idx = rng.choice(spec.dim, size=n, p=p / p.sum())
        return np.eye(spec.dim)[idx]

    def mean(self, spec, x0, params):
        return self._probs(x0, params)

    def tail_term(self, spec, x, params):
        # log(qbar @ x^T) selects a column of log qbar; x @ logq.T does the same.
        return _arr(x) @ self._log_qbar(params).T

    def conditional_entropy(self, spec, x0, params):
        p = self._probs(x0, params)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        return -terms.sum(axis=-1)

    def tail_to_domain(self, spec, g):
        raise DomainError(
            "one-hot statistics are not invertible; use softmax normalization instead")


class _VonMises(_FamilyOps):
    required = ("kappa",)

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        if float(params["kappa"]) < 0:
            raise ScheduleError("von Mises kappa must be non-negative")

    def coefficient(self, params):
        return float(params["kappa"])

    def tail_shape(self, spec):
        return (spec.dim, 2)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim

    def check_domain(self, spec, x):
        if np.any(np.abs(_arr(x)) > np.pi + 1e-9):
            raise DomainError("von Mises angles must lie in [-pi, pi]")

    def natural(self, spec, x0, params):
        kappa = _arr(params["kappa"])
        x0 = _arr(x0)
        return kappa[..., None] * np.stack([np.cos(x0), np.sin(x0)], axis=-1) \
            if kappa.ndim else kappa * np.stack([np.cos(x0), np.sin(x0)], axis=-1)

    def stat(self, spec, x):
        x = _arr(x)
        return np.stack([np.cos(x), np.sin(x)], axis=-1)

    def sample(self, spec, x0, params, rng):
        x0 = _arr(x0)
        kappa = np.broadcast_to(_arr(params["kappa"]), x0.shape)
        return rng.vonmises(x0, kappa)

    def log_pdf(self, spec, x, x0, params):
        k = _arr(params["kappa"])
        return k * np.cos(_arr(x) - _arr(x0)) - np.log(2 * np.pi) - np.log(sp.i0e(k)) - k

    def kl(self, spec, x0, xp, params):
        k = _arr(params["kappa"])
        ratio = _bessel_ratio(1.0, k)
        return k * ratio * (1.0 - ad.cos(_arr(x0) - xp))

    def head(self, spec, raw):
        return 2.0 * ad.arctan(raw)

    def stationary(self, spec, params, rng, n, frequencies=None):
        return rng.uniform(-np.pi, np.pi, size=(n, spec.dim))

    def mean(self, spec, x0, params):
        return _arr(x0)  # mean direction; resultant length is I1/I0

    def tail_term(self, spec, x, params):
        kappa = _arr(params["kappa"])
        x = _arr(x)
        stat = np.stack([np.cos(x), np.sin(x)], axis=-1)
        return (kappa[..., None] if kappa.ndim else kappa) * stat

    def conditional_entropy(self, spec, x0, params):
        k = _arr(params["kappa"])
        r = _bessel_ratio(1.0, k)
        h = np.log(2 * np.pi) + np.log(sp.i0e(k)) + k - k * r
        return np.broadcast_to(h, np.shape(_arr(x0))).sum(axis=-1)

    def tail_to_domain(self, spec, g):
        g = _arr(g)
        return np.arctan2(g[..., 1], g[..., 0])


class _VonMisesFisher(_FamilyOps):
    required = ("kappa",)

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        if float(params["kappa"]) < 0:
            raise ScheduleError("vMF kappa must be non-negative")

    def coefficient(self, params):
        return float(params["kappa"])

    def tail_shape(self, spec):
        return (spec.dim,)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim - 1

    def check_domain(self, spec, x):
        if np.any(np.abs(np.linalg.norm(_arr(x), axis=-1) - 1.0) > 1e-9):
            raise DomainError("vMF points must have unit norm")

    def natural(self, spec, x0, params):
        return _col(params["kappa"]) * _arr(x0)

    def stat(self, spec, x):
        return _arr(x)

    def sample(self, spec, x0, params, rng):
        x0 = _arr(x0)
        orig_shape = x0.shape
        mu = np.atleast_2d(x0)
        kappa = np.broadcast_to(_arr(params["kappa"]), mu.shape[:-1]).astype(float)
        out = _sample_vmf(mu.reshape(-1, spec.dim), kappa.reshape(-1), rng)
        return out.reshape(orig_shape)

    def log_pdf(self, spec, x, x0, params):
        kappa = _arr(params["kappa"])
        dot = (_arr(x) * _arr(x0)).sum(axis=-1)
        return kappa * dot + _log_vmf_const(spec.dim, kappa)

    def kl(self, spec, x0, xp, params):
        kappa = _arr(params["kappa"])
        r = _bessel_ratio(spec.dim / 2.0, kappa)
        x0 = _arr(x0)
        inner = (x0 * x0).sum(axis=-1) - (x0 * xp).sum(axis=-1)
        return kappa * r * inner

    def head(self, spec, raw):
        norm = np.linalg.norm(ad.value_of(raw), axis=-1)
        if np.any(norm < 1e-12):
            raise DomainError("zero-norm vector cannot be projected to the sphere")
        return ad.l2_normalize(raw, axis=-1)

    def stationary(self, spec, params, rng, n, frequencies=None):
        z = rng.standard_normal((n, spec.dim))
        return z / np.linalg.norm(z, axis=-1, keepdims=True)

    def mean(self, spec, x0, params):
        return _arr(x0)  # mean direction

    def tail_term(self, spec, x, params):
        return _col(params["kappa"]) * _arr(x)

    def conditional_entropy(self, spec, x0, params):
        kappa = _arr(params["kappa"])
        r = _bessel_ratio(spec.dim / 2.0, kappa)
        h = -_log_vmf_const(spec.dim, kappa) - kappa * r
        return np.broadcast_to(h, np.shape(_arr(x0))[:-1]).copy()

    def tail_to_domain(self, spec, g):
        g = _arr(g)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(norm < 1e-12):
            raise DomainError("zero-norm tail statistic")
        return g / norm


class _Gamma(_FamilyOps):
    required = ("alpha", "xi")

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        if float(params["alpha"]) <= 0:
            raise ScheduleError("gamma alpha must be positive")
        if not (0.0 <= float(params["xi"]) <= 1.0):
            raise ScheduleError("gamma xi must lie in [0, 1]")

    def coefficient(self, params):
        return float(params["alpha"]) * (1.0 - float(params["xi"]))

    def tail_shape(self, spec):
        return (spec.dim,)

    def raw_dim(self, spec):
        return spec.dim

    def intrinsic_dim(self, spec):
        return spec.dim

    def check_domain(self, spec, x):
        if np.any(_arr(x) <= 0):
            raise DomainError("gamma points must be positive")

    def _rate(self, x0, params):
        a = _arr(params["alpha"])
        z = _arr(params["xi"])
        return a * (z + (1.0 - z) / _arr(x0)), a

    def natural(self, spec, x0, params):
        beta, _ = self._rate(x0, params)
        return -beta

    def stat(self, spec, x):
        self.check_domain(spec, x)
        return _arr(x)

    def sample(self, spec, x0, params, rng):
        beta, a = self._rate(x0, params)
        return rng.gamma(np.broadcast_to(a, beta.shape), 1.0 / beta)

    def log_pdf(self, spec, x, x0, params):
        beta, a = self._rate(x0, params)
        x = _arr(x)
        return a * np.log(beta) + (a - 1) * np.log(x) - beta * x - sp.gammaln(a)

    def kl(self, spec, x0, xp, params):
        beta0, a = self._rate(x0, params)
        z = _arr(params["xi"])
        betap = a * (z + (1.0 - z) / xp)
        return a * (ad.log(beta0 / betap) + betap / beta0 - 1.0)

    def head(self, spec, raw):
        return ad.exp(ad.clip(raw, np.log(GAMMA_HEAD_LO), np.log(GAMMA_HEAD_HI)))

    def stationary(self, spec, params, rng, n, frequencies=None):
        a = float(np.max(_arr(params["alpha"])))
        return rng.gamma(a, 1.0 / a, size=(n, spec.dim))

    def mean(self, spec, x0, params):
        beta, a = self._rate(x0, params)
        return a / beta

    def tail_term(self, spec, x, params):
        coeff = _arr(params["alpha"]) * (1.0 - _arr(params["xi"]))
        return coeff * _arr(x)

    def conditional_entropy(self, spec, x0, params):
        beta, a = self._rate(x0, params)
        h = a - np.log(beta) + sp.gammaln(a) + (1.0 - a) * sp.digamma(a)
        return np.broadcast_to(h, np.shape(_arr(x0))).sum(axis=-1)

    def tail_to_domain(self, spec, g):
        return np.clip(_arr(g), EPS_INTERIOR, None)


class _Wishart(_FamilyOps):
    required = ("n", "xi")
    event_ndim = 2

    def validate_params(self, spec, params):
        super().validate_params(spec, params)
        if float(params["n"]) <= spec.dim - 1:
            raise ScheduleError(
                f"wishart degrees of freedom must exceed p-1={spec.dim - 1}")
        if not (0.0 <= float(params["xi"]) <= 1.0):
            raise ScheduleError("wishart xi must lie in [0, 1]")

    def coefficient(self, params):
        return float(params["n"]) * (1.0 - float(params["xi"]))

    def tail_shape(self, spec):
        return (spec.dim, spec.dim)

    def raw_dim(self, spec):
        return spec.dim * (spec.dim + 1) // 2

    def intrinsic_dim(self, spec):
        return spec.dim * (spec.dim + 1) // 2

    def check_domain(self, spec, x):
        x = _arr(x)
        if x.shape[-1] != spec.dim or x.shape[-2] != spec.dim:
            raise DomainError("wishart points must be p x p matrices")
        if np.any(np.abs(x - np.swapaxes(x, -1, -2)) > 1e-9):
            raise DomainError("wishart points must be symmetric")
        if np.any(np.linalg.eigvalsh(x) <= 0):
            raise DomainError("wishart points must be positive definite")

    def _mu(self, x0, params):
        z = _mat(params["xi"])
        x0 = _arr(x0)
        return z * np.eye(x0.shape[-1]) + (1.0 - z) * np.linalg.inv(x0)

    def natural(self, spec, x0, params):
        return -0.5 * _mat(params["n"]) * self._mu(x0, params)

    def stat(self, spec, x):
        self.check_domain(spec, x)
        return _arr(x)

    def sample(self, spec, x0, params, rng):
        mu = self._mu(x0, params)
        n = _arr(params["n"])
        v = np.linalg.inv(mu) / _mat(params["n"])
        dof = np.broadcast_to(n, v.shape[:-2]).astype(float)
        return _sample_wishart(v, dof, rng)

    def log_pdf(self, spec, x, x0, params):
        p = spec.dim
        x = _arr(x)
        n = np.broadcast_to(_arr(params["n"]), x.shape[:-2]).astype(float)
        mu = self._mu(x0, params)
        _, ld_x = np.linalg.slogdet(x)
        _, ld_mu = np.linalg.slogdet(mu)
        # V = mu^{-1}/n, so V^{-1} = n mu and log|V| = -log|mu| - p log n.
        tr = n * (mu * x).sum(axis=(-1, -2))
        logdet_v = -ld_mu - p * np.log(n)
        return 0.5 * (n - p - 1) * ld_x - 0.5 * tr - 0.5 * n * p * np.log(2.0) \
            - 0.5 * n * logdet_v - sp.multigammaln(0.5 * n, p)

    def kl(self, spec, x0, xp, params):
        p = spec.dim
        n = _arr(params["n"])
        z = _mat(params["xi"])
        mu0 = self._mu(x0, params)
        mu0_inv = np.linalg.inv(mu0)
        ld_mu0 = np.linalg.slogdet(mu0)[1]
        eye = np.eye(p)
        # V^{-1}(pred) V(x0) = mu_pred mu0^{-1}; the n factors cancel.
        if ad.is_var(xp):
            mup = z * eye + (1.0 - z) * ad.inverse(xp)
            m = ad.matmul(mup, mu0_inv)
            return -0.5 * n * ((ad.logdet(mup) - ld_mu0) - ad.trace(m) + p)
        mup = z * eye + (1.0 - z) * np.linalg.inv(_arr(xp))
        m = mup @ mu0_inv
        return -0.5 * n * ((np.linalg.slogdet(mup)[1] - ld_mu0)
                           - np.trace(m, axis1=-2, axis2=-1) + p)

    def head(self, spec, raw):
        p = spec.dim
        tri = ad.fill_lower_triangular(raw, p)
        tri_t = tri.swap_last() if ad.is_var(tri) else np.swapaxes(tri, -1, -2)
        return ad.matmul(tri, tri_t) + WISHART_JITTER * np.eye(p)

    def stationary(self, spec, params, rng, n, frequencies=None):
        dof = float(np.max(_arr(params["n"])))
        v = np.broadcast_to(np.eye(spec.dim) / dof, (n, spec.dim, spec.dim))
        return _sample_wishart(v, np.full(n, dof), rng)

    def mean(self, spec, x0, params):
        return np.linalg.inv(self._mu(x0, params))

    def tail_term(self, spec, x, params):
        coeff = _arr(params["n"]) * (1.0 - _arr(params["xi"]))
        return _mat(coeff) * _arr(x) if coeff.ndim else coeff * _arr(x)

    def conditional_entropy(self, spec, x0, params):
        p = spec.dim
        x0 = _arr(x0)
        n = np.broadcast_to(_arr(params["n"]), x0.shape[:-2]).astype(float)
        mu = self._mu(x0, params)
        logdet_v = -np.linalg.slogdet(mu)[1] - p * np.log(n)
        mv_digamma = sum(sp.digamma(0.5 * n + 0.5 * (1 - j)) for j in range(1, p + 1))
        return 0.5 * (p + 1) * logdet_v + 0.5 * p * (p + 1) * np.log(2.0) \
            + sp.multigammaln(0.5 * n, p) - 0.5 * (n - p - 1) * mv_digamma + 0.5 * n * p

    def tail_to_domain(self, spec, g):
        g = _arr(g)
        sym = 0.5 * (g + np.swapaxes(g, -1, -2))
        w, q = np.linalg.eigh(sym)
        w = np.clip(w, WISHART_JITTER, None)
        return (q * w[..., None, :]) @ np.swapaxes(q, -1, -2)


_REGISTRY = {
    Family.GAUSSIAN: _Gaussian(),
    Family.BETA: _Beta(),
    Family.DIRICHLET: _Dirichlet(),
    Family.CATEGORICAL: _Categorical(),
    Family.VON_MISES: _VonMises(),
    Family.VON_MISES_FISHER: _VonMisesFisher(),
    Family.GAMMA: _Gamma(),
    Family.WISHART: _Wishart(),
}

# Families whose log_pdf/kl already reduce over the event axes.
_EVENT_REDUCED = {Family.DIRICHLET, Family.CATEGORICAL, Family.VON_MISES_FISHER,
                  Family.WISHART}


# ---------------------------------------------------------------------------
# Low-level samplers
# ---------------------------------------------------------------------------


def _sample_vmf(mu: np.ndarray, kappa: np.ndarray, rng) -> np.ndarray:
    """Wood's rejection sampler, vectorized over rows of mu.

    mu: (n, K) unit vectors, kappa: (n,) non-negative concentrations.
    """
    n, k_dim = mu.shape
    d = k_dim - 1
    b = d / (np.sqrt(4.0 * kappa**2 + d * d) + 2.0 * kappa)
    x0c = (1.0 - b) / (1.0 + b)
    c = kappa * x0c + d * np.log1p(-(x0c**2))

    w = np.empty(n)
    active = np.ones(n, dtype=bool)
    rounds = 0
    while np.any(active):
        if rounds >= REJECTION_CAP:
            raise SamplerFailure(
                "vMF rejection sampler exceeded its iteration cap",
                kappa=float(kappa[active][0]))
        idx = np.nonzero(active)[0]
        z = rng.beta(d / 2.0, d / 2.0, size=idx.size)
        prop = (1.0 - (1.0 + b[idx]) * z) / (1.0 - (1.0 - b[idx]) * z)
        u = rng.random(idx.size)
        ok = kappa[idx] * prop + d * np.log(1.0 - x0c[idx] * prop) - c[idx] >= np.log(u)
        w[idx[ok]] = prop[ok]
        active[idx[ok]] = False
        rounds += 1

    # Uniform tangent direction orthogonal to mu.
    v = rng.standard_normal((n, k_dim))
    v -= (v * mu).sum(axis=1, keepdims=True) * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = w[:, None] * mu + np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _sample_wishart(v: np.ndarray, dof: np.ndarray, rng) -> np.ndarray:
    """Bartlett-decomposition draws X ~ W_p(V, n), batched over leading axes."""
    p = v.shape[-1]
    batch = v.shape[:-2]
    chol = np.linalg.cholesky(v)
    a = np.zeros(batch + (p, p))
    ii = np.arange(p)
    df = dof[..., None] - ii
    if np.any(df <= 0):
        raise ScheduleError("wishart degrees of freedom too small for Bartlett")
    a[..., ii, ii] = np.sqrt(rng.chisquare(df))
    rows, cols = np.tril_indices(p, k=-1)
    if rows.size:
        a[..., rows, cols] = rng.standard_normal(batch + (rows.size,))
    la = chol @ a
    return la @ np.swapaxes(la, -1, -2)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def natural_params(spec: FamilySpec, x0, point: SchedulePoint):
    """eta_t(x0) = A_t f(x0) + b_t for the family's linear parameterization."""
    ops = _ops(spec)
    ops.check_domain(spec, x0)
    return ops.natural(spec, x0, point.params)


def sufficient_stat(spec: FamilySpec, x):
    """T(x); raises DomainBoundaryError where logs/logits diverge."""
    return _ops(spec).stat(spec, x)


def sample_forward(spec: FamilySpec, x0, point_or_params, rng):
    """One draw from q(x_t | x0); output satisfies the domain invariant."""
    params = point_or_params.params if isinstance(point_or_params, SchedulePoint) \
        else point_or_params
    return _ops(spec).sample(spec, x0, params, rng)


def log_pdf(spec: FamilySpec, x, x0, point_or_params):
    """Exact log q(x_t = x | x0) in nats, summed over the event axes."""
    params = point_or_params.params if isinstance(point_or_params, SchedulePoint) \
        else point_or_params
    out = _ops(spec).log_pdf(spec, x, x0, params)
    if spec.family not in _EVENT_REDUCED:
        out = np.asarray(out).sum(axis=-1)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError("log density is not finite")
    return out


def kl_terms(spec: FamilySpec, x0, x_pred, params):
    """Per-event KL(q(x_t|x0) || q(x_t|x0)|_{x0=x_pred}); may carry a Var.

    Scalar families return one value per channel; vector/matrix families
    return one value per event.
    """
    return _ops(spec).kl(spec, x0, x_pred, params)


def kl_step(spec: FamilySpec, x0, x_pred, point: SchedulePoint) -> float:
    """Total KL in nats for one datum; negative values beyond tolerance raise."""
    terms = kl_terms(spec, x0, x_pred, point.params)
    total = float(np.sum(ad.value_of(terms)))
    if total < KL_NEGATIVE_TOL:
        raise KlFormulaError(f"KL came out negative ({total:.3e}); formula bug")
    return total


def map_to_domain(spec: FamilySpec, raw):
    """Map an unconstrained prediction onto the family's manifold."""
    return _ops(spec).head(spec, raw)


def stationary_sample(spec: FamilySpec, point: SchedulePoint, rng, n: int,
                      frequencies=None):
    """n draws from the x0-free law q(x_T) at the schedule's final point."""
    return _ops(spec).stationary(spec, point.params, rng, n, frequencies)


def analytic_mean(spec: FamilySpec, x0, point: SchedulePoint):
    """E[x_t | x0] (mean direction for circular families)."""
    return _ops(spec).mean(spec, x0, point.params)


def tail_term(spec: FamilySpec, x, point_or_params):
    """A_t^T T(x), the per-step contribution to the tail statistic."""
    params = point_or_params.params if isinstance(point_or_params, SchedulePoint) \
        else point_or_params
    return _ops(spec).tail_term(spec, x, params)


def conditional_entropy(spec: FamilySpec, x0, point_or_params):
    """H[x_t | x0] in nats for the whole event, in closed form."""
    params = point_or_params.params if isinstance(point_or_params, SchedulePoint) \
        else point_or_params
    return _ops(spec).conditional_entropy(spec, x0, params)


def tail_to_domain(spec: FamilySpec, g):
    """T^{-1} applied to a (normalized) tail statistic, for visualization."""
    return _ops(spec).tail_to_domain(spec, g)


def check_domain(spec: FamilySpec, x):
    _ops(spec).check_domain(spec, x)


def event_ndim(spec: FamilySpec) -> int:
    return _ops(spec).event_ndim


def tail_shape(spec: FamilySpec) -> tuple:
    """Shape of A_t^T T(x) for one event."""
    return _ops(spec).tail_shape(spec)


def raw_output_dim(spec: FamilySpec) -> int:
    """Unconstrained dimension expected by map_to_domain."""
    return _ops(spec).raw_dim(spec)


def intrinsic_dim(spec: FamilySpec) -> int:
    """Manifold dimension; used to scale per-dimension MI targets."""
    return _ops(spec).intrinsic_dim(spec)


def flatten_tail(spec: FamilySpec, g: np.ndarray) -> np.ndarray:
    """Flatten a tail statistic to the vector the network consumes.

    Wishart keeps only the upper triangle (the statistic is symmetric).
    """
    g = np.asarray(g)
    if spec.family is Family.WISHART:
        rows, cols = np.triu_indices(spec.dim)
        return g[..., rows, cols]
    shape = tail_shape(spec)
    lead = g.shape[: g.ndim - len(shape)]
    return g.reshape(lead + (-1,))


def unflatten_tail(spec: FamilySpec, flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat)
    if spec.family is Family.WISHART:
        p = spec.dim
        rows, cols = np.triu_indices(p)
        out = np.zeros(flat.shape[:-1] + (p, p))
        out[..., rows, cols] = flat
        out[..., cols, rows] = flat
        return out
    return flat.reshape(flat.shape[:-1] + tail_shape(spec))


def flat_tail_dim(spec: FamilySpec) -> int:
    if spec.family is Family.WISHART:
        return spec.dim * (spec.dim + 1) // 2
    return int(np.prod(tail_shape(spec)))
