"""Sufficient tail statistics: accumulation, incremental updates,
time-dependent normalization, domain-space visualization, and a brute-force
sufficiency check for enumerable categorical instances.

A TailState stores the raw running sum g = sum_{s=t}^T A_s^T T(x_s). For the
Gaussian family the quantity that matches the dual Markov process carries an
extra t-dependent prefactor; `canonical_tail` applies it. The prefactor is a
bijection at fixed t, so sufficiency and z-score normalization are unaffected
by which view is used.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import families as fam
from .errors import DomainError, TailShapeError, TailStepError
from .schedule import NoiseSchedule, gaussian_tail_prefactor
from .utils import sha256_of

STD_FLOOR = 1e-8
SUFFICIENCY_QUANTUM = 1e-9
SUFFICIENCY_MAX_TAILS = 10**6


@dataclass
class TailState:
    """Raw accumulated statistic at timestep t (g sums steps t..T)."""

    t: int
    g: np.ndarray


def tail_statistic(spec: fam.FamilySpec, schedule: NoiseSchedule, x_tail) -> TailState:
    """Accumulate G_t from realized samples x_t..x_T.

    ``x_tail`` is an array (L, *batch, *event) or a list of L points; the
    starting timestep is inferred as t = T - L + 1. The Gaussian
    Theorem-2-scaled view is available through `canonical_tail`.
    """
    xs = [np.asarray(x, dtype=float) for x in x_tail]
    L = len(xs)
    if not 1 <= L <= schedule.T:
        raise TailShapeError(f"tail length {L} incompatible with T={schedule.T}")
    t = schedule.T - L + 1
    g = None
    for offset, x in enumerate(xs):
        term = fam.tail_term(spec, x, schedule.point(t + offset))
        g = term if g is None else g + term
    return TailState(t=t, g=g)


def tail_update(spec: fam.FamilySpec, schedule: NoiseSchedule,
                state: TailState, x_prev) -> TailState:
    """G_{t-1} = G_t + A_{t-1}^T T(x_{t-1}); exact incremental recursion."""
    if state.t < 2:
        raise TailStepError("cannot update below t=1")
    term = fam.tail_term(spec, np.asarray(x_prev, dtype=float),
                         schedule.point(state.t - 1))
    return TailState(t=state.t - 1, g=state.g + term)


def tail_suffix_sums(spec: fam.FamilySpec, schedule: NoiseSchedule,
                     xs: np.ndarray) -> np.ndarray:
    """All statistics at once: entry [t-1] is G_t, from samples xs of x_1..x_T.

    xs has shape (T, *batch, *event); the result has shape
    (T, *batch, *tail_shape).
    """
    xs = np.asarray(xs, dtype=float)
    if xs.shape[0] != schedule.T:
        raise TailShapeError("need one sample per timestep 1..T")
    terms = np.stack([fam.tail_term(spec, xs[i], schedule.point(i + 1))
                      for i in range(schedule.T)])
    return np.cumsum(terms[::-1], axis=0)[::-1]


def canonical_tail(spec: fam.FamilySpec, schedule: NoiseSchedule,
                   state: TailState) -> np.ndarray:
    """The statistic in its reference scaling (Gaussian: dual-DDPM units)."""
    if spec.family is fam.Family.GAUSSIAN:
        abar_ss = schedule.param_array("alpha_bar")
        return gaussian_tail_prefactor(abar_ss)[state.t - 1] * state.g
    return state.g


@dataclass
class TailNormalizer:
    """Per-timestep moments of G_t plus the moments of T(x0).

    ``mean``/``std`` have shape (T, m) over the flattened statistic; the
    target moments drive the visualization mode that matches G_t to the
    scale of the data's sufficient statistic.
    """

    mean: np.ndarray
    std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    schedule_hash: str

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "schedule_hash": self.schedule_hash,
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
            "per_t": {str(t + 1): {"mean": self.mean[t].tolist(),
                                   "std": self.std[t].tolist()}
                      for t in range(self.mean.shape[0])},
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TailNormalizer":
        d = json.loads(text)
        T = len(d["per_t"])
        mean = np.stack([np.asarray(d["per_t"][str(t + 1)]["mean"]) for t in range(T)])
        std = np.stack([np.asarray(d["per_t"][str(t + 1)]["std"]) for t in range(T)])
        return cls(mean=mean, std=std,
                   target_mean=np.asarray(d["target_mean"]),
                   target_std=np.asarray(d["target_std"]),
                   schedule_hash=d["schedule_hash"])

    def content_hash(self) -> str:
        return sha256_of(json.loads(self.to_json()))


def data_stat(spec: fam.FamilySpec, x0: np.ndarray) -> np.ndarray:
    """Flattened T(x0) with boundary clamping, for normalizer targets."""
    x0 = np.asarray(x0, dtype=float)
    if spec.family in (fam.Family.BETA, fam.Family.DIRICHLET):
        x0 = np.clip(x0, fam.EPS_INTERIOR, 1 - fam.EPS_INTERIOR)
    return fam.flatten_tail(spec, fam.sufficient_stat(spec, x0))


def _flat(spec, g):
    return fam.flatten_tail(spec, g)


def fit_tail_normalizer(spec: fam.FamilySpec, schedule: NoiseSchedule,
                        dataset: np.ndarray, n_mc: int = 4, rng=None,
                        chunk: int = 256) -> TailNormalizer:
    """Empirical per-t moments of G_t over dataset x forward draws."""
    rng = np.random.default_rng() if rng is None else rng
    dataset = np.asarray(dataset, dtype=float)
    if dataset.shape[0] == 0:
        raise TailShapeError("dataset must be nonempty")
    T = schedule.T
    m = fam.flat_tail_dim(spec)
    acc = np.zeros((T, m))
    acc_sq = np.zeros((T, m))
    count = 0
    data_rep = np.repeat(dataset, n_mc, axis=0)
    for start in range(0, data_rep.shape[0], chunk):
        x0 = data_rep[start:start + chunk]
        xs = np.stack([fam.sample_forward(spec, x0, schedule.point(t), rng)
                       for t in range(1, T + 1)])
        gs = tail_suffix_sums(spec, schedule, xs)          # (T, b, *tail)
        flat = _flat(spec, gs)                             # (T, b, m)
        acc += flat.sum(axis=1)
        acc_sq += (flat ** 2).sum(axis=1)
        count += x0.shape[0]

    mean = acc / count
    var = np.maximum(acc_sq / count - mean ** 2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)

    stats = data_stat(spec, dataset)
    t_mean = stats.mean(axis=0)
    t_std = np.maximum(stats.std(axis=0), STD_FLOOR)
    return TailNormalizer(mean=mean, std=std, target_mean=t_mean,
                          target_std=t_std, schedule_hash=schedule.content_hash())


def normalize_tail(spec: fam.FamilySpec, state: TailState,
                   normalizer: TailNormalizer | None, mode: str = "zscore"):
    """Normalized, flattened statistic for the given mode.

    zscore         -> (g - mu_t) / sigma_t
    match_T_of_x0  -> rescaled to the moments of T(x0) (visualization)
    softmax        -> softmax over the statistic (categorical; needs no fit)
    """
    flat = _flat(spec, state.g)
    if mode == "softmax":
        shifted = flat - flat.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if normalizer is None:
        raise ValueError(f"mode {mode!r} needs a fitted normalizer")
    idx = state.t - 1
    z = (flat - normalizer.mean[idx]) / normalizer.std[idx]
    if mode == "zscore":
        return z
    if mode == "match_T_of_x0":
        return z * normalizer.target_std + normalizer.target_mean
    raise ValueError(f"unknown normalization mode {mode!r}")


def tail_to_domain(spec: fam.FamilySpec, normalized_g: np.ndarray) -> np.ndarray:
    """Map a normalized statistic back to the data domain via T^{-1}."""
    g = np.asarray(normalized_g, dtype=float)
    if spec.family is fam.Family.VON_MISES:
        g = g.reshape(g.shape[:-1] + (spec.dim, 2))
        return fam.tail_to_domain(spec, g)
    return fam.tail_to_domain(spec, fam.unflatten_tail(spec, g))


# ---------------------------------------------------------------------------
# Brute-force sufficiency verification (Theorem 1, categorical case)
# ---------------------------------------------------------------------------


def verify_sufficiency(D: int, T: int, qbars, data_law) -> float:
    """Max discrepancy between q(x_{t-1} | x_{t:T}) across tails sharing G_t.

    Enumerates every categorical tail, computes the exact posterior by Bayes
    over the joint, groups tails by their (quantized) tail statistic, and
    returns the largest posterior difference within any group. Theorem-level
    sufficiency means this is zero up to float rounding.
    """
    qbars = [np.asarray(q, dtype=float) for q in qbars]
    if len(qbars) != T:
        raise TailShapeError("need one transition matrix per timestep")
    prior = np.asarray(data_law, dtype=float)
    if prior.shape != (D,) or abs(prior.sum() - 1.0) > 1e-12:
        raise DomainError("data law must be a distribution over D tokens")
    spec = fam.FamilySpec(fam.Family.CATEGORICAL, D)

    worst = 0.0
    for t in range(1, T + 1):
        L = T - t + 1
        n_tails = D ** L
        if n_tails > SUFFICIENCY_MAX_TAILS:
            raise TailShapeError(
                f"{n_tails} tails exceed the {SUFFICIENCY_MAX_TAILS} cap")
        tails = np.array(list(itertools.product(range(D), repeat=L)))  # (n, L)

        # Exact joint over x0 via direct products of transition probabilities.
        like = np.ones((D, n_tails))
        for col, step in enumerate(range(t, T + 1)):
            q = qbars[step - 1]
            like *= q[:, tails[:, col]]
        post_x0 = prior[:, None] * like
        norm = post_x0.sum(axis=0)
        feasible = norm > 0.0  # zero-probability tails never occur
        post_x0 = np.where(feasible, post_x0 / np.where(feasible, norm, 1.0), 0.0)

        if t == 1:
            predictive = post_x0.T                       # posterior over x0
        else:
            predictive = post_x0.T @ qbars[t - 2]        # mix q(x_{t-1}|x0)

        # Tail statistic through the production code path.
        eye = np.eye(D)
        g = np.zeros((n_tails, D))
        with np.errstate(invalid="ignore"):
            for col, step in enumerate(range(t, T + 1)):
                g += fam.tail_term(spec, eye[tails[:, col]],
                                   {"qbar": qbars[step - 1]})

        keys = {}
        # -inf entries (zero transition probabilities) become a sentinel that
        # still fits in int64 after quantization.
        finite_g = np.clip(g, -1e8, 1e8)
        quantized = np.round(finite_g / SUFFICIENCY_QUANTUM).astype(np.int64)
        for i in range(n_tails):
            if not feasible[i]:
                continue
            key = quantized[i].tobytes()
            if key in keys:
                ref = keys[key]
                worst = max(worst, float(np.max(np.abs(predictive[i] - ref))))
            else:
                keys[key] = predictive[i]
    return worst
