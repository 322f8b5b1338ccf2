"""Training and inference: stochastic VLB training over random timesteps,
ancestral sampling on the tail statistic, reduced-step sampling with frozen
predictions, and Monte-Carlo evaluation of the evidence lower bound.

The data bound being optimized is

    log p(x0 | x_{1:T}) - sum_{t=2}^T KL(q(x_{t-1}|x0) || p(x_{t-1}|G_t)),

with the reverse step defined by plugging the network's x0 estimate into the
forward conditional. The t=1 draw carries the reconstruction term, which is
a fixed dequantization-style distribution with no trainable parameters, so
it contributes nothing to gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import special as sp

from . import autodiff as ad
from . import families as fam
from . import nnet
from .errors import CheckpointMismatchError, ConfigError, SamplingPlanError
from .schedule import NoiseSchedule
from .tail import TailNormalizer, TailState, normalize_tail, tail_suffix_sums, tail_update
from .utils import atomic_write_bytes, sha256_of

SCALAR_FAMILIES = (fam.Family.GAUSSIAN, fam.Family.BETA, fam.Family.GAMMA,
                   fam.Family.VON_MISES)


@dataclass
class LossSpec:
    """vlb: unit-weight KL sum; simple: alias for unit weights; reweighted:
    per-t weights (Wishart default 1/n_t, which tames the magnitude spread
    of its KL terms)."""

    mode: str = "vlb"
    weights: np.ndarray | None = None

    def per_t(self, spec: fam.FamilySpec, schedule: NoiseSchedule) -> np.ndarray:
        if self.mode not in ("vlb", "simple", "reweighted"):
            raise ConfigError(f"unknown loss mode {self.mode!r}")
        if self.mode in ("vlb", "simple") or (self.mode == "reweighted"
                                              and self.weights is None
                                              and spec.family is not fam.Family.WISHART):
            w = np.ones(schedule.T)
        elif self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (schedule.T,):
                raise ConfigError("weights must have one entry per timestep")
        else:  # reweighted wishart default
            w = 1.0 / schedule.param_array("n")
        if np.any(w <= 0):
            raise ConfigError("loss weights must be strictly positive")
        return w


def default_norm_mode(spec: fam.FamilySpec) -> str:
    """Softmax keeps categorical statistics sufficient without a fitted pass."""
    return "softmax" if spec.family is fam.Family.CATEGORICAL else "zscore"


def _gather_params(spec: fam.FamilySpec, schedule: NoiseSchedule,
                   t_idx: np.ndarray) -> dict:
    """Per-datum schedule parameters shaped for broadcasting."""
    out = {}
    for key in schedule.points[0].params:
        vals = [schedule.points[i].params[key] for i in t_idx]
        arr = np.asarray(vals, dtype=float)
        if spec.family in SCALAR_FAMILIES:
            arr = arr[:, None]
        out[key] = arr
    return out


def _network_inputs(spec, normalizer, norm_mode, g_raw, t_arr):
    """One flattened, normalized input row per batch element.

    Softmax mode acts on the statistic's own last axis (per token position)
    before flattening; z-score uses the fitted per-t moments. Sequence-shaped
    statistics (batch, positions, vocab) collapse to a single row.
    """
    if norm_mode == "softmax":
        g = np.asarray(g_raw)
        shifted = g - g.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        sm = e / e.sum(axis=-1, keepdims=True)
        return sm.reshape(sm.shape[0], -1)
    flat = fam.flatten_tail(spec, g_raw)
    idx = np.asarray(t_arr) - 1
    return (flat - normalizer.mean[idx]) / normalizer.std[idx]


def training_loss(spec: fam.FamilySpec, schedule: NoiseSchedule,
                  batch: np.ndarray, t_arr: np.ndarray, x0_hat,
                  loss_spec: LossSpec):
    """Batch-mean weighted KL at step t-1 for given timesteps and predictions.

    Draws with t=1 carry the parameter-free reconstruction term and
    contribute zero. ``x0_hat`` may be a Var (training) or an array (oracle
    checks with an injected prediction).
    """
    batch = np.asarray(batch, dtype=float)
    km1 = np.maximum(t_arr - 1, 1)
    kl = fam.kl_terms(spec, batch, x0_hat, _gather_params(spec, schedule, km1 - 1))
    per_datum = kl.sum(axis=-1) if _needs_channel_sum(spec, batch) else kl
    w = loss_spec.per_t(spec, schedule)
    mask = (t_arr >= 2).astype(float) * w[km1 - 1]
    return (per_datum * mask).sum() / batch.shape[0]


def train_step(net: nnet.PredictorNet, opt: nnet.OptimState, spec: fam.FamilySpec,
               schedule: NoiseSchedule, normalizer: TailNormalizer | None,
               batch: np.ndarray, loss_spec: LossSpec, rng,
               norm_mode: str | None = None) -> dict:
    """One optimizer step on a batch; returns loss and step diagnostics.

    Per datum: t ~ Uniform{1..T}, a fresh tail x_{t:T} ~ q(.|x0), the
    statistic G_t, the prediction x0_hat, and the weighted KL at t-1.
    """
    norm_mode = norm_mode or default_norm_mode(spec)
    batch = np.asarray(batch, dtype=float)
    B = batch.shape[0]
    T = schedule.T
    t_arr = rng.integers(1, T + 1, size=B)

    xs = np.stack([fam.sample_forward(spec, batch, schedule.point(t), rng)
                   for t in range(1, T + 1)])
    gs = tail_suffix_sums(spec, schedule, xs)
    g_own = gs[t_arr - 1, np.arange(B)]

    inputs = _network_inputs(spec, normalizer, norm_mode, g_own, t_arr)
    emb = nnet.time_embedding(t_arr, T, net.config.time_embed_dim)

    params = nnet.trainable_params(net)
    raw = nnet.forward(net, inputs, emb, params)
    x0_hat = fam.map_to_domain(spec, _shape_raw(spec, raw, batch.shape))
    loss = training_loss(spec, schedule, batch, t_arr, x0_hat, loss_spec)

    loss_value = float(ad.value_of(loss))
    if not np.isfinite(loss_value):
        return {"loss": loss_value, "applied": False, "grad_norm": np.nan,
                "incident": {"t": t_arr.tolist(), "step": opt.step}}

    grads = nnet.backward(loss, params)
    grad_norm = nnet.global_norm(grads)
    applied = nnet.adam_step(opt, net.params, grads)
    return {"loss": loss_value, "applied": applied, "grad_norm": grad_norm,
            "lr": opt.current_lr, "t_mean": float(t_arr.mean())}


def _needs_channel_sum(spec, batch) -> bool:
    """KL terms keep channel axes for scalar families and sequence axes for
    categorical batches; reduce them to one value per datum."""
    if spec.family in SCALAR_FAMILIES:
        return True
    return spec.family is fam.Family.CATEGORICAL and batch.ndim > 2


def _shape_raw(spec, raw, batch_shape):
    """Reshape flat network output to the family's raw head layout."""
    if spec.family is fam.Family.CATEGORICAL and len(batch_shape) > 2:
        return raw.reshape(batch_shape)
    return raw


def net_predictor(net: nnet.PredictorNet, spec: fam.FamilySpec,
                  schedule: NoiseSchedule, normalizer: TailNormalizer | None,
                  params: dict | None = None, norm_mode: str | None = None):
    """Predictor callable state -> x0_hat using fixed (e.g. EMA) parameters."""
    norm_mode = norm_mode or default_norm_mode(spec)
    use = dict(net.params if params is None else params)

    def predict(state: TailState) -> np.ndarray:
        g = np.asarray(state.g)
        t_arr = np.full(g.shape[0], state.t)
        inputs = _network_inputs(spec, normalizer, norm_mode, g, t_arr)
        emb = nnet.time_embedding(t_arr, schedule.T, net.config.time_embed_dim)
        raw = nnet.forward(net, inputs, emb, use)
        if spec.family is fam.Family.CATEGORICAL and g.ndim > 2:
            raw = raw.reshape(g.shape)
        return ad.value_of(fam.map_to_domain(spec, raw))

    return predict


def _as_predictor(model, spec, schedule, normalizer):
    if callable(model):
        return model
    return net_predictor(model, spec, schedule, normalizer)


def _final_x0(spec, predictor, state, rng, frequencies=None):
    """p(x0 | G_1): deterministic prediction; exact posterior for categorical."""
    if spec.family is fam.Family.CATEGORICAL:
        g = np.asarray(state.g)
        logits = g if frequencies is None else g + np.log(np.asarray(frequencies))
        logits = logits - sp.logsumexp(logits, axis=-1, keepdims=True)
        p = np.exp(logits)
        c = p.cumsum(axis=-1)
        u = rng.random(p.shape[:-1] + (1,))
        idx = np.minimum((u > c).sum(axis=-1), p.shape[-1] - 1)
        return np.eye(p.shape[-1])[idx]
    return predictor(state)


def _stationary_start(spec, schedule, rng, n, frequencies, seq_len):
    x = fam.stationary_sample(spec, schedule.point(schedule.T),
                              rng, n * (seq_len or 1), frequencies)
    if seq_len:
        x = x.reshape(n, seq_len, spec.dim)
    return x


def sample(model, spec: fam.FamilySpec, schedule: NoiseSchedule,
           normalizer: TailNormalizer | None, rng, n: int = 1,
           frequencies=None, seq_len: int | None = None) -> np.ndarray:
    """Ancestral sampling: grow the tail statistic from t=T down to 1.

    ``seq_len`` shapes categorical draws as token sequences (n, L, D).
    """
    predictor = _as_predictor(model, spec, schedule, normalizer)
    T = schedule.T
    x = _stationary_start(spec, schedule, rng, n, frequencies, seq_len)
    state = TailState(T, fam.tail_term(spec, x, schedule.point(T)))
    for t in range(T, 1, -1):
        x0_hat = predictor(state)
        x_prev = fam.sample_forward(spec, x0_hat, schedule.point(t - 1), rng)
        state = tail_update(spec, schedule, state, x_prev)
    return _final_x0(spec, predictor, state, rng, frequencies)


def sample_reduced(model, spec: fam.FamilySpec, schedule: NoiseSchedule,
                   normalizer: TailNormalizer | None, rng, eval_steps,
                   n: int = 1, frequencies=None,
                   seq_len: int | None = None) -> np.ndarray:
    """Sampling with network evaluations only at ``eval_steps``.

    Between consecutive evaluations t2 -> t1 every intermediate x_s is drawn
    from the forward conditional with the frozen estimate x0_hat(G_{t2}, t2)
    and folded into the statistic, so the tail stays typical.
    """
    steps = sorted(set(int(s) for s in eval_steps), reverse=True)
    T = schedule.T
    if not steps or steps[0] != T or steps[-1] != 1:
        raise SamplingPlanError("eval_steps must include both T and 1")
    if steps[0] > T:
        raise SamplingPlanError("eval_steps outside 1..T")

    predictor = _as_predictor(model, spec, schedule, normalizer)
    x = _stationary_start(spec, schedule, rng, n, frequencies, seq_len)
    state = TailState(T, fam.tail_term(spec, x, schedule.point(T)))
    for t2, t1 in zip(steps[:-1], steps[1:]):
        x0_hat = predictor(state)
        for s in range(t2 - 1, t1 - 1, -1):
            x_s = fam.sample_forward(spec, x0_hat, schedule.point(s), rng)
            state = tail_update(spec, schedule, state, x_s)
    return _final_x0(spec, predictor, state, rng, frequencies)


def elbo(model, spec: fam.FamilySpec, schedule: NoiseSchedule,
         normalizer: TailNormalizer | None, x0: np.ndarray, n_mc: int,
         rng, recon: str = "deterministic", recon_scale: float = 1e-2,
         frequencies=None, data_variance: float = 1.0) -> dict:
    """Monte-Carlo lower bound on log-likelihood, in nats per datum.

    recon: how log p(x0|G_1) is evaluated. "deterministic" drops the term
    (delta-like reconstruction; flagged in the output), "fixed_gaussian" uses
    an isotropic Gaussian of scale recon_scale around the t=1 prediction,
    "gaussian_posterior" uses the exact conditional under Gaussian data,
    "categorical_exact" uses the closed-form token posterior. The x_T prior
    term is dropped, matching its vanishing size under a full schedule.
    """
    predictor = _as_predictor(model, spec, schedule, normalizer)
    x0 = np.asarray(x0, dtype=float)
    N = x0.shape[0]
    T = schedule.T
    rep = np.repeat(x0, n_mc, axis=0)

    xs = np.stack([fam.sample_forward(spec, rep, schedule.point(t), rng)
                   for t in range(1, T + 1)])
    gs = tail_suffix_sums(spec, schedule, xs)

    kl_sum = np.zeros(rep.shape[0])
    for t in range(2, T + 1):
        state = TailState(t, gs[t - 1])
        x0_hat = predictor(state)
        kl = fam.kl_terms(spec, rep, x0_hat, schedule.point(t - 1).params)
        kl_sum += kl.sum(axis=-1) if _needs_channel_sum(spec, rep) else np.asarray(kl)

    state1 = TailState(1, gs[0])
    recon_term, recon_dropped = _reconstruction(
        spec, schedule, predictor, state1, rep, recon, recon_scale,
        frequencies, data_variance)

    per_draw = recon_term - kl_sum
    per_datum = per_draw.reshape(N, n_mc).mean(axis=1)
    value = float(per_datum.mean())
    dim_count = _bits_denominator(spec, x0)
    return {
        "elbo_nats": value,
        "elbo_per_datum": per_datum,
        "bits_per_dim": float(-value / np.log(2.0) / dim_count),
        "recon_dropped": recon_dropped,
        "xT_term_dropped": True,
        "n_mc": n_mc,
    }


def _bits_denominator(spec, x0) -> float:
    if spec.family is fam.Family.CATEGORICAL:
        return float(np.prod(x0.shape[1:-1])) if x0.ndim > 2 else 1.0
    return float(np.prod(x0.shape[1:]))


def _reconstruction(spec, schedule, predictor, state1, rep, recon, recon_scale,
                    frequencies, data_variance):
    if recon == "deterministic":
        return np.zeros(rep.shape[0]), True
    if recon == "categorical_exact":
        g = np.asarray(state1.g)
        logf = 0.0 if frequencies is None else np.log(np.asarray(frequencies))
        logits = g + logf
        logp = logits - sp.logsumexp(logits, axis=-1, keepdims=True)
        sel = (rep * logp).sum(axis=-1)
        return (sel.sum(axis=-1) if rep.ndim > 2 else sel), False
    if recon == "gaussian_posterior":
        if spec.family is not fam.Family.GAUSSIAN:
            raise ConfigError("gaussian_posterior reconstruction needs the gaussian family")
        from .schedule import ss_to_ddpm_gaussian, gaussian_tail_prefactor
        abar_ss = schedule.param_array("alpha_bar")
        ab1 = ss_to_ddpm_gaussian(abar_ss)[0]
        g_canon = gaussian_tail_prefactor(abar_ss)[0] * state1.g
        mean = data_variance * np.sqrt(ab1) * g_canon \
            / (data_variance * ab1 + 1.0 - ab1)
        var = data_variance * (1.0 - ab1) / (data_variance * ab1 + 1.0 - ab1)
        ll = -0.5 * np.log(2 * np.pi * var) - (rep - mean) ** 2 / (2 * var)
        return ll.sum(axis=-1), False
    if recon == "fixed_gaussian":
        x0_hat = predictor(state1)
        var = recon_scale ** 2
        diff = (rep - x0_hat).reshape(rep.shape[0], -1)
        ll = -0.5 * np.log(2 * np.pi * var) * diff.shape[1] \
            - (diff ** 2).sum(axis=-1) / (2 * var)
        return ll, False
    raise ConfigError(f"unknown reconstruction mode {recon!r}")


# ---------------------------------------------------------------------------
# Experiment configuration and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    experiment: str
    family: str
    dim: int
    T: int
    version: int = 1
    iterations: int = 20_000
    batch_size: int = 128
    lr: float = 4e-4
    lr_decay: float = 1.0
    clip_norm: float = 1.0
    ema_decay: float = 0.9999
    hidden: tuple = (256, 256, 256)
    time_embed_dim: int = 32
    loss_mode: str = "vlb"
    schedule_source: str = "mi_matched"
    normalizer_mc: int = 4
    mi_budget: int = 8_000          # DSIVI M at K=1000 for schedule matching
    mi_kraskov_samples: int = 30_000
    seed: int = 0
    n_train: int = 20_000
    n_eval: int = 8192
    output_dir: str = "out"
    dataset: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("T must be at least 1 (field: T)")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive (field: iterations)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive (field: batch_size)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive (field: lr)")
        if not (0 < self.ema_decay <= 1):
            raise ConfigError("ema_decay must lie in (0, 1] (field: ema_decay)")
        if self.loss_mode not in ("vlb", "simple", "reweighted"):
            raise ConfigError("loss_mode must be vlb|simple|reweighted (field: loss_mode)")
        try:
            fam.FamilySpec(fam.Family(self.family), self.dim)
        except ValueError as exc:
            raise ConfigError(f"unknown family {self.family!r} (field: family)") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def apply_overrides(self, overrides: dict) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown override path {key!r}")
                node = node[part]
            leaf = parts[-1]
            if leaf not in node:
                if node is d:  # top-level keys are closed; nested dicts are open
                    raise ConfigError(f"unknown override key {key!r}")
                node[leaf] = _parse_literal(value)
            else:
                node[leaf] = _coerce_like(node[leaf], value)
        return ExperimentConfig.from_dict(d)

    def content_hash(self) -> str:
        # The hash identifies the computation; where outputs land is not
        # part of it.
        d = self.to_dict()
        d.pop("output_dir", None)
        return sha256_of(d)


def _coerce_like(old, text):
    if isinstance(old, bool):
        return text in ("1", "true", "True")
    if isinstance(old, int) and not isinstance(old, bool):
        return int(text)
    if isinstance(old, float):
        return float(text)
    if isinstance(old, (list, tuple)):
        return json.loads(text) if isinstance(text, str) else list(text)
    if isinstance(old, dict):
        return json.loads(text) if isinstance(text, str) else dict(text)
    return text


def _parse_literal(text):
    if not isinstance(text, str):
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def save_checkpoint(path: str, net: nnet.PredictorNet, opt: nnet.OptimState,
                    schedule_hash: str, normalizer_hash: str,
                    config: dict | None = None) -> None:
    """Versioned npz blob written atomically (temp file + rename)."""
    meta = {
        "version": 1,
        "net_config": {"in_dim": net.config.in_dim, "out_dim": net.config.out_dim,
                       "hidden": list(net.config.hidden),
                       "time_embed_dim": net.config.time_embed_dim},
        "opt": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                "eps": opt.eps, "lr_decay": opt.lr_decay,
                "clip_norm": opt.clip_norm, "ema_decay": opt.ema_decay,
                "step": opt.step},
        "schedule_hash": schedule_hash,
        "normalizer_hash": normalizer_hash,
        "config": config or {},
    }
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    arrays.update({f"m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"v/{k}": v for k, v in opt.v.items()})
    arrays.update({f"ema/{k}": v for k, v in opt.ema.items()})
    import io as _io
    buf = _io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str, expect_schedule_hash: str | None = None,
                    expect_normalizer_hash: str | None = None):
    """Returns (net, opt, meta); raises CheckpointMismatchError on bad hashes."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["meta"]).decode())
        if expect_schedule_hash and meta["schedule_hash"] != expect_schedule_hash:
            raise CheckpointMismatchError("checkpoint was trained on a different schedule")
        if expect_normalizer_hash and meta["normalizer_hash"] != expect_normalizer_hash:
            raise CheckpointMismatchError("checkpoint normalizer does not match")
        cfg = nnet.NetConfig(in_dim=meta["net_config"]["in_dim"],
                             out_dim=meta["net_config"]["out_dim"],
                             hidden=tuple(meta["net_config"]["hidden"]),
                             time_embed_dim=meta["net_config"]["time_embed_dim"])
        net = nnet.PredictorNet(cfg, np.random.default_rng(0))
        opt = nnet.OptimState(**{k: v for k, v in meta["opt"].items() if k != "step"})
        opt.step = meta["opt"]["step"]
        net.params = {k.split("/", 1)[1]: blob[k] for k in blob.files
                      if k.startswith("param/")}
        opt.m = {k.split("/", 1)[1]: blob[k] for k in blob.files if k.startswith("m/")}
        opt.v = {k.split("/", 1)[1]: blob[k] for k in blob.files if k.startswith("v/")}
        opt.ema = {k.split("/", 1)[1]: blob[k] for k in blob.files if k.startswith("ema/")}
    return net, opt, meta
