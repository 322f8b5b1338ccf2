"""Compact x0-predictor: an MLP over (normalized tail statistic, time
embedding) with swish activations and residual hidden blocks, trained with
Adam, global-norm gradient clipping and an EMA shadow of the parameters.

Everything is float64 and single-threaded-deterministic: a fixed seed yields
a bit-identical training trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import GraphError


@dataclass(frozen=True)
class NetConfig:
    in_dim: int
    out_dim: int
    hidden: tuple = (512, 512, 512)
    time_embed_dim: int = 32

    def __post_init__(self):
        if self.time_embed_dim % 2:
            raise ValueError("time embedding dimension must be even")


class PredictorNet:
    """MLP parameters plus the pure forward function over them."""

    def __init__(self, config: NetConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        widths = [config.in_dim + config.time_embed_dim, *config.hidden]
        for i in range(len(config.hidden)):
            fan_in = widths[i]
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-uniform
            self.params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, widths[i + 1]))
            self.params[f"b{i}"] = np.zeros(widths[i + 1])
        # Zero-initialized output layer: the net starts as the zero function.
        self.params["w_out"] = np.zeros((widths[-1], config.out_dim))
        self.params["b_out"] = np.zeros(config.out_dim)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the timestep with a base-10^4 frequency ladder.

    Supports scalar or array t; the squared norm is dim/2 exactly.
    """
    if dim % 2:
        raise ValueError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / half)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def forward(net: PredictorNet, g_normalized, t_embed, params=None):
    """Network output for a batch; returns a Var when params carry Vars."""
    p = net.params if params is None else params
    h = ad.concat([g_normalized, t_embed], axis=-1)
    n_hidden = len(net.config.hidden)
    for i in range(n_hidden):
        pre = ad.matmul(h, p[f"w{i}"]) + p[f"b{i}"]
        act = ad.swish(pre)
        # Residual pass-through once the width stops changing.
        h = act + h if _same_width(act, h) else act
    out = ad.matmul(h, p["w_out"]) + p["b_out"]
    val = ad.value_of(out)
    if not np.all(np.isfinite(val)):
        bad = np.argwhere(~np.isfinite(val))[0]
        raise GraphError(f"non-finite network output at index {tuple(bad)}")
    return out


def _same_width(a, b) -> bool:
    return ad.value_of(a).shape[-1] == ad.value_of(b).shape[-1]


def trainable_params(net: PredictorNet) -> dict[str, ad.Var]:
    return {k: ad.Var(v, requires_grad=True) for k, v in net.params.items()}


def backward(loss: ad.Var, params: dict[str, ad.Var]) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss for every parameter."""
    if not isinstance(loss, ad.Var):
        raise GraphError("loss was not recorded on the tape")
    loss.backward()
    grads = {}
    for name, var in params.items():
        grads[name] = np.zeros_like(var.value) if var.grad is None else var.grad
    return grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """Adam moments, exponential lr decay, clipping and EMA shadow weights."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0            # multiplicative per step (e.g. 0.999995)
    clip_norm: float | None = 1.0
    ema_decay: float = 0.9999
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)

    def init(self, params: dict[str, np.ndarray]) -> "OptimState":
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.ema = {k: p.copy() for k, p in params.items()}
        return self

    @property
    def current_lr(self) -> float:
        return self.lr * self.lr_decay ** self.step


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float):
    """Rescale so the global norm is at most clip_norm; returns (grads, norm)."""
    norm = global_norm(grads)
    if clip_norm is not None and norm > clip_norm and norm > 0:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(opt: OptimState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> bool:
    """One bias-corrected Adam update in place; rejects non-finite gradients.

    Returns True when the step was applied. On rejection the step counter is
    not advanced and the parameters are untouched.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        return False
    grads, _ = clip_gradients(grads, opt.clip_norm)
    lr = opt.current_lr
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for k, g in grads.items():
        opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        m_hat = opt.m[k] / bc1
        v_hat = opt.v[k] / bc2
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    ema_update(opt, params)
    return True


def ema_update(opt: OptimState, params: dict[str, np.ndarray]) -> None:
    d = opt.ema_decay
    for k, p in params.items():
        opt.ema[k] = d * opt.ema[k] + (1.0 - d) * p
