"""Noise schedule, diffusion loss, geometry-guided attention loss and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError, ParameterError

NORM_EPS = 1e-8
DEFAULT_LAMBDA = 3.0

__all__ = [
    "NoiseSchedule", "LossBreakdown", "add_noise", "diffusion_loss", "normalize_map",
    "attention_loss", "total_loss", "DEFAULT_LAMBDA",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step cumulative signal level ``alpha_bar``, noise scale and loss weight."""

    alpha_bar: np.ndarray
    weight: np.ndarray
    kind: str = "cosine"

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008) -> "NoiseSchedule":
        # alpha_bar(t) = f(t) / f(0), so step 0 is noise-free
        steps = np.arange(T, dtype=np.float64)
        f = np.cos(((steps / T) + s) / (1 + s) * np.pi / 2) ** 2
        f0 = np.cos(s / (1 + s) * np.pi / 2) ** 2
        return cls(f / f0, np.ones(T), "cosine")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(np.cumprod(1.0 - betas), np.ones(T), "linear")

    @classmethod
    def make(cls, kind: str = "cosine", T: int = 1000) -> "NoiseSchedule":
        if kind == "cosine":
            return cls.cosine(T)
        if kind == "linear":
            return cls.linear(T)
        raise ParameterError(f"unknown schedule {kind!r}")

    def check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T) or np.any(t != np.floor(t)):
            raise ParameterError(f"timestep outside [0, {self.T})")
        return t.astype(np.int64)


def _per_sample(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    v = values[t]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def add_noise(x0, eps, t, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(alpha_bar_t) * x0 + sigma_t * eps``; ``t`` is a scalar or one step per sample."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    t = schedule.check(t)
    a = _per_sample(np.sqrt(schedule.alpha_bar), t, x0.ndim)
    s = _per_sample(schedule.sigma, t, x0.ndim)
    return (a * x0 + s * eps).astype(x0.dtype)


def diffusion_loss(eps_hat: Tensor, eps, t, schedule: NoiseSchedule) -> Tensor:
    """Weighted squared error, averaged over elements and then over the batch.

    With a scalar ``t`` the inputs are treated as one sample.
    """
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else ag.tensor(eps_hat)
    eps = np.asarray(eps, dtype=eps_hat.dtype)
    if eps_hat.shape != eps.shape:
        raise DimensionError(f"prediction {eps_hat.shape} and target {eps.shape} differ")
    t = schedule.check(t)
    diff = eps_hat - eps
    sq = diff * diff
    if t.ndim == 0:
        return sq.mean() * float(schedule.weight[t])
    per = sq.reshape(len(t), -1).mean(axis=1)
    w = schedule.weight[t].astype(eps_hat.dtype)
    return (per * w).mean()


def normalize_map(m) -> Tensor:
    """Divide each trailing 2-d map by its maximum; maps with max <= 1e-8 become 0."""
    m = m if isinstance(m, Tensor) else ag.tensor(m)
    if np.any(m.data < 0):
        raise ContractError("normalize_map needs non-negative input")
    lead = m.shape[:-2]
    flat = m.reshape(*lead, -1)
    peak = ag.amax(flat, axis=-1, keepdims=True)
    keep = (peak.data > NORM_EPS).astype(m.dtype)
    # maps below the threshold divide by 1 and are then zeroed by ``keep``
    safe = peak * keep + (1.0 - keep)
    out = flat / safe * keep
    return out.reshape(m.shape)


def _mse_map(a: Tensor, m) -> Tensor:
    m = np.asarray(m, dtype=a.dtype)
    if a.shape[-2:] != m.shape[-2:]:
        raise DimensionError(f"attention grid {a.shape[-2:]} vs mask grid {m.shape[-2:]}")
    if m.ndim < a.ndim:
        # broadcast masks over extra axes such as per-head maps
        m = m.reshape(m.shape[:1] + (1,) * (a.ndim - m.ndim) + m.shape[1:]) if m.ndim > 2 else m
    diff = a - m
    n = a.shape[-1] * a.shape[-2]
    per_map = (diff * diff).sum(axis=(-2, -1)) * (1.0 / n)
    return per_map.mean()


def attention_loss(a0, m0, a1, m1, normalize: bool = True):
    """Return ``(l_attn0, l_attn1, l_attn)``.

    Each term is the squared error summed over the ``H_s x W_s`` grid and
    divided by ``N = H_s * W_s``, averaged over any leading batch axes.
    ``normalize`` rescales each attention map to peak 1 first.
    """
    a0 = a0 if isinstance(a0, Tensor) else ag.tensor(a0)
    a1 = a1 if isinstance(a1, Tensor) else ag.tensor(a1)
    if a0.shape != a1.shape:
        raise DimensionError(f"attention grids differ: {a0.shape} vs {a1.shape}")
    if normalize:
        a0, a1 = normalize_map(a0), normalize_map(a1)
    l0 = _mse_map(a0, m0)
    l1 = _mse_map(a1, m1)
    return l0, l1, l0 + l1


def total_loss(l_diff, l_attn, lam: float = DEFAULT_LAMBDA):
    if lam < 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")
    return l_diff + l_attn * float(lam)


@dataclass
class LossBreakdown:
    l_diff: float
    l_attn0: float
    l_attn1: float
    l_attn: float
    total: float
    lambda_used: float

    FIELDS = ("l_diff", "l_attn0", "l_attn1", "l_attn", "total")

    def row(self, step: int) -> list:
        return [step] + [getattr(self, f) for f in self.FIELDS]
