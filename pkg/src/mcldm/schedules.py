"""Variance schedules and the per-timestep loss weights derived from them.

Timesteps are 1-based throughout: ``t`` runs over ``1..T`` and the stored
vectors are indexed with ``t - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._exceptions import ConfigurationError

__all__ = [
    "Schedule",
    "P2Config",
    "make_schedule",
    "snr",
    "p2_weight",
    "vlb_weight",
    "lambda_simple",
    "weight_profile",
]

_COSINE_OFFSET = 0.008
_BETA_CLAMP = (1e-8, 0.999)


@dataclass(frozen=True)
class Schedule:
    """Per-step variances ``beta``, ``alpha = 1 - beta`` and their cumulative product."""

    kind: str
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def _index(self, t) -> int:
        t_int = int(t)
        if t_int != t or not 1 <= t_int <= self.T:
            raise IndexError(f"timestep {t!r} outside [1, {self.T}]")
        return t_int - 1

    def alpha_bar_at(self, t) -> float:
        """``alpha_bar`` at ``t`` with the convention ``alpha_bar(0) = 1``."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bar[self._index(t)])

    def snr_table(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist()}

    @classmethod
    def from_betas(cls, beta, kind: str = "custom") -> "Schedule":
        beta = np.asarray(beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigurationError("beta: expected a non-empty 1-D vector")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigurationError("beta: every entry must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(kind=kind, beta=beta, alpha=alpha, alpha_bar=alpha_bar)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls.from_betas(d["beta"], kind=d.get("kind", "custom"))


@dataclass(frozen=True)
class P2Config:
    """Perception-prioritized weighting ``1 / (k + SNR)^gamma``."""

    k: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if not (self.k > 0 and math.isfinite(self.k)):
            raise ConfigurationError(f"k must be positive, got {self.k!r}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma!r}")


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> Schedule:
    """Build a ``linear`` or ``cosine`` schedule with ``T`` steps.

    ``beta_start``/``beta_end`` are only used by the linear family.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigurationError(f"T must be an integer >= 1, got {T!r}")
    if kind == "linear":
        if not 0 < beta_start < 1:
            raise ConfigurationError(f"beta_start must lie in (0, 1), got {beta_start!r}")
        if not 0 < beta_end < 1:
            raise ConfigurationError(f"beta_end must lie in (0, 1), got {beta_end!r}")
        if beta_start > beta_end:
            raise ConfigurationError(
                f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + _COSINE_OFFSET) / (1 + _COSINE_OFFSET) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], *_BETA_CLAMP)
    else:
        raise ConfigurationError(f"kind must be 'linear' or 'cosine', got {kind!r}")
    return Schedule.from_betas(beta, kind=kind)


def snr(s: Schedule, t) -> float:
    """Signal-to-noise ratio ``alpha_bar / (1 - alpha_bar)`` at step ``t``."""
    ab = s.alpha_bar[s._index(t)]
    return float(ab / (1.0 - ab))


def _p2_from_snr(snr_value, cfg: P2Config):
    return 1.0 / (cfg.k + snr_value) ** cfg.gamma


def p2_weight(s: Schedule, t, cfg: P2Config = P2Config()) -> float:
    return float(_p2_from_snr(snr(s, t), cfg))


def vlb_weight(s: Schedule, t) -> float:
    """Coefficient ``beta / (2 alpha (1 - alpha_bar))`` of the exact bound term.

    ``t = 0`` is rejected: the stored vectors have no entry for it.
    """
    i = s._index(t)
    return float(s.beta[i] / (2.0 * s.alpha[i] * (1.0 - s.alpha_bar[i])))


def lambda_simple(s: Schedule, t) -> float:
    i = s._index(t)
    return float(2.0 * s.alpha[i] * (1.0 - s.alpha_bar[i]) / s.beta[i])


def weight_profile(s: Schedule, cfg: P2Config = P2Config()) -> dict[str, np.ndarray]:
    """Column table with one row per timestep.

    Columns: ``t, beta, alpha_bar, snr, vlb, lambda, lambda_p2``.
    """
    t = np.arange(1, s.T + 1)
    snr_col = s.snr_table()
    one_minus = 1.0 - s.alpha_bar
    vlb = s.beta / (2.0 * s.alpha * one_minus)
    lam = 2.0 * s.alpha * one_minus / s.beta
    return {
        "t": t,
        "beta": s.beta.copy(),
        "alpha_bar": s.alpha_bar.copy(),
        "snr": snr_col,
        "vlb": vlb,
        "lambda": lam,
        "lambda_p2": lam * _p2_from_snr(snr_col, cfg),
    }
