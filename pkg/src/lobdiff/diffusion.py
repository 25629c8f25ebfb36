"""Variance-preserving diffusion core: discrete noise schedule, forward
perturbation kernel, noise-prediction loss, classifier-free guidance and the
ancestral reverse-time sampler.

Levels are 0-based indices into the discrete schedule; continuous diffusion
time t in (0, 1] maps to level ceil(t*N) - 1, i.e. t = (level+1)/N. The
continuous noise rate is piecewise constant with per-step integral equal to
the discrete beta of the active level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_N_LEVELS = 100
# Linear schedule endpoints for 100 levels. These keep the terminal signal
# fraction alpha_bar[N-1] below 5%, which the sampler's standard-normal start
# requires; they are the classic thousand-step DDPM endpoints rescaled to
# preserve the same continuous-time noise budget.
DEFAULT_BETA_MIN = 1e-3
DEFAULT_BETA_MAX = 0.2


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", 1.0 - self.beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(self.alpha))

    @property
    def n(self) -> int:
        return len(self.beta)

    def level_for_time(self, t: float) -> int:
        """Continuous time in (0, 1] -> 0-based level index."""
        if not (0.0 < t <= 1.0):
            raise DataError(f"diffusion time {t} outside (0, 1]")
        return min(int(np.ceil(t * self.n)) - 1, self.n - 1)

    def time_for_level(self, level: int) -> float:
        return (level + 1) / self.n

    def beta_cont(self, t: float) -> float:
        """Continuous-time noise rate: N * beta[level(t)], so that the rate
        integrated over one step of size 1/N equals the discrete beta."""
        return float(self.beta[self.level_for_time(t)]) * self.n

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "beta_min": float(self.beta[0]),
            "beta_max": float(self.beta[-1]),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return build_schedule(int(d["n"]), float(d["beta_min"]), float(d["beta_max"]))


def build_schedule(
    n: int = DEFAULT_N_LEVELS,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> DiffusionSchedule:
    """Linear beta grid over n discrete levels."""
    if n < 1:
        raise ConfigError("schedule needs at least one level")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError("need 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, n)
    return DiffusionSchedule(beta=beta)


def forward_perturb(
    x0: np.ndarray,
    level: int | np.ndarray,
    z: np.ndarray,
    schedule: DiffusionSchedule,
) -> np.ndarray:
    """Closed-form noising: sqrt(abar)*x0 + sqrt(1-abar)*z.

    level may be a scalar or a per-sample array broadcast over the leading
    axis of x0.
    """
    if x0.shape != z.shape:
        raise DataError("x0 and z shapes differ")
    levels = np.asarray(level)
    if np.any(levels < 0) or np.any(levels >= schedule.n):
        raise DataError("noise level index out of range")
    ab = schedule.alpha_bar[levels]
    if ab.ndim > 0:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def dsm_loss(eps_pred: np.ndarray, z: np.ndarray) -> float:
    """Mean squared error between predicted and injected noise."""
    if eps_pred.shape != z.shape:
        raise DataError("eps_pred and z shapes differ")
    diff = np.asarray(eps_pred, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    return float(np.mean(diff**2))


def dsm_loss_grad(eps_pred: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Gradient of dsm_loss with respect to eps_pred."""
    if eps_pred.shape != z.shape:
        raise DataError("eps_pred and z shapes differ")
    diff = np.asarray(eps_pred, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    return 2.0 * diff / diff.size


def eps_to_score(
    eps: np.ndarray, level: int | np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """Noise prediction -> score: s = -eps / sqrt(1 - alpha_bar)."""
    ab = schedule.alpha_bar[np.asarray(level)]
    if np.ndim(ab) > 0:
        ab = ab.reshape(np.shape(ab) + (1,) * (eps.ndim - np.ndim(ab)))
    return -eps / np.sqrt(1.0 - ab)


def guided_score(s_cond: np.ndarray, s_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free combination (1+w)*conditional - w*unconditional."""
    if np.shape(s_cond) != np.shape(s_uncond):
        raise DataError("conditional and unconditional score shapes differ")
    return (1.0 + w) * s_cond - w * s_uncond


class ScoreField(Protocol):
    """Evaluates the (possibly conditional) score at a noised state.

    Must return an array of x's shape and be deterministic given (x, t, cond);
    cond=None requests the unconditional pathway.
    """

    def evaluate(self, x: np.ndarray, t: float, cond: Any | None) -> np.ndarray: ...


def ancestral_sample(
    score: ScoreField,
    schedule: DiffusionSchedule,
    cond: Any | None,
    w: float,
    rng: np.random.Generator,
    shape: tuple[int, ...],
) -> np.ndarray:
    """Reverse-time integration from pure noise over the schedule's N levels.

    Each step evaluates the conditional and unconditional score once, applies
    classifier-free guidance with weight w, and takes the update
    x <- x + (beta/2)*x + beta*s + sqrt(beta)*z, where beta is the active
    level's discrete noise rate (the continuous rate times the step size).
    """
    x = rng.standard_normal(shape)
    n = schedule.n
    for i in range(n, 0, -1):
        t = i / n
        b = float(schedule.beta[i - 1])
        s_c = score.evaluate(x, t, cond)
        s_u = score.evaluate(x, t, None)
        s = guided_score(s_c, s_u, w)
        z = rng.standard_normal(shape)
        x = x + (0.5 * b * x + b * s) + np.sqrt(b) * z
    return x
