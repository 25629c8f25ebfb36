"""Future-regime functionals: trend, volatility, liquidity and order-flow
imbalance computed from a raw future window, plus their z-score normalization
and the tail-quantile targets used for counterfactual interventions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, DataError

if TYPE_CHECKING:
    from .ingest import LobSnapshot
    from .preprocess import PreprocessStats

COMPONENTS = ("trend", "vol", "liq", "imb")


@dataclass
class RegimeVector:
    """Condition vector for one window: scalar trend and volatility, per-step
    liquidity (shares) and imbalance (in [-1, 1]) series of length tau."""

    trend: float
    vol: float
    liq: np.ndarray
    imb: np.ndarray

    @property
    def tau(self) -> int:
        return len(self.liq)

    def as_flat(self) -> np.ndarray:
        """Layout [trend, vol, liq_1..tau, imb_1..tau]."""
        return np.concatenate([[self.trend, self.vol], self.liq, self.imb])

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "RegimeVector":
        tau = (len(flat) - 2) // 2
        return cls(
            trend=float(flat[0]),
            vol=float(flat[1]),
            liq=np.asarray(flat[2 : 2 + tau], dtype=np.float64),
            imb=np.asarray(flat[2 + tau :], dtype=np.float64),
        )


def trend(returns: np.ndarray) -> float:
    """Cumulative mid-price return: the plain sum of one-step returns."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise DataError("trend of empty return series")
    return float(np.sum(returns))


def volatility(returns: np.ndarray) -> float:
    """Population (divide-by-n) standard deviation of one-step returns."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise DataError("volatility of empty return series")
    mean_sq = float(np.mean(returns**2))
    mean = float(np.mean(returns))
    return float(np.sqrt(max(mean_sq - mean * mean, 0.0)))


def liquidity(snapshot: "LobSnapshot") -> float:
    """Total standing volume across all levels of both sides."""
    return float(np.sum(snapshot.ask_volume) + np.sum(snapshot.bid_volume))


def imbalance(snapshot: "LobSnapshot") -> float:
    """Normalized ask-minus-bid volume asymmetry; 0 for an empty book."""
    ask = float(np.sum(snapshot.ask_volume))
    bid = float(np.sum(snapshot.bid_volume))
    total = ask + bid
    if total <= 0:
        return 0.0
    return (ask - bid) / total


def liquidity_series(ask_volume: np.ndarray, bid_volume: np.ndarray) -> np.ndarray:
    """Per-step total volume for (n, K) volume arrays."""
    return np.sum(ask_volume, axis=1) + np.sum(bid_volume, axis=1)


def imbalance_series(ask_volume: np.ndarray, bid_volume: np.ndarray) -> np.ndarray:
    ask = np.sum(ask_volume, axis=1)
    bid = np.sum(bid_volume, axis=1)
    total = ask + bid
    out = np.zeros_like(ask, dtype=np.float64)
    nz = total > 0
    out[nz] = (ask[nz] - bid[nz]) / total[nz]
    return out


def compute_regime(
    mids: np.ndarray, ask_volume: np.ndarray, bid_volume: np.ndarray
) -> RegimeVector:
    """Regime of a future window given its tau+1 boundary mids (anchor first)
    and the (tau, K) volume arrays of the tau future snapshots."""
    mids = np.asarray(mids, dtype=np.float64)
    returns = np.diff(mids)
    if len(returns) != len(ask_volume):
        raise DataError("mids must have one more entry than the volume arrays")
    return RegimeVector(
        trend=trend(returns),
        vol=volatility(returns),
        liq=liquidity_series(ask_volume, bid_volume),
        imb=imbalance_series(ask_volume, bid_volume),
    )


def normalize_regime(regime: RegimeVector, stats: "PreprocessStats") -> RegimeVector:
    """Z-score each component group with training-split statistics."""
    mean, std = stats.regime_stats()
    return RegimeVector(
        trend=(regime.trend - mean[0]) / std[0],
        vol=(regime.vol - mean[1]) / std[1],
        liq=(regime.liq - mean[2]) / std[2],
        imb=(regime.imb - mean[3]) / std[3],
    )


def denormalize_regime(regime: RegimeVector, stats: "PreprocessStats") -> RegimeVector:
    mean, std = stats.regime_stats()
    return RegimeVector(
        trend=regime.trend * std[0] + mean[0],
        vol=regime.vol * std[1] + mean[1],
        liq=regime.liq * std[2] + mean[2],
        imb=regime.imb * std[3] + mean[3],
    )


def normalize_regime_flat(flat: np.ndarray, stats: "PreprocessStats") -> np.ndarray:
    """Vectorized normalize for (n, 2 + 2*tau) stacked regime arrays."""
    flat = np.asarray(flat, dtype=np.float64)
    tau = (flat.shape[1] - 2) // 2
    mean, std = stats.regime_stats()
    out = np.empty_like(flat)
    out[:, 0] = (flat[:, 0] - mean[0]) / std[0]
    out[:, 1] = (flat[:, 1] - mean[1]) / std[1]
    out[:, 2 : 2 + tau] = (flat[:, 2 : 2 + tau] - mean[2]) / std[2]
    out[:, 2 + tau :] = (flat[:, 2 + tau :] - mean[3]) / std[3]
    return out


def component_summary(flat: np.ndarray, component: str) -> np.ndarray:
    """Scalar summary per window for ranking: the value itself for trend/vol,
    the per-step mean for liq/imb."""
    tau = (flat.shape[1] - 2) // 2
    if component == "trend":
        return flat[:, 0]
    if component == "vol":
        return flat[:, 1]
    if component == "liq":
        return np.mean(flat[:, 2 : 2 + tau], axis=1)
    if component == "imb":
        return np.mean(flat[:, 2 + tau :], axis=1)
    raise ConfigError(f"unknown regime component: {component}")


def regime_quantile_targets(
    training_regimes: np.ndarray | Sequence[RegimeVector],
    component: str,
    side: str,
    q: float = 0.2,
) -> float | np.ndarray:
    """Counterfactual intervention value for one component: the mean of that
    component over the top-q (side='high') or bottom-q (side='low') fraction
    of training windows. Scalar for trend/vol; a per-step mean profile for
    liq/imb (windows ranked by their per-step mean).
    """
    if not (0.0 < q <= 0.5):
        raise ConfigError("q must lie in (0, 0.5]")
    if side not in ("high", "low"):
        raise ConfigError("side must be 'high' or 'low'")
    if component not in COMPONENTS:
        raise ConfigError(f"unknown regime component: {component}")
    if not isinstance(training_regimes, np.ndarray):
        training_regimes = np.stack([r.as_flat() for r in training_regimes])
    n = training_regimes.shape[0]
    n_tail = int(np.floor(q * n))
    if n_tail < 10:
        raise DataError(f"only {n_tail} windows in the {side} tail; need at least 10")
    summary = component_summary(training_regimes, component)
    order = np.argsort(summary, kind="stable")
    chosen = order[-n_tail:] if side == "high" else order[:n_tail]
    tau = (training_regimes.shape[1] - 2) // 2
    if component == "trend":
        return float(np.mean(training_regimes[chosen, 0]))
    if component == "vol":
        return float(np.mean(training_regimes[chosen, 1]))
    if component == "liq":
        return np.mean(training_regimes[np.ix_(chosen, np.arange(2, 2 + tau))], axis=0)
    return np.mean(training_regimes[np.ix_(chosen, np.arange(2 + tau, 2 + 2 * tau))], axis=0)
