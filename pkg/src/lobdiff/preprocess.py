"""Feature representation for book snapshots and its inverse.

Per encoded step the layout is [price features (2K), volume features (2K),
time-of-day (2)]:

  price: [r, da_2..da_K, ds, db_2..db_K]   one-step mid move, ask gaps,
                                           spread, bid gaps (price units)
  volume: [va_1..va_K, vb_1..vb_K]         sqrt-scaled, capped volumes
  tod:    [sin, cos]                       session-phase angle

Encoded step u pairs the return m[u+1]-m[u] with the cross-sectional state of
snapshot u+1, so a window's future decodes exactly from the anchor mid (the
last history snapshot) by cumulative summation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arrayio import read_f32, read_json, write_f32, write_json
from .errors import ConfigError, DataError
from .ingest import DEFAULT_TICK, LobSnapshot, SnapshotSeries
from .regimes import RegimeVector, compute_regime

TAU = 32  # history and future lengths, fixed for all experiments


@dataclass(frozen=True)
class PreprocessStats:
    """Normalization constants fitted on the training split only."""

    v_cap: float
    c_scale: float
    tick: int = DEFAULT_TICK
    regime_mean: tuple[float, float, float, float] | None = None
    regime_std: tuple[float, float, float, float] | None = None

    @property
    def v_feat_max(self) -> float:
        """Upper bound of the scaled volume feature: sqrt(v_cap) / c_scale."""
        return math.sqrt(self.v_cap) / self.c_scale

    def regime_stats(self) -> tuple[np.ndarray, np.ndarray]:
        if self.regime_mean is None or self.regime_std is None:
            raise ConfigError("regime statistics not fitted; run fit_regime_stats first")
        return np.asarray(self.regime_mean), np.asarray(self.regime_std)

    def to_dict(self) -> dict:
        return {
            "v_cap": self.v_cap,
            "c_scale": self.c_scale,
            "tick": self.tick,
            "regime_mean": list(self.regime_mean) if self.regime_mean else None,
            "regime_std": list(self.regime_std) if self.regime_std else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessStats":
        return cls(
            v_cap=float(d["v_cap"]),
            c_scale=float(d["c_scale"]),
            tick=int(d["tick"]),
            regime_mean=tuple(d["regime_mean"]) if d.get("regime_mean") else None,
            regime_std=tuple(d["regime_std"]) if d.get("regime_std") else None,
        )

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "PreprocessStats":
        return cls.from_dict(read_json(path))


def fit_volume_stats(series_list: Iterable[SnapshotSeries], tick: int = DEFAULT_TICK) -> PreprocessStats:
    """Cap at the pooled 99th-percentile volume; scale so features land in [0, 1]."""
    pools = []
    for series in series_list:
        pools.append(series.ask_volume.ravel())
        pools.append(series.bid_volume.ravel())
    if not pools:
        raise DataError("no series provided")
    volumes = np.concatenate(pools)
    v_cap = float(max(np.percentile(volumes, 99.0), 1.0))
    return PreprocessStats(v_cap=v_cap, c_scale=math.sqrt(v_cap), tick=tick)


def fit_regime_stats(stats: PreprocessStats, regimes_flat: np.ndarray) -> PreprocessStats:
    """Attach z-score constants per component group (liq/imb pooled per step)."""
    tau = (regimes_flat.shape[1] - 2) // 2
    groups = [
        regimes_flat[:, 0],
        regimes_flat[:, 1],
        regimes_flat[:, 2 : 2 + tau].ravel(),
        regimes_flat[:, 2 + tau :].ravel(),
    ]
    means = tuple(float(np.mean(g)) for g in groups)
    # a degenerate (constant) component carries no signal; unit std keeps
    # normalization finite instead of exploding
    stds = tuple(float(s) if (s := np.std(g)) > 1e-12 else 1.0 for g in groups)
    return replace(stats, regime_mean=means, regime_std=stds)


def mid_price(snapshot: LobSnapshot) -> float:
    a1 = float(snapshot.ask_price[0])
    b1 = float(snapshot.bid_price[0])
    if a1 <= b1:
        raise DataError("crossed or locked book has no mid price")
    return (a1 + b1) / 2.0


def mids(series: SnapshotSeries) -> np.ndarray:
    return (series.ask_price[:, 0] + series.bid_price[:, 0]) / 2.0


def feat_dim(k: int) -> int:
    return 4 * k + 2


def encode_series(series: SnapshotSeries, stats: PreprocessStats) -> np.ndarray:
    """Encode a series into (n-1, 4K+2) float32 feature steps.

    The final raw snapshot contributes only its mid (to the last return), so
    output length is input length minus one.
    """
    n = len(series)
    if n < 2:
        raise DataError("series must contain at least 2 snapshots")
    k = series.k
    m = mids(series)
    r = np.diff(m)

    ap = series.ask_price[1:]
    bp = series.bid_price[1:]
    av = series.ask_volume[1:]
    bv = series.bid_volume[1:]

    out = np.empty((n - 1, feat_dim(k)), dtype=np.float32)
    out[:, 0] = r
    out[:, 1:k] = np.diff(ap, axis=1)
    out[:, k] = ap[:, 0] - bp[:, 0]
    out[:, k + 1 : 2 * k] = -np.diff(bp, axis=1)
    out[:, 2 * k : 3 * k] = np.sqrt(np.minimum(av, stats.v_cap)) / stats.c_scale
    out[:, 3 * k : 4 * k] = np.sqrt(np.minimum(bv, stats.v_cap)) / stats.c_scale

    span = series.session_close - series.session_open
    angle = 2.0 * math.pi * (series.timestamps[1:] - series.session_open) / span
    out[:, 4 * k] = np.sin(angle)
    out[:, 4 * k + 1] = np.cos(angle)
    return out


def decode_future(
    features: np.ndarray,
    anchor_mid: float,
    stats: PreprocessStats,
    timestamps: np.ndarray | None = None,
) -> tuple[list[LobSnapshot], dict[str, int]]:
    """Invert the feature representation into book snapshots.

    Mids accumulate from the anchor with returns snapped to the half-tick
    grid; spreads and level gaps are snapped to the tick grid and clamped to
    at least one tick so the book stays strictly ordered; volume features are
    clipped into their valid range before squaring back to shares. Returns
    the snapshots plus a count of each clamp applied.
    """
    features = np.asarray(features, dtype=np.float64)
    tau = features.shape[0]
    k = (features.shape[1] - 2) // 4 if features.shape[1] % 4 == 2 else features.shape[1] // 4
    tick = float(stats.tick)
    half = tick / 2.0

    r = np.round(features[:, 0] / half) * half
    mid = anchor_mid + np.cumsum(r)

    spread = np.round(features[:, k] / tick) * tick
    gaps_a = np.round(features[:, 1:k] / tick) * tick
    gaps_b = np.round(features[:, k + 1 : 2 * k] / tick) * tick
    clamps = {
        "spread": int(np.sum(spread < tick)),
        "gap": int(np.sum(gaps_a < tick) + np.sum(gaps_b < tick)),
    }
    spread = np.maximum(spread, tick)
    gaps_a = np.maximum(gaps_a, tick)
    gaps_b = np.maximum(gaps_b, tick)

    ap = np.empty((tau, k))
    bp = np.empty((tau, k))
    ap[:, 0] = mid + spread / 2.0
    bp[:, 0] = mid - spread / 2.0
    if k > 1:
        ap[:, 1:] = ap[:, :1] + np.cumsum(gaps_a, axis=1)
        bp[:, 1:] = bp[:, :1] - np.cumsum(gaps_b, axis=1)

    v_feat = features[:, 2 * k : 4 * k]
    clamps["volume_low"] = int(np.sum(v_feat < 0.0))
    clamps["volume_high"] = int(np.sum(v_feat > stats.v_feat_max))
    v_feat = np.clip(v_feat, 0.0, stats.v_feat_max)
    vols = np.round((v_feat * stats.c_scale) ** 2)
    av = vols[:, :k]
    bv = vols[:, k:]

    if timestamps is None:
        timestamps = np.arange(tau, dtype=np.float64)
    snapshots = [
        LobSnapshot(
            timestamp=float(timestamps[i]),
            ask_price=ap[i],
            ask_volume=av[i],
            bid_price=bp[i],
            bid_volume=bv[i],
        )
        for i in range(tau)
    ]
    return snapshots, clamps


@dataclass
class WindowDataset:
    """Paired (history, future) windows with anchors and raw-unit regimes.

    history/future: (n, tau, 4K+2) float32 feature steps
    anchors:        (n,) mid price of the last history snapshot
    regimes:        (n, 2 + 2*tau) raw [trend, vol, liq_1.., imb_1..]
    """

    k: int
    tau: int
    history: np.ndarray
    future: np.ndarray
    anchors: np.ndarray
    regimes: np.ndarray
    symbol: str = "UNKNOWN"
    date: str = "1970-01-01"

    def __len__(self) -> int:
        return self.history.shape[0]

    def regime_vector(self, i: int) -> RegimeVector:
        return RegimeVector.from_flat(self.regimes[i])

    def subset(self, indices: np.ndarray | Sequence[int]) -> "WindowDataset":
        idx = np.asarray(indices)
        return WindowDataset(
            k=self.k,
            tau=self.tau,
            history=self.history[idx],
            future=self.future[idx],
            anchors=self.anchors[idx],
            regimes=self.regimes[idx],
            symbol=self.symbol,
            date=self.date,
        )

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_json(
            directory / "meta.json",
            {
                "k": self.k,
                "tau": self.tau,
                "count": len(self),
                "symbol": self.symbol,
                "date": self.date,
            },
        )
        write_f32(directory / "history.f32le", self.history)
        write_f32(directory / "future.f32le", self.future)
        write_f32(directory / "anchors.f32le", self.anchors)
        write_f32(directory / "regimes.f32le", self.regimes)

    @classmethod
    def load(cls, directory: str | Path) -> "WindowDataset":
        directory = Path(directory)
        meta = read_json(directory / "meta.json")
        n = int(meta["count"])
        k = int(meta["k"])
        tau = int(meta["tau"])
        return cls(
            k=k,
            tau=tau,
            history=read_f32(directory / "history.f32le", (n, tau, feat_dim(k))),
            future=read_f32(directory / "future.f32le", (n, tau, feat_dim(k))),
            anchors=read_f32(directory / "anchors.f32le", (n,)).astype(np.float64),
            regimes=read_f32(directory / "regimes.f32le", (n, 2 + 2 * tau)).astype(np.float64),
            symbol=meta.get("symbol", "UNKNOWN"),
            date=meta.get("date", "1970-01-01"),
        )


def make_windows(
    encoded: np.ndarray,
    raw: SnapshotSeries,
    stride: int = 1,
    tau: int = TAU,
) -> WindowDataset:
    """Slide a 2*tau window over the encoded steps and split it history/future.

    The anchor mid belongs to the last history snapshot; the regime is
    recomputed from the raw future slice, not from the encoded features.
    """
    if stride < 1:
        raise ConfigError("stride must be positive")
    n_enc = encoded.shape[0]
    k = raw.k
    span = 2 * tau
    if n_enc < span:
        warnings.warn(f"series too short for windows ({n_enc} < {span}); returning empty dataset")
        return WindowDataset(
            k=k,
            tau=tau,
            history=np.empty((0, tau, feat_dim(k)), dtype=np.float32),
            future=np.empty((0, tau, feat_dim(k)), dtype=np.float32),
            anchors=np.empty((0,)),
            regimes=np.empty((0, 2 + 2 * tau)),
            symbol=raw.symbol,
            date=raw.date,
        )
    starts = np.arange(0, n_enc - span + 1, stride)
    n_win = len(starts)
    m = mids(raw)

    history = np.empty((n_win, tau, feat_dim(k)), dtype=np.float32)
    future = np.empty((n_win, tau, feat_dim(k)), dtype=np.float32)
    anchors = np.empty(n_win)
    regimes = np.empty((n_win, 2 + 2 * tau))
    for i, s in enumerate(starts):
        history[i] = encoded[s : s + tau]
        future[i] = encoded[s + tau : s + span]
        anchors[i] = m[s + tau]
        reg = compute_regime(
            m[s + tau : s + span + 1],
            raw.ask_volume[s + tau + 1 : s + span + 1],
            raw.bid_volume[s + tau + 1 : s + span + 1],
        )
        regimes[i] = reg.as_flat()
    return WindowDataset(
        k=k,
        tau=tau,
        history=history,
        future=future,
        anchors=anchors,
        regimes=regimes,
        symbol=raw.symbol,
        date=raw.date,
    )


def pack_grid(flat: np.ndarray, k: int) -> np.ndarray:
    """(n, tau, >=4K) per-step features -> (n, 2K, 2, tau) level/channel grid.

    Channel 0 carries the price features, channel 1 the volume features; row
    l pairs price feature l with volume feature l.
    """
    price = flat[..., : 2 * k]
    vol = flat[..., 2 * k : 4 * k]
    grid = np.stack([price, vol], axis=-1)  # (n, tau, 2K, 2)
    return np.ascontiguousarray(np.moveaxis(grid, -3, -1))  # (n, 2K, 2, tau)


def unpack_grid(grid: np.ndarray) -> np.ndarray:
    """(n, 2K, 2, tau) grid -> (n, tau, 4K) per-step [price, volume] features."""
    arr = np.moveaxis(grid, -1, -3)  # (n, tau, 2K, 2)
    price = arr[..., 0]
    vol = arr[..., 1]
    return np.ascontiguousarray(np.concatenate([price, vol], axis=-1))


def to_model_space(grid: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    """Scale a (., 2K, 2, tau) grid to roughly unit range for the denoiser:
    price features in ticks, volume features mapped to [-1, 1]."""
    out = np.array(grid, dtype=np.float32, copy=True)
    out[..., 0, :] = out[..., 0, :] / stats.tick
    out[..., 1, :] = 2.0 * out[..., 1, :] / stats.v_feat_max - 1.0
    return out


def from_model_space(grid: np.ndarray, stats: PreprocessStats) -> np.ndarray:
    out = np.array(grid, dtype=np.float64, copy=True)
    out[..., 0, :] = out[..., 0, :] * stats.tick
    out[..., 1, :] = (out[..., 1, :] + 1.0) * stats.v_feat_max / 2.0
    return out
