"""Order book ingestion: LOBSTER-format parsing, 1 Hz snapshot sampling, and a
seedable synthetic book generator for desk-scale experiments.

Prices are integers in units of 1e-4 currency (the LOBSTER convention: $100.01
is stored as 1000100) and volumes are integer share counts. A "tick" is the
minimum price increment in those units (100 = one cent).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .arrayio import read_f32, read_f64, read_json, write_f32, write_f64, write_json
from .errors import ConfigError, DataError, ParseError

PRICE_SCALE = 10_000  # integer price units per unit of currency
DEFAULT_TICK = 100  # one cent
DEFAULT_SESSION_OPEN = 34200.0  # 09:30
DEFAULT_SESSION_CLOSE = 57600.0  # 16:00


@dataclass
class LobSnapshot:
    """One book state: top-K prices and volumes per side, best level first."""

    timestamp: float
    ask_price: np.ndarray
    ask_volume: np.ndarray
    bid_price: np.ndarray
    bid_volume: np.ndarray

    @property
    def k(self) -> int:
        return len(self.ask_price)

    def validate(self, require_depth: bool = True) -> None:
        """Raise DataError unless the book is well formed.

        With require_depth, level-1 volumes must be positive (real-data rule);
        decoded synthetic books may legitimately carry zero volume.
        """
        if not (len(self.ask_price) == len(self.ask_volume) == len(self.bid_price) == len(self.bid_volume)):
            raise DataError("snapshot level arrays have mismatched lengths")
        if np.any(np.diff(self.ask_price) <= 0):
            raise DataError("ask prices not strictly increasing")
        if np.any(np.diff(self.bid_price) >= 0):
            raise DataError("bid prices not strictly decreasing")
        if self.ask_price[0] <= self.bid_price[0]:
            raise DataError("crossed or locked book")
        if np.any(self.ask_volume < 0) or np.any(self.bid_volume < 0):
            raise DataError("negative volume")
        if require_depth and (self.ask_volume[0] <= 0 or self.bid_volume[0] <= 0):
            raise DataError("empty level-1 volume")


@dataclass
class SnapshotSeries:
    """A 1 Hz (or raw event-time) sequence of book states for one symbol-day."""

    symbol: str
    date: str
    k: int
    session_open: float
    session_close: float
    timestamps: np.ndarray  # (n,) float64 seconds since midnight
    ask_price: np.ndarray  # (n, K) float64
    ask_volume: np.ndarray
    bid_price: np.ndarray
    bid_volume: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def snapshot(self, i: int) -> LobSnapshot:
        return LobSnapshot(
            timestamp=float(self.timestamps[i]),
            ask_price=self.ask_price[i].copy(),
            ask_volume=self.ask_volume[i].copy(),
            bid_price=self.bid_price[i].copy(),
            bid_volume=self.bid_volume[i].copy(),
        )

    def validate(self, one_hz: bool = True) -> None:
        if len(self) == 0:
            raise DataError("empty series")
        gaps = np.diff(self.timestamps)
        if np.any(gaps <= 0):
            raise DataError("timestamps not strictly increasing")
        if one_hz and not np.allclose(gaps, 1.0):
            raise DataError("series is not sampled at 1 Hz")
        for i in range(len(self)):
            self.snapshot(i).validate()


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic book generator.

    drift/vol are the per-step mean/std of the mid-price walk in price units;
    base_depth is the level-1 target depth in shares, thinned by depth_scale
    per level; imbalance_bias in (-1, 1) tilts standing volume toward the ask
    side. Slow latent modulators give windows persistent, distinguishable
    regimes, which is what makes regime conditioning learnable downstream.
    """

    seed: int
    n_seconds: int
    drift: float = 0.0
    vol: float = 60.0
    base_depth: float = 200.0
    depth_scale: float = 0.85
    imbalance_bias: float = 0.0
    tick: int = DEFAULT_TICK

    def validate(self) -> None:
        if self.n_seconds < 2:
            raise ConfigError("n_seconds must be at least 2")
        if self.n_seconds > int(DEFAULT_SESSION_CLOSE - DEFAULT_SESSION_OPEN):
            raise ConfigError("n_seconds exceeds one trading session")
        if self.vol <= 0:
            raise ConfigError("vol must be positive")
        if self.base_depth <= 0:
            raise ConfigError("base_depth must be positive")
        if not (-1.0 < self.imbalance_bias < 1.0):
            raise ConfigError("imbalance_bias must lie in (-1, 1)")
        if self.tick < 2 or self.tick % 2 != 0:
            raise ConfigError("tick must be a positive even integer of price units")


@dataclass
class ParseResult:
    """Event-time snapshots plus counters for rejected rows."""

    snapshots: list[LobSnapshot] = field(default_factory=list)
    dropped_crossed: int = 0
    dropped_invalid: int = 0

    def __len__(self) -> int:
        return len(self.snapshots)


def _open_text(source: IO[bytes] | IO[str] | str | Path):
    if isinstance(source, (str, Path)):
        return open(source, "r", newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def parse_lobster(
    orderbook: IO[bytes] | IO[str] | str | Path,
    messages: IO[bytes] | IO[str] | str | Path | None = None,
    k: int = 10,
) -> ParseResult:
    """Parse a LOBSTER orderbook CSV (4K columns, level-interleaved
    ask_price, ask_size, bid_price, bid_size) into event-time snapshots.

    Timestamps come from column 1 of the row-aligned message file when given,
    else from the row index. Crossed/locked rows and rows violating book
    invariants are dropped and counted; malformed rows raise ParseError.
    """
    ts_list: list[float] | None = None
    if messages is not None:
        msg_handle, close_msg = _open_text(messages)
        try:
            ts_list = []
            for row_no, row in enumerate(csv.reader(msg_handle), start=1):
                if not row:
                    continue
                try:
                    ts_list.append(float(row[0]))
                except ValueError as exc:
                    raise ParseError(f"message row {row_no}: non-numeric timestamp") from exc
        finally:
            if close_msg:
                msg_handle.close()

    result = ParseResult()
    handle, close_book = _open_text(orderbook)
    try:
        n_rows = 0
        for row_no, row in enumerate(csv.reader(handle), start=1):
            if not row:
                continue
            n_rows += 1
            if len(row) != 4 * k:
                raise ParseError(f"orderbook row {row_no}: expected {4 * k} columns, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(f"orderbook row {row_no}: non-numeric value") from exc
            cols = np.array(values).reshape(k, 4)
            if ts_list is not None:
                if n_rows > len(ts_list):
                    raise ParseError("message file has fewer rows than orderbook file")
                ts = ts_list[n_rows - 1]
            else:
                ts = float(n_rows - 1)
            snap = LobSnapshot(
                timestamp=ts,
                ask_price=cols[:, 0],
                ask_volume=cols[:, 1],
                bid_price=cols[:, 2],
                bid_volume=cols[:, 3],
            )
            if snap.ask_price[0] <= snap.bid_price[0]:
                result.dropped_crossed += 1
                continue
            try:
                snap.validate()
            except DataError:
                result.dropped_invalid += 1
                continue
            result.snapshots.append(snap)
    finally:
        if close_book:
            handle.close()

    if n_rows == 0:
        raise ParseError("no rows")
    if ts_list is not None and len(ts_list) != n_rows:
        raise ParseError("message file has more rows than orderbook file")
    return result


def sample_one_hz(
    events: Sequence[LobSnapshot],
    session_open: float = DEFAULT_SESSION_OPEN,
    session_close: float = DEFAULT_SESSION_CLOSE,
    symbol: str = "UNKNOWN",
    date: str = "1970-01-01",
) -> SnapshotSeries:
    """Resample event-time snapshots to one per second by carrying the last
    event forward. The series starts at the first second containing (or
    preceded by) an event; the first partial second is backfilled from the
    first event inside it.
    """
    if session_open >= session_close:
        raise ConfigError("session_open must precede session_close")
    if not events:
        raise DataError("empty session")
    ts = np.array([e.timestamp for e in events], dtype=np.float64)
    if np.any(np.diff(ts) < 0):
        raise DataError("events are not timestamp-sorted")
    first = ts[0]
    if first >= session_close:
        raise DataError("empty session")
    start = max(int(session_open), int(math.floor(first)))
    seconds = np.arange(start, int(session_close), dtype=np.float64)
    if seconds.size == 0:
        raise DataError("empty session")
    idx = np.searchsorted(ts, seconds, side="right") - 1
    idx = np.clip(idx, 0, len(events) - 1)
    k = events[0].k
    n = seconds.size
    ap = np.empty((n, k))
    av = np.empty((n, k))
    bp = np.empty((n, k))
    bv = np.empty((n, k))
    for row, j in enumerate(idx):
        e = events[j]
        ap[row] = e.ask_price
        av[row] = e.ask_volume
        bp[row] = e.bid_price
        bv[row] = e.bid_volume
    return SnapshotSeries(
        symbol=symbol,
        date=date,
        k=k,
        session_open=float(session_open),
        session_close=float(session_close),
        timestamps=seconds,
        ask_price=ap,
        ask_volume=av,
        bid_price=bp,
        bid_volume=bv,
    )


def _ou_path(rng: np.random.Generator, n: int, std: float, corr_time: float) -> np.ndarray:
    """Discrete Ornstein-Uhlenbeck path with the given stationary std."""
    theta = 1.0 / corr_time
    a = 1.0 - theta
    sigma = std * math.sqrt(1.0 - a * a)
    eps = rng.standard_normal(n)
    path = np.empty(n)
    x = rng.standard_normal() * std
    for i in range(n):
        x = a * x + sigma * eps[i]
        path[i] = x
    return path


def synthesize_lob(
    config: SynthConfig,
    symbol: str = "SYNTH",
    date: str = "2024-01-02",
    session_open: float = DEFAULT_SESSION_OPEN,
) -> SnapshotSeries:
    """Generate a 1 Hz synthetic snapshot series.

    The mid price follows a Gaussian random walk (mean drift, std vol) snapped
    to the half-tick grid; spreads are 1+Poisson ticks; level depths are drawn
    around base_depth * depth_scale**(k-1) with the ask share set by the
    imbalance bias. Slow OU modulators on drift, volatility, depth and
    imbalance give individual windows persistent regimes. Deterministic under
    a fixed seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_seconds
    tick = config.tick
    half = tick // 2
    k = 10

    drift_mod = _ou_path(rng, n, std=0.8 * config.vol, corr_time=64.0)
    vol_mod = np.exp(_ou_path(rng, n, std=0.35, corr_time=96.0))
    depth_mod = np.exp(_ou_path(rng, n, std=0.35, corr_time=96.0))
    imb_mod = _ou_path(rng, n, std=0.25, corr_time=96.0)

    steps = config.drift + drift_mod + config.vol * vol_mod * rng.standard_normal(n)
    base_mid = 100.0 * PRICE_SCALE
    mid_raw = base_mid + np.cumsum(steps)
    mid_raw = np.maximum(mid_raw, 100.0 * tick)
    mid = np.round(mid_raw / half) * half

    spread_ticks = 1 + rng.poisson(0.4 * vol_mod)
    bid1 = np.floor((mid - spread_ticks * tick / 2.0) / tick) * tick
    ask1 = bid1 + spread_ticks * tick

    ask_gaps = 1 + rng.poisson(0.7, size=(n, k - 1))
    bid_gaps = 1 + rng.poisson(0.7, size=(n, k - 1))
    ap = np.empty((n, k))
    bp = np.empty((n, k))
    ap[:, 0] = ask1
    bp[:, 0] = bid1
    ap[:, 1:] = ask1[:, None] + np.cumsum(ask_gaps, axis=1) * tick
    bp[:, 1:] = bid1[:, None] - np.cumsum(bid_gaps, axis=1) * tick
    bp = np.maximum(bp, tick)

    level_depth = config.base_depth * config.depth_scale ** np.arange(k)
    ask_share = (1.0 + np.clip(config.imbalance_bias + imb_mod, -0.95, 0.95)) / 2.0
    ask_rate = depth_mod[:, None] * level_depth[None, :] * ask_share[:, None]
    bid_rate = depth_mod[:, None] * level_depth[None, :] * (1.0 - ask_share[:, None])
    av = rng.poisson(ask_rate).astype(np.float64)
    bv = rng.poisson(bid_rate).astype(np.float64)
    av[:, 0] = np.maximum(av[:, 0], 1)
    bv[:, 0] = np.maximum(bv[:, 0], 1)

    series = SnapshotSeries(
        symbol=symbol,
        date=date,
        k=k,
        session_open=float(session_open),
        session_close=DEFAULT_SESSION_CLOSE,
        timestamps=session_open + np.arange(n, dtype=np.float64),
        ask_price=ap,
        ask_volume=av,
        bid_price=bp,
        bid_volume=bv,
    )
    return series


def write_lobster_csv(
    series: SnapshotSeries,
    orderbook_path: str | Path,
    message_path: str | Path | None = None,
) -> None:
    """Write a series back to LOBSTER-format CSVs (inverse of parse_lobster)."""
    with open(orderbook_path, "w", newline="") as f:
        writer = csv.writer(f)
        for i in range(len(series)):
            row: list[int] = []
            for lvl in range(series.k):
                row.extend(
                    [
                        int(round(series.ask_price[i, lvl])),
                        int(round(series.ask_volume[i, lvl])),
                        int(round(series.bid_price[i, lvl])),
                        int(round(series.bid_volume[i, lvl])),
                    ]
                )
            writer.writerow(row)
    if message_path is not None:
        with open(message_path, "w", newline="") as f:
            writer = csv.writer(f)
            for ts in series.timestamps:
                writer.writerow([repr(float(ts)), 0, 0, 0, 0, 0])


def save_series(series: SnapshotSeries, directory: str | Path) -> None:
    """Persist a series as meta.json + timestamps.f64le + snapshots.f32le."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(
        directory / "meta.json",
        {
            "symbol": series.symbol,
            "date": series.date,
            "k": series.k,
            "session_open": series.session_open,
            "session_close": series.session_close,
            "count": len(series),
        },
    )
    write_f64(directory / "timestamps.f64le", series.timestamps)
    block = np.concatenate(
        [series.ask_price, series.ask_volume, series.bid_price, series.bid_volume], axis=1
    )
    write_f32(directory / "snapshots.f32le", block)


def load_series(directory: str | Path) -> SnapshotSeries:
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    n = int(meta["count"])
    k = int(meta["k"])
    ts = read_f64(directory / "timestamps.f64le", (n,))
    block = read_f32(directory / "snapshots.f32le", (n, 4 * k)).astype(np.float64)
    return SnapshotSeries(
        symbol=meta["symbol"],
        date=meta["date"],
        k=k,
        session_open=float(meta["session_open"]),
        session_close=float(meta["session_close"]),
        timestamps=ts,
        ask_price=block[:, 0:k],
        ask_volume=block[:, k : 2 * k],
        bid_price=block[:, 2 * k : 3 * k],
        bid_volume=block[:, 3 * k : 4 * k],
    )
