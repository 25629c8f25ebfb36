"""Three-tier evaluation: realism under observed regimes, counterfactual
validity under tail interventions, and downstream usefulness of counterfactual
samples — plus the distribution distances and stylized-fact statistics they
are built on.

Feature pooling convention: generated grids are decoded to legal books first,
then re-encoded, so clamping affects both sides symmetrically; price features
are pooled in price units and volumes in shares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats as scipy_stats

from .arrayio import write_json
from .diffusion import ancestral_sample
from .errors import ConfigError, DataError
from .network import Checkpoint, ConditionBundle, DenoiserScore
from .preprocess import (
    PreprocessStats,
    WindowDataset,
    decode_future,
    from_model_space,
    pack_grid,
    to_model_space,
    unpack_grid,
)
from .regimes import COMPONENTS, component_summary, normalize_regime_flat, regime_quantile_targets

EPS_SMOOTH = 1e-10


# ---------------------------------------------------------------------------
# distribution distances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistanceQuad:
    ks: float
    wasserstein: float
    kl: float
    js: float

    def to_dict(self) -> dict:
        return {"ks": self.ks, "wasserstein": self.wasserstein, "kl": self.kl, "js": self.js}

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ks, self.wasserstein, self.kl, self.js)


def ks_distance(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |ECDF_a - ECDF_b| over
    the pooled sample points."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise DataError("KS distance of an empty sample")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def wasserstein_1d(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Order-1 Wasserstein distance via the quantile coupling (the integral
    of |CDF_a - CDF_b|), exact for unequal sample sizes."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise DataError("Wasserstein distance of an empty sample")
    support = np.sort(np.concatenate([a, b]))
    widths = np.diff(support)
    cdf_a = np.searchsorted(a, support[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def kl_js_from_hist(p: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    """KL(p||q) and JS divergence in nats after additive smoothing."""
    p = np.asarray(p, dtype=np.float64) + EPS_SMOOTH
    q = np.asarray(q, dtype=np.float64) + EPS_SMOOTH
    p = p / p.sum()
    q = q / q.sum()
    kl = float(np.sum(p * np.log(p / q)))
    m = 0.5 * (p + q)
    js = float(0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m)))
    return kl, js


def kl_js(sample_a: np.ndarray, sample_b: np.ndarray, bins: int = 100) -> tuple[float, float]:
    """Histogram KL/JS over the shared pooled range."""
    if bins < 2:
        raise ConfigError("need at least 2 bins")
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pa, _ = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return kl_js_from_hist(pa / a.size, pb / b.size)


def feature_distances(sample_a: np.ndarray, sample_b: np.ndarray, bins: int = 100) -> DistanceQuad:
    kl, js = kl_js(sample_a, sample_b, bins)
    return DistanceQuad(
        ks=ks_distance(sample_a, sample_b),
        wasserstein=wasserstein_1d(sample_a, sample_b),
        kl=kl,
        js=js,
    )


# ---------------------------------------------------------------------------
# decoded-window feature extraction
# ---------------------------------------------------------------------------


@dataclass
class DecodedWindows:
    """Per-window decoded books plus the pooled evaluation features."""

    mids: np.ndarray  # (n, tau) decoded mid prices
    anchors: np.ndarray  # (n,)
    price_feats: np.ndarray  # (n, tau, 2K) re-encoded price features
    volumes: np.ndarray  # (n, tau, 2K) shares, [ask_1..K, bid_1..K]
    spreads: np.ndarray  # (n, tau)
    clamps: dict[str, int]

    @property
    def returns(self) -> np.ndarray:
        """(n, tau) one-step mid moves, anchored at the last history mid."""
        full = np.concatenate([self.anchors[:, None], self.mids], axis=1)
        return np.diff(full, axis=1)

    def price_pool(self) -> np.ndarray:
        return self.price_feats.ravel()

    def volume_pool(self) -> np.ndarray:
        return self.volumes.ravel()

    def regime_values(self, component: str) -> np.ndarray:
        """Realized regime values: per-window scalars for trend/vol, pooled
        per-step values for liq/imb."""
        if component == "trend":
            return self.returns.sum(axis=1)
        if component == "vol":
            r = self.returns
            return np.sqrt(np.maximum(np.mean(r**2, axis=1) - np.mean(r, axis=1) ** 2, 0.0))
        ask = self.volumes[:, :, : self.volumes.shape[2] // 2].sum(axis=2)
        bid = self.volumes[:, :, self.volumes.shape[2] // 2 :].sum(axis=2)
        if component == "liq":
            return (ask + bid).ravel()
        if component == "imb":
            total = ask + bid
            out = np.zeros_like(total)
            nz = total > 0
            out[nz] = (ask[nz] - bid[nz]) / total[nz]
            return out.ravel()
        raise ConfigError(f"unknown regime component: {component}")

    def regime_window_summaries(self, component: str) -> np.ndarray:
        """One scalar per window (per-step components summarized by mean)."""
        if component in ("trend", "vol"):
            return self.regime_values(component)
        per_step = self.regime_values(component).reshape(self.mids.shape)
        return per_step.mean(axis=1)


def decode_windows(
    grids: np.ndarray, anchors: np.ndarray, stats: PreprocessStats
) -> DecodedWindows:
    """Decode (n, 2K, 2, tau) price-unit grids into books and re-extract the
    evaluation features from the decoded (legal) books."""
    n, levels, _, tau = grids.shape
    k = levels // 2
    mids_arr = np.empty((n, tau))
    price = np.empty((n, tau, levels))
    vols = np.empty((n, tau, levels))
    spreads = np.empty((n, tau))
    clamp_total: dict[str, int] = {}
    flat = unpack_grid(grids)  # (n, tau, 4K)
    for i in range(n):
        snaps, clamps = decode_future(flat[i], float(anchors[i]), stats)
        for key, val in clamps.items():
            clamp_total[key] = clamp_total.get(key, 0) + val
        for j, snap in enumerate(snaps):
            mids_arr[i, j] = (snap.ask_price[0] + snap.bid_price[0]) / 2.0
            spreads[i, j] = snap.ask_price[0] - snap.bid_price[0]
            price[i, j, 1:k] = np.diff(snap.ask_price)
            price[i, j, k + 1 :] = -np.diff(snap.bid_price)
            price[i, j, k] = spreads[i, j]
            vols[i, j, :k] = snap.ask_volume
            vols[i, j, k:] = snap.bid_volume
    full = np.concatenate([np.asarray(anchors)[:, None], mids_arr], axis=1)
    price[:, :, 0] = np.diff(full, axis=1)
    return DecodedWindows(
        mids=mids_arr, anchors=np.asarray(anchors, dtype=np.float64),
        price_feats=price, volumes=vols, spreads=spreads, clamps=clamp_total,
    )


# ---------------------------------------------------------------------------
# stylized facts
# ---------------------------------------------------------------------------


@dataclass
class StylizedFacts:
    horizons: tuple[int, ...]
    return_hists: dict[int, dict[str, np.ndarray]]  # h -> {centers, real, gen}
    spread_hist: dict[str, np.ndarray]
    acf_lags: np.ndarray
    acf_real: np.ndarray
    acf_gen: np.ndarray
    vol_diff_corr_real: np.ndarray  # (2K, 2K)
    vol_diff_corr_gen: np.ndarray
    volume_level_hists: list[dict[str, np.ndarray]]  # per level {centers, real, gen}

    def save_csv(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for h, hist in self.return_hists.items():
            _write_curve_csv(directory / f"returns_h{h}.csv", "bin_center", hist)
        _write_curve_csv(directory / "spread.csv", "bin_center", self.spread_hist)
        with open(directory / "abs_return_acf.csv", "w") as f:
            f.write("lag,real,gen\n")
            for lag, r, g in zip(self.acf_lags, self.acf_real, self.acf_gen):
                f.write(f"{lag},{r!r},{g!r}\n")
        np.savetxt(directory / "volume_diff_corr_real.csv", self.vol_diff_corr_real, delimiter=",")
        np.savetxt(directory / "volume_diff_corr_gen.csv", self.vol_diff_corr_gen, delimiter=",")
        with open(directory / "volume_level_hists.csv", "w") as f:
            f.write("level,bin_center,real,gen\n")
            for lvl, hist in enumerate(self.volume_level_hists):
                for c, r, g in zip(hist["centers"], hist["real"], hist["gen"]):
                    f.write(f"{lvl},{c!r},{r!r},{g!r}\n")


def _write_curve_csv(path: Path, x_name: str, hist: dict[str, np.ndarray]) -> None:
    with open(path, "w") as f:
        f.write(f"{x_name},real,gen\n")
        for c, r, g in zip(hist["centers"], hist["real"], hist["gen"]):
            f.write(f"{c!r},{r!r},{g!r}\n")


def _shared_hist(a: np.ndarray, b: np.ndarray, bins: int) -> dict[str, np.ndarray]:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pa, edges = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return {
        "centers": 0.5 * (edges[:-1] + edges[1:]),
        "real": pa / max(a.size, 1),
        "gen": pb / max(b.size, 1),
    }


def acf_abs_returns(mid_windows: np.ndarray, lags: int = 20) -> np.ndarray:
    """Autocorrelation of absolute one-step returns, computed per window and
    averaged; windows with degenerate variance are skipped."""
    out = np.zeros(lags)
    counts = np.zeros(lags)
    for mids_w in mid_windows:
        r = np.abs(np.diff(mids_w))
        if r.size < 3:
            continue
        for lag in range(1, lags + 1):
            if r.size - lag < 2:
                continue
            x = r[:-lag]
            y = r[lag:]
            sx = x.std()
            sy = y.std()
            if sx < 1e-12 or sy < 1e-12:
                continue
            out[lag - 1] += float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))
            counts[lag - 1] += 1
    nz = counts > 0
    out[nz] = out[nz] / counts[nz]
    return out


def volume_diff_correlation(volume_windows: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix of per-level volume first differences,
    pooled across windows. Degenerate columns correlate as 0 (diagonal 1)."""
    diffs = np.diff(volume_windows, axis=1)  # (n, tau-1, 2K)
    stacked = diffs.reshape(-1, diffs.shape[2])
    std = stacked.std(axis=0)
    ok = std > 1e-12
    corr = np.zeros((stacked.shape[1], stacked.shape[1]))
    if np.any(ok):
        sub = np.corrcoef(stacked[:, ok], rowvar=False)
        corr[np.ix_(ok, ok)] = np.atleast_2d(sub)
    np.fill_diagonal(corr, 1.0)
    return corr


def stylized_facts(
    real: DecodedWindows,
    gen: DecodedWindows,
    horizons: Sequence[int] = (1, 5, 10),
    bins: int = 50,
    acf_lags: int = 20,
) -> StylizedFacts:
    real_full = np.concatenate([real.anchors[:, None], real.mids], axis=1)
    gen_full = np.concatenate([gen.anchors[:, None], gen.mids], axis=1)
    return_hists = {}
    for h in horizons:
        ra = (real_full[:, h:] - real_full[:, :-h]).ravel()
        rg = (gen_full[:, h:] - gen_full[:, :-h]).ravel()
        return_hists[h] = _shared_hist(ra, rg, bins)
    spread_hist = _shared_hist(real.spreads.ravel(), gen.spreads.ravel(), bins)
    lags = np.arange(1, acf_lags + 1)
    levels = real.volumes.shape[2]
    level_hists = []
    for lvl in range(levels):
        level_hists.append(
            _shared_hist(real.volumes[:, :, lvl].ravel(), gen.volumes[:, :, lvl].ravel(), bins)
        )
    return StylizedFacts(
        horizons=tuple(horizons),
        return_hists=return_hists,
        spread_hist=spread_hist,
        acf_lags=lags,
        acf_real=acf_abs_returns(real_full, acf_lags),
        acf_gen=acf_abs_returns(gen_full, acf_lags),
        vol_diff_corr_real=volume_diff_correlation(real.volumes),
        vol_diff_corr_gen=volume_diff_correlation(gen.volumes),
        volume_level_hists=level_hists,
    )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

GenerateFn = Callable[[WindowDataset, np.ndarray, np.ndarray, int], np.ndarray]
"""(dataset, indices, conditioning regimes flat, seed) -> (n, 2K, 2, tau)
price-unit future grids."""


class ModelGenerator:
    """Samples futures from a trained checkpoint under given regimes."""

    def __init__(self, checkpoint: Checkpoint, guidance: float = 1.0, batch_size: int = 256):
        self.checkpoint = checkpoint
        self.guidance = guidance
        self.batch_size = batch_size
        self.model = checkpoint.build_model(use_ema=True)
        self.mode = "controlled" if (checkpoint.config.use_control and checkpoint.stage == 2) else "base"
        self.score = DenoiserScore(self.model, checkpoint.schedule, self.mode)

    def __call__(
        self,
        dataset: WindowDataset,
        indices: np.ndarray,
        regimes_flat: np.ndarray,
        seed: int,
    ) -> np.ndarray:
        import torch

        stats = self.checkpoint.stats
        k = dataset.k
        hist_grid = to_model_space(pack_grid(dataset.history[indices], k), stats)
        hist = np.concatenate(
            [unpack_grid(hist_grid), dataset.history[indices][..., 4 * k :]], axis=-1
        )
        normed = normalize_regime_flat(regimes_flat, stats)
        tau = dataset.tau
        rng = np.random.default_rng(seed)
        out = np.empty((len(indices), 2 * k, 2, tau))
        for start in range(0, len(indices), self.batch_size):
            sl = slice(start, min(start + self.batch_size, len(indices)))
            b = sl.stop - sl.start
            bundle = ConditionBundle(
                history=torch.from_numpy(np.ascontiguousarray(hist[sl], dtype=np.float32)),
                liq=torch.from_numpy(np.ascontiguousarray(normed[sl, 2 : 2 + tau], dtype=np.float32)),
                imb=torch.from_numpy(np.ascontiguousarray(normed[sl, 2 + tau :], dtype=np.float32)),
                tod=torch.from_numpy(
                    np.ascontiguousarray(dataset.future[indices[sl]][..., 4 * k :], dtype=np.float32)
                ),
                trend=torch.from_numpy(np.ascontiguousarray(normed[sl, 0], dtype=np.float32)),
                vol=torch.from_numpy(np.ascontiguousarray(normed[sl, 1], dtype=np.float32)),
                present=torch.ones(b, dtype=torch.bool),
            )
            x = ancestral_sample(
                self.score, self.checkpoint.schedule, bundle, self.guidance, rng,
                shape=(b, 2 * k, 2, tau),
            )
            out[sl] = from_model_space(x, stats)
        return out


class PassthroughGenerator:
    """Returns the dataset's own futures; the protocol-plumbing oracle."""

    def __call__(self, dataset, indices, regimes_flat, seed):
        return pack_grid(dataset.future[indices], dataset.k).astype(np.float64)


def _as_generator(model) -> GenerateFn:
    if isinstance(model, Checkpoint):
        return ModelGenerator(model)
    return model


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    scenario: str
    groups: dict[str, DistanceQuad]
    regimes: dict[str, DistanceQuad] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    facts: StylizedFacts | None = None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "groups": {g: q.to_dict() for g, q in self.groups.items()},
            "regimes": {g: q.to_dict() for g, q in self.regimes.items()},
            "extras": self.extras,
        }

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_json(directory / "report.json", self.to_dict())
        with open(directory / "table.csv", "w") as f:
            f.write("group,ks,wasserstein,kl,js\n")
            for name, quad in {**self.groups, **{f"regime_{r}": q for r, q in self.regimes.items()}}.items():
                ks, w, kl, js = quad.as_tuple()
                f.write(f"{name},{ks!r},{w!r},{kl!r},{js!r}\n")
        if self.facts is not None:
            self.facts.save_csv(directory / "facts")


# ---------------------------------------------------------------------------
# tier 1: controllable realism
# ---------------------------------------------------------------------------


def realism_eval(
    model: Checkpoint | GenerateFn,
    test: WindowDataset,
    stats: PreprocessStats | None = None,
    w: float = 1.0,
    seed: int = 0,
    max_windows: int | None = None,
    bins: int = 100,
    with_facts: bool = True,
) -> EvalReport:
    """Generate one future per test window under its observed regime and
    compare pooled feature and regime distributions against the real data."""
    if isinstance(model, Checkpoint):
        stats = model.stats
        generate = ModelGenerator(model, guidance=w)
    else:
        if stats is None:
            raise ConfigError("stats required when passing a raw generator")
        generate = model
    if len(test) == 0:
        raise DataError("empty test dataset")
    indices = np.arange(len(test))
    if max_windows is not None and max_windows < len(indices):
        indices = np.linspace(0, len(test) - 1, max_windows).astype(int)

    gen_grids = generate(test, indices, test.regimes[indices], seed)
    real_grids = pack_grid(test.future[indices], test.k).astype(np.float64)
    gen_dec = decode_windows(gen_grids, test.anchors[indices], stats)
    real_dec = decode_windows(real_grids, test.anchors[indices], stats)

    groups = {
        "price": feature_distances(real_dec.price_pool(), gen_dec.price_pool(), bins),
        "volume": feature_distances(real_dec.volume_pool(), gen_dec.volume_pool(), bins),
    }
    regimes = {
        comp: feature_distances(
            real_dec.regime_values(comp), gen_dec.regime_values(comp), bins
        )
        for comp in COMPONENTS
    }
    facts = stylized_facts(real_dec, gen_dec) if with_facts else None
    return EvalReport(
        scenario="realism",
        groups=groups,
        regimes=regimes,
        extras={
            "n_windows": int(len(indices)),
            "guidance": w,
            "gen_clamps": gen_dec.clamps,
        },
        facts=facts,
    )


# ---------------------------------------------------------------------------
# tier 2: counterfactual validity
# ---------------------------------------------------------------------------


@dataclass
class CounterfactualResult:
    component: str
    q: float
    target_high: float | np.ndarray
    target_low: float | np.ndarray
    high: EvalReport
    low: EvalReport
    mean_high: float
    mean_low: float
    p_value: float

    def to_dict(self) -> dict:
        def _t(v):
            return float(np.mean(v))

        return {
            "component": self.component,
            "q": self.q,
            "target_high": _t(self.target_high),
            "target_low": _t(self.target_low),
            "mean_high": self.mean_high,
            "mean_low": self.mean_low,
            "direction": self.mean_high - self.mean_low,
            "p_value": self.p_value,
            "high": self.high.to_dict(),
            "low": self.low.to_dict(),
        }


def inject_component(regimes_flat: np.ndarray, component: str, value) -> np.ndarray:
    out = regimes_flat.copy()
    tau = (out.shape[1] - 2) // 2
    if component == "trend":
        out[:, 0] = value
    elif component == "vol":
        out[:, 1] = value
    elif component == "liq":
        out[:, 2 : 2 + tau] = np.asarray(value)[None, :]
    elif component == "imb":
        out[:, 2 + tau :] = np.asarray(value)[None, :]
    else:
        raise ConfigError(f"unknown regime component: {component}")
    return out


def counterfactual_eval(
    model: Checkpoint | GenerateFn,
    test: WindowDataset,
    train_regimes: np.ndarray,
    component: str,
    q: float = 0.2,
    n_per_side: int = 200,
    stats: PreprocessStats | None = None,
    w: float = 1.0,
    seed: int = 0,
    bins: int = 100,
) -> CounterfactualResult:
    """Generate under high/low tail interventions on one regime component
    (others held at observed values) and compare each pool against the real
    test windows whose realized component falls in the matching tail
    (thresholds from the training split)."""
    if isinstance(model, Checkpoint):
        stats = model.stats
        generate = ModelGenerator(model, guidance=w)
    else:
        if stats is None:
            raise ConfigError("stats required when passing a raw generator")
        generate = model
    target_high = regime_quantile_targets(train_regimes, component, "high", q)
    target_low = regime_quantile_targets(train_regimes, component, "low", q)

    idx = np.resize(np.arange(len(test)), n_per_side)
    base = test.regimes[idx]
    gen_high = generate(test, idx, inject_component(base, component, target_high), seed)
    gen_low = generate(test, idx, inject_component(base, component, target_low), seed)
    dec_high = decode_windows(gen_high, test.anchors[idx], stats)
    dec_low = decode_windows(gen_low, test.anchors[idx], stats)

    train_summary = component_summary(train_regimes, component)
    test_summary = component_summary(test.regimes, component)
    hi_thr = np.quantile(train_summary, 1.0 - q)
    lo_thr = np.quantile(train_summary, q)
    hi_idx = np.flatnonzero(test_summary >= hi_thr)
    lo_idx = np.flatnonzero(test_summary <= lo_thr)
    # thin tails (train/test shift) fall back to the test set's own tails
    n_tail = max(int(np.floor(q * len(test))), 1)
    order = np.argsort(test_summary, kind="stable")
    if hi_idx.size < 10:
        hi_idx = order[-n_tail:]
    if lo_idx.size < 10:
        lo_idx = order[:n_tail]

    group = "price" if component in ("trend", "vol") else "volume"

    def _report(dec: DecodedWindows, real_idx: np.ndarray, side: str, target) -> EvalReport:
        real_grids = pack_grid(test.future[real_idx], test.k).astype(np.float64)
        real_dec = decode_windows(real_grids, test.anchors[real_idx], stats)
        if group == "price":
            quad = feature_distances(real_dec.price_pool(), dec.price_pool(), bins)
        else:
            quad = feature_distances(real_dec.volume_pool(), dec.volume_pool(), bins)
        regime_quad = feature_distances(
            real_dec.regime_values(component), dec.regime_values(component), bins
        )
        return EvalReport(
            scenario=f"{side}-{component}",
            groups={group: quad},
            regimes={component: regime_quad},
            extras={
                "target": float(np.mean(target)),
                "n_generated": int(dec.mids.shape[0]),
                "n_real_tail": int(real_idx.size),
                "gen_clamps": dec.clamps,
            },
        )

    high_vals = dec_high.regime_window_summaries(component)
    low_vals = dec_low.regime_window_summaries(component)
    welch = scipy_stats.ttest_ind(high_vals, low_vals, equal_var=False, alternative="greater")
    return CounterfactualResult(
        component=component,
        q=q,
        target_high=target_high,
        target_low=target_low,
        high=_report(dec_high, hi_idx, "high", target_high),
        low=_report(dec_low, lo_idx, "low", target_low),
        mean_high=float(np.mean(high_vals)),
        mean_low=float(np.mean(low_vals)),
        p_value=float(welch.pvalue),
    )


def counterfactual_suite(
    model: Checkpoint | GenerateFn,
    test: WindowDataset,
    train_regimes: np.ndarray,
    q: float = 0.2,
    n_per_side: int = 200,
    stats: PreprocessStats | None = None,
    w: float = 1.0,
    seed: int = 0,
) -> list[CounterfactualResult]:
    """All four components, both tails: the full eight-scenario table."""
    return [
        counterfactual_eval(
            model, test, train_regimes, comp, q=q, n_per_side=n_per_side,
            stats=stats, w=w, seed=seed + i,
        )
        for i, comp in enumerate(COMPONENTS)
    ]


# ---------------------------------------------------------------------------
# tier 3: counterfactual usefulness
# ---------------------------------------------------------------------------


def _dedupe_weighted(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse duplicate (row, label) pairs into normalized weights, making
    the learners exactly invariant to duplication and sample order."""
    stacked = np.concatenate([x, y[:, None]], axis=1)
    uniq, counts = np.unique(stacked, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts / counts.sum()


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-4) -> np.ndarray:
    """Weighted mean-NLL logistic regression via L-BFGS; deterministic."""
    xu, yu, wts = _dedupe_weighted(x, y.astype(np.float64))
    xa = np.concatenate([xu, np.ones((len(xu), 1))], axis=1)

    def objective(beta):
        logits = xa @ beta
        # log(1+exp) stabilized
        nll = np.logaddexp(0.0, logits) - yu * logits
        loss = float(np.sum(wts * nll)) + 0.5 * l2 * float(beta[:-1] @ beta[:-1])
        p = 1.0 / (1.0 + np.exp(-logits))
        grad = xa.T @ (wts * (p - yu))
        grad[:-1] += l2 * beta[:-1]
        return loss, grad

    result = optimize.minimize(
        objective, np.zeros(xa.shape[1]), jac=True, method="L-BFGS-B",
        options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-10},
    )
    return result.x


def predict_logistic(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    xa = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    return (xa @ beta > 0).astype(np.float64)


def fit_ridge(x: np.ndarray, y: np.ndarray, l2: float = 1e-3) -> np.ndarray:
    """Weighted closed-form ridge on mean sufficient statistics."""
    xu, yu, wts = _dedupe_weighted(x, np.asarray(y, dtype=np.float64))
    xa = np.concatenate([xu, np.ones((len(xu), 1))], axis=1)
    xw = xa * wts[:, None]
    gram = xa.T @ xw
    reg = l2 * np.eye(xa.shape[1])
    reg[-1, -1] = 0.0  # intercept unregularized
    return np.linalg.solve(gram + reg, xw.T @ yu)


def predict_ridge(beta: np.ndarray, x: np.ndarray) -> np.ndarray:
    xa = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    return xa @ beta


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(pred == truth))


def r_squared(pred: np.ndarray, truth: np.ndarray) -> float:
    ss_res = float(np.sum((truth - pred) ** 2))
    ss_tot = float(np.sum((truth - np.mean(truth)) ** 2))
    if ss_tot == 0.0:
        return 0.0 if ss_res == 0.0 else -math.inf
    return 1.0 - ss_res / ss_tot


@dataclass
class UsefulnessReport:
    """2 tasks x 3 settings x 2 tails, plus informational extras."""

    table: dict[str, dict[str, dict[str, float]]]
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"table": self.table, "extras": self.extras}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_json(directory / "report.json", self.to_dict())
        with open(directory / "table.csv", "w") as f:
            f.write("task,setting,metric_high,metric_low\n")
            for task, settings in self.table.items():
                for setting, cells in settings.items():
                    f.write(f"{task},{setting},{cells['high']!r},{cells['low']!r}\n")


def _history_features(dataset: WindowDataset, idx: np.ndarray) -> np.ndarray:
    return dataset.history[idx].reshape(len(idx), -1).astype(np.float64)


def usefulness_eval(
    model: Checkpoint | GenerateFn,
    train: WindowDataset,
    heldout: WindowDataset,
    stats: PreprocessStats | None = None,
    q: float = 0.2,
    cf_per_side: int = 200,
    w: float = 1.0,
    seed: int = 0,
    classifier=None,
    regressor=None,
) -> UsefulnessReport:
    """Train regime predictors on Real / Real*2 / Real+CF and score them on
    the top-q and bottom-q regime tails of the held-out windows.

    Trend prediction is up/down classification (accuracy); liquidity
    prediction is regression of the mean future liquidity (R^2). Real+CF
    augments with trajectories generated under tail interventions of the
    task's component, labeled by the intervention value.
    """
    if isinstance(model, Checkpoint):
        stats = model.stats
        generate = ModelGenerator(model, guidance=w)
    else:
        if stats is None:
            raise ConfigError("stats required when passing a raw generator")
        generate = model
    classifier = classifier or (lambda xt, yt, xe: predict_logistic(fit_logistic(xt, yt), xe))
    regressor = regressor or (lambda xt, yt, xe: predict_ridge(fit_ridge(xt, yt), xe))

    all_train = np.arange(len(train))
    x_train = _history_features(train, all_train)
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd < 1e-12] = 1.0

    def norm(x):
        return (x - mu) / sd

    x_train = norm(x_train)
    x_held = norm(_history_features(heldout, np.arange(len(heldout))))

    tau = train.tau
    y_trend_train = (train.regimes[:, 0] > 0).astype(np.float64)
    y_liq_train = train.regimes[:, 2 : 2 + tau].mean(axis=1)
    y_trend_held = (heldout.regimes[:, 0] > 0).astype(np.float64)
    y_liq_held = heldout.regimes[:, 2 : 2 + tau].mean(axis=1)

    # counterfactual augmentation per task component
    cf_idx = np.resize(all_train, cf_per_side)
    cf_feats = norm(_history_features(train, cf_idx))
    extras: dict = {"cf_per_side": cf_per_side, "q": q}
    cf_data: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for comp, task in (("trend", "trend"), ("liq", "liquidity")):
        t_hi = regime_quantile_targets(train.regimes, comp, "high", q)
        t_lo = regime_quantile_targets(train.regimes, comp, "low", q)
        base = train.regimes[cf_idx]
        gen_hi = generate(train, cf_idx, inject_component(base, comp, t_hi), seed)
        gen_lo = generate(train, cf_idx, inject_component(base, comp, t_lo), seed)
        dec_hi = decode_windows(gen_hi, train.anchors[cf_idx], stats)
        dec_lo = decode_windows(gen_lo, train.anchors[cf_idx], stats)
        extras[f"cf_realized_{comp}_high"] = float(np.mean(dec_hi.regime_window_summaries(comp)))
        extras[f"cf_realized_{comp}_low"] = float(np.mean(dec_lo.regime_window_summaries(comp)))
        if task == "trend":
            labels = np.concatenate(
                [np.full(cf_per_side, 1.0 if float(np.mean(t_hi)) > 0 else 0.0),
                 np.full(cf_per_side, 1.0 if float(np.mean(t_lo)) > 0 else 0.0)]
            )
        else:
            labels = np.concatenate(
                [np.full(cf_per_side, float(np.mean(t_hi))),
                 np.full(cf_per_side, float(np.mean(t_lo)))]
            )
        cf_data[task] = (np.concatenate([cf_feats, cf_feats]), labels)

    def tails(summary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_tail = max(int(np.floor(q * len(summary))), 1)
        order = np.argsort(summary, kind="stable")
        return order[-n_tail:], order[:n_tail]

    hi_trend, lo_trend = tails(heldout.regimes[:, 0])
    hi_liq, lo_liq = tails(heldout.regimes[:, 2 : 2 + tau].mean(axis=1))

    table: dict[str, dict[str, dict[str, float]]] = {"trend": {}, "liquidity": {}}
    for setting in ("real", "real_x2", "real_cf"):
        if setting == "real":
            xt, yt_c, yt_r = x_train, y_trend_train, y_liq_train
            xr = x_train
        elif setting == "real_x2":
            xt = np.concatenate([x_train, x_train])
            yt_c = np.concatenate([y_trend_train, y_trend_train])
            yt_r = np.concatenate([y_liq_train, y_liq_train])
            xr = xt
        else:
            cf_x_c, cf_y_c = cf_data["trend"]
            cf_x_r, cf_y_r = cf_data["liquidity"]
            xt = np.concatenate([x_train, cf_x_c])
            yt_c = np.concatenate([y_trend_train, cf_y_c])
            xr = np.concatenate([x_train, cf_x_r])
            yt_r = np.concatenate([y_liq_train, cf_y_r])
        pred_c = classifier(xt, yt_c, x_held)
        pred_r = regressor(xr, yt_r, x_held)
        table["trend"][setting] = {
            "high": accuracy(pred_c[hi_trend], y_trend_held[hi_trend]),
            "low": accuracy(pred_c[lo_trend], y_trend_held[lo_trend]),
        }
        table["liquidity"][setting] = {
            "high": r_squared(pred_r[hi_liq], y_liq_held[hi_liq]),
            "low": r_squared(pred_r[lo_liq], y_liq_held[lo_liq]),
        }
    return UsefulnessReport(table=table, extras=extras)
