import math

import numpy as np
import pytest

from lobdiff.evaluation import (
    DecodedWindows,
    PassthroughGenerator,
    accuracy,
    acf_abs_returns,
    counterfactual_eval,
    counterfactual_suite,
    decode_windows,
    feature_distances,
    fit_logistic,
    fit_ridge,
    kl_js,
    kl_js_from_hist,
    ks_distance,
    predict_logistic,
    predict_ridge,
    r_squared,
    realism_eval,
    stylized_facts,
    usefulness_eval,
    volume_diff_correlation,
    wasserstein_1d,
)
from lobdiff.ingest import SynthConfig, synthesize_lob
from lobdiff.preprocess import (
    encode_series,
    fit_regime_stats,
    fit_volume_stats,
    make_windows,
    pack_grid,
)


# ---------------------------------------------------------------------------
# distance metrics
# ---------------------------------------------------------------------------


def test_ks_examples():
    a = np.array([0.0, 1.0])
    assert ks_distance(a, a) == 0.0
    assert ks_distance(np.array([0.0, 0.5]), np.array([10.0, 11.0])) == 1.0
    assert ks_distance(a, np.array([0.5, 1.5])) == pytest.approx(0.5)


def test_wasserstein_examples():
    a = np.array([3.0, -1.0, 2.0])
    assert wasserstein_1d(a, a) == pytest.approx(0.0, abs=1e-12)
    assert wasserstein_1d(np.array([2.0]), np.array([5.5])) == pytest.approx(3.5)
    assert wasserstein_1d(np.array([0.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(1.0)


def test_wasserstein_equal_size_matches_sorted_mean():
    rng = np.random.default_rng(0)
    a = rng.normal(size=200)
    b = rng.normal(loc=0.7, size=200)
    oracle = np.mean(np.abs(np.sort(a) - np.sort(b)))
    assert wasserstein_1d(a, b) == pytest.approx(oracle, rel=1e-9)


def test_wasserstein_unequal_sizes_against_quantile_oracle():
    rng = np.random.default_rng(1)
    a = rng.normal(size=150)
    b = rng.normal(loc=0.4, scale=1.5, size=70)
    # brute force: dense quantile grid of both inverse CDFs
    qs = (np.arange(210000) + 0.5) / 210000
    ia = np.quantile(a, qs, method="inverted_cdf")
    ib = np.quantile(b, qs, method="inverted_cdf")
    oracle = np.mean(np.abs(ia - ib))
    assert wasserstein_1d(a, b) == pytest.approx(oracle, rel=1e-3)


def test_kl_js_hand_values():
    kl, js = kl_js_from_hist(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
    expected_kl = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert kl == pytest.approx(expected_kl, abs=1e-6)
    kl0, js0 = kl_js_from_hist(np.array([0.3, 0.7]), np.array([0.3, 0.7]))
    assert kl0 == pytest.approx(0.0, abs=1e-12)
    assert js0 == pytest.approx(0.0, abs=1e-12)
    _, js_max = kl_js_from_hist(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert js_max == pytest.approx(math.log(2.0), abs=1e-3)


def test_kl_js_from_samples():
    # engineered two-bin histograms: a -> [0.5, 0.5], b -> [0.25, 0.75]
    a = np.array([0.3, 0.6])
    b = np.array([0.3, 0.6, 0.6, 0.6])
    kl, js = kl_js(a, b, bins=2)
    expected_kl = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert kl == pytest.approx(expected_kl, abs=1e-4)
    assert 0.0 < js < math.log(2.0)


def test_metric_bounds_and_permutation_invariance_fuzz():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        na, nb = rng.integers(2, 40, size=2)
        a = rng.normal(loc=rng.normal() * 5, scale=rng.uniform(0.1, 3), size=na)
        b = rng.normal(loc=rng.normal() * 5, scale=rng.uniform(0.1, 3), size=nb)
        quad = feature_distances(a, b, bins=13)
        assert 0.0 <= quad.ks <= 1.0
        assert quad.wasserstein >= 0.0
        assert quad.kl >= -1e-12
        assert -1e-12 <= quad.js <= math.log(2.0) + 1e-9
    a = rng.normal(size=50)
    b = rng.normal(size=30)
    quad = feature_distances(a, b)
    shuffled = feature_distances(rng.permutation(a), rng.permutation(b))
    assert quad.as_tuple() == pytest.approx(shuffled.as_tuple(), rel=1e-12)


def test_identical_samples_all_zero():
    rng = np.random.default_rng(3)
    a = rng.normal(size=500)
    quad = feature_distances(a, a.copy())
    assert quad.ks == 0.0
    assert quad.wasserstein == pytest.approx(0.0, abs=1e-12)
    assert quad.kl == pytest.approx(0.0, abs=1e-9)
    assert quad.js == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# stylized facts
# ---------------------------------------------------------------------------


def test_acf_white_noise_null():
    # long windows: the per-window ACF estimator carries an O(1/n) small-
    # sample bias, so the white-noise null is checked where it is negligible
    rng = np.random.default_rng(7)
    n_win, tau = 8, 2001
    mids = np.cumsum(rng.standard_normal((n_win, tau)), axis=1)
    acf = acf_abs_returns(mids, lags=20)
    for lag in range(1, 21):
        pairs = (tau - 1 - lag) * n_win
        assert abs(acf[lag - 1]) < 3.0 / np.sqrt(pairs)


def test_volume_diff_correlation_null_and_shape():
    rng = np.random.default_rng(8)
    vols = rng.normal(size=(60, 33, 6))
    corr = volume_diff_correlation(vols)
    assert corr.shape == (6, 6)
    np.testing.assert_allclose(corr, corr.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(corr), 1.0)
    n = 60 * 32
    off = corr[~np.eye(6, dtype=bool)]
    assert np.all(np.abs(off) < 3.0 / np.sqrt(n))


def _decoded_stub(mids, anchors, spread=100.0, vol_value=10.0):
    n, tau = mids.shape
    levels = 4
    price = np.zeros((n, tau, levels))
    full = np.concatenate([np.asarray(anchors)[:, None], mids], axis=1)
    price[:, :, 0] = np.diff(full, axis=1)
    price[:, :, levels // 2] = spread
    return DecodedWindows(
        mids=np.asarray(mids, dtype=float),
        anchors=np.asarray(anchors, dtype=float),
        price_feats=price,
        volumes=np.full((n, tau, levels), vol_value),
        spreads=np.full((n, tau), spread),
        clamps={},
    )


def test_constant_spread_degenerate_histogram():
    rng = np.random.default_rng(9)
    mids = 1_000_000 + np.cumsum(rng.normal(size=(20, 32)) * 100, axis=1)
    dec = _decoded_stub(mids, np.full(20, 1_000_000.0))
    facts = stylized_facts(dec, dec, bins=30)
    assert facts.spread_hist["real"].max() == pytest.approx(1.0)
    assert np.count_nonzero(facts.spread_hist["real"]) == 1
    # histograms sum to one
    assert facts.spread_hist["gen"].sum() == pytest.approx(1.0)
    for h in facts.horizons:
        assert facts.return_hists[h]["real"].sum() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# windows fixture
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_data():
    series = synthesize_lob(SynthConfig(seed=51, n_seconds=1200))
    stats = fit_volume_stats([series])
    enc = encode_series(series, stats)
    train = make_windows(enc, series, stride=4)
    stats = fit_regime_stats(stats, train.regimes)
    test_series = synthesize_lob(SynthConfig(seed=52, n_seconds=600))
    test = make_windows(encode_series(test_series, stats), test_series, stride=4)
    return train, test, stats


def test_decode_windows_round_trip_features(eval_data):
    _, test, stats = eval_data
    idx = np.arange(5)
    grids = pack_grid(test.future[idx], test.k).astype(np.float64)
    dec = decode_windows(grids, test.anchors[idx], stats)
    # re-extracted price features equal the stored ones (real data round trip)
    np.testing.assert_allclose(dec.price_feats, test.future[idx][..., : 2 * test.k], atol=1e-6)
    # realized regimes match the stored raw regimes (volumes under the cap)
    recomputed_trend = dec.regime_values("trend")
    np.testing.assert_allclose(recomputed_trend, test.regimes[idx, 0], atol=1e-6)


def test_realism_eval_passthrough_is_zero(eval_data):
    _, test, stats = eval_data
    report = realism_eval(PassthroughGenerator(), test, stats=stats, max_windows=40)
    assert set(report.groups) == {"price", "volume"}
    for quad in report.groups.values():
        assert quad.ks == 0.0
        assert quad.wasserstein == pytest.approx(0.0, abs=1e-9)
        assert quad.kl == pytest.approx(0.0, abs=1e-6)
        assert quad.js == pytest.approx(0.0, abs=1e-6)
    for quad in report.regimes.values():
        assert quad.ks == 0.0
    assert report.facts is not None


def test_realism_report_schema_and_save(eval_data, tmp_path):
    _, test, stats = eval_data
    report = realism_eval(PassthroughGenerator(), test, stats=stats, max_windows=10, with_facts=True)
    assert len(report.groups) == 2
    for quad in report.groups.values():
        assert len(quad.to_dict()) == 4
    report.save(tmp_path / "realism")
    assert (tmp_path / "realism" / "report.json").exists()
    assert (tmp_path / "realism" / "table.csv").exists()
    assert (tmp_path / "realism" / "facts" / "abs_return_acf.csv").exists()
    assert (tmp_path / "realism" / "facts" / "returns_h5.csv").exists()


class RegimeFollowingStub:
    """Synthesizes futures that realize the injected regimes; stands in for a
    perfectly controllable model."""

    def __init__(self, stats, noise=0.05):
        self.stats = stats
        self.noise = noise

    def __call__(self, dataset, indices, regimes_flat, seed):
        rng = np.random.default_rng(seed)
        k = dataset.k
        tau = dataset.tau
        n = len(indices)
        grids = np.zeros((n, 2 * k, 2, tau))
        for i in range(n):
            trend, vol = regimes_flat[i, 0], regimes_flat[i, 1]
            liq = regimes_flat[i, 2 : 2 + tau]
            imb = regimes_flat[i, 2 + tau :]
            r = trend / tau + vol * rng.standard_normal(tau) * self.noise
            grids[i, 0, 0, :] = r
            grids[i, 1:k, 0, :] = self.stats.tick
            grids[i, k, 0, :] = self.stats.tick
            grids[i, k + 1 :, 0, :] = self.stats.tick
            ask_share = (1.0 + imb) / 2.0
            per_level_ask = liq * ask_share / k
            per_level_bid = liq * (1.0 - ask_share) / k
            grids[i, :k, 1, :] = np.sqrt(np.maximum(per_level_ask, 0.0)) / self.stats.c_scale
            grids[i, k:, 1, :] = np.sqrt(np.maximum(per_level_bid, 0.0)) / self.stats.c_scale
        return grids


def test_counterfactual_eval_directional_stats(eval_data):
    train, test, stats = eval_data
    stub = RegimeFollowingStub(stats)
    for comp in ("trend", "liq", "imb"):
        result = counterfactual_eval(
            stub, test, train.regimes, comp, q=0.2, n_per_side=60, stats=stats, seed=3
        )
        assert result.mean_high > result.mean_low, comp
        assert result.p_value < 0.01, comp
        assert result.high.scenario == f"high-{comp}"
        assert result.low.scenario == f"low-{comp}"


def test_counterfactual_degenerate_regime_identical_reports(eval_data):
    _, test, stats = eval_data
    tau = test.tau
    constant = np.zeros((100, 2 + 2 * tau))
    constant[:, 0] = 5.0
    constant[:, 1] = 2.0
    constant[:, 2 : 2 + tau] = 100.0
    constant[:, 2 + tau :] = 0.1
    # constant trend everywhere: the high and low tails cover identical sets
    degenerate = test.subset(np.arange(len(test)))
    degenerate.regimes = degenerate.regimes.copy()
    degenerate.regimes[:, 0] = 5.0
    stub = RegimeFollowingStub(stats)
    result = counterfactual_eval(
        stub, degenerate, constant, "trend", q=0.5, n_per_side=30, stats=stats, seed=5
    )
    assert result.target_high == pytest.approx(result.target_low)
    assert result.high.groups["price"].as_tuple() == pytest.approx(
        result.low.groups["price"].as_tuple()
    )
    assert result.mean_high == pytest.approx(result.mean_low)


def test_counterfactual_suite_has_eight_scenarios(eval_data):
    train, test, stats = eval_data
    stub = RegimeFollowingStub(stats)
    results = counterfactual_suite(stub, test, train.regimes, n_per_side=30, stats=stats)
    scenarios = [r.high.scenario for r in results] + [r.low.scenario for r in results]
    assert len(results) == 4
    assert len(set(scenarios)) == 8
    for result in results:
        group = "price" if result.component in ("trend", "vol") else "volume"
        assert group in result.high.groups


# ---------------------------------------------------------------------------
# usefulness
# ---------------------------------------------------------------------------


def test_learners_deterministic_and_duplication_invariant():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(80, 6))
    y_bin = (x[:, 0] + 0.3 * rng.normal(size=80) > 0).astype(float)
    y_reg = x @ rng.normal(size=6) + 0.1 * rng.normal(size=80)
    xd = np.concatenate([x, x])
    beta1 = fit_logistic(x, y_bin)
    beta2 = fit_logistic(xd, np.concatenate([y_bin, y_bin]))
    np.testing.assert_allclose(beta1, beta2, atol=1e-12)
    r1 = fit_ridge(x, y_reg)
    r2 = fit_ridge(xd, np.concatenate([y_reg, y_reg]))
    np.testing.assert_allclose(r1, r2, atol=1e-12)
    # order invariance
    perm = rng.permutation(80)
    np.testing.assert_allclose(beta1, fit_logistic(x[perm], y_bin[perm]), atol=1e-12)
    # sanity: logistic learns the separable direction
    acc = accuracy(predict_logistic(beta1, x), y_bin)
    assert acc > 0.8
    assert r_squared(predict_ridge(r1, x), y_reg) > 0.9


def test_r_squared_definition():
    truth = np.array([1.0, 2.0, 3.0, 4.0])
    assert r_squared(truth, truth) == 1.0
    assert r_squared(np.full(4, truth.mean()), truth) == pytest.approx(0.0)


def test_usefulness_real_vs_real2_identical(eval_data):
    train, test, stats = eval_data
    small_train = train.subset(np.arange(0, len(train), 2))
    report = usefulness_eval(
        PassthroughGenerator(), small_train, test, stats=stats, cf_per_side=20
    )
    for task in ("trend", "liquidity"):
        assert abs(report.table[task]["real"]["high"] - report.table[task]["real_x2"]["high"]) < 1e-4
        assert abs(report.table[task]["real"]["low"] - report.table[task]["real_x2"]["low"]) < 1e-4


def test_usefulness_table_schema_and_majority_stub(eval_data):
    train, test, stats = eval_data

    def majority_classifier(xt, yt, xe):
        label = 1.0 if yt.mean() >= 0.5 else 0.0
        return np.full(len(xe), label)

    def mean_regressor(xt, yt, xe):
        return np.full(len(xe), yt.mean())

    report = usefulness_eval(
        PassthroughGenerator(), train, test, stats=stats, cf_per_side=20,
        classifier=majority_classifier, regressor=mean_regressor,
    )
    assert set(report.table) == {"trend", "liquidity"}
    for task in report.table:
        assert set(report.table[task]) == {"real", "real_x2", "real_cf"}
        for setting in report.table[task]:
            assert set(report.table[task][setting]) == {"high", "low"}
    # majority-class accuracy equals the majority label frequency per tail
    q = 0.2
    n_tail = int(np.floor(q * len(test)))
    order = np.argsort(test.regimes[:, 0], kind="stable")
    y = (test.regimes[:, 0] > 0).astype(float)
    majority = 1.0 if (train.regimes[:, 0] > 0).mean() >= 0.5 else 0.0
    expect_high = np.mean(y[order[-n_tail:]] == majority)
    expect_low = np.mean(y[order[:n_tail]] == majority)
    assert report.table["trend"]["real"]["high"] == pytest.approx(expect_high)
    assert report.table["trend"]["real"]["low"] == pytest.approx(expect_low)


def test_usefulness_save(eval_data, tmp_path):
    train, test, stats = eval_data
    report = usefulness_eval(
        PassthroughGenerator(), train.subset(np.arange(60)), test, stats=stats, cf_per_side=15
    )
    report.save(tmp_path / "useful")
    lines = (tmp_path / "useful" / "table.csv").read_text().strip().splitlines()
    assert lines[0] == "task,setting,metric_high,metric_low"
    assert len(lines) == 7
