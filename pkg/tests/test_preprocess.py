import numpy as np
import pytest

from lobdiff.errors import DataError
from lobdiff.ingest import LobSnapshot, SnapshotSeries, SynthConfig, synthesize_lob
from lobdiff.preprocess import (
    PreprocessStats,
    decode_future,
    encode_series,
    feat_dim,
    fit_regime_stats,
    fit_volume_stats,
    from_model_space,
    make_windows,
    mid_price,
    mids,
    pack_grid,
    to_model_space,
    unpack_grid,
)
from lobdiff.regimes import compute_regime


def _series_from_books(mids_units, spread=200.0, k=2, vols=None):
    """Build a tiny series with given mid prices; level gap one tick."""
    n = len(mids_units)
    m = np.asarray(mids_units, dtype=float)
    ap = np.empty((n, k))
    bp = np.empty((n, k))
    ap[:, 0] = m + spread / 2
    bp[:, 0] = m - spread / 2
    for lvl in range(1, k):
        ap[:, lvl] = ap[:, lvl - 1] + 100.0
        bp[:, lvl] = bp[:, lvl - 1] - 100.0
    if vols is None:
        vols = np.full((n, k), 10.0)
    return SnapshotSeries(
        symbol="T", date="2024-01-02", k=k,
        session_open=34200.0, session_close=57600.0,
        timestamps=34200.0 + np.arange(n, dtype=float),
        ask_price=ap, ask_volume=np.array(vols, dtype=float),
        bid_price=bp, bid_volume=np.array(vols, dtype=float),
    )


STATS = PreprocessStats(v_cap=100.0, c_scale=10.0)


def test_mid_price_examples():
    snap = LobSnapshot(0.0, np.array([1000200.0]), np.array([1.0]), np.array([1000000.0]), np.array([1.0]))
    assert mid_price(snap) == 1000100.0
    locked = LobSnapshot(0.0, np.array([1000100.0]), np.array([1.0]), np.array([1000100.0]), np.array([1.0]))
    with pytest.raises(DataError):
        mid_price(locked)
    sym = LobSnapshot(0.0, np.array([1000000.0 + 300]), np.array([1.0]), np.array([1000000.0 - 300]), np.array([1.0]))
    assert mid_price(sym) == 1000000.0


def test_encode_hand_returns():
    series = _series_from_books([1000000.0, 1000100.0, 1000300.0])
    enc = encode_series(series, STATS)
    assert enc.shape == (2, feat_dim(2))
    np.testing.assert_allclose(enc[:, 0], [100.0, 200.0])


def test_encode_constant_book():
    series = _series_from_books([1000000.0, 1000000.0])
    enc = encode_series(series, STATS)
    assert enc[0, 0] == 0.0
    k = 2
    assert enc[0, 1] == 100.0  # ask gap
    assert enc[0, k] == 200.0  # spread
    assert enc[0, k + 1] == 100.0  # bid gap


def test_encode_volume_cap_saturation():
    vols = np.array([[100.0, 400.0], [100.0, 400.0], [100.0, 400.0]])
    series = _series_from_books([1000000.0] * 3, vols=vols)
    enc = encode_series(series, STATS)
    k = 2
    # v = v_cap and v = 4*v_cap encode to the same capped feature value
    assert enc[0, 2 * k] == pytest.approx(np.sqrt(100.0) / 10.0)
    assert enc[0, 2 * k + 1] == pytest.approx(enc[0, 2 * k])


def test_encode_shift_invariance():
    series = _series_from_books([1000000.0, 1000100.0, 1000050.0])
    shifted = _series_from_books([1000000.0 + 5500, 1000100.0 + 5500, 1000050.0 + 5500])
    k = 2
    a = encode_series(series, STATS)
    b = encode_series(shifted, STATS)
    np.testing.assert_allclose(a[:, : 2 * k], b[:, : 2 * k])


def test_encode_price_dimension_matches_raw():
    series = synthesize_lob(SynthConfig(seed=1, n_seconds=50))
    enc = encode_series(series, STATS)
    # 1 + (K-1) + 1 + (K-1) = 2K price features per step
    assert enc.shape[1] == 4 * series.k + 2


def test_encode_tod_on_unit_circle():
    series = synthesize_lob(SynthConfig(seed=2, n_seconds=50))
    enc = encode_series(series, STATS)
    k = series.k
    norms = enc[:, 4 * k] ** 2 + enc[:, 4 * k + 1] ** 2
    np.testing.assert_allclose(norms, 1.0, rtol=1e-5)


def test_encode_too_short_raises():
    series = _series_from_books([1000000.0])
    with pytest.raises(DataError):
        encode_series(series, STATS)


def test_decode_hand_mids():
    k = 2
    feats = np.zeros((2, 4 * k))
    feats[:, 0] = 100.0  # r
    feats[:, k] = 100.0  # spread one tick
    feats[:, 1] = 100.0
    feats[:, k + 1] = 100.0
    snaps, clamps = decode_future(feats, 1000000.0, STATS)
    recovered = [(s.ask_price[0] + s.bid_price[0]) / 2 for s in snaps]
    np.testing.assert_allclose(recovered, [1000100.0, 1000200.0])
    assert clamps["spread"] == 0


def test_decode_all_zero_features():
    k = 2
    snaps, clamps = decode_future(np.zeros((3, 4 * k)), 1000000.0, STATS)
    for s in snaps:
        assert (s.ask_price[0] + s.bid_price[0]) / 2 == 1000000.0
        assert s.ask_price[0] - s.bid_price[0] == 100.0
        assert np.all(s.ask_volume == 0) and np.all(s.bid_volume == 0)
    assert clamps["spread"] == 3
    assert clamps["gap"] == 3 * 2 * (k - 1)


def test_decode_clips_volume_features():
    k = 1
    feats = np.zeros((1, 4 * k))
    feats[0, k] = 100.0
    feats[0, 2] = -0.5  # negative ask volume feature
    feats[0, 3] = 99.0  # far above the cap
    snaps, clamps = decode_future(feats, 1000000.0, STATS)
    assert snaps[0].ask_volume[0] == 0
    assert snaps[0].bid_volume[0] == 100.0  # v_cap
    assert clamps["volume_low"] == 1
    assert clamps["volume_high"] == 1


def test_encode_decode_round_trip_on_synthetic():
    series = synthesize_lob(SynthConfig(seed=9, n_seconds=300))
    stats = fit_volume_stats([series])
    enc = encode_series(series, stats)
    tau = 40
    anchor = mids(series)[0]
    snaps, _ = decode_future(enc[:tau, : 4 * series.k], anchor, stats)
    for i, snap in enumerate(snaps):
        np.testing.assert_array_equal(snap.ask_price, series.ask_price[i + 1])
        np.testing.assert_array_equal(snap.bid_price, series.bid_price[i + 1])
        np.testing.assert_allclose(
            snap.ask_volume, np.minimum(series.ask_volume[i + 1], stats.v_cap), atol=1.0
        )
        np.testing.assert_allclose(
            snap.bid_volume, np.minimum(series.bid_volume[i + 1], stats.v_cap), atol=1.0
        )


def test_make_windows_counts():
    series = synthesize_lob(SynthConfig(seed=4, n_seconds=150))
    stats = fit_volume_stats([series])
    enc = encode_series(series, stats)
    assert len(make_windows(enc[:64], series, stride=1)) == 1
    assert len(make_windows(enc[:65], series, stride=1)) == 2
    assert len(make_windows(enc[:127], series, stride=32)) == 2


def test_make_windows_too_short_warns_and_empties():
    series = synthesize_lob(SynthConfig(seed=4, n_seconds=40))
    stats = fit_volume_stats([series])
    enc = encode_series(series, stats)
    with pytest.warns(UserWarning):
        ds = make_windows(enc, series, stride=1)
    assert len(ds) == 0


def test_window_alignment_and_future_decode():
    """Anchor is the last history snapshot's mid; the stored future decodes
    back to the raw future snapshots; stored regimes match a recompute."""
    series = synthesize_lob(SynthConfig(seed=21, n_seconds=200))
    stats = fit_volume_stats([series])
    enc = encode_series(series, stats)
    ds = make_windows(enc, series, stride=17)
    m = mids(series)
    tau = ds.tau
    for i, s in enumerate(range(0, enc.shape[0] - 2 * tau + 1, 17)):
        assert ds.anchors[i] == m[s + tau]
        reg = compute_regime(
            m[s + tau : s + 2 * tau + 1],
            series.ask_volume[s + tau + 1 : s + 2 * tau + 1],
            series.bid_volume[s + tau + 1 : s + 2 * tau + 1],
        )
        np.testing.assert_allclose(ds.regimes[i], reg.as_flat(), rtol=1e-6, atol=1e-9)
        snaps, _ = decode_future(ds.future[i], ds.anchors[i], stats)
        for j, snap in enumerate(snaps):
            raw_idx = s + tau + 1 + j
            np.testing.assert_array_equal(snap.ask_price, series.ask_price[raw_idx])
            np.testing.assert_allclose(
                snap.ask_volume, np.minimum(series.ask_volume[raw_idx], stats.v_cap), atol=1.0
            )


def test_dataset_save_load_round_trip(tmp_path):
    series = synthesize_lob(SynthConfig(seed=6, n_seconds=150))
    stats = fit_volume_stats([series])
    ds = make_windows(encode_series(series, stats), series, stride=8)
    ds.save(tmp_path / "win")
    loaded = type(ds).load(tmp_path / "win")
    assert len(loaded) == len(ds)
    np.testing.assert_array_equal(loaded.history, ds.history)
    np.testing.assert_array_equal(loaded.future, ds.future)
    np.testing.assert_allclose(loaded.anchors, ds.anchors)
    np.testing.assert_allclose(loaded.regimes, ds.regimes, rtol=1e-6)


def test_pack_unpack_grid_inverse():
    rng = np.random.default_rng(3)
    k = 3
    flat = rng.normal(size=(5, 7, feat_dim(k))).astype(np.float32)
    grid = pack_grid(flat, k)
    assert grid.shape == (5, 2 * k, 2, 7)
    back = unpack_grid(grid)
    np.testing.assert_array_equal(back, flat[..., : 4 * k])
    # row l pairs price feature l with volume feature l
    assert grid[2, 1, 0, 3] == flat[2, 3, 1]
    assert grid[2, 1, 1, 3] == flat[2, 3, 2 * k + 1]


def test_model_space_round_trip():
    rng = np.random.default_rng(5)
    grid = np.abs(rng.normal(size=(4, 6, 2, 8))) * 100.0
    out = from_model_space(to_model_space(grid, STATS), STATS)
    np.testing.assert_allclose(out, grid, rtol=1e-5)


def test_stats_json_round_trip(tmp_path):
    stats = fit_regime_stats(
        PreprocessStats(v_cap=250.0, c_scale=np.sqrt(250.0)),
        np.random.default_rng(0).normal(size=(30, 2 + 2 * 4)),
    )
    stats.save(tmp_path / "stats.json")
    loaded = PreprocessStats.load(tmp_path / "stats.json")
    assert loaded.v_cap == stats.v_cap
    np.testing.assert_allclose(loaded.regime_stats()[0], stats.regime_stats()[0])
    np.testing.assert_allclose(loaded.regime_stats()[1], stats.regime_stats()[1])
