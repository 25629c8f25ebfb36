"""Command-line pipeline: ingest/synthesize data, preprocess into windows,
train both stages, sample futures, and run the three evaluation tiers.

Every command takes an optional JSON config file supplying defaults; explicit
flags win. Each command writes the resolved configuration into its output
directory, and output directories are never overwritten.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .arrayio import read_json, write_f32, write_json
from .diffusion import build_schedule
from .errors import ConfigError, DataError, NumericalError
from .ingest import (
    DEFAULT_SESSION_CLOSE,
    DEFAULT_SESSION_OPEN,
    SynthConfig,
    load_series,
    parse_lobster,
    sample_one_hz,
    save_series,
    synthesize_lob,
)
from .network import Checkpoint, ModelConfig
from .preprocess import (
    PreprocessStats,
    WindowDataset,
    encode_series,
    fit_regime_stats,
    fit_volume_stats,
    make_windows,
)
from .regimes import COMPONENTS, regime_quantile_targets
from .training import TrainConfig, train_stage
from .evaluation import (
    ModelGenerator,
    counterfactual_suite,
    counterfactual_eval,
    realism_eval,
    usefulness_eval,
    inject_component,
)


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fresh_dir(path: str | Path) -> Path:
    out = Path(path)
    if out.exists():
        raise ConfigError(f"output directory already exists, refusing to overwrite: {out}")
    out.mkdir(parents=True)
    return out


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return read_json(path)


def _resolved(args: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else the config file's, else the default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(key, default)


def _echo(out: Path, payload: dict) -> None:
    write_json(out / "run_config.json", payload)


def _dataclass_from(config: dict, cls, overrides: dict):
    names = {f.name for f in dataclass_fields(cls)}
    kwargs = {k: v for k, v in config.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items() if v is not None and k in names})
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    config = _load_config(args.config)
    if args.synthetic and args.data:
        raise ConfigError("--synthetic and --data are mutually exclusive")
    if not args.synthetic and not args.data:
        raise ConfigError("one of --synthetic or --data is required")
    out = _fresh_dir(args.out)
    if args.synthetic:
        synth = _dataclass_from(
            config.get("synth", config), SynthConfig,
            {"seed": args.seed, "n_seconds": args.n_seconds},
        )
        series = synthesize_lob(
            synth,
            symbol=_resolved(args, config, "symbol", "SYNTH"),
            date=_resolved(args, config, "date", "2024-01-02"),
        )
        echo = {"source": "synthetic", "synth": synth.__dict__}
    else:
        result = parse_lobster(args.data, args.messages, k=int(_resolved(args, config, "k", 10)))
        open_s = float(_resolved(args, config, "open", DEFAULT_SESSION_OPEN))
        close_s = float(_resolved(args, config, "close", DEFAULT_SESSION_CLOSE))
        series = sample_one_hz(
            result.snapshots, open_s, close_s,
            symbol=_resolved(args, config, "symbol", "UNKNOWN"),
            date=_resolved(args, config, "date", "1970-01-01"),
        )
        echo = {
            "source": args.data,
            "messages": args.messages,
            "dropped_crossed": result.dropped_crossed,
            "dropped_invalid": result.dropped_invalid,
        }
        print(f"parsed {len(result)} events "
              f"(dropped {result.dropped_crossed} crossed, {result.dropped_invalid} invalid)")
    save_series(series, out)
    _echo(out, echo)
    print(f"wrote {len(series)} snapshots to {out}")
    return 0


def _split_series(series_list, split_days, split_frac):
    if len(series_list) >= 3:
        ordered = sorted(series_list, key=lambda s: s.date)
        if split_days is not None:
            a, b, c = (int(x) for x in split_days.split(","))
        else:
            a, b, c = len(ordered) - 2, 1, 1
        if a + b + c > len(ordered) or min(a, b, c) < 1:
            raise ConfigError(f"split {a},{b},{c} does not fit {len(ordered)} series")
        return ordered[:a], ordered[a : a + b], ordered[a + b : a + b + c]
    if len(series_list) == 1:
        series = series_list[0]
        fracs = [float(x) for x in (split_frac or "0.8,0.1,0.1").split(",")]
        if len(fracs) != 3 or abs(sum(fracs) - 1.0) > 1e-6:
            raise ConfigError("split-frac needs three fractions summing to 1")
        n = len(series)
        i1 = int(fracs[0] * n)
        i2 = i1 + int(fracs[1] * n)

        def segment(lo, hi):
            return type(series)(
                symbol=series.symbol, date=series.date, k=series.k,
                session_open=series.session_open, session_close=series.session_close,
                timestamps=series.timestamps[lo:hi],
                ask_price=series.ask_price[lo:hi], ask_volume=series.ask_volume[lo:hi],
                bid_price=series.bid_price[lo:hi], bid_volume=series.bid_volume[lo:hi],
            )

        return [segment(0, i1)], [segment(i1, i2)], [segment(i2, n)]
    raise ConfigError("preprocess needs either one series (fraction split) or at least three")


def cmd_preprocess(args) -> int:
    config = _load_config(args.config)
    out = _fresh_dir(args.out)
    series_list = [load_series(d) for d in args.series]
    train_s, val_s, test_s = _split_series(series_list, args.split_days, args.split_frac)
    tick = int(_resolved(args, config, "tick", 100))
    stride = int(_resolved(args, config, "stride", 1))
    eval_stride = int(_resolved(args, config, "eval-stride", stride))
    stats = fit_volume_stats(train_s, tick=tick)

    def build(split, use_stride):
        sets = []
        for series in split:
            enc = encode_series(series, stats)
            ds = make_windows(enc, series, stride=use_stride)
            if len(ds):
                sets.append(ds)
        if not sets:
            raise DataError("split produced no windows")
        first = sets[0]
        return WindowDataset(
            k=first.k, tau=first.tau,
            history=np.concatenate([d.history for d in sets]),
            future=np.concatenate([d.future for d in sets]),
            anchors=np.concatenate([d.anchors for d in sets]),
            regimes=np.concatenate([d.regimes for d in sets]),
            symbol=first.symbol, date=first.date,
        )

    train = build(train_s, stride)
    stats = fit_regime_stats(stats, train.regimes)
    val = build(val_s, eval_stride)
    test = build(test_s, eval_stride)
    stats.save(out / "stats.json")
    train.save(out / "train")
    val.save(out / "val")
    test.save(out / "test")
    _echo(out, {"series": list(args.series), "stride": stride, "eval_stride": eval_stride,
                "tick": tick, "counts": {"train": len(train), "val": len(val), "test": len(test)}})
    print(f"windows: train {len(train)}, val {len(val)}, test {len(test)} -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    out = _fresh_dir(args.out)
    windows = Path(args.windows)
    train = WindowDataset.load(windows / "train")
    val = WindowDataset.load(windows / "val")
    stats = PreprocessStats.load(windows / "stats.json")

    use_control = not args.no_control
    model_config = _dataclass_from(
        config.get("model", {}), ModelConfig,
        {"levels": 2 * train.k, "tau": train.tau, "use_control": use_control},
    )
    schedule_cfg = config.get("schedule", {})
    schedule = build_schedule(
        int(schedule_cfg.get("n", 100)),
        float(schedule_cfg.get("beta_min", 1e-3)),
        float(schedule_cfg.get("beta_max", 0.2)),
    )
    seed = int(_resolved(args, config, "seed", 0))
    base_train = dict(config.get("train", {}))
    if args.max_epochs is not None:
        base_train["max_epochs"] = args.max_epochs
    base_train["seed"] = seed

    stage_arg = args.stage
    if stage_arg in ("2", "both") and not use_control:
        raise ConfigError("stage 2 trains the control module; incompatible with --no-control")
    _echo(out, {"model": model_config.to_dict(), "schedule": schedule.to_dict(),
                "train": base_train, "stage": stage_arg, "windows": str(windows)})

    checkpoint = None
    if stage_arg in ("1", "both"):
        cfg1 = _dataclass_from(base_train, TrainConfig, {"stage": 1})
        checkpoint = train_stage(train, val, cfg1, model_config, schedule, stats,
                                 run_dir=out / "stage1", log=print)
    if stage_arg in ("2", "both"):
        if checkpoint is None:
            if args.from_checkpoint is None:
                raise ConfigError("--stage 2 requires --from STAGE1_CHECKPOINT")
            checkpoint = Checkpoint.load(args.from_checkpoint)
        cfg2 = _dataclass_from(base_train, TrainConfig, {"stage": 2})
        checkpoint = train_stage(train, val, cfg2, model_config, schedule, stats,
                                 checkpoint_in=checkpoint, run_dir=out / "stage2", log=print)
    checkpoint.save(out / "checkpoint-final")
    print(f"final checkpoint (stage {checkpoint.stage}) -> {out / 'checkpoint-final'}")
    return 0


def cmd_sample(args) -> int:
    config = _load_config(args.config)
    out = _fresh_dir(args.out)
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = WindowDataset.load(args.windows)
    seed = int(_resolved(args, config, "seed", 0))
    guidance = float(_resolved(args, config, "guidance", 1.0))
    n = int(_resolved(args, config, "n", min(len(dataset), 64)))
    indices = np.resize(np.arange(len(dataset)), n)
    regimes = dataset.regimes[indices]

    intervention = None
    if args.override_regime is not None:
        override = read_json(args.override_regime)
        for comp, value in override.items():
            if comp not in COMPONENTS:
                raise ConfigError(f"unknown regime component in override: {comp}")
            regimes = inject_component(regimes, comp, np.asarray(value, dtype=float))
        intervention = override
    elif args.regime is not None:
        side = args.side or "high"
        q = float(_resolved(args, config, "q", 0.2))
        target = regime_quantile_targets(dataset.regimes, args.regime, side, q)
        regimes = inject_component(regimes, args.regime, target)
        intervention = {args.regime: side, "q": q}

    generator = ModelGenerator(checkpoint, guidance=guidance)
    grids = generator(dataset, indices, regimes, seed)
    write_f32(out / "generated.f32le", grids)
    write_f32(out / "anchors.f32le", dataset.anchors[indices])
    write_f32(out / "regimes.f32le", regimes)
    _echo(out, {"checkpoint": str(args.checkpoint), "windows": str(args.windows),
                "n": n, "guidance": guidance, "seed": seed, "intervention": intervention,
                "shape": list(grids.shape)})
    print(f"sampled {n} futures -> {out}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    out = _fresh_dir(args.out)
    checkpoint = Checkpoint.load(args.checkpoint)
    test = WindowDataset.load(args.windows)
    seed = int(_resolved(args, config, "seed", 0))
    guidance = float(_resolved(args, config, "guidance", 1.0))

    if args.tier == "realism":
        max_windows = args.max_windows
        report = realism_eval(checkpoint, test, w=guidance, seed=seed, max_windows=max_windows)
        report.save(out)
        if args.plots:
            _render_plots(report, out)
        print(f"realism: price KS {report.groups['price'].ks:.4f}, "
              f"volume KS {report.groups['volume'].ks:.4f}")
    elif args.tier == "counterfactual":
        train = WindowDataset.load(args.train_windows)
        q = float(_resolved(args, config, "q", 0.2))
        n_side = int(_resolved(args, config, "n-per-side", 200))
        if args.regime in (None, "all"):
            results = counterfactual_suite(
                checkpoint, test, train.regimes, q=q, n_per_side=n_side, w=guidance, seed=seed,
            )
        else:
            results = [counterfactual_eval(
                checkpoint, test, train.regimes, args.regime, q=q, n_per_side=n_side,
                w=guidance, seed=seed,
            )]
        rows = []
        for result in results:
            result.high.save(out / f"high-{result.component}")
            result.low.save(out / f"low-{result.component}")
            rows.append(result.to_dict())
            print(f"{result.component}: high {result.mean_high:.3f} vs low {result.mean_low:.3f} "
                  f"(p={result.p_value:.2e})")
        write_json(out / "summary.json", {"scenarios": rows})
        with open(out / "summary.csv", "w") as f:
            f.write("component,mean_high,mean_low,direction,p_value\n")
            for row in rows:
                f.write(f"{row['component']},{row['mean_high']!r},{row['mean_low']!r},"
                        f"{row['direction']!r},{row['p_value']!r}\n")
    else:  # usefulness
        train = WindowDataset.load(args.train_windows)
        q = float(_resolved(args, config, "q", 0.2))
        cf_per_side = int(_resolved(args, config, "cf-per-side", 200))
        report = usefulness_eval(
            checkpoint, train, test, q=q, cf_per_side=cf_per_side, w=guidance, seed=seed,
        )
        report.save(out)
        for task, settings in report.table.items():
            for setting, cells in settings.items():
                print(f"{task}/{setting}: high {cells['high']:.3f}, low {cells['low']:.3f}")
    _echo(out, {"tier": args.tier, "checkpoint": str(args.checkpoint),
                "windows": str(args.windows), "guidance": guidance, "seed": seed})
    return 0


def _render_plots(report, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    facts = report.facts
    if facts is None:
        return
    plots = Path(out) / "plots"
    plots.mkdir(exist_ok=True)
    for h, hist in facts.return_hists.items():
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(hist["centers"], hist["real"], label="real")
        ax.plot(hist["centers"], hist["gen"], label="generated")
        ax.set_title(f"mid-price moves, horizon {h}")
        ax.legend()
        fig.savefig(plots / f"returns_h{h}.png", dpi=100, bbox_inches="tight")
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(facts.spread_hist["centers"], facts.spread_hist["real"], label="real")
    ax.plot(facts.spread_hist["centers"], facts.spread_hist["gen"], label="generated")
    ax.set_title("spread distribution")
    ax.legend()
    fig.savefig(plots / "spread.png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(facts.acf_lags, facts.acf_real, label="real")
    ax.plot(facts.acf_lags, facts.acf_gen, label="generated")
    ax.set_title("|return| autocorrelation")
    ax.legend()
    fig.savefig(plots / "abs_return_acf.png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, mat, name in zip(axes, (facts.vol_diff_corr_real, facts.vol_diff_corr_gen),
                             ("real", "generated")):
        im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_title(f"volume diff corr ({name})")
        fig.colorbar(im, ax=ax)
    fig.savefig(plots / "volume_diff_corr.png", dpi=100, bbox_inches="tight")
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="lobdiff", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse LOBSTER files or synthesize a book series")
    p.add_argument("--data", help="LOBSTER orderbook CSV")
    p.add_argument("--messages", help="LOBSTER message CSV (timestamps)")
    p.add_argument("--synthetic", action="store_true", help="generate synthetic data instead")
    p.add_argument("--config", help="JSON config with defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-seconds", type=int, dest="n_seconds")
    p.add_argument("--k", type=int)
    p.add_argument("--open", type=float)
    p.add_argument("--close", type=float)
    p.add_argument("--symbol")
    p.add_argument("--date")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="encode series and build window datasets")
    p.add_argument("--series", nargs="+", required=True, help="series directories")
    p.add_argument("--config")
    p.add_argument("--stride", type=int)
    p.add_argument("--eval-stride", type=int, dest="eval_stride")
    p.add_argument("--split-days", dest="split_days", help="train,val,test day counts")
    p.add_argument("--split-frac", dest="split_frac", help="train,val,test fractions")
    p.add_argument("--tick", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train stage 1 and/or stage 2")
    p.add_argument("--windows", required=True, help="preprocess output directory")
    p.add_argument("--config")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--no-control", action="store_true", dest="no_control",
                   help="ablation: no control module, single stage")
    p.add_argument("--from", dest="from_checkpoint", help="stage-1 checkpoint for --stage 2")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate futures from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--regime", choices=COMPONENTS)
    p.add_argument("--side", choices=("high", "low"))
    p.add_argument("--q", type=float)
    p.add_argument("--override-regime", dest="override_regime",
                   help="JSON file {component: value or per-step list}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="run an evaluation tier")
    p.add_argument("tier", choices=("realism", "counterfactual", "usefulness"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True, help="held-out window dataset")
    p.add_argument("--train-windows", dest="train_windows",
                   help="training windows (counterfactual targets / usefulness)")
    p.add_argument("--config")
    p.add_argument("--guidance", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--n-per-side", type=int, dest="n_per_side")
    p.add_argument("--cf-per-side", type=int, dest="cf_per_side")
    p.add_argument("--max-windows", type=int, dest="max_windows")
    p.add_argument("--regime", help="one of trend/vol/liq/imb or 'all'")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval" and args.tier in ("counterfactual", "usefulness"):
            if args.train_windows is None:
                raise ConfigError(f"eval {args.tier} requires --train-windows")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
