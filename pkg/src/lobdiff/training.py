"""Dual-stage training: stage 1 fits the backbone and condition encoders with
the control pathway frozen; stage 2 freezes everything else and trains only
the control module. Both stages drop the condition bundle per sample with
probability cond_drop_p so the null pathway needed by classifier-free
guidance gets trained, keep an EMA shadow of the trainable set, and early-stop
on the EMA validation loss.
"""

from __future__ import annotations

import csv
import hashlib
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .arrayio import write_json
from .diffusion import DiffusionSchedule
from .errors import ConfigError, DataError, NumericalError
from .network import Checkpoint, ConditionBundle, Denoiser, ModelConfig
from .preprocess import PreprocessStats, WindowDataset, pack_grid, to_model_space, unpack_grid
from .regimes import normalize_regime_flat


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    patience: int = 100
    min_delta: float = 0.001
    ema_decay: float = 0.999
    cond_drop_p: float = 0.5
    max_epochs: int = 200
    seed: int = 0
    stage: int = 1

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not (0.0 < self.ema_decay < 1.0):
            raise ConfigError("ema_decay must lie in (0, 1)")
        if not (0.0 <= self.cond_drop_p <= 1.0):
            raise ConfigError("cond_drop_p must lie in [0, 1]")
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "batch_size": self.batch_size, "patience": self.patience,
            "min_delta": self.min_delta, "ema_decay": self.ema_decay,
            "cond_drop_p": self.cond_drop_p, "max_epochs": self.max_epochs,
            "seed": self.seed, "stage": self.stage,
        }


def ema_update(
    shadow: dict[str, torch.Tensor],
    named_params: list[tuple[str, nn.Parameter]],
    decay: float,
) -> None:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    with torch.no_grad():
        for name, p in named_params:
            shadow[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def draw_present_mask(rng: np.random.Generator, n: int, drop_p: float) -> np.ndarray:
    """Per-sample condition mask; the whole bundle drops together."""
    return rng.random(n) >= drop_p


@dataclass
class ModelArrays:
    """Dataset tensors pre-scaled to model space, ready for batching."""

    x0: torch.Tensor  # (n, levels, 2, tau) future grid
    history: torch.Tensor  # (n, tau, 2*levels + 2)
    liq: torch.Tensor  # (n, tau) normalized
    imb: torch.Tensor  # (n, tau)
    tod: torch.Tensor  # (n, tau, 2) future time-of-day
    trend: torch.Tensor  # (n,)
    vol: torch.Tensor  # (n,)

    def __len__(self) -> int:
        return self.x0.shape[0]


def prepare_model_arrays(dataset: WindowDataset, stats: PreprocessStats) -> ModelArrays:
    k = dataset.k
    x0 = to_model_space(pack_grid(dataset.future, k), stats)
    hist_grid = to_model_space(pack_grid(dataset.history, k), stats)
    hist = np.concatenate([unpack_grid(hist_grid), dataset.history[..., 4 * k :]], axis=-1)
    normed = normalize_regime_flat(dataset.regimes, stats)
    tau = dataset.tau
    return ModelArrays(
        x0=torch.from_numpy(np.ascontiguousarray(x0, dtype=np.float32)),
        history=torch.from_numpy(np.ascontiguousarray(hist, dtype=np.float32)),
        liq=torch.from_numpy(np.ascontiguousarray(normed[:, 2 : 2 + tau], dtype=np.float32)),
        imb=torch.from_numpy(np.ascontiguousarray(normed[:, 2 + tau :], dtype=np.float32)),
        tod=torch.from_numpy(np.ascontiguousarray(dataset.future[..., 4 * k :], dtype=np.float32)),
        trend=torch.from_numpy(np.ascontiguousarray(normed[:, 0], dtype=np.float32)),
        vol=torch.from_numpy(np.ascontiguousarray(normed[:, 1], dtype=np.float32)),
    )


def bundle_from_arrays(
    arrs: ModelArrays, idx: torch.Tensor | np.ndarray, present: torch.Tensor | None = None
) -> ConditionBundle:
    idx = torch.as_tensor(idx, dtype=torch.long)
    if present is None:
        present = torch.ones(len(idx), dtype=torch.bool)
    return ConditionBundle(
        history=arrs.history[idx], liq=arrs.liq[idx], imb=arrs.imb[idx],
        tod=arrs.tod[idx], trend=arrs.trend[idx], vol=arrs.vol[idx],
        present=present,
    )


def _window_noise(dataset: WindowDataset, i: int, n_levels: int, shape) -> tuple[int, np.ndarray]:
    """Fixed validation noise keyed by window content, so the validation loss
    does not depend on dataset ordering."""
    digest = hashlib.blake2b(
        dataset.history[i].tobytes() + dataset.future[i].tobytes(), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    level = int(rng.integers(n_levels))
    z = rng.standard_normal(shape).astype(np.float32)
    return level, z


@contextmanager
def ema_weights(model: nn.Module, shadow: dict[str, torch.Tensor]):
    """Temporarily swap the shadowed parameters into the model."""
    backup = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in shadow:
                backup[name] = p.detach().clone()
                p.copy_(shadow[name])
    try:
        yield
    finally:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name in shadow:
                    p.copy_(backup[name])


def _clone_state(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: t.detach().clone() for n, t in model.state_dict().items()}


def train_stage(
    dataset: WindowDataset,
    val: WindowDataset,
    config: TrainConfig,
    model_config: ModelConfig,
    schedule: DiffusionSchedule,
    stats: PreprocessStats,
    checkpoint_in: Checkpoint | None = None,
    run_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
    metrics_sink: list[dict] | None = None,
) -> Checkpoint:
    """Run one optimization stage and return the best-validation checkpoint.

    The returned checkpoint carries the best epoch's raw weights as the
    trained set and the EMA shadows of the stage's trainable parameters;
    validation (and therefore model selection) is scored with EMA weights.
    """
    config.validate()
    if len(dataset) == 0:
        raise DataError("empty training dataset")
    if len(val) == 0:
        raise DataError("empty validation dataset")

    if config.stage == 2:
        if checkpoint_in is None:
            raise ConfigError("stage 2 requires a stage-1 checkpoint")
        model_config = checkpoint_in.config
        if not model_config.use_control:
            raise ConfigError("stage 2 requires a model built with use_control")
        model = checkpoint_in.build_model(use_ema=True)
        model.train()
        for _, p in model.base_parameters():
            p.requires_grad_(False)
        for _, p in model.control_parameters():
            p.requires_grad_(True)
        trainable = list(model.control_parameters())
        mode = "controlled"
    else:
        torch.manual_seed(config.seed)
        model = Denoiser(model_config)
        for _, p in model.control_parameters():
            p.requires_grad_(False)
        trainable = list(model.base_parameters())
        mode = "base"

    arrs = prepare_model_arrays(dataset, stats)
    val_arrs = prepare_model_arrays(val, stats)
    grid_shape = tuple(arrs.x0.shape[1:])
    n_levels = schedule.n
    val_levels = np.empty(len(val), dtype=np.int64)
    val_z = torch.empty((len(val),) + grid_shape)
    for i in range(len(val)):
        lvl, z = _window_noise(val, i, n_levels, grid_shape)
        val_levels[i] = lvl
        val_z[i] = torch.from_numpy(z)
    val_levels_t = torch.from_numpy(val_levels)

    sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bar)).float()
    sqrt_1m = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bar)).float()

    def perturb(x0: torch.Tensor, levels: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        a = sqrt_ab[levels][:, None, None, None]
        b = sqrt_1m[levels][:, None, None, None]
        return a * x0 + b * z

    def validate() -> float:
        model.eval()
        total = 0.0
        count = 0
        with ema_weights(model, shadow), torch.no_grad():
            for start in range(0, len(val), 256):
                idx = np.arange(start, min(start + 256, len(val)))
                x0 = val_arrs.x0[idx]
                levels = val_levels_t[idx]
                z = val_z[idx]
                xi = perturb(x0, levels, z)
                t = (levels.float() + 1.0) / n_levels
                eps = model(xi, t, bundle_from_arrays(val_arrs, idx), mode=mode)
                total += torch.sum((eps.double() - z.double()) ** 2).item()
                count += z.numel()
        model.train()
        return total / count

    opt = torch.optim.Adam((p for _, p in trainable), lr=config.lr)
    shadow = {n: p.detach().clone() for n, p in trainable}
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    run_path = Path(run_dir) if run_dir is not None else None
    metrics: list[dict] = []
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        write_json(
            run_path / "config.json",
            {
                "train": config.to_dict(),
                "model": model_config.to_dict(),
                "schedule": schedule.to_dict(),
                "preprocess": stats.to_dict(),
            },
        )

    n = len(dataset)
    best_val = None
    best_state = _clone_state(model)
    best_ema = {k: v.clone() for k, v in shadow.items()}
    streak = 0
    step = 0
    model.train()
    t_start = time.monotonic()

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            b = len(idx)
            x0 = arrs.x0[idx]
            levels = torch.from_numpy(rng.integers(0, n_levels, size=b))
            z = torch.randn(x0.shape, generator=gen)
            xi = perturb(x0, levels, z)
            present = torch.from_numpy(draw_present_mask(rng, b, config.cond_drop_p))
            bundle = bundle_from_arrays(arrs, idx, present)
            t = (levels.float() + 1.0) / n_levels
            eps = model(xi, t, bundle, mode=mode)
            loss = torch.mean((eps - z) ** 2)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at step {step}: lr={config.lr}, "
                    f"batch mean={float(x0.mean()):.4g}, batch std={float(x0.std()):.4g}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update(shadow, trainable, config.ema_decay)
            total += value * b
            seen += b
            step += 1
        train_loss = total / seen
        val_loss = validate()
        metrics.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": config.lr,
                "wall_s": time.monotonic() - t_start,
            }
        )
        if log is not None:
            log(f"stage {config.stage} epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f}")
        if best_val is None or val_loss < best_val - config.min_delta:
            best_val = val_loss
            best_state = _clone_state(model)
            best_ema = {k: v.clone() for k, v in shadow.items()}
            streak = 0
        else:
            streak += 1
            if streak >= config.patience:
                break

    checkpoint = Checkpoint(
        config=model_config,
        schedule=schedule,
        stats=stats,
        stage=config.stage,
        params={n: t.numpy().copy() for n, t in best_state.items()},
        ema={n: t.numpy().copy() for n, t in best_ema.items()},
    )
    if run_path is not None:
        with open(run_path / "metrics.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_loss", "lr", "wall_s"])
            writer.writeheader()
            writer.writerows(metrics)
        checkpoint.save(run_path / "checkpoint-best")
        Checkpoint(
            config=model_config, schedule=schedule, stats=stats, stage=config.stage,
            params={n: t.numpy().copy() for n, t in model.state_dict().items()},
            ema={n: t.numpy().copy() for n, t in shadow.items()},
        ).save(run_path / "checkpoint-last")
    if metrics_sink is not None:
        metrics_sink.extend(metrics)
    return checkpoint
