"""Noise-prediction network: gated dilated residual blocks over the time axis
with three-stage FiLM modulation (diffusion time, then per-step local
conditions, then global conditions), a learned price-level embedding at the
input, and an optional control pathway injected through zero-initialized 1x1
convolutions so that conditioning interventions start as an exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .arrayio import read_f32, read_json, write_f32, write_json
from .diffusion import DiffusionSchedule, eps_to_score
from .errors import ConfigError, DataError
from .preprocess import PreprocessStats


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 16
    channels: int = 64
    levels: int = 20  # 2K feature rows
    tau: int = 32
    t_emb_dim: int = 128
    local_dim: int = 64
    global_dim: int = 64
    kernel_size: int = 3
    use_control: bool = True
    dropout_p: float = 0.5  # condition-dropout probability used in training

    @property
    def k(self) -> int:
        return self.levels // 2

    @property
    def history_dim(self) -> int:
        """Per-step width of the encoded history (features plus time-of-day)."""
        return 2 * self.levels + 2

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be at least 1")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.levels < 2 or self.levels % 2 != 0:
            raise ConfigError("levels must be an even count of feature rows")
        if not (0.0 <= self.dropout_p <= 1.0):
            raise ConfigError("dropout_p must lie in [0, 1]")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")

    def to_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "channels": self.channels,
            "levels": self.levels,
            "tau": self.tau,
            "t_emb_dim": self.t_emb_dim,
            "local_dim": self.local_dim,
            "global_dim": self.global_dim,
            "kernel_size": self.kernel_size,
            "use_control": self.use_control,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ConditionBundle:
    """Per-batch conditioning tensors; regimes already z-scored.

    present=False routes every conditioning pathway to its learned null
    embedding, which is what classifier-free guidance trains against.
    """

    history: torch.Tensor  # (B, tau, 2*levels + 2)
    liq: torch.Tensor  # (B, tau)
    imb: torch.Tensor  # (B, tau)
    tod: torch.Tensor  # (B, tau, 2)
    trend: torch.Tensor  # (B,)
    vol: torch.Tensor  # (B,)
    present: torch.Tensor  # (B,) bool

    @property
    def batch(self) -> int:
        return self.history.shape[0]

    @classmethod
    def absent(cls, batch: int, config: ModelConfig) -> "ConditionBundle":
        tau = config.tau
        return cls(
            history=torch.zeros(batch, tau, config.history_dim),
            liq=torch.zeros(batch, tau),
            imb=torch.zeros(batch, tau),
            tod=torch.zeros(batch, tau, 2),
            trend=torch.zeros(batch),
            vol=torch.zeros(batch),
            present=torch.zeros(batch, dtype=torch.bool),
        )

    def with_present(self, mask: torch.Tensor) -> "ConditionBundle":
        return ConditionBundle(
            history=self.history, liq=self.liq, imb=self.imb, tod=self.tod,
            trend=self.trend, vol=self.vol, present=mask,
        )

    def index(self, idx) -> "ConditionBundle":
        return ConditionBundle(
            history=self.history[idx], liq=self.liq[idx], imb=self.imb[idx],
            tod=self.tod[idx], trend=self.trend[idx], vol=self.vol[idx],
            present=self.present[idx],
        )


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Raw sinusoidal features of diffusion time at geometrically spaced
    frequencies, interleaved [sin f0 t, cos f0 t, sin f1 t, ...]."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype))
    args = t[:, None] * freqs[None, :]
    out = torch.empty(t.shape[0], 2 * half, dtype=t.dtype)
    out[:, 0::2] = torch.sin(args)
    out[:, 1::2] = torch.cos(args)
    return out


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.proj(timestep_features(t, self.dim))


class LocalEncoder(nn.Module):
    """Temporal convolution stack over the per-step condition channels:
    encoded history, liquidity, imbalance and time-of-day."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        pad = (config.kernel_size - 1) // 2
        in_dim = config.history_dim + 4  # + liq, imb, tod sin/cos
        self.conv = nn.Sequential(
            nn.Conv1d(in_dim, config.local_dim, config.kernel_size, padding=pad),
            nn.SiLU(),
            nn.Conv1d(config.local_dim, config.local_dim, config.kernel_size, padding=pad),
            nn.SiLU(),
        )
        self.null_emb = nn.Parameter(torch.randn(config.local_dim) * 0.02)

    def forward(self, cond: ConditionBundle) -> torch.Tensor:
        stacked = torch.cat(
            [
                cond.history.transpose(1, 2),
                cond.liq[:, None, :],
                cond.imb[:, None, :],
                cond.tod.transpose(1, 2),
            ],
            dim=1,
        )
        out = self.conv(stacked)
        tau = out.shape[-1]
        null = self.null_emb[None, :, None].expand(out.shape[0], -1, tau)
        keep = cond.present[:, None, None]
        return torch.where(keep, out, null)


class GlobalEncoder(nn.Module):
    """Two-scalar (trend, volatility) multilayer perceptron."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(2, config.global_dim), nn.SiLU(),
            nn.Linear(config.global_dim, config.global_dim),
        )
        self.null_emb = nn.Parameter(torch.randn(config.global_dim) * 0.02)

    def forward(self, cond: ConditionBundle) -> torch.Tensor:
        out = self.mlp(torch.stack([cond.trend, cond.vol], dim=1))
        null = self.null_emb[None, :].expand(out.shape[0], -1)
        return torch.where(cond.present[:, None], out, null)


class GatedBlock(nn.Module):
    """Dilated gated convolution with sequential FiLM (time, local, global)
    applied to the pre-gate activations, emitting residual and skip outputs.

    FiLM generators output (delta_scale, shift); activations are multiplied
    by 1 + delta_scale, so zeroed generators leave the block unmodulated.
    """

    def __init__(self, config: ModelConfig, dilation: int):
        super().__init__()
        c = config.channels
        pad = dilation * (config.kernel_size - 1) // 2
        self.dilated = nn.Conv1d(c, 2 * c, config.kernel_size, dilation=dilation, padding=pad)
        self.film_t = nn.Linear(config.t_emb_dim, 4 * c)
        self.film_local = nn.Conv1d(config.local_dim, 4 * c, 1)
        self.film_global = nn.Linear(config.global_dim, 4 * c)
        self.res_proj = nn.Conv1d(c, c, 1)
        self.skip_proj = nn.Conv1d(c, c, 1)

    def forward(
        self,
        h: torch.Tensor,
        t_emb: torch.Tensor,
        local: torch.Tensor,
        glob: torch.Tensor,
        extra: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        c = h.shape[1]
        y = self.dilated(h)
        ts, tb = self.film_t(t_emb)[:, :, None].chunk(2, dim=1)
        y = y * (1.0 + ts) + tb
        ls, lb = self.film_local(local).chunk(2, dim=1)
        y = y * (1.0 + ls) + lb
        gs, gb = self.film_global(glob)[:, :, None].chunk(2, dim=1)
        y = y * (1.0 + gs) + gb
        if extra is not None:
            y = y + extra
        z = torch.tanh(y[:, :c]) * torch.sigmoid(y[:, c:])
        return h + self.res_proj(z), self.skip_proj(z)


class ControlModule(nn.Module):
    """Trainable copy of the conditioning encoders whose signal enters each
    block through a zero-initialized 1x1 convolution (no effect until
    trained)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.local_enc = LocalEncoder(config)
        self.global_enc = GlobalEncoder(config)
        self.projs = nn.ModuleList()
        in_dim = config.local_dim + config.global_dim
        for _ in range(config.n_blocks):
            conv = nn.Conv1d(in_dim, 2 * config.channels, 1)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            self.projs.append(conv)

    def signal(self, cond: ConditionBundle) -> torch.Tensor:
        local = self.local_enc(cond)
        glob = self.global_enc(cond)
        tau = local.shape[-1]
        return torch.cat([local, glob[:, :, None].expand(-1, -1, tau)], dim=1)


class Denoiser(nn.Module):
    """Predicts the injected noise for a (B, levels, 2, tau) future grid."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channels
        self.input_proj = nn.Conv2d(2, c, 1)
        self.level_emb = nn.Parameter(torch.randn(1, c, config.levels, 1) * 0.02)
        self.level_mix = nn.Conv1d(c * config.levels, c, 1)
        self.time_emb = TimeEmbedding(config.t_emb_dim)
        self.local_enc = LocalEncoder(config)
        self.global_enc = GlobalEncoder(config)
        self.blocks = nn.ModuleList(
            [GatedBlock(config, dilation=2 ** (i % 10)) for i in range(config.n_blocks)]
        )
        self.out_proj1 = nn.Conv1d(c, c, 1)
        self.out_proj2 = nn.Conv1d(c, 2 * config.levels, 1)
        nn.init.zeros_(self.out_proj2.weight)
        nn.init.zeros_(self.out_proj2.bias)
        # affine passthrough from the noised input to the output: a gain on x
        # plus a per-feature shift, both driven by diffusion time and the
        # global condition. The hidden state narrows to `channels`, so the
        # per-feature noise-identity component of the prediction would be
        # rank-limited without the gain; the condition-dependent gain and
        # shift are the direct routes for interventions to steer the variance
        # and mean of generated features. Zero-initialized so a fresh model
        # still outputs zero.
        self.bypass_gain = nn.Parameter(torch.zeros(1, config.levels, 2, 1))
        self.bypass_gate = nn.Linear(config.t_emb_dim + config.global_dim, 2 * config.levels)
        self.bypass_shift = nn.Linear(config.t_emb_dim + config.global_dim, 2 * config.levels)
        nn.init.zeros_(self.bypass_shift.weight)
        nn.init.zeros_(self.bypass_shift.bias)
        self.control = ControlModule(config) if config.use_control else None

    def base_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, p in self.named_parameters():
            if not name.startswith("control."):
                yield name, p

    def control_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, p in self.named_parameters():
            if name.startswith("control."):
                yield name, p

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor | float,
        cond: ConditionBundle,
        mode: str = "base",
    ) -> torch.Tensor:
        if mode not in ("base", "controlled"):
            raise ConfigError(f"unknown forward mode: {mode}")
        if mode == "controlled" and self.control is None:
            raise ConfigError("controlled mode requires a model built with use_control")
        b, levels, chans, tau = x.shape
        if levels != self.config.levels or chans != 2:
            raise DataError(
                f"input grid {tuple(x.shape)} does not match config levels={self.config.levels}"
            )
        if isinstance(t, float):
            t = torch.full((b,), t, dtype=x.dtype)

        h = self.input_proj(x.transpose(1, 2))  # (B, C, levels, tau)
        h = torch.nn.functional.silu(h + self.level_emb)
        h = self.level_mix(h.reshape(b, -1, tau))  # (B, C, tau)

        t_emb = self.time_emb(t)
        local = self.local_enc(cond)
        glob = self.global_enc(cond)
        ctrl = self.control.signal(cond) if mode == "controlled" else None

        skip_sum = torch.zeros_like(h)
        for i, block in enumerate(self.blocks):
            extra = self.control.projs[i](ctrl) if ctrl is not None else None
            h, skip = block(h, t_emb, local, glob, extra)
            skip_sum = skip_sum + skip

        out = torch.nn.functional.silu(self.out_proj1(torch.nn.functional.silu(skip_sum)))
        out = self.out_proj2(out).reshape(b, levels, 2, tau)
        gate_in = torch.cat([t_emb, glob], dim=1)
        gate = self.bypass_gate(gate_in).reshape(b, levels, 2, 1)
        shift = self.bypass_shift(gate_in).reshape(b, levels, 2, 1)
        return out + x * (self.bypass_gain * (1.0 + gate)) + shift


@dataclass
class Checkpoint:
    """Everything needed to rebuild the sampler: model weights (raw and EMA
    shadows of the trained set), schedule, preprocessing constants, stage."""

    config: ModelConfig
    schedule: DiffusionSchedule
    stats: PreprocessStats
    stage: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)

    def base_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("control.")]

    def control_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("control.")]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / "params").mkdir(parents=True, exist_ok=True)
        (directory / "ema").mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": self.config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "preprocess": self.stats.to_dict(),
            "stage": self.stage,
            "base_params": self.base_names(),
            "control_params": self.control_names(),
            "ema_params": sorted(self.ema),
            "shapes": {n: list(a.shape) for n, a in self.params.items()},
        }
        write_json(directory / "manifest.json", manifest)
        for name, arr in self.params.items():
            write_f32(directory / "params" / f"{name}.f32le", arr)
        for name, arr in self.ema.items():
            write_f32(directory / "ema" / f"{name}.f32le", arr)

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        manifest = read_json(directory / "manifest.json")
        config = ModelConfig.from_dict(manifest["config"])
        shapes = {n: tuple(s) for n, s in manifest["shapes"].items()}
        params = {
            n: read_f32(directory / "params" / f"{n}.f32le", shapes[n])
            for n in manifest["base_params"] + manifest["control_params"]
        }
        ema = {
            n: read_f32(directory / "ema" / f"{n}.f32le", shapes[n])
            for n in manifest["ema_params"]
        }
        return cls(
            config=config,
            schedule=DiffusionSchedule.from_dict(manifest["schedule"]),
            stats=PreprocessStats.from_dict(manifest["preprocess"]),
            stage=int(manifest["stage"]),
            params=params,
            ema=ema,
        )

    def build_model(self, use_ema: bool = True) -> Denoiser:
        model = Denoiser(self.config)
        state = {n: torch.from_numpy(a.copy()) for n, a in self.params.items()}
        if use_ema:
            for n, a in self.ema.items():
                state[n] = torch.from_numpy(a.copy())
        model.load_state_dict(state)
        model.eval()
        return model

    @classmethod
    def from_model(
        cls,
        model: Denoiser,
        schedule: DiffusionSchedule,
        stats: PreprocessStats,
        stage: int,
        ema: dict[str, torch.Tensor] | None = None,
    ) -> "Checkpoint":
        params = {n: p.detach().numpy().copy() for n, p in model.state_dict().items()}
        ema_np = {n: t.detach().numpy().copy() for n, t in (ema or {}).items()}
        return cls(
            config=model.config, schedule=schedule, stats=stats,
            stage=stage, params=params, ema=ema_np,
        )


class DenoiserScore:
    """Adapts a Denoiser to the sampler's score-field interface.

    The network predicts noise; the score is -eps / sqrt(1 - alpha_bar) at
    the level active for the requested diffusion time. cond=None evaluates
    the null-embedding (unconditional) pathway.
    """

    def __init__(self, model: Denoiser, schedule: DiffusionSchedule, mode: str = "base"):
        self.model = model
        self.schedule = schedule
        self.mode = mode

    def evaluate(self, x: np.ndarray, t: float, cond: ConditionBundle | None) -> np.ndarray:
        level = self.schedule.level_for_time(t)
        xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        bundle = cond if cond is not None else ConditionBundle.absent(x.shape[0], self.model.config)
        with torch.no_grad():
            eps = self.model(xt, float(t), bundle, mode=self.mode)
        return eps_to_score(eps.numpy().astype(np.float64), level, self.schedule)
