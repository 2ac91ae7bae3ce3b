"""Adam training loop: linear warm-up, cosine decay, replayable checkpoints.

Every random draw is derived statelessly from (seed, stream, step), so a run
resumed from any checkpoint reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import (
    Checkpoint,
    NetConfig,
    TrajectoryTensor,
    init_params,
    load_checkpoint,
    loss_and_gradient,
    save_checkpoint,
)
from .metapath import MetaPathProfile
from .schedule import ScheduleParams

_STREAM_SHUFFLE = 1
_STREAM_NOISE = 2
_STREAM_TIME = 3
RNG_SCHEME = "per-step-seedsequence-v1"


def stream_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Generator for one (stream, step) cell of the run's hierarchical rng."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, step]))


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    anneal_frac: float = 0.1
    seed: int = 0
    log_every: int = 50
    ckpt_every: int = 0

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.anneal_frac <= 1.0:
            raise ValueError("anneal_frac must be in [0, 1]")

    @staticmethod
    def with_warmup_frac(total_steps: int, warmup_frac: float = 0.05, **kw) -> "TrainConfig":
        return TrainConfig(
            warmup_steps=int(round(warmup_frac * total_steps)), total_steps=total_steps, **kw
        )


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warm-up to peak_lr, then cosine decay to 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.peak_lr
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


def anneal_weight(cfg: TrainConfig, step: int) -> float:
    """Linear ramp 0 -> 1 over the first anneal_frac of steps (early stabilizer)."""
    ramp = cfg.anneal_frac * cfg.total_steps
    if ramp <= 0:
        return 1.0
    return min(1.0, (step + 1) / ramp)


def init_opt_state(params: dict[str, np.ndarray]) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "step": 0,
    }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: dict,
    lr: float,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], dict]:
    """One bias-corrected Adam update; purely functional."""
    step = opt["step"] + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - cfg.b1 ** step
    bc2 = 1.0 - cfg.b2 ** step
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
        m = cfg.b1 * opt["m"][name] + (1.0 - cfg.b1) * g
        v = cfg.b2 * opt["v"][name] + (1.0 - cfg.b2) * g * g
        new_params[name] = w - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, {"m": new_m, "v": new_v, "step": step}


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    opt: dict
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoint_path: Path | None = None


def _batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Deterministic batch for a global step: per-epoch shuffle, contiguous slices."""
    per_epoch = max(1, n // batch_size) if n >= batch_size else 1
    epoch, pos = divmod(step, per_epoch)
    perm = stream_rng(seed, _STREAM_SHUFFLE, epoch).permutation(n)
    if n < batch_size:
        return perm
    return perm[pos * batch_size : pos * batch_size + batch_size]


def train(
    dataset: list[TrajectoryTensor],
    profile: MetaPathProfile,
    sched: ScheduleParams,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    log_stdout: bool = False,
) -> TrainResult:
    """Optimize the denoiser on encoded trajectories.

    Deterministic for fixed (dataset, configs, seed); a run resumed from a
    mid-run checkpoint finishes with bit-identical parameters.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if net_cfg.vocab_size != len(profile.vocab):
        raise ValueError(
            f"network vocab {net_cfg.vocab_size} != profile vocab {len(profile.vocab)}"
        )
    if net_cfg.film_d != profile.d:
        raise ValueError(f"network film_d {net_cfg.film_d} != profile width {profile.d}")
    for tr in dataset:
        if tr.values.shape != (net_cfg.max_len, net_cfg.vocab_size):
            raise ValueError("dataset tensor shape mismatch with network config")

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        params = ck.params
        opt = {"m": ck.opt_m, "v": ck.opt_v, "step": ck.step}
        start = ck.step
        if ck.opt_m is None:
            opt = init_opt_state(params)
    else:
        params = init_params(net_cfg, train_cfg.seed)
        opt = init_opt_state(params)
        start = 0

    psi_mat = profile.film_features
    psi_clip = profile.psi_clipped
    trace: list[tuple[int, float, float]] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rng_info = {"scheme": RNG_SCHEME, "seed": train_cfg.seed}
    for step in range(start, train_cfg.total_steps):
        idx = _batch_indices(len(dataset), train_cfg.batch_size, step, train_cfg.seed)
        batch = [dataset[i] for i in idx]
        loss, grads = loss_and_gradient(
            params, net_cfg, batch, psi_mat, psi_clip, sched,
            time_rng=stream_rng(train_cfg.seed, _STREAM_TIME, step),
            noise_rng=stream_rng(train_cfg.seed, _STREAM_NOISE, step),
        )
        ramp = anneal_weight(train_cfg, step)
        if ramp != 1.0:
            grads = {k: ramp * g for k, g in grads.items()}
        lr = lr_at(train_cfg, step)
        params, opt = adam_step(params, grads, opt, lr, train_cfg)

        if train_cfg.log_every and (step % train_cfg.log_every == 0 or step == train_cfg.total_steps - 1):
            trace.append((step, loss, lr))
            if log_stdout:
                print(f"step={step} loss={loss:.6f} lr={lr:.6g}")
        if out_path is not None and train_cfg.ckpt_every and (step + 1) % train_cfg.ckpt_every == 0:
            save_checkpoint(
                out_path / f"checkpoint_{step + 1:06d}.json",
                net_cfg, sched, params, opt["step"], opt["m"], opt["v"], rng_info,
            )

    result = TrainResult(params=params, opt=opt, trace=trace)
    if out_path is not None:
        final = out_path / "checkpoint.json"
        save_checkpoint(final, net_cfg, sched, params, opt["step"], opt["m"], opt["v"], rng_info)
        result.checkpoint_path = final
        with open(out_path / "trace.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr"])
            for row in trace:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return result
