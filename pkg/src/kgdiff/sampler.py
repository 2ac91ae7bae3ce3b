"""Reverse-time Euler-Maruyama sampling, decoding, and timestamp attachment.

Integration runs from t=1 down to t=0 in exactly ceil(1/step_size) steps and
never queries the network at negative time. Trajectories use independent rng
substreams, so any prefix of the batch is reproducible on its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import EmpiricalGapDistribution, PatientRecord, Visit
from .denoiser import Checkpoint, forward
from .metapath import FIELD_AE, FIELD_LAB, FIELD_MED, MetaPathProfile, TokenVocab
from .schedule import ScheduleParams, alpha_v, beta_v

MIN_GAP_DAYS = 1e-3

DRIFT_MODES = ("vp_consistent", "paper_literal")


@dataclass(frozen=True)
class SamplerConfig:
    step_size: float = 1e-3
    drift_mode: str = "vp_consistent"
    noise_on: bool = True
    n_trajectories: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError("step_size must be in (0, 1]")
        if self.drift_mode not in DRIFT_MODES:
            raise ValueError(f"drift_mode must be one of {DRIFT_MODES}")
        if self.n_trajectories < 0:
            raise ValueError("n_trajectories must be >= 0")


@dataclass(frozen=True)
class SyntheticEvent:
    time: float
    lab: int | None
    med: int | None
    ae: bool


@dataclass(frozen=True)
class SyntheticTrajectory:
    trajectory_id: int
    events: tuple[SyntheticEvent, ...]

    def validate(self, vocab: TokenVocab) -> None:
        times = [e.time for e in self.events]
        if any(t < 0 for t in times):
            raise ValueError("event times must be non-negative")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        for e in self.events:
            if e.lab is None and e.med is None and not e.ae:
                raise ValueError("event with all fields absent")
            for tok in (e.lab, e.med):
                if tok is not None and not 0 <= tok < len(vocab):
                    raise ValueError(f"token id {tok} outside vocabulary")

    def to_record(self) -> PatientRecord:
        visits = tuple(Visit(e.time, e.lab, e.med, e.ae) for e in self.events)
        return PatientRecord(f"s{self.trajectory_id:05d}", visits)


def score_from_eps(eps_hat, t: float, sched: ScheduleParams, psi_clipped) -> np.ndarray:
    """Recover the score from the noise prediction: -eps_hat / sqrt(1 - a_v(t))."""
    a = alpha_v(sched, t, np.asarray(psi_clipped, dtype=float))
    return -np.asarray(eps_hat) / np.sqrt(1.0 - a)


def reverse_step(
    x: np.ndarray,
    t: float,
    dt: float,
    params: dict,
    net_cfg,
    profile: MetaPathProfile,
    sched: ScheduleParams,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    mask: np.ndarray,
    step_index: int = 0,
) -> np.ndarray:
    """One integrator update from time t to t - dt.

    vp_consistent:  x += dt * (beta_v * score - beta_v/2 * x) + sqrt(beta_v dt) z
    paper_literal:  x += dt * (beta_v * score)                + sqrt(beta_v dt) z
    """
    if t - dt < -1e-12:
        raise ValueError("step would move past t=0")
    bv = beta_v(sched, t, profile.psi_clipped)  # (V,)
    eps_hat = forward(params, net_cfg, x, mask, t, profile.film_features)
    s = score_from_eps(eps_hat, t, sched, profile.psi_clipped)
    drift = bv * s
    if cfg.drift_mode == "vp_consistent":
        drift = drift - 0.5 * bv * x
    x_new = x + dt * drift
    if cfg.noise_on:
        z = rng.standard_normal(x.shape)
        x_new = x_new + np.sqrt(bv * dt) * z
    if not np.all(np.isfinite(x_new)):
        raise FloatingPointError(f"non-finite sampler state at step {step_index} (t={t:.6f})")
    return x_new


def decode(x0_hat: np.ndarray, mask: np.ndarray, vocab: TokenVocab) -> list[tuple[int, int, bool]]:
    """Per unmasked row: argmax within each field block, first index on ties.

    Returns (lab token, med token, ae flag) triples.
    """
    triples = []
    lab_sl, med_sl, ae_sl = (vocab.block(f) for f in (FIELD_LAB, FIELD_MED, FIELD_AE))
    for row, keep in enumerate(np.asarray(mask, dtype=bool)):
        if not keep:
            continue
        lab = lab_sl.start + int(np.argmax(x0_hat[row, lab_sl]))
        med = med_sl.start + int(np.argmax(x0_hat[row, med_sl]))
        ae_tok = ae_sl.start + int(np.argmax(x0_hat[row, ae_sl]))
        triples.append((lab, med, ae_tok == vocab.ae_present_index))
    return triples


def sample_timestamps(
    gap_model: EmpiricalGapDistribution, length: int, rng: np.random.Generator
) -> list[float]:
    """t_0 = 0 then i.i.d. resampled gaps, floored at MIN_GAP_DAYS."""
    if length < 1:
        raise ValueError("length must be >= 1")
    times = [0.0]
    if length > 1:
        gaps = np.maximum(gap_model.resample(length - 1, rng), MIN_GAP_DAYS)
        times.extend(np.cumsum(gaps).tolist())
    return times


def integration_times(step_size: float) -> list[float]:
    """Network evaluation times for the reverse pass: 1, 1-dt, ..., all > 0."""
    n_steps = math.ceil(1.0 / step_size)
    return [1.0 - i * step_size for i in range(n_steps)]


def sample_trajectories(
    checkpoint: Checkpoint,
    profile: MetaPathProfile,
    gap_model: EmpiricalGapDistribution,
    cfg: SamplerConfig,
    lengths: list[int],
    return_states: bool = False,
):
    """Generate cfg.n_trajectories event sequences.

    Row counts are resampled from the observed `lengths`; all trajectories
    integrate jointly (shared time grid) but draw noise from per-trajectory
    substreams keyed by (seed, index).
    """
    if len(profile.vocab) != checkpoint.net_cfg.vocab_size:
        raise ValueError(
            f"profile vocab {len(profile.vocab)} != checkpoint vocab "
            f"{checkpoint.net_cfg.vocab_size}"
        )
    if profile.d != checkpoint.net_cfg.film_d:
        raise ValueError("profile feature width does not match checkpoint")
    if not lengths:
        raise ValueError("need at least one observed length")
    if cfg.n_trajectories == 0:
        return ([], (np.empty((0, 0, 0)), np.empty((0, 0), dtype=bool))) if return_states else []

    vocab = profile.vocab
    net_cfg = checkpoint.net_cfg
    sched = checkpoint.sched
    l_max = net_cfg.max_len
    n = cfg.n_trajectories
    rngs = [
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A, k])) for k in range(n)
    ]
    lengths_arr = np.asarray(lengths, dtype=int)
    mask = np.zeros((n, l_max), dtype=bool)
    x = np.empty((n, l_max, len(vocab)))
    drawn_lengths = []
    for k, rng in enumerate(rngs):
        lk = int(min(lengths_arr[rng.integers(0, lengths_arr.size)], l_max))
        lk = max(lk, 1)
        drawn_lengths.append(lk)
        mask[k, :lk] = True
        x[k] = rng.standard_normal((l_max, len(vocab)))

    dt = cfg.step_size
    for i, t in enumerate(integration_times(dt)):
        dt_i = min(dt, t)  # final partial step lands exactly on t=0
        bv = beta_v(sched, t, profile.psi_clipped)
        eps_hat = forward(checkpoint.params, net_cfg, x, mask, t, profile.film_features)
        s = score_from_eps(eps_hat, t, sched, profile.psi_clipped)
        drift = bv * s
        if cfg.drift_mode == "vp_consistent":
            drift = drift - 0.5 * bv * x
        x = x + dt_i * drift
        if cfg.noise_on:
            z = np.stack([rng.standard_normal((l_max, len(vocab))) for rng in rngs])
            x = x + np.sqrt(bv * dt_i) * z
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sampler state at step {i} (t={t:.6f})")

    trajectories = []
    for k, rng in enumerate(rngs):
        triples = decode(x[k], mask[k], vocab)
        times = sample_timestamps(gap_model, drawn_lengths[k], rng)
        events = tuple(
            SyntheticEvent(times[j], lab, med, ae) for j, (lab, med, ae) in enumerate(triples)
        )
        traj = SyntheticTrajectory(k, events)
        traj.validate(vocab)
        trajectories.append(traj)
    if return_states:
        return trajectories, (x, mask)
    return trajectories


def write_trajectories(path: str | Path, trajectories: list[SyntheticTrajectory], vocab: TokenVocab) -> None:
    """JSON Lines, one trajectory per line, token labels resolved from the vocabulary."""
    with open(path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            events = [
                {
                    "t": e.time,
                    "lab": None if e.lab is None else vocab.tokens[e.lab].code,
                    "med": None if e.med is None else vocab.tokens[e.med].code,
                    "ae": e.ae,
                }
                for e in traj.events
            ]
            f.write(json.dumps({"id": traj.trajectory_id, "events": events}, sort_keys=True))
            f.write("\n")
