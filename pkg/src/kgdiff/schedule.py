"""Noise schedules: linear base rate, per-token guided rate, closed-form signal level.

Continuous time is normalized to [0, 1]; the configured discrete horizon N
maps step k to t = k/N. All functions are pure and accept either scalar or
vector connectivity scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CLIP_MARGIN = 1e-4


def clip_ceiling(lam: float) -> float:
    """Largest admissible connectivity score: 1/lambda - 1e-4 (inf when lambda=0)."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must be in [0, 1), got {lam}")
    if lam == 0.0:
        return math.inf
    return 1.0 / lam - CLIP_MARGIN


@dataclass(frozen=True)
class ScheduleParams:
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon_steps: int = 1000
    lam: float = 0.0

    def __post_init__(self):
        if not self.beta_min > 0:
            raise ValueError("beta_min must be > 0")
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max must be >= beta_min")
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must be in [0, 1)")


def _check_t(t) -> None:
    t = np.asarray(t)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")


def _check_psi(p: ScheduleParams, psi) -> None:
    psi = np.asarray(psi, dtype=float)
    if np.any(psi < 0.0):
        raise ValueError("psi must be non-negative")
    if p.lam > 0.0 and np.any(psi >= 1.0 / p.lam):
        raise ValueError("psi >= 1/lambda violates the clipping contract")


def beta_tilde(p: ScheduleParams, t):
    """Unguided linear rate beta_min + (beta_max - beta_min) * t."""
    _check_t(t)
    return p.beta_min + (p.beta_max - p.beta_min) * np.asarray(t, dtype=float)


def beta_v(p: ScheduleParams, t, psi):
    """Per-token rate beta_tilde(t) * (1 - lambda * psi); positive whenever beta_tilde is."""
    _check_psi(p, psi)
    return beta_tilde(p, t) * (1.0 - p.lam * np.asarray(psi, dtype=float))


def alpha_v(p: ScheduleParams, t, psi):
    """Surviving signal fraction exp(-integral of beta_v from 0 to t), in (0, 1].

    Closed form: exp(-(1 - lambda*psi) * (beta_min*t + (beta_max-beta_min)*t^2/2)).
    """
    _check_t(t)
    _check_psi(p, psi)
    t = np.asarray(t, dtype=float)
    base = p.beta_min * t + (p.beta_max - p.beta_min) * t * t / 2.0
    return np.exp(-(1.0 - p.lam * np.asarray(psi, dtype=float)) * base)


def loss_weight(t) -> float:
    """Cosine time weighting cos^2(pi*t/2): 1 at t=0, 0 at t=1, non-increasing."""
    _check_t(t)
    c = np.cos(np.pi * np.asarray(t, dtype=float) / 2.0)
    out = c * c
    return float(out) if out.ndim == 0 else out


def t_grid(p: ScheduleParams) -> np.ndarray:
    """Discrete time points k/N for k = 0..N."""
    return np.linspace(0.0, 1.0, p.horizon_steps + 1)
