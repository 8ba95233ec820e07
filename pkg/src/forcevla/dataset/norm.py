from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .episode import DatasetError, Episode

STD_FLOOR = 1e-6


@dataclass
class NormStats:
    """Per-channel mean / population std for state, wrench and action."""

    state_mean: np.ndarray
    state_std: np.ndarray
    wrench_mean: np.ndarray
    wrench_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def normalize(self, kind: str, x: np.ndarray) -> np.ndarray:
        m, s = getattr(self, f"{kind}_mean"), getattr(self, f"{kind}_std")
        n = x.shape[-1]
        return (x - m[:n]) / s[:n]

    def denormalize(self, kind: str, x: np.ndarray) -> np.ndarray:
        m, s = getattr(self, f"{kind}_mean"), getattr(self, f"{kind}_std")
        n = x.shape[-1]
        return x * s[:n] + m[:n]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {f"norm.{k}": getattr(self, k) for k in
                ("state_mean", "state_std", "wrench_mean", "wrench_std", "action_mean",
                 "action_std")}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(**{k: np.asarray(d[f"norm.{k}"], dtype=np.float64) for k in
                      ("state_mean", "state_std", "wrench_mean", "wrench_std", "action_mean",
                       "action_std")})


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).mean(axis=0))
    return mean, np.maximum(std, STD_FLOOR)


def compute_norm_stats(episodes: Sequence[Episode]) -> NormStats:
    steps = [s for ep in episodes for s in ep.steps]
    if len(steps) < 2:
        raise DatasetError(f"normalization needs at least 2 timesteps, got {len(steps)}")
    state = np.stack([s.observation.state for s in steps])
    wrench = np.stack([s.observation.wrench for s in steps])
    action = np.stack([s.action for s in steps])
    sm, ss = channel_stats(state)
    wm, ws = channel_stats(wrench)
    am, as_ = channel_stats(action)
    return NormStats(sm, ss, wm, ws, am, as_)
