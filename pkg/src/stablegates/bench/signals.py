"""Excitation signals and measurement noise."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MprsConfig:
    """Multilevel pseudo-random signal: random levels held for random durations.

    ``level_range`` is one ``(lo, hi)`` pair per input channel; channels switch
    independently.
    """

    num_levels: int
    level_range: tuple[tuple[float, float], ...]
    hold_min: int
    hold_max: int
    seed: int = 0

    def __post_init__(self):
        rng = tuple((float(lo), float(hi)) for lo, hi in self.level_range)
        object.__setattr__(self, "level_range", rng)
        if self.num_levels < 2:
            raise ValueError("num_levels must be at least 2")
        if any(lo >= hi for lo, hi in rng):
            raise ValueError("every level range needs lo < hi")
        if not 1 <= self.hold_min <= self.hold_max:
            raise ValueError("need 1 <= hold_min <= hold_max")

    @property
    def n_channels(self) -> int:
        return len(self.level_range)


def mprs_generate(cfg: MprsConfig, length: int) -> np.ndarray:
    """``(length, n_channels)`` piecewise-constant signal, deterministic in ``cfg.seed``."""
    if length < cfg.hold_min:
        raise ValueError("length must be at least hold_min")
    out = np.empty((length, cfg.n_channels))
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_channels)
    for ch, ((lo, hi), ss) in enumerate(zip(cfg.level_range, streams)):
        rng = np.random.default_rng(ss)
        levels = np.linspace(lo, hi, cfg.num_levels)
        k = 0
        while k < length:
            hold = int(rng.integers(cfg.hold_min, cfg.hold_max + 1))
            out[k:k + hold, ch] = levels[rng.integers(cfg.num_levels)]
            k += hold
    return out


def segment_lengths(signal: Sequence[float]) -> list[int]:
    """Lengths of the maximal constant runs of a 1-D signal."""
    s = np.asarray(signal)
    if s.size == 0:
        return []
    cuts = np.flatnonzero(s[1:] != s[:-1]) + 1
    edges = np.concatenate([[0], cuts, [s.size]])
    return np.diff(edges).tolist()


def add_output_noise(y, snr_power_ratio: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise with variance ``var(y) / snr`` per channel.

    ``var(y)`` is the mean squared deviation from the channel mean.  An
    infinite ratio returns ``y`` unchanged.
    """
    if not snr_power_ratio > 0:
        raise ValueError("snr_power_ratio must be positive")
    y = np.asarray(y, dtype=np.float64)
    if math.isinf(snr_power_ratio):
        return y.copy()
    power = np.mean((y - y.mean(axis=0)) ** 2, axis=0)
    noise = np.random.default_rng(seed).standard_normal(y.shape)
    return y + noise * np.sqrt(power / snr_power_ratio)
