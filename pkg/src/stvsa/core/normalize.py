from __future__ import annotations

from typing import Sequence

import numpy as np

from .types import CHANNEL_NAMES, Dataset, NormStats


class DegenerateChannelError(ValueError):
    pass


def _channel_name(c: int) -> str:
    return CHANNEL_NAMES[c] if c < len(CHANNEL_NAMES) else f"channel{c}"


def compute_norm_stats(features: np.ndarray) -> NormStats:
    """Per-channel min/max over all samples, nodes and steps of ``features`` [S, N, T, F]."""
    flat = np.asarray(features, dtype=np.float64).reshape(-1, features.shape[-1])
    mins, maxs = flat.min(axis=0), flat.max(axis=0)
    for c in range(flat.shape[1]):
        if not maxs[c] > mins[c]:
            raise DegenerateChannelError(
                f"channel {c} ({_channel_name(c)}) has zero range over the stats source"
            )
    return NormStats(tuple(float(v) for v in mins), tuple(float(v) for v in maxs))


def apply_norm(features: np.ndarray, stats: NormStats) -> np.ndarray:
    mins, maxs = stats.arrays()
    out = (np.asarray(features, dtype=np.float64) - mins) / (maxs - mins)
    return out.astype(np.float32)


def denormalize(features: np.ndarray, stats: NormStats) -> np.ndarray:
    mins, maxs = stats.arrays()
    return np.asarray(features, dtype=np.float64) * (maxs - mins) + mins


def normalize_dataset(raw: Dataset, stats_source: Sequence[int] | np.ndarray) -> Dataset:
    """Min-max normalize every sample with per-channel stats taken from ``stats_source`` only.

    Values outside the source range are not clipped.
    """
    idx = np.asarray(stats_source, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("stats_source must be non-empty")
    if idx.min() < 0 or idx.max() >= len(raw):
        raise IndexError("stats_source index out of range")
    stats = compute_norm_stats(raw.features[np.unique(idx)])
    return raw.evolve(features=apply_norm(raw.features, stats), norm_stats=stats)
