"""SPAD acquisition noise: shot noise, pile-up rate cap, dark counts.

`expected_counts` converts rate-domain transients (counts/s per pattern)
into expected photon counts for one integration period: each pattern's
total rate is clipped to the pile-up cap by renormalization, scaled by
the integration time, and a time-uniform dark-count floor is added.
`sample_counts` draws independent Poisson counts per bin with a
counter-based key, so bin i depends only on (seed, i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core_types import TransientSet
from .rng import uniform_field


@dataclass(frozen=True)
class AcquisitionModel:
    integration_time_ms: float
    max_count_rate: float = 5e6  # counts/s, pile-up cap
    dark_count_rate: float = 200.0  # counts/s
    seed: int = 0
    cap_scope: str = "pattern"  # or "detector"

    def __post_init__(self):
        if self.integration_time_ms <= 0:
            raise ValueError("integration_time must be > 0")
        if self.max_count_rate < 0 or self.dark_count_rate < 0:
            raise ValueError("rates must be >= 0")
        if self.cap_scope not in ("pattern", "detector"):
            raise ValueError("cap_scope must be 'pattern' or 'detector'")


def pattern_scales(m: TransientSet, acq: AcquisitionModel) -> np.ndarray:
    """Pile-up renormalization factor per pattern (or per detector)."""
    v = np.asarray(m.values, dtype=np.float64)
    if acq.cap_scope == "pattern":
        axes = tuple(range(1, v.ndim))
    else:
        axes = (-1,)
    raw = v.sum(axis=axes, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(raw > acq.max_count_rate, acq.max_count_rate / raw, 1.0)
    return np.where(raw > 0, scale, 1.0)


def expected_counts(m: TransientSet, acq: AcquisitionModel) -> TransientSet:
    """Expected counts per bin for one integration period per pattern."""
    v = np.asarray(m.values, dtype=np.float64)
    if v.size and v.min() < 0:
        raise ValueError("rate transients must be non-negative")
    t_s = acq.integration_time_ms / 1000.0
    n_t = v.shape[-1]
    expected = v * pattern_scales(m, acq) * t_s
    expected = expected + acq.dark_count_rate * t_s / n_t
    return TransientSet(expected, m.scan, m.warnings)


def sample_counts(expected: TransientSet, seed: int) -> TransientSet:
    """Independent Poisson draw per bin, keyed by (seed, flat bin index).

    Uses the exact inverse-CDF transform on counter-based uniforms, so
    any parallel or partial evaluation of the same bins reproduces the
    same counts.
    """
    lam = np.asarray(expected.values, dtype=np.float64)
    if lam.size and lam.min() < 0:
        raise ValueError("expected counts must be non-negative")
    u = uniform_field(seed, 0, lam.shape)
    counts = stats.poisson.ppf(u, lam).astype(np.int64)
    return TransientSet(counts, expected.scan, expected.warnings)
