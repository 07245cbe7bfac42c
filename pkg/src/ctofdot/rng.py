"""Counter-based random numbers reproducible across any worker count.

Every consumer of randomness in this package draws from a (seed, stream_id)
keyed stream whose i-th value is a pure function of (seed, stream_id, i).
Photon transport assigns stream_id = photon index, so histograms are
bit-identical no matter how photons are split across threads.

The generator is the splitmix64 finalizer applied to an affine counter:
not cryptographic, but statistically solid for Monte Carlo use and trivially
portable between numpy (vectorized) and numba (scalar) code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / 9007199254740992.0  # 2**-53


def mix64(z):
    """splitmix64 finalizer; accepts uint64 scalars or arrays."""
    z = np.uint64(z) if np.isscalar(z) else z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def stream_state(seed: int, stream_id: int) -> np.uint64:
    """Initial state for stream `stream_id` of generator `seed`."""
    with np.errstate(over="ignore"):
        h = mix64(np.uint64(seed) + GOLDEN * (np.uint64(stream_id) + np.uint64(1)))
        return mix64(h)


def raw_at(state0: np.uint64, index) -> np.ndarray:
    """uint64 draw(s) at position(s) `index` of the stream (0-based)."""
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(state0 + GOLDEN * (idx + np.uint64(1)))


def uniform_at(state0: np.uint64, index) -> np.ndarray:
    """Uniform double(s) in the open interval (0, 1) at stream position(s)."""
    z = raw_at(state0, index)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * _U53


@dataclass
class RngStream:
    """Stateful view of one counter-based stream.

    Identical (seed, stream_id) always reproduces the identical draw
    sequence; advancing is just a counter increment, so the sequence is
    independent of how many workers exist or how work is interleaved.
    """

    seed: int
    stream_id: int = 0
    _state0: np.uint64 = field(init=False, repr=False)
    _pos: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        self._state0 = stream_state(self.seed, self.stream_id)

    def uniform(self) -> float:
        u = float(uniform_at(self._state0, self._pos))
        self._pos += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        out = uniform_at(self._state0, np.arange(self._pos, self._pos + n))
        self._pos += n
        return out

    def integers(self, n: int) -> np.ndarray:
        out = raw_at(self._state0, np.arange(self._pos, self._pos + n))
        self._pos += n
        return out

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent stream under the same seed."""
        return RngStream(self.seed, stream_id)


def uniform_field(seed: int, stream_id: int, shape) -> np.ndarray:
    """Array of open-(0,1) uniforms, element i keyed by (seed, stream_id, i)."""
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    s0 = stream_state(seed, stream_id)
    return uniform_at(s0, np.arange(n)).reshape(shape)
