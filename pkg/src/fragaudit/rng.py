"""Deterministic randomness for every stochastic operation in the toolkit.

The generator is pinned: a splitmix64 chain seeds xoshiro256** streams, so any
two runs (and any two backends) reproduce every random choice bit-exactly.
Floating-point conversion and Box-Muller live here, shared by both kernel
backends; the backends only produce raw uint64 streams.

Stream derivation rules (documented so audits can be replayed elsewhere):
- root state word j (j=0..3) of a stream with seed s is mix64(s + (j+1)*GOLDEN)
- spawn_key(name) derives a child seed from sha256(seed || '/' || name)
- spawn_index(i) derives child seed mix64(s + (i+1)*GOLDEN) (counter chain,
  vectorizable; used for per-draw Monte Carlo streams)
- bounded integers use the 128-bit multiply-shift reduction of one uint64
- gaussians use Box-Muller on consecutive uint64 pairs; each call consumes
  2*ceil(n/2) words (odd tails discard the trailing partner variate)
"""

import hashlib
import os

import numpy as np

if os.environ.get("FRAGAUDIT_BACKEND", "auto") == "python":
    from . import _kernels_py as _kernels
else:
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _kernels

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def backend_name() -> str:
    """Which kernel backend was selected at import ('cython' or 'python')."""
    return _kernels.BACKEND


def mix64(z: int) -> int:
    """splitmix64 output mix of a 64-bit word."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def states_from_seeds(seeds: np.ndarray) -> np.ndarray:
    """xoshiro256** init states, shape (K, 4), from uint64 seeds (K,)."""
    seeds = seeds.astype(np.uint64, copy=False)
    counters = (np.arange(1, 5, dtype=np.uint64) * np.uint64(GOLDEN))[None, :]
    states = _mix64_np(seeds[:, None] + counters)
    dead = ~states.any(axis=1)
    if dead.any():  # all-zero state is invalid for xoshiro; effectively unreachable
        states[dead, 0] = np.uint64(GOLDEN)
    return np.ascontiguousarray(states)


def child_seeds(seed: int, start: int, stop: int) -> np.ndarray:
    """Counter-derived child seeds for spawn_index(start..stop-1), vectorized."""
    idx = np.arange(start + 1, stop + 1, dtype=np.uint64)
    return _mix64_np(np.uint64(seed & _MASK) + idx * np.uint64(GOLDEN))


def _box_muller(u: np.ndarray) -> np.ndarray:
    """Gaussian variates from uint64 pairs; u has shape (K, 2m), output (K, 2m)."""
    a = ((u[:, 0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53  # (0,1]
    b = (u[:, 1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53  # [0,1)
    r = np.sqrt(-2.0 * np.log(a))
    theta = (2.0 * np.pi) * b
    z = np.empty_like(u, dtype=np.float64)
    z[:, 0::2] = r * np.cos(theta)
    z[:, 1::2] = r * np.sin(theta)
    return z


def gaussian_matrix(seeds: np.ndarray, m: int) -> np.ndarray:
    """One gaussian row per seed, m variates each; bit-equal to the scalar path."""
    cols = 2 * ((m + 1) // 2)
    states = states_from_seeds(seeds)
    u = np.empty((len(seeds), cols), dtype=np.uint64)
    _kernels.fill_u64_multi(states, u)
    return _box_muller(u)[:, :m]


class Rng:
    """One xoshiro256** stream with deterministic spawning."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self._state = states_from_seeds(np.array([self.seed], dtype=np.uint64))[0].copy()

    def u64_block(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _kernels.fill_u64(self._state, out)
        return out

    def next_u64(self) -> int:
        return int(self.u64_block(1)[0])

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def gaussians(self, n: int) -> np.ndarray:
        cols = 2 * ((n + 1) // 2)
        u = self.u64_block(cols).reshape(1, cols)
        return _box_muller(u)[0, :n]

    def gaussian(self) -> float:
        return float(self.gaussians(1)[0])

    def below(self, m: int) -> int:
        """Uniform integer in [0, m) via multiply-shift reduction."""
        if m <= 0:
            raise ValueError("bound must be positive")
        return (self.next_u64() * m) >> 64

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def permutation(self, n: int) -> np.ndarray:
        arr = list(range(n))
        self.shuffle(arr)
        return np.array(arr, dtype=np.int64)

    def choose(self, n: int, k: int) -> list:
        """k distinct indices from range(n), in selection order."""
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        arr = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k]

    def spawn_key(self, key: str) -> "Rng":
        digest = hashlib.sha256(
            self.seed.to_bytes(8, "little") + b"/" + key.encode("utf-8")
        ).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def spawn_index(self, i: int) -> "Rng":
        return Rng(mix64(self.seed + (i + 1) * GOLDEN))
