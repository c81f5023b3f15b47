"""Counter-based Gaussian noise keyed by (seed, path, draw index).

Every path owns a Philox stream whose 128-bit key packs the 64-bit master seed
with the path ordinal, so the k-th draw of path i never depends on which other
paths are simulated, in what order, or on how many threads run them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def path_generator(seed: int, key_index: int) -> np.random.Generator:
    key = ((int(key_index) & _MASK64) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class NoiseSource:
    """Noise for one path.

    ``scale=0`` is the zero-noise mode (dW = 0). ``mirror`` negates every draw,
    which is how antithetic partners and the q0 -> -q0 symmetry check are built.
    """

    seed: int
    path_index: int = 0
    step_counter: int = 0
    scale: float = 1.0
    mirror: bool = False

    def draws(self, count: int) -> np.ndarray:
        gen = path_generator(self.seed, self.path_index)
        if self.step_counter:
            gen.standard_normal(self.step_counter)
        z = gen.standard_normal(count)
        return -z if self.mirror else z


def gaussian_rows(seed: int, key_indices, n_draws: int, signs=None) -> np.ndarray:
    """Matrix of draws: row r holds draws 0..n_draws-1 of stream ``key_indices[r]``."""
    key_indices = np.asarray(key_indices, dtype=np.int64)
    out = np.empty((key_indices.size, n_draws))
    for r, k in enumerate(key_indices):
        out[r] = path_generator(seed, int(k)).standard_normal(n_draws)
    if signs is not None:
        out *= np.asarray(signs, dtype=float)[:, None]
    return out


class StreamBank:
    """Buffered per-path streams for simulations whose paths advance at different rates.

    ``take(mask)`` returns the next draw of every path selected by ``mask``
    (zeros elsewhere) and advances only those paths' counters.
    """

    def __init__(self, seed: int, key_indices, signs=None, scale: float = 1.0,
                 start: int = 0, block: int = 1024):
        self.seed = int(seed)
        self.keys = np.asarray(key_indices, dtype=np.int64)
        n = self.keys.size
        self.signs = np.ones(n) if signs is None else np.asarray(signs, dtype=float)
        self.scale = float(scale)
        self.block = int(block)
        self.counter = np.zeros(n, dtype=np.int64)
        self._gens = None
        self._buf = None
        self._pos = None
        if self.scale != 0.0:
            self._gens = [path_generator(self.seed, int(k)) for k in self.keys]
            if start:
                for g in self._gens:
                    g.standard_normal(start)
            self._buf = np.empty((n, self.block))
            self._flat = self._buf.reshape(-1)
            self._base = np.arange(n, dtype=np.int64) * self.block
            self._pos = np.full(n, self.block, dtype=np.int64)
        self._signed = bool(np.any(self.signs != 1.0))

    def take(self, mask: np.ndarray) -> np.ndarray:
        self.counter += mask
        if self.scale == 0.0:
            return np.zeros(self.keys.size)
        pos = self._pos
        for r in np.flatnonzero(mask & (pos >= self.block)):
            self._buf[r] = self._gens[r].standard_normal(self.block)
            pos[r] = 0
        z = self._flat.take(self._base + np.minimum(pos, self.block - 1))
        z *= mask
        pos += mask
        if self._signed:
            z *= self.signs
        return z


def iter_blocks(seed: int, key_indices, n_draws: int, block: int = 1024, signs=None):
    """Yield successive (paths x m) slabs of draws covering draws 0..n_draws-1."""
    gens = [path_generator(seed, int(k)) for k in np.asarray(key_indices, dtype=np.int64)]
    sgn = None if signs is None else np.asarray(signs, dtype=float)[:, None]
    done = 0
    while done < n_draws:
        m = min(block, n_draws - done)
        z = np.stack([g.standard_normal(m) for g in gens])
        if sgn is not None:
            z *= sgn
        yield z
        done += m
