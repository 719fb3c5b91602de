"""Time grid, Brownian increments and the forward state process.

Increment generation uses one counter-based Philox substream per path
(spawn key = path index), so path ``j`` reproduces bit-identically no
matter the batch size and paths can be generated in parallel with results
identical to sequential generation. Normal variates come from numpy's
``standard_normal`` (ziggurat), which is bit-stable on a given platform
and numpy version.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TimeGrid", "BrownianBatch", "PathBatch", "sample_brownian", "roll_forward"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform knots t_i = i T / N on [0, T]."""

    T: float
    N: int
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ValueError(f"need T > 0 and N >= 1, got T={self.T}, N={self.N}")
        object.__setattr__(self, "knots", np.linspace(0.0, self.T, self.N + 1))

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.knots)


@dataclass(frozen=True)
class BrownianBatch:
    """Increments dW[j, n] in R^d, Normal(0, (t_{n+1} - t_n) I_d)."""

    grid: TimeGrid
    increments: np.ndarray  # (J, N, d)

    @property
    def J(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    def path_positions(self) -> np.ndarray:
        """W at every knot, (J, N+1, d), starting from 0."""
        out = np.zeros((self.J, self.grid.N + 1, self.d))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out


@dataclass(frozen=True)
class PathBatch:
    """Forward states X[j, n] in R^d driven by a one-step transition."""

    grid: TimeGrid
    states: np.ndarray  # (J, N+1, d)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]


def _path_generator(seed, j: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(j,))
    return np.random.Generator(np.random.Philox(ss))


def sample_brownian(d: int, grid: TimeGrid, J: int, seed) -> BrownianBatch:
    """Draw J independent Brownian paths on the grid, one substream per path.

    ``seed`` may be an int or a tuple of ints (e.g. (base, run, iteration)).
    """
    if J < 1:
        raise ValueError(f"need J >= 1, got {J}")
    scale = np.sqrt(grid.dt)[:, None]  # (N, 1)
    inc = np.empty((J, grid.N, d))
    for j in range(J):
        inc[j] = _path_generator(seed, j).standard_normal((grid.N, d)) * scale
    return BrownianBatch(grid=grid, increments=inc)


def roll_forward(xi: np.ndarray, H, bb: BrownianBatch) -> PathBatch:
    """Iterate X_{n+1} = H(t_n, t_{n+1}, X_n, dW_n) from X_0 = xi.

    ``H`` acts on batches: (s, t, X (J, d), w (J, d)) -> (J, d). A non-finite
    state aborts with the offending step index.
    """
    xi = np.asarray(xi, dtype=np.float64)
    J, N, d = bb.increments.shape
    knots = bb.grid.knots
    states = np.empty((J, N + 1, d))
    states[:, 0] = xi
    for n in range(N):
        nxt = H(knots[n], knots[n + 1], states[:, n], bb.increments[:, n])
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"non-finite state at step {n + 1}")
        states[:, n + 1] = nxt
    return PathBatch(grid=bb.grid, states=states)
