"""Named linear test systems with known Koopman eigenvalues."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .pde import gen_linear_trajectories, rotation_matrix

__all__ = ["LinearSystem", "SYSTEMS"]


@dataclass(frozen=True)
class LinearSystem:
    """x_{k+1} = A x_k observed through the first ``obs_dim`` state entries."""

    A: np.ndarray
    x0: np.ndarray
    r: int
    reference: np.ndarray
    obs_dim: int | None = None

    def series(self, length: int) -> np.ndarray:
        obs = None if self.obs_dim is None else (lambda x: x[: self.obs_dim])
        return gen_linear_trajectories(self.A, obs, length, 0.0, 0, self.x0)


_THETA = 0.3

SYSTEMS = {
    # rotation plus a decaying transient: the transient leaks into the Krylov
    # basis and is averaged out as the delay dimension grows
    "rotation": LinearSystem(block_diag(rotation_matrix(_THETA), 0.5), np.array([1.0, 0.0, 1.0]), 2,
                             np.exp(np.array([1j, -1j]) * _THETA)),
    "damped-rotation": LinearSystem(0.95 * rotation_matrix(_THETA), np.array([1.0, 0.0]), 2,
                                    0.95 * np.exp(np.array([1j, -1j]) * _THETA)),
}
