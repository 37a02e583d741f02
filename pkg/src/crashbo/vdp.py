"""Virtual data points for crashed evaluations.

Each crashed input gets a pessimistic, bounded stand-in objective predicted by
a GP fitted on the successful evaluations only::

    J_hat = min(max(mu, J_min) + gamma * sigma, J_max)

The values are recomputed from scratch whenever the history changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gpr
from .core import Domain, Trace, normalize

DEFAULT_GAMMA = 3.0


class NoFeasibleData(ValueError):
    """No successful evaluation to anchor the virtual values."""


@dataclass(frozen=True)
class AugmentedDataset:
    X: np.ndarray
    y: np.ndarray
    virtual: np.ndarray
    # diagnostics for the virtual rows (in order of appearance)
    mu: np.ndarray
    sigma: np.ndarray
    j_min: float
    j_max: float

    def __len__(self):
        return len(self.y)


def virtual_values(mu, sigma, j_min: float, j_max: float, gamma: float = DEFAULT_GAMMA):
    """Pessimistic prediction lifted to at least ``J_min`` and capped at ``J_max``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return np.minimum(np.maximum(mu, j_min) + gamma * sigma, j_max)


def augment(X, y, crashed, gp_config: gpr.GpConfig, rng, gamma: float = DEFAULT_GAMMA):
    """Replace crashed rows of ``(X, y)`` by virtual values.

    ``X`` is normalized; ``y`` entries for crashed rows are ignored.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    crashed = np.asarray(crashed, dtype=bool).reshape(-1)
    ok = ~crashed
    if not ok.any():
        raise NoFeasibleData("no successful evaluation available")
    y_ok = np.asarray([y[i] for i in np.flatnonzero(ok)], dtype=float)
    j_min, j_max = float(y_ok.min()), float(y_ok.max())
    if not crashed.any():
        return AugmentedDataset(
            X.copy(), y_ok, np.zeros(len(y_ok), dtype=bool), np.empty(0), np.empty(0),
            j_min, j_max,
        )
    model = gpr.fit(X[ok], y_ok, gp_config, rng)
    mu, sigma = model.predict(X[crashed])
    values = virtual_values(mu, sigma, j_min, j_max, gamma)
    y_out = np.empty(len(X))
    y_out[ok] = y_ok
    y_out[crashed] = values
    return AugmentedDataset(X.copy(), y_out, crashed.copy(), mu, sigma, j_min, j_max)


def add_virtual_data(
    history: Trace,
    domain: Domain,
    gp_config: gpr.GpConfig,
    rng,
    gamma: float = DEFAULT_GAMMA,
) -> AugmentedDataset:
    """Augmented (normalized) dataset for a trace; see :func:`augment`."""
    if not len(history):
        raise NoFeasibleData("empty history")
    X = normalize(domain, history.thetas())
    y = [np.nan if ev.crashed else ev.objective for ev in history.evaluations]
    crashed = [ev.crashed for ev in history.evaluations]
    return augment(X, y, crashed, gp_config, rng, gamma)
