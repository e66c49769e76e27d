"""Observation sets and observation operators.

Observed quantities are the height h and the primitive velocities
u = hu/h, v = hv/h. Observation-operator objects expose a flat-vector
interface (predict / tl / ad) shared by the SWE fields and the linear toy
systems used as oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COMPONENTS = ("h", "u", "v")


@dataclass
class ObservationSet:
    """Observations on a grid.

    times: (T,) observation instants
    mask: (T, 3, nx, ny) bool, which of (h, u, v) are observed where
    values: (T, 3, nx, ny) observed values (ignored where mask is False)
    variances: (T, 3, nx, ny) error variances (ignored where mask is False)
    """

    times: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.values = np.asarray(self.values, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        T = len(self.times)
        if self.mask.ndim != 4 or self.mask.shape[:2] != (T, 3):
            raise ValueError("mask must be shaped (T, 3, nx, ny)")
        if self.values.shape != self.mask.shape or self.variances.shape != self.mask.shape:
            raise ValueError("values and variances must match the mask shape")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if np.any(~(self.variances[self.mask] > 0)):
            raise ValueError("observation variances must be positive")

    @property
    def shape(self):
        return self.mask.shape[2:]

    def __len__(self):
        return len(self.times)

    def count(self):
        return int(self.mask.sum())

    def with_values(self, values):
        return ObservationSet(self.times.copy(), self.mask.copy(), values, self.variances.copy())


def mask_from_name(name, n_times, shape):
    """Static observation mask: 'h', 'velocity' (u and v) or 'full'."""
    comps = {"h": (0,), "h-only": (0,), "velocity": (1, 2), "velocity-only": (1, 2),
             "uv": (1, 2), "full": (0, 1, 2), "all": (0, 1, 2)}
    try:
        idx = comps[name]
    except KeyError:
        raise ValueError(f"unknown observation mask {name!r}") from None
    mask = np.zeros((n_times, 3) + tuple(shape), dtype=bool)
    mask[:, list(idx)] = True
    return mask


def observe(U):
    """(h, u, v) from conserved (h, hu, hv), arrays shaped (3, ...)."""
    U = np.asarray(U)
    return np.stack([U[0], U[1] / U[0], U[2] / U[0]])


def observe_tl(U, dU):
    h = U[0]
    u, v = U[1] / h, U[2] / h
    return np.stack([dU[0], (dU[1] - u * dU[0]) / h, (dU[2] - v * dU[0]) / h])


def observe_ad(U, Y):
    h = U[0]
    u, v = U[1] / h, U[2] / h
    return np.stack([Y[0] - (u * Y[1] + v * Y[2]) / h, Y[1] / h, Y[2] / h])


class SWEObservationOperator:
    """Flat-vector observation operator over an ObservationSet."""

    def __init__(self, obs):
        self.obs = obs
        self.shape = (3,) + tuple(obs.shape)
        self.times = obs.times

    def __len__(self):
        return len(self.obs)

    def _field(self, x):
        return np.asarray(x, dtype=float).reshape(self.shape)

    def values(self, k):
        return self.obs.values[k][self.obs.mask[k]]

    def variances(self, k):
        return self.obs.variances[k][self.obs.mask[k]]

    def predict(self, k, x):
        return observe(self._field(x))[self.obs.mask[k]]

    def tl(self, k, x, dx):
        return observe_tl(self._field(x), self._field(dx))[self.obs.mask[k]]

    def ad(self, k, x, dy):
        Y = np.zeros(self.shape)
        Y[self.obs.mask[k]] = dy
        return observe_ad(self._field(x), Y).ravel()

    def predict_all(self, k, X):
        """Predicted observations for the columns of X (n, N)."""
        N = X.shape[1]
        F = X.T.reshape((N,) + self.shape)
        Y = np.stack([observe(F[i]) for i in range(N)])
        return Y[:, self.obs.mask[k]].T


class LinearObservationOperator:
    """y_k = H_k x for dense matrices, used by the linear oracle fixtures."""

    def __init__(self, H, values, variances, times=None):
        n = len(values)
        self.H = [np.asarray(H, dtype=float)] * n if np.ndim(H) == 2 else [np.asarray(h) for h in H]
        self._values = [np.asarray(v, dtype=float) for v in values]
        self._variances = [np.broadcast_to(np.asarray(r, dtype=float), np.shape(v)).copy()
                           for r, v in zip(variances, self._values)]
        self.times = np.arange(n, dtype=float) if times is None else np.asarray(times, dtype=float)

    def __len__(self):
        return len(self._values)

    def values(self, k):
        return self._values[k]

    def variances(self, k):
        return self._variances[k]

    def predict(self, k, x):
        return self.H[k] @ x

    def tl(self, k, x, dx):
        return self.H[k] @ dx

    def ad(self, k, x, dy):
        return self.H[k].T @ dy

    def predict_all(self, k, X):
        return self.H[k] @ X
