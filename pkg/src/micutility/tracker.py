"""Kalman tracking of cross-channel feature covariances.

For every feature the N x N covariance of the mean-removed feature values is
half-vectorized (diagonal plus lower triangle, Q = N(N+1)/2 entries) and
tracked with a Kalman filter whose covariances are all diagonal, so each
entry is an independent scalar filter. The observation noise of entry (p, q)
shrinks with the geometric mean of the frame energies of channels p and q.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PCC_FLOOR = 1e-12


@dataclass(frozen=True)
class KfConfig:
    alpha: float = 0.99
    sigma_q: float = 1e-4
    sigma_r: float = 0.2
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if self.sigma_q < 0 or self.sigma_r <= 0 or self.epsilon <= 0:
            raise ValueError("sigma_q must be >= 0, sigma_r and epsilon > 0")


def vech_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the half-vectorization, column-major lower triangle."""
    cols, rows = np.triu_indices(n)
    return rows, cols


def vech(mat: np.ndarray) -> np.ndarray:
    rows, cols = vech_indices(mat.shape[-1])
    return mat[..., rows, cols]


def unvech(vec: np.ndarray, n: int) -> np.ndarray:
    rows, cols = vech_indices(n)
    vec = np.asarray(vec)
    out = np.zeros(vec.shape[:-1] + (n, n), dtype=vec.dtype)
    out[..., rows, cols] = vec
    out[..., cols, rows] = vec
    return out


@dataclass
class KfState:
    """Tracker state for ``n_features`` independent filters over N channels.

    ``mean`` and ``prior_var`` have shape ``(n_features, Q)``, ``feature_mean``
    has shape ``(n_features, N)``.
    """

    n_channels: int
    n_features: int
    mean: np.ndarray = field(init=False)
    prior_var: np.ndarray = field(init=False)
    feature_mean: np.ndarray = field(init=False)
    n_updates: int = field(default=0, init=False)
    rejected: int = field(default=0, init=False)

    def __post_init__(self):
        q = self.n_channels * (self.n_channels + 1) // 2
        self.mean = np.zeros((self.n_features, q))
        self.prior_var = np.ones((self.n_features, q))
        self.feature_mean = np.zeros((self.n_features, self.n_channels))

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


def update_feature_mean(state: KfState, f, alpha: float, feature=slice(None)) -> np.ndarray:
    """Fold the current values into the recursive mean, then center them."""
    f = np.asarray(f, dtype=float)
    state.feature_mean[feature] = alpha * state.feature_mean[feature] + (1 - alpha) * f
    return f - state.feature_mean[feature]


def observation_noise(energies, cfg: KfConfig) -> np.ndarray:
    e = np.asarray(energies, dtype=float)
    rows, cols = vech_indices(e.size)
    return cfg.sigma_r / (np.sqrt(e[rows] * e[cols]) + cfg.epsilon)


def kf_update(state: KfState, feature, centered, energies, cfg: KfConfig) -> bool:
    """Elementwise Kalman step for one or more features.

    ``feature`` selects rows of the state (an index, slice or index array);
    ``centered`` holds the matching mean-removed feature vectors. Returns
    False, leaving the state untouched, when any input is non-finite.
    """
    centered = np.asarray(centered, dtype=float)
    energies = np.asarray(energies, dtype=float)
    if not (np.all(np.isfinite(centered)) and np.all(np.isfinite(energies))):
        state.rejected += 1
        log.warning("non-finite tracker input rejected (%d so far)", state.rejected)
        return False
    rows, cols = vech_indices(state.n_channels)
    y = centered[..., rows] * centered[..., cols]
    r = observation_noise(energies, cfg)
    p_pred = state.prior_var[feature] + cfg.sigma_q
    gain = p_pred / (p_pred + r)
    m = state.mean[feature]
    state.mean[feature] = m + gain * (y - m)
    state.prior_var[feature] = p_pred * (1.0 - gain)
    return True


def track_frame(state: KfState, features, energies, cfg: KfConfig) -> bool:
    """Update every feature filter with one frame.

    ``features`` has shape ``(n_features, N)``. Non-finite frames are rejected
    before either the recursive mean or the filter is touched.
    """
    features = np.asarray(features, dtype=float)
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(energies))):
        state.rejected += 1
        log.warning("non-finite tracker input rejected (%d so far)", state.rejected)
        return False
    centered = update_feature_mean(state, features, cfg.alpha)
    kf_update(state, slice(None), centered, energies, cfg)
    state.n_updates += 1
    return True


def covariance_to_pcc(cov: np.ndarray) -> np.ndarray:
    """Normalize ``(..., N, N)`` covariances to correlation coefficients.

    Entries touching a channel whose variance is at most ``PCC_FLOOR`` are 0,
    including that channel's own diagonal entry.
    """
    diag = np.diagonal(cov, axis1=-2, axis2=-1)
    ok = diag > PCC_FLOOR
    sd = np.sqrt(np.where(ok, diag, 1.0))
    denom = sd[..., :, None] * sd[..., None, :]
    mask = ok[..., :, None] & ok[..., None, :]
    r = np.where(mask, cov / denom, 0.0)
    r = np.clip(r, -1.0, 1.0)
    idx = np.arange(cov.shape[-1])
    r[..., idx, idx] = np.where(ok, 1.0, 0.0)
    return r


def pcc_matrices(state: KfState) -> np.ndarray:
    """Return the PCC tensor with shape ``(N, N, n_features)``."""
    cov = unvech(state.mean, state.n_channels)
    return np.moveaxis(covariance_to_pcc(cov), 0, -1)


class FeatureTracker:
    """Convenience wrapper holding a state and its configuration."""

    def __init__(self, n_channels: int, n_features: int, cfg: KfConfig | None = None):
        self.cfg = cfg or KfConfig()
        self.state = KfState(n_channels, n_features)

    def update(self, features, energies) -> np.ndarray:
        track_frame(self.state, features, energies, self.cfg)
        return pcc_matrices(self.state)
