"""Sparse feature weighting by l1-regularized least squares.

Every (trial, frame, reference channel) contributes the N rows of the
channel matrix M_p as regressors for the zero-mean MSC vector. A trial's
squared error is normalized by N * frames and trials are summed, each trial
carrying its own l1 penalty, so the objective is

    J(w) = sum_t [ 1/(N L_t) sum_{p,l} ||g_l - M_p[l] w||^2 + mu ||w||_1 ].

The problem is kept in Gram form; coordinate descent with soft thresholding
solves it exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureId


class ConfigurationError(ValueError):
    pass


def zero_mean_msc(gamma) -> np.ndarray:
    g = np.asarray(gamma, dtype=float)
    return g - g.mean()


def soft_threshold(z, t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


@dataclass
class LassoProblem:
    """Weighted least-squares data in Gram form plus the penalty weight."""

    n_features: int
    gram: np.ndarray = field(default=None)
    cross: np.ndarray = field(default=None)
    yy: float = 0.0
    n_rows: int = 0
    n_trials: int = 0
    mu: float = 0.0

    def __post_init__(self):
        if self.gram is None:
            self.gram = np.zeros((self.n_features, self.n_features))
        if self.cross is None:
            self.cross = np.zeros(self.n_features)

    def add_rows(self, x, y, weight: float) -> None:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features or y.shape != (x.shape[0],):
            raise ConfigurationError(f"rows {x.shape} / targets {y.shape} do not fit "
                                     f"{self.n_features} features")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ConfigurationError("non-finite regression data")
        self.gram += weight * x.T @ x
        self.cross += weight * x.T @ y
        self.yy += weight * float(y @ y)
        self.n_rows += x.shape[0]

    def add_trial(self, channel_mats, gammas) -> None:
        """Add one trial: ``channel_mats`` is ``(L, N, N, I)``, ``gammas`` is ``(L, N)``."""
        m = np.asarray(channel_mats, dtype=float)
        g = np.asarray(gammas, dtype=float)
        if m.ndim != 4 or m.shape[1] != m.shape[2] or m.shape[3] != self.n_features:
            raise ConfigurationError(f"channel matrices of shape {m.shape} do not match "
                                     f"(L, N, N, {self.n_features})")
        n_frames, n = m.shape[:2]
        if g.shape != (n_frames, n):
            raise ConfigurationError(f"targets {g.shape} do not match ({n_frames}, {n})")
        target = g - g.mean(axis=1, keepdims=True)
        x = m.reshape(-1, self.n_features)
        # row (l, p, q) targets the q-th entry of frame l's zero-mean MSC
        y = np.broadcast_to(target[:, None, :], (n_frames, n, n)).reshape(-1)
        self.add_rows(x, y, 1.0 / (n * n_frames))
        self.n_trials += 1

    @property
    def penalty(self) -> float:
        return self.mu * max(self.n_trials, 1)

    @property
    def mu_max(self) -> float:
        return float(np.max(np.abs(2 * self.cross))) / max(self.n_trials, 1)

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        ls = w @ self.gram @ w - 2 * self.cross @ w + self.yy
        return float(ls + self.penalty * np.abs(w).sum())

    def with_mu(self, mu: float) -> "LassoProblem":
        return LassoProblem(self.n_features, self.gram, self.cross, self.yy,
                            self.n_rows, self.n_trials, mu)


def assemble_problem(trials, mu: float = 0.0, n_features: int | None = None) -> LassoProblem:
    """Build a problem from ``(channel_mats, gammas)`` pairs, one per trial."""
    trials = list(trials)
    if not trials:
        raise ConfigurationError("no trials")
    if n_features is None:
        n_features = np.asarray(trials[0][0]).shape[-1]
    prob = LassoProblem(n_features, mu=mu)
    dims = None
    for mats, gammas in trials:
        shape = np.asarray(mats).shape[1:]
        if dims is not None and shape != dims:
            raise ConfigurationError(f"trial shape {shape} differs from {dims}")
        dims = shape
        prob.add_trial(mats, gammas)
    return prob


@dataclass
class FeatureWeights:
    w: np.ndarray
    converged: bool = True
    sweeps: int = 0
    objective_history: list = field(default_factory=list)

    @property
    def support(self) -> set[int]:
        return set(np.flatnonzero(self.w != 0).tolist())


def _support_step(problem: LassoProblem, w: np.ndarray) -> np.ndarray | None:
    """Feature-sign step: head for the minimizer on the current support and signs.

    Inside one sign orthant the objective is a convex quadratic, so walking
    from ``w`` toward that minimizer never increases it; the walk stops where
    the first coordinate would change sign, and that coordinate becomes 0.
    """
    s = np.sign(w)
    on = s != 0
    if not on.any():
        return None
    try:
        ws = np.linalg.solve(problem.gram[np.ix_(on, on)],
                             problem.cross[on] - 0.5 * problem.penalty * s[on])
    except np.linalg.LinAlgError:
        return None
    target = np.zeros_like(w)
    target[on] = ws
    flip = on & (np.sign(target) != s)
    if not flip.any():
        return target
    t_hit = w[flip] / (w[flip] - target[flip])
    t = t_hit.min()
    out = w + t * (target - w)
    out[np.flatnonzero(flip)[t_hit <= t]] = 0.0
    return out


def _polish(problem: LassoProblem, w: np.ndarray, obj: float):
    """Chain feature-sign steps; each partial step drops a coordinate, so this ends."""
    for _ in range(problem.n_features + 1):
        cand = _support_step(problem, w)
        if cand is None:
            break
        cand_obj = problem.objective(cand)
        if cand_obj > obj:
            break
        done = np.array_equal(np.sign(cand), np.sign(w))
        w, obj = cand, cand_obj
        if done:
            break
    return w, obj


def coordinate_descent(problem: LassoProblem, tol: float = 1e-8, max_sweeps: int = 10000,
                       w0=None, polish: bool = True) -> FeatureWeights:
    """Cyclic coordinate descent.

    With ``polish`` each sweep is followed by feature-sign steps toward the
    exact minimizer on the current support, kept only while they do not raise
    the objective. Strongly correlated features otherwise make plain sweeps
    crawl.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = problem.gram
    c = problem.cross
    half_pen = problem.penalty / 2
    w = np.zeros(problem.n_features) if w0 is None else np.array(w0, dtype=float)
    history = [problem.objective(w)]
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for i in range(problem.n_features):
            if g[i, i] <= 0:
                new = 0.0
            else:
                rho = c[i] - g[i] @ w + g[i, i] * w[i]
                new = float(soft_threshold(rho, half_pen)) / g[i, i]
            max_delta = max(max_delta, abs(new - w[i]))
            w[i] = new
        obj = problem.objective(w)
        if polish and max_delta >= tol:
            w, obj = _polish(problem, w, obj)
        history.append(obj)
        if max_delta < tol:
            return FeatureWeights(w, True, sweep, history)
    return FeatureWeights(w, False, max_sweeps, history)


def kkt_residual(problem: LassoProblem, w) -> float:
    w = np.asarray(w, dtype=float)
    grad = 2 * (problem.gram @ w - problem.cross)
    pen = problem.penalty
    active = w != 0
    viol = np.where(active, np.abs(grad + pen * np.sign(w)), np.maximum(np.abs(grad) - pen, 0.0))
    return float(viol.max(initial=0.0))


LAMBDA_GRID = (0.002, 0.001, 0.0005, 0.0002, 0.0001)


def lambda_sweep(problem: LassoProblem, lambdas=LAMBDA_GRID, **kw) -> dict[float, FeatureWeights]:
    return {mu: coordinate_descent(problem.with_mu(mu), **kw) for mu in lambdas}


def write_weights_csv(sweep: dict[float, FeatureWeights], path, feature_ids=None) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["feature_id", "lambda", "weight"])
        for mu, res in sweep.items():
            ids = feature_ids or list(FeatureId)[: res.w.size]
            for fid, wi in zip(ids, res.w):
                out.writerow([FeatureId(fid).label, repr(mu), repr(float(wi))])
