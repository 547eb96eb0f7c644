"""Microphone utility from fused feature correlations.

Per frame: the feature PCCs relative to each reference channel p form an
N x I matrix M_p whose principal left singular vector is refined by one power
step. Self-normalized, these vectors make up a channel similarity matrix, its
symmetrized magnitude is a graph adjacency, and the Fiedler vector of the
random-walk Laplacian gives the utility up to sign. The sign is fixed by
correlating with the negated signal entropies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stats import pearson

SELF_NORM_FLOOR = 1e-6
POWER_FLOOR = 1e-12


@dataclass
class SimilarityGraph:
    S: np.ndarray
    W: np.ndarray
    d: np.ndarray
    L: np.ndarray


@dataclass
class UtilityVector:
    u: np.ndarray
    fiedler: np.ndarray
    flip_corr: float


def build_channel_matrices(pcc: np.ndarray) -> np.ndarray:
    """Stack of M_p, shape ``(N, N, I)`` with ``[p, q, i] = r_pq^(i)``."""
    pcc = np.asarray(pcc, dtype=float)
    if not np.all(np.isfinite(pcc)):
        raise ValueError("PCC tensor contains non-finite values")
    # pcc is already indexed [p, q, i]; M_p is the slice pcc[p]
    return pcc.copy()


def power_iterate(a_prev, m) -> np.ndarray:
    a_prev = np.asarray(a_prev, dtype=float)
    m = np.asarray(m, dtype=float)
    a = m @ (m.T @ a_prev)
    norm = np.linalg.norm(a)
    if norm < POWER_FLOOR:
        return a_prev.copy()
    return a / norm


def principal_left_vector(m, a0=None, max_iter: int = 10000, tol: float = 1e-14) -> np.ndarray:
    """Iterate :func:`power_iterate` to convergence."""
    m = np.asarray(m, dtype=float)
    a = np.full(m.shape[0], 1 / np.sqrt(m.shape[0])) if a0 is None else np.asarray(a0, float)
    for _ in range(max_iter):
        nxt = power_iterate(a, m)
        if np.linalg.norm(nxt - a) < tol:
            return nxt
        a = nxt
    return a


def similarity_matrix(a: np.ndarray, prev_s: np.ndarray | None = None) -> np.ndarray:
    """Column p is a_p divided by its own p-th entry.

    ``a`` holds a_p in column p. When that entry is tiny the column from
    ``prev_s`` (or the unit vector e_p) is reused.
    """
    n = a.shape[0]
    diag = np.diagonal(a)
    ok = np.abs(diag) >= SELF_NORM_FLOOR
    s = a / np.where(ok, diag, 1.0)[None, :]
    if not ok.all():
        fallback = np.eye(n) if prev_s is None else prev_s
        s[:, ~ok] = fallback[:, ~ok]
    return s


def graph_from_similarity(s: np.ndarray) -> SimilarityGraph:
    w = 0.5 * (np.abs(s) + np.abs(s).T)
    d = w.sum(axis=1)
    lap = np.eye(w.shape[0]) - w / d[:, None]
    return SimilarityGraph(s, w, d, lap)


def graph_from_adjacency(w: np.ndarray) -> SimilarityGraph:
    w = np.asarray(w, dtype=float)
    d = w.sum(axis=1)
    lap = np.eye(w.shape[0]) - w / d[:, None]
    return SimilarityGraph(w.copy(), w, d, lap)


def assemble_graph(a: np.ndarray, prev_s: np.ndarray | None = None) -> SimilarityGraph:
    return graph_from_similarity(similarity_matrix(a, prev_s))


def fiedler_vector(graph: SimilarityGraph) -> np.ndarray:
    """Eigenvector of the random-walk Laplacian for its second-smallest eigenvalue.

    Solved through the symmetric normalized Laplacian and mapped back, scaled
    to unit norm, first nonzero entry positive.
    """
    d = graph.d
    if np.any(d <= 0):
        raise ValueError("graph has a vertex of nonpositive degree")
    inv_sqrt = 1.0 / np.sqrt(d)
    lsym = inv_sqrt[:, None] * (np.diag(d) - graph.W) * inv_sqrt[None, :]
    lsym = 0.5 * (lsym + lsym.T)
    _, vecs = np.linalg.eigh(lsym)
    t = inv_sqrt * vecs[:, 1]
    t /= np.linalg.norm(t)
    nz = np.flatnonzero(np.abs(t) > 1e-12)
    if nz.size and t[nz[0]] < 0:
        t = -t
    return t


def ncut_score(w, subset) -> float:
    w = np.asarray(w, dtype=float)
    mask = np.zeros(w.shape[0], dtype=bool)
    mask[list(subset)] = True
    if mask.all() or not mask.any():
        raise ValueError("subset must be nonempty and proper")
    d = w.sum(axis=1)
    cut = w[np.ix_(mask, ~mask)].sum()
    vol_a, vol_b = d[mask].sum(), d[~mask].sum()
    if vol_a <= 0 or vol_b <= 0:
        return float("inf")
    return float(cut * (1.0 / vol_a + 1.0 / vol_b))


def disambiguate_sign(t, e) -> UtilityVector:
    t = np.asarray(t, dtype=float)
    rho = pearson(t, e)
    if np.isnan(rho):
        rho = 0.0
    u = t.copy() if rho >= 0 else -t
    return UtilityVector(u, t.copy(), rho)


class UtilityEstimator:
    """Recursive per-frame utility update (one power step per channel).

    ``a`` stores the similarity vectors a_p as columns.
    """

    def __init__(self, n_channels: int):
        self.n = n_channels
        self.a = np.full((n_channels, n_channels), 1.0 / np.sqrt(n_channels))
        self.prev_s: np.ndarray | None = None
        self.last_graph: SimilarityGraph | None = None

    def step(self, pcc: np.ndarray, entropy_neg) -> UtilityVector:
        m = build_channel_matrices(pcc)
        for p in range(self.n):
            self.a[:, p] = power_iterate(self.a[:, p], m[p])
        graph = assemble_graph(self.a, self.prev_s)
        self.prev_s = graph.S
        self.last_graph = graph
        return disambiguate_sign(fiedler_vector(graph), entropy_neg)
