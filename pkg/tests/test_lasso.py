import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from micutility import lasso as La


def synthetic_trial(rng, frames=20, n=4, n_feat=5, w_true=None):
    mats = rng.uniform(-1, 1, size=(frames, n, n, n_feat))
    if w_true is None:
        w_true = np.zeros(n_feat)
        w_true[:2] = [0.6, -0.3][:n_feat]
    gam = np.einsum("lpqi,i->lq", mats, w_true) / n + 0.05 * rng.normal(size=(frames, n))
    return mats, gam


def dense_rows(trials):
    """Explicit weighted rows: an independent route to the same objective."""
    xs, ys, ws = [], [], []
    for mats, gam in trials:
        frames, n = gam.shape
        for ell in range(frames):
            g = gam[ell] - gam[ell].mean()
            for p in range(n):
                for q in range(n):
                    xs.append(mats[ell, p, q])
                    ys.append(g[q])
                    ws.append(1.0 / (n * frames))
    return np.array(xs), np.array(ys), np.array(ws)


def test_zero_mean_msc(rng):
    assert not La.zero_mean_msc(np.full(4, 0.3)).any()
    assert La.zero_mean_msc([0.0, 1.0]).tolist() == [-0.5, 0.5]
    g = rng.uniform(0, 1, 10)
    assert abs(La.zero_mean_msc(g).mean()) < 1e-14
    assert abs(La.zero_mean_msc(g).sum()) < 1e-12


def test_soft_threshold():
    assert La.soft_threshold(5.0, 2.0) == 3.0
    assert La.soft_threshold(-1.0, 2.0) == 0.0
    assert La.soft_threshold(-4.0, 1.0) == -3.0
    assert La.soft_threshold(0.7, 0.0) == 0.7
    with pytest.raises(ValueError):
        La.soft_threshold(1.0, -1.0)


def test_row_counts(rng):
    p = La.assemble_problem([synthetic_trial(rng, frames=1, n=2, n_feat=1)])
    assert p.n_rows == 4
    trials = [synthetic_trial(rng, frames=7, n=3) for _ in range(4)]
    assert La.assemble_problem(trials).n_rows == 3 * 3 * 7 * 4


def test_gram_matches_dense_rows(rng):
    trials = [synthetic_trial(rng, frames=f) for f in (5, 9)]
    p = La.assemble_problem(trials)
    x, y, w = dense_rows(trials)
    np.testing.assert_allclose(p.gram, (x * w[:, None]).T @ x, rtol=1e-12)
    np.testing.assert_allclose(p.cross, (x * w[:, None]).T @ y, rtol=1e-12)
    assert p.yy == pytest.approx(np.sum(w * y * y), rel=1e-12)


def test_dimension_mismatch(rng):
    a = synthetic_trial(rng, n=4)
    b = synthetic_trial(rng, n=3)
    with pytest.raises(La.ConfigurationError):
        La.assemble_problem([a, b])
    mats, gam = a
    with pytest.raises(La.ConfigurationError):
        La.assemble_problem([(mats, gam[:, :2])])
    with pytest.raises(La.ConfigurationError):
        La.assemble_problem([])
    bad = mats.copy()
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(La.ConfigurationError):
        La.assemble_problem([(bad, gam)])


def test_unregularised_matches_least_squares(rng):
    trials = [synthetic_trial(rng) for _ in range(3)]
    p = La.assemble_problem(trials, mu=0.0)
    res = La.coordinate_descent(p)
    x, y, w = dense_rows(trials)
    sw = np.sqrt(w)
    ls = np.linalg.pinv(x * sw[:, None]) @ (y * sw)
    assert res.converged
    np.testing.assert_allclose(res.w, ls, atol=1e-6)


def test_above_mu_max_gives_zero(rng):
    p = La.assemble_problem([synthetic_trial(rng) for _ in range(2)])
    mu_max = p.mu_max
    for mu in (mu_max, 2 * mu_max):
        q = p.with_mu(mu)
        res = La.coordinate_descent(q)
        assert not res.w.any()
        assert La.kkt_residual(q, res.w) == 0.0
    res = La.coordinate_descent(p.with_mu(0.9 * mu_max))
    assert res.w.any()


def test_mu_max_single_trial_formula(rng):
    trial = synthetic_trial(rng)
    p = La.assemble_problem([trial])
    x, y, w = dense_rows([trial])
    assert p.mu_max == pytest.approx(np.max(np.abs(2 * (x * w[:, None]).T @ y)), rel=1e-12)


def test_duplicate_trial_leaves_argmin(rng):
    trial = synthetic_trial(rng)
    one = La.coordinate_descent(La.assemble_problem([trial], mu=1e-3))
    two = La.coordinate_descent(La.assemble_problem([trial, trial], mu=1e-3))
    np.testing.assert_allclose(one.w, two.w, atol=1e-10)


def test_duplicated_frames_leave_argmin(rng):
    mats, gam = synthetic_trial(rng)
    one = La.coordinate_descent(La.assemble_problem([(mats, gam)], mu=1e-3))
    dup = (np.concatenate([mats, mats]), np.concatenate([gam, gam]))
    two = La.coordinate_descent(La.assemble_problem([dup], mu=1e-3))
    np.testing.assert_allclose(one.w, two.w, atol=1e-10)


@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 0.05), st.booleans())
def test_kkt_and_monotone_objective(seed, mu, polish):
    rng = np.random.default_rng(seed)
    # correlated columns make the problem ill-conditioned
    mats, gam = synthetic_trial(rng, n_feat=6)
    mats[..., 5] = mats[..., 4] + 0.01 * rng.normal(size=mats.shape[:-1])
    p = La.assemble_problem([(mats, gam)], mu=mu)
    res = La.coordinate_descent(p, polish=polish, max_sweeps=20000)
    h = np.array(res.objective_history)
    assert np.all(np.diff(h) <= 1e-12 * max(1.0, abs(h[0])))
    if res.converged:
        assert La.kkt_residual(p, res.w) <= 1e-6
    assert polish is False or res.converged


def test_kkt_detects_perturbation(rng):
    p = La.assemble_problem([synthetic_trial(rng)], mu=1e-3)
    res = La.coordinate_descent(p)
    assert La.kkt_residual(p, res.w) <= 1e-6
    w = res.w.copy()
    w[np.flatnonzero(w)[0]] += 0.1
    assert La.kkt_residual(p, w) > 0


def test_not_converged_flag(rng):
    mats, gam = synthetic_trial(rng, n_feat=6)
    mats[..., 5] = mats[..., 4] + 1e-4 * rng.normal(size=mats.shape[:-1])
    p = La.assemble_problem([(mats, gam)], mu=1e-5)
    res = La.coordinate_descent(p, max_sweeps=3, polish=False)
    assert not res.converged and res.sweeps == 3
    with pytest.raises(ValueError):
        La.coordinate_descent(p, tol=0.0)


def test_support_shrinks_with_lambda(rng):
    w_true = np.array([0.5, -0.4, 0.3, 0.2, -0.1, 0.05, 0.02, 0.0])
    trials = [synthetic_trial(rng, frames=10, n_feat=8, w_true=w_true) for _ in range(30)]
    p = La.assemble_problem(trials)
    sweep = La.lambda_sweep(p, sorted(La.LAMBDA_GRID))
    sizes = [len(sweep[mu].support) for mu in sorted(sweep)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    assert all(r.converged for r in sweep.values())


def test_weights_csv(tmp_path, rng):
    p = La.assemble_problem([synthetic_trial(rng, n_feat=18)])
    sweep = La.lambda_sweep(p, (0.01, 0.001))
    path = tmp_path / "w.csv"
    La.write_weights_csv(sweep, path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 36
    assert rows[0]["feature_id"] == "td_envelope"
    assert float(rows[0]["lambda"]) == 0.01
    assert float(rows[17 + 1]["weight"]) == sweep[0.001].w[0]
