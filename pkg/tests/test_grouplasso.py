import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2ive.data import Dataset, residualize
from r2ive.errors import InputError
from r2ive.grouplasso import (BlockDesign, adaptive_group_weights, fit_group_lasso, group_kkt_violation,
                              group_lambda_max, group_lasso_path, orthonormalize, tune_first_stage)
from r2ive.simulation import generate_dataset, preset
from r2ive.splines import SplineSpec, assemble_design


def _problem(n=80, sizes=(3, 2, 4), seed=0, signal=(1.0, 0.0, -0.5)):
    rng = np.random.default_rng(seed)
    P = sum(sizes)
    U = rng.normal(size=(n, P))
    idx, s = [], 0
    for m in sizes:
        idx.append(slice(s, s + m))
        s += m
    g = np.concatenate([np.full(m, a) for m, a in zip(sizes, signal)])
    d = U @ g + rng.normal(size=n)
    return d, BlockDesign(U, idx)


def _prox_grad(d, U, idx, lam, w, iters=200_000):
    """Plain proximal gradient on ||d - U g||^2 + lam sum w_j ||g_j||."""
    step = 1.0 / (2 * np.linalg.eigvalsh(U.T @ U)[-1])
    g = np.zeros(U.shape[1])
    for _ in range(iters):
        z = g - step * (-2 * U.T @ (d - U @ g))
        for j, sl in enumerate(idx):
            nrm = np.linalg.norm(z[sl])
            t = step * lam * w[j]
            z[sl] = 0.0 if nrm <= t else (1 - t / nrm) * z[sl]
        if np.max(np.abs(z - g)) < 1e-15:
            g = z
            break
        g = z
    return g


@pytest.mark.parametrize("seed", range(5))
def test_kkt_along_path(seed):
    d, bd = _problem(seed=seed)
    lam_max = group_lambda_max(d, bd)
    for frac in (0.9, 0.5, 0.1, 0.01):
        fit = fit_group_lasso(d, bd, frac * lam_max)
        assert fit.converged
        assert group_kkt_violation(d, bd, fit) <= 1e-6 * np.linalg.norm(d)


def test_zero_penalty_is_least_squares():
    d, bd = _problem(n=120)
    fit = fit_group_lasso(d, bd, 0.0, tol=1e-12, max_iter=100_000)
    ls = np.linalg.lstsq(bd.U, d, rcond=None)[0]
    np.testing.assert_allclose(fit.gamma, ls, atol=1e-8)


def test_above_lambda_max_is_zero():
    d, bd = _problem()
    lam_max = group_lambda_max(d, bd)
    assert np.all(fit_group_lasso(d, bd, lam_max * 1.0001).gamma == 0)
    assert np.any(fit_group_lasso(d, bd, lam_max * 0.99).gamma != 0)


def test_matches_proximal_gradient_oracle():
    rng = np.random.default_rng(11)
    U = rng.normal(size=(30, 5))
    idx = [slice(0, 2), slice(2, 5)]
    d = U @ np.array([0.5, -1.0, 0.2, 0.0, 0.3]) + 0.3 * rng.normal(size=30)
    bd = BlockDesign(U, idx)
    w = np.array([1.0, 2.0])
    lam = 0.3 * group_lambda_max(d, bd, w)
    fit = fit_group_lasso(d, bd, lam, w, tol=1e-14, max_iter=100_000)
    np.testing.assert_allclose(fit.gamma, _prox_grad(d, U, idx, lam, w), atol=1e-10)


def test_orthonormal_block_closed_form():
    rng = np.random.default_rng(4)
    Q, _ = np.linalg.qr(rng.normal(size=(50, 6)))
    idx = [slice(0, 3), slice(3, 6)]
    d = rng.normal(size=50)
    lam = 1.5
    fit = fit_group_lasso(d, BlockDesign(Q, idx, orthonormal=True), lam, tol=1e-14)
    for sl in idx:
        c = Q[:, sl].T @ d
        # minimizer of ||c - g||^2 + lam ||g|| is the group soft threshold at lam / 2
        expect = max(0.0, 1 - lam / (2 * np.linalg.norm(c))) * c
        np.testing.assert_allclose(fit.gamma[sl], expect, atol=1e-12)


def test_weights_infinite_and_scaled():
    d, bd = _problem()
    lam = 0.2 * group_lambda_max(d, bd)
    fit = fit_group_lasso(d, bd, lam, weights=[np.inf, 1.0, 1.0])
    assert np.all(fit.gamma[bd.group_index[0]] == 0)
    assert 0 not in fit.active_groups
    # scaling weights by c and lambda by 1/c leaves the solution unchanged
    a = fit_group_lasso(d, bd, lam, weights=[0.5, 1.0, 2.0], tol=1e-12)
    b = fit_group_lasso(d, bd, lam / 3, weights=[1.5, 3.0, 6.0], tol=1e-12)
    np.testing.assert_allclose(a.gamma, b.gamma, atol=1e-9)
    with pytest.raises(InputError):
        fit_group_lasso(d, bd, lam, weights=[-1.0, 1.0, 1.0])
    with pytest.raises(InputError):
        fit_group_lasso(d, bd, lam, weights=[1.0, 1.0])


def test_objective_trace_is_monotone():
    d, bd = _problem(n=60, sizes=(4, 4, 4, 4), signal=(1, 1, 0, 0))
    fit = fit_group_lasso(d, bd, 0.05 * group_lambda_max(d, bd))
    tr = fit.objective_trace
    assert tr.size >= 2
    assert np.all(np.diff(tr) <= 1e-9 * tr[0])


def test_adaptive_weights():
    d, bd = _problem()
    fit = fit_group_lasso(d, bd, 0.6 * group_lambda_max(d, bd))
    w = adaptive_group_weights(fit)
    norms = fit.group_norms()
    for j in range(3):
        assert w[j] == (np.inf if norms[j] == 0 else 1 / norms[j])


def test_path_agrees_with_single_fits():
    d, bd = _problem(n=100)
    lams = group_lambda_max(d, bd) * np.array([0.8, 0.3, 0.05])
    path = group_lasso_path(d, bd, lams, tol=1e-12)
    for lam, f in zip(lams, path):
        np.testing.assert_allclose(f.gamma, fit_group_lasso(d, bd, lam, tol=1e-12).gamma, atol=1e-7)
    # wide design goes through the residual kernel and must agree as well
    d2, bd2 = _problem(n=8, sizes=(3, 3, 3, 3), signal=(1, 0, 0, 1))
    lams = group_lambda_max(d2, bd2) * np.array([0.5, 0.2])
    for lam, f in zip(lams, group_lasso_path(d2, bd2, lams, tol=1e-12)):
        np.testing.assert_allclose(f.gamma, fit_group_lasso(d2, bd2, lam, tol=1e-12).gamma, atol=1e-7)


def test_path_df_cap_stops_early():
    d, bd = _problem(n=100, sizes=(2,) * 10, signal=(1,) * 10)
    lams = group_lambda_max(d, bd) * np.geomspace(1, 1e-3, 30)
    path = group_lasso_path(d, bd, lams, df_max=5)
    assert len(path) < 30
    assert sum(bd.group_sizes[list(path[-1].active_groups)]) > 5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), m=st.sampled_from([4, 5, 7]))
def test_orthonormalize_preserves_column_space(seed, m):
    rng = np.random.default_rng(seed)
    cds = residualize(Dataset(Y=rng.normal(size=60), D=rng.normal(size=60), Z=rng.normal(size=(60, 3))))
    design = assemble_design(cds, SplineSpec(m))
    ob = orthonormalize(design)
    U = ob.design.U
    for j, (gs, go) in enumerate(zip(design.group_index, ob.design.group_index)):
        Q = U[:, go]
        assert Q.shape[1] == m - 1
        np.testing.assert_allclose(Q.T @ Q, np.eye(m - 1), atol=1e-10)
        B = design.U[:, gs]
        np.testing.assert_allclose(Q @ (Q.T @ B), B, atol=1e-9)
    theta = rng.normal(size=U.shape[1])
    np.testing.assert_allclose(design.U @ ob.to_spline_coef(theta), U @ theta, atol=1e-9)


def _single_relevant(seed, n=500, L=10):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, L))
    D = 2 * Z[:, 0] + rng.normal(size=n)
    return residualize(Dataset(Y=D + rng.normal(size=n), D=D, Z=Z))


def test_single_relevant_instrument_recovered():
    hits = 0
    for seed in range(100):
        cds = _single_relevant(seed)
        res = tune_first_stage(cds.D, cds)
        hits += res.relevant_set == (0,)
    assert hits >= 95


def _noise_free(name="linear-s2-10"):
    cfg = preset(name)
    ds, _ = generate_dataset(cfg, 0)
    D = ds.Z @ cfg.gamma()
    return residualize(Dataset(Y=D, D=D, Z=ds.Z)), cfg


def _rel_err(res, cds):
    return np.linalg.norm(res.d_hat - cds.D) / np.linalg.norm(cds.D)


def test_noise_free_fitted_instrument():
    # With xi = 0 the criterion always prefers the smallest penalty on the grid,
    # so the remaining error is the shrinkage at lambda_min = 1e-3 lambda_max.
    cds, cfg = _noise_free()
    res = tune_first_stage(cds.D, cds)
    assert set(res.relevant_set) == set(cfg.relevant)
    assert _rel_err(res, cds) <= 1e-3


def test_noise_free_error_vanishes_with_grid_floor():
    cds, cfg = _noise_free()
    errs = [_rel_err(tune_first_stage(cds.D, cds, mn_grid=[1], lambda_ratio=r), cds) for r in (1e-2, 1e-3, 1e-5)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 1e-3


def _superset_rate(report, tag="NAIVE"):
    s1 = report.config.s1
    recs = [r for r in report.records if r["estimator"] == tag and not r["error"]]
    return np.mean([r["captured_relevant"] == s1 for r in recs])


def test_naive_never_misses_relevant(mc):
    rep = mc("linear-s2-10", 200)
    assert _superset_rate(rep) >= 0.95


def test_relevant_capture_improves_with_n(mc):
    rates = [_superset_rate(mc(f"linear-n{n}", 200)) for n in (200, 500, 1000)]
    assert rates[0] <= rates[1] <= rates[2]
    assert rates[2] >= 0.95
