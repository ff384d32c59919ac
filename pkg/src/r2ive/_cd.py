"""Compiled coordinate-descent kernels.

Both kernels alternate a full sweep with sweeps restricted to the current
active set, and stop when a full sweep moves no coefficient by ``tol`` or more.
They update ``coef`` and ``r`` (the residual ``y - X coef``) in place and write
the objective after every sweep into ``trace``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _block_target(m, evals, V, c, pen, cp, theta, new):
    """Exact minimizer of one block given ``c = U_j' r + A_j g_j`` with ``A_j = V diag(evals) V'``."""
    emax = 0.0
    for k in range(m):
        if evals[k] > emax:
            emax = evals[k]
    cnorm2 = 0.0
    for k in range(m):
        s = 0.0
        if evals[k] > 1e-12 * emax:
            for l in range(m):
                s += V[l, k] * c[l]
        cp[k] = s
        cnorm2 += s * s
    mu = 0.5 * pen
    if emax <= 0.0 or cnorm2 == 0.0:
        for k in range(m):
            theta[k] = 0.0
    elif pen == 0.0:
        for k in range(m):
            theta[k] = cp[k] / evals[k] if evals[k] > 1e-12 * emax else 0.0
    elif np.sqrt(cnorm2) <= mu:
        for k in range(m):
            theta[k] = 0.0
    else:
        # ||gamma|| = t solves sum cp^2 / (evals t + mu)^2 = 1; convex decreasing, Newton from the left
        t = (np.sqrt(cnorm2) - mu) / emax
        for _ in range(200):
            f = -1.0
            g = 0.0
            for k in range(m):
                q = evals[k] * t + mu
                f += cp[k] * cp[k] / (q * q)
                g -= 2.0 * cp[k] * cp[k] * evals[k] / (q * q * q)
            if f <= 1e-15 or g == 0.0:
                break
            step = f / g
            t -= step
            if -step <= 1e-15 * t:
                break
        for k in range(m):
            theta[k] = cp[k] * t / (evals[k] * t + mu)
    for l in range(m):
        s = 0.0
        for k in range(m):
            s += V[l, k] * theta[k]
        new[l] = s


@njit(cache=True)
def _block_update(U, r, a, m, evals, V, coef, pen, c, cp, theta, new):
    n = U.shape[0]
    for k in range(m):
        s = 0.0
        for i in range(n):
            s += U[i, a + k] * r[i]
        c[k] = s
    for k in range(m):
        s = 0.0
        for l in range(m):
            s += V[l, k] * coef[a + l]
        theta[k] = s * evals[k]
    for l in range(m):
        s = 0.0
        for k in range(m):
            s += V[l, k] * theta[k]
        c[l] += s
    _block_target(m, evals, V, c, pen, cp, theta, new)
    dmax = 0.0
    for l in range(m):
        delta = new[l] - coef[a + l]
        if delta != 0.0:
            coef[a + l] = new[l]
            for i in range(n):
                r[i] -= U[i, a + l] * delta
            if abs(delta) > dmax:
                dmax = abs(delta)
    return dmax


@njit(cache=True)
def _block_update_gram(G, g, a, m, evals, V, coef, pen, c, cp, theta, new):
    p = G.shape[0]
    for k in range(m):
        s = g[a + k]
        for l in range(m):
            s += G[a + k, a + l] * coef[a + l]
        c[k] = s
    _block_target(m, evals, V, c, pen, cp, theta, new)
    dmax = 0.0
    for l in range(m):
        delta = new[l] - coef[a + l]
        if delta != 0.0:
            coef[a + l] = new[l]
            for i in range(p):
                g[i] -= G[i, a + l] * delta
            if abs(delta) > dmax:
                dmax = abs(delta)
    return dmax


@njit(cache=True)
def _group_objective(r, coef, starts, pen):
    obj = 0.0
    for i in range(r.shape[0]):
        obj += r[i] * r[i]
    for j in range(starts.shape[0] - 1):
        if pen[j] > 0.0 and np.isfinite(pen[j]):
            s = 0.0
            for l in range(starts[j], starts[j + 1]):
                s += coef[l] * coef[l]
            obj += pen[j] * np.sqrt(s)
    return obj


@njit(cache=True)
def group_cd(U, r, coef, starts, evals, evecs, voff, pen, max_iter, tol, trace):
    """Block coordinate descent for ``||y - U g||^2 + sum_j pen_j ||g_j||``.

    ``U`` should be Fortran ordered.  Groups with infinite ``pen`` stay at zero.
    Returns ``(sweeps, converged)``.
    """
    G = starts.shape[0] - 1
    mmax = 0
    for j in range(G):
        mmax = max(mmax, starts[j + 1] - starts[j])
    c = np.empty(mmax)
    cp = np.empty(mmax)
    theta = np.empty(mmax)
    new = np.empty(mmax)
    for j in range(G):
        if not np.isfinite(pen[j]):
            for l in range(starts[j], starts[j + 1]):
                if coef[l] != 0.0:
                    for i in range(U.shape[0]):
                        r[i] += U[i, l] * coef[l]
                    coef[l] = 0.0
    active = np.zeros(G, dtype=np.bool_)
    it = 0
    converged = False
    while it < max_iter:
        dmax = 0.0
        for j in range(G):
            if not np.isfinite(pen[j]):
                continue
            a = starts[j]
            m = starts[j + 1] - a
            V = evecs[voff[j]:voff[j] + m * m].reshape((m, m))
            d = _block_update(U, r, a, m, evals[a:a + m], V, coef, pen[j], c, cp, theta, new)
            if d > dmax:
                dmax = d
            nz = False
            for l in range(a, a + m):
                if coef[l] != 0.0:
                    nz = True
            active[j] = nz
        trace[it] = _group_objective(r, coef, starts, pen)
        it += 1
        if dmax < tol:
            converged = True
            break
        while it < max_iter:
            dmax = 0.0
            for j in range(G):
                if not active[j]:
                    continue
                a = starts[j]
                m = starts[j + 1] - a
                V = evecs[voff[j]:voff[j] + m * m].reshape((m, m))
                d = _block_update(U, r, a, m, evals[a:a + m], V, coef, pen[j], c, cp, theta, new)
                if d > dmax:
                    dmax = d
            trace[it] = _group_objective(r, coef, starts, pen)
            it += 1
            if dmax < tol:
                break
    return it, converged


@njit(cache=True)
def _enet_objective(r, coef, pen, lam2):
    obj = 0.0
    for i in range(r.shape[0]):
        obj += r[i] * r[i]
    for j in range(coef.shape[0]):
        if coef[j] != 0.0:
            obj += lam2 * coef[j] * coef[j] + pen[j] * abs(coef[j])
    return obj


@njit(cache=True)
def _coord(Z, r, colsq, pen, lam2, coef, j):
    n = Z.shape[0]
    old = coef[j]
    denom = colsq[j] + lam2
    if not np.isfinite(pen[j]) or denom <= 0.0:
        new = 0.0
    else:
        rho = 0.0
        for i in range(n):
            rho += Z[i, j] * r[i]
        rho += colsq[j] * old
        half = 0.5 * pen[j]
        if rho > half:
            new = (rho - half) / denom
        elif rho < -half:
            new = (rho + half) / denom
        else:
            new = 0.0
    delta = new - old
    if delta != 0.0:
        coef[j] = new
        for i in range(n):
            r[i] -= Z[i, j] * delta
    return abs(delta)


@njit(cache=True)
def enet_cd(Z, r, coef, colsq, pen, lam2, max_iter, tol, trace):
    """Cyclic coordinate descent for ``||y - Z b||^2 + lam2 ||b||^2 + sum_j pen_j |b_j|``.

    Returns ``(sweeps, converged)``.
    """
    p = Z.shape[1]
    for j in range(p):
        if not np.isfinite(pen[j]) and coef[j] != 0.0:
            for i in range(Z.shape[0]):
                r[i] += Z[i, j] * coef[j]
            coef[j] = 0.0
    it = 0
    converged = False
    while it < max_iter:
        dmax = 0.0
        for j in range(p):
            d = _coord(Z, r, colsq, pen, lam2, coef, j)
            if d > dmax:
                dmax = d
        trace[it] = _enet_objective(r, coef, pen, lam2)
        it += 1
        if dmax < tol:
            converged = True
            break
        while it < max_iter:
            dmax = 0.0
            for j in range(p):
                if coef[j] == 0.0:
                    continue
                d = _coord(Z, r, colsq, pen, lam2, coef, j)
                if d > dmax:
                    dmax = d
            trace[it] = _enet_objective(r, coef, pen, lam2)
            it += 1
            if dmax < tol:
                break
    return it, converged


@njit(cache=True)
def group_path(U, d, starts, evals, evecs, voff, w, lambdas, max_iter, tol, df_sizes, df_max):
    """Warm-started :func:`group_cd` over ``lambdas``; stops once the active df exceed ``df_max``.

    Returns ``(coefs, sweeps, converged, objectives)`` for the fits actually run.
    """
    K = lambdas.shape[0]
    G = starts.shape[0] - 1
    p = U.shape[1]
    coefs = np.zeros((K, p))
    its = np.zeros(K, dtype=np.int64)
    conv = np.zeros(K, dtype=np.bool_)
    objs = np.zeros(K)
    coef = np.zeros(p)
    r = d.copy()
    trace = np.empty(max_iter)
    pen = np.empty(G)
    done = 0
    for k in range(K):
        for j in range(G):
            pen[j] = np.inf if not np.isfinite(w[j]) else lambdas[k] * w[j]
        it, cv = group_cd(U, r, coef, starts, evals, evecs, voff, pen, max_iter, tol, trace)
        coefs[k] = coef
        its[k] = it
        conv[k] = cv
        objs[k] = trace[it - 1] if it > 0 else 0.0
        done = k + 1
        df = 0.0
        for j in range(G):
            for l in range(starts[j], starts[j + 1]):
                if coef[l] != 0.0:
                    df += df_sizes[j]
                    break
        if df > df_max:
            break
    return coefs[:done], its[:done], conv[:done], objs[:done]


@njit(cache=True)
def enet_path_gram(G, c, yy, w, lambdas, lam2, max_iter, tol, df_max):
    """Coordinate descent on the Gram form ``G = Z'Z``, ``c = Z'y``, warm-started over ``lambdas``.

    The gradient ``g = c - G b`` is kept up to date instead of the residual, so a
    coordinate step costs ``O(p)`` whatever ``n`` is.  Returns
    ``(coefs, sweeps, converged, objectives)``.
    """
    K = lambdas.shape[0]
    p = c.shape[0]
    coefs = np.zeros((K, p))
    its = np.zeros(K, dtype=np.int64)
    conv = np.zeros(K, dtype=np.bool_)
    objs = np.zeros(K)
    coef = np.zeros(p)
    g = c.copy()
    pen = np.empty(p)
    done = 0
    for k in range(K):
        for j in range(p):
            pen[j] = np.inf if not np.isfinite(w[j]) else lambdas[k] * w[j]
        it = 0
        cv = False
        full = True
        while it < max_iter:
            dmax = 0.0
            for j in range(p):
                old = coef[j]
                if not full and old == 0.0:
                    continue
                denom = G[j, j] + lam2
                if not np.isfinite(pen[j]) or denom <= 0.0:
                    new = 0.0
                else:
                    rho = g[j] + G[j, j] * old
                    half = 0.5 * pen[j]
                    if rho > half:
                        new = (rho - half) / denom
                    elif rho < -half:
                        new = (rho + half) / denom
                    else:
                        new = 0.0
                delta = new - old
                if delta != 0.0:
                    coef[j] = new
                    for l in range(p):
                        g[l] -= G[l, j] * delta
                    if abs(delta) > dmax:
                        dmax = abs(delta)
            it += 1
            if dmax < tol:
                if full:
                    cv = True
                    break
                full = True
            else:
                full = False
        # rss = y'y - 2 c'b + b'Gb and b'Gb = c'b - g'b
        cb = 0.0
        gb = 0.0
        extra = 0.0
        nnz = 0
        for j in range(p):
            cb += c[j] * coef[j]
            gb += g[j] * coef[j]
            if coef[j] != 0.0:
                extra += lam2 * coef[j] * coef[j] + pen[j] * abs(coef[j])
                nnz += 1
        objs[k] = yy - cb - gb + extra
        coefs[k] = coef
        its[k] = it
        conv[k] = cv
        done = k + 1
        if nnz > df_max:
            break
    return coefs[:done], its[:done], conv[:done], objs[:done]


@njit(cache=True)
def _group_objective_gram(dd, c0, g, coef, starts, pen):
    # ||d - U b||^2 = d'd - 2 c0'b + b'Gb and b'Gb = c0'b - g'b
    obj = dd
    for l in range(coef.shape[0]):
        obj -= (c0[l] + g[l]) * coef[l]
    for j in range(starts.shape[0] - 1):
        if pen[j] > 0.0 and np.isfinite(pen[j]):
            s = 0.0
            for l in range(starts[j], starts[j + 1]):
                s += coef[l] * coef[l]
            obj += pen[j] * np.sqrt(s)
    return obj


@njit(cache=True)
def group_cd_gram(Gm, dd, c0, g, coef, starts, evals, evecs, voff, pen, max_iter, tol, trace):
    """:func:`group_cd` on the Gram form: ``Gm = U'U``, ``c0 = U'd`` and the gradient ``g = U'(d - U coef)``."""
    G = starts.shape[0] - 1
    mmax = 0
    for j in range(G):
        mmax = max(mmax, starts[j + 1] - starts[j])
    c = np.empty(mmax)
    cp = np.empty(mmax)
    theta = np.empty(mmax)
    new = np.empty(mmax)
    P = Gm.shape[0]
    for j in range(G):
        if not np.isfinite(pen[j]):
            for l in range(starts[j], starts[j + 1]):
                if coef[l] != 0.0:
                    for i in range(P):
                        g[i] += Gm[i, l] * coef[l]
                    coef[l] = 0.0
    active = np.zeros(G, dtype=np.bool_)
    it = 0
    converged = False
    while it < max_iter:
        dmax = 0.0
        for j in range(G):
            if not np.isfinite(pen[j]):
                continue
            a = starts[j]
            m = starts[j + 1] - a
            V = evecs[voff[j]:voff[j] + m * m].reshape((m, m))
            d = _block_update_gram(Gm, g, a, m, evals[a:a + m], V, coef, pen[j], c, cp, theta, new)
            if d > dmax:
                dmax = d
            nz = False
            for l in range(a, a + m):
                if coef[l] != 0.0:
                    nz = True
            active[j] = nz
        trace[it] = _group_objective_gram(dd, c0, g, coef, starts, pen)
        it += 1
        if dmax < tol:
            converged = True
            break
        while it < max_iter:
            dmax = 0.0
            for j in range(G):
                if not active[j]:
                    continue
                a = starts[j]
                m = starts[j + 1] - a
                V = evecs[voff[j]:voff[j] + m * m].reshape((m, m))
                d = _block_update_gram(Gm, g, a, m, evals[a:a + m], V, coef, pen[j], c, cp, theta, new)
                if d > dmax:
                    dmax = d
            trace[it] = _group_objective_gram(dd, c0, g, coef, starts, pen)
            it += 1
            if dmax < tol:
                break
    return it, converged


@njit(cache=True)
def group_path_gram(Gm, dd, c0, starts, evals, evecs, voff, w, lambdas, max_iter, tol, df_sizes, df_max):
    """:func:`group_path` on the Gram form; cheaper whenever ``U`` has fewer columns than rows."""
    K = lambdas.shape[0]
    G = starts.shape[0] - 1
    p = Gm.shape[0]
    coefs = np.zeros((K, p))
    its = np.zeros(K, dtype=np.int64)
    conv = np.zeros(K, dtype=np.bool_)
    objs = np.zeros(K)
    coef = np.zeros(p)
    g = c0.copy()
    trace = np.empty(max_iter)
    pen = np.empty(G)
    done = 0
    for k in range(K):
        for j in range(G):
            pen[j] = np.inf if not np.isfinite(w[j]) else lambdas[k] * w[j]
        it, cv = group_cd_gram(Gm, dd, c0, g, coef, starts, evals, evecs, voff, pen, max_iter, tol, trace)
        coefs[k] = coef
        its[k] = it
        conv[k] = cv
        objs[k] = trace[it - 1] if it > 0 else 0.0
        done = k + 1
        df = 0.0
        for j in range(G):
            for l in range(starts[j], starts[j + 1]):
                if coef[l] != 0.0:
                    df += df_sizes[j]
                    break
        if df > df_max:
            break
    return coefs[:done], its[:done], conv[:done], objs[:done]
