"""Compiled inner loops for the graphical lasso and the t-distribution EM.

Everything here is plain-array numba code.  Failures are reported through
integer status codes because exceptions cannot cross the compiled boundary
cheaply; the Python wrappers in `estimation` turn them into exceptions.
"""

import numpy as np
from numba import njit

OK = 0
SINGULAR = 1
NO_CONVERGENCE = 2

LASSO_MAX_SWEEPS = 2000


@njit(cache=True)
def chol_inplace(a, out):
    """Lower Cholesky factor of `a` into `out`; returns False if not SPD."""
    m = a.shape[0]
    for j in range(m):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        out[j, j] = d
        for i in range(j + 1, m):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / d
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True)
def spd_inverse(a, out):
    """Inverse of an SPD matrix via its Cholesky factor; returns False if not SPD."""
    m = a.shape[0]
    L = np.empty((m, m))
    if not chol_inplace(a, L):
        return False
    # invert L column by column (forward substitution on unit vectors)
    Li = np.zeros((m, m))
    for c in range(m):
        Li[c, c] = 1.0 / L[c, c]
        for i in range(c + 1, m):
            s = 0.0
            for k in range(c, i):
                s -= L[i, k] * Li[k, c]
            Li[i, c] = s / L[i, i]
    for i in range(m):
        for j in range(i + 1):
            s = 0.0
            for k in range(i, m):
                s += Li[k, i] * Li[k, j]
            out[i, j] = s
            out[j, i] = s
    return True


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _lasso_column(W, s, j, beta, rho, tol):
    """Cyclic coordinate descent for one glasso column.

    Minimises 0.5 b'W11 b - s12'b + rho |b|_1 where W11 is `W` with row and
    column `j` removed.  `beta` is a full-length vector whose entry `j` is
    ignored; it is updated in place and used as the warm start.
    """
    m = W.shape[0]
    g = np.zeros(m)                   # g = W11 @ beta, maintained incrementally
    for k in range(m):
        if k == j:
            continue
        acc = 0.0
        for l in range(m):
            if l != j:
                acc += W[k, l] * beta[l]
        g[k] = acc
    for _ in range(LASSO_MAX_SWEEPS):
        biggest = 0.0
        for k in range(m):
            if k == j:
                continue
            wkk = W[k, k]
            r = s[k] - (g[k] - wkk * beta[k])
            new = _soft(r, rho) / wkk
            diff = new - beta[k]
            if diff != 0.0:
                for l in range(m):
                    if l != j:
                        g[l] += W[l, k] * diff
                beta[k] = new
                step = abs(diff) * wkk
                if step > biggest:
                    biggest = step
        if biggest < tol:
            break
    return g


@njit(cache=True)
def glasso_bcd(S, rho, W, B, max_sweeps, tol):
    """Block coordinate descent for the graphical lasso.

    Parameters
    ----------
    S : (m, m) empirical covariance.
    rho : off-diagonal l1 penalty, > 0.
    W : (m, m) working covariance used as the warm start.  It is rescaled
        to ``D W D`` with ``D = sqrt(diag(S) / diag(W))`` so its diagonal
        equals diag(S) while positive definiteness is preserved; pass
        ``W = S`` for a cold start.
    B : (m, m) regression coefficients, column j holding beta_j; warm start.
    max_sweeps, tol : outer iteration bound and residual threshold.  The
        residual is the larger of the mean off-diagonal KKT violation and
        ``max |(W Theta)_ij|`` off the diagonal, both divided by
        ``max(1, mean(diag(S)))`` so heavy-tailed scatter matrices are
        judged on a relative scale.

    Returns
    -------
    (status, sweeps, residual, Theta)
    """
    m = S.shape[0]
    scale = np.empty(m)
    for j in range(m):
        scale[j] = np.sqrt(S[j, j] / W[j, j]) if W[j, j] > 0.0 else 1.0
    for j in range(m):
        for k in range(m):
            if k == j:
                W[j, j] = S[j, j]
                B[j, j] = 0.0
            else:
                W[k, j] *= scale[k] * scale[j]
                B[k, j] *= scale[j] / scale[k]
    # residuals are measured in units of the typical variance (at least 1)
    unit = 0.0
    for j in range(m):
        unit += S[j, j]
    unit = max(1.0, unit / m)
    Theta = np.zeros((m, m))
    inner_tol = tol * 1e-2 * unit
    residual = np.inf
    s_col = np.empty(m)
    for sweep in range(1, max_sweeps + 1):
        for j in range(m):
            for k in range(m):
                s_col[k] = S[k, j]
            beta = B[:, j].copy()
            g = _lasso_column(W, s_col, j, beta, rho, inner_tol)
            for k in range(m):
                if k != j:
                    B[k, j] = beta[k]
                    W[k, j] = g[k]
                    W[j, k] = g[k]
        # assemble Theta from the regressions and measure optimality
        for j in range(m):
            acc = W[j, j]
            for k in range(m):
                if k != j:
                    acc -= W[k, j] * B[k, j]
            if not acc > 0.0:
                return SINGULAR, sweep, np.inf, Theta
            t22 = 1.0 / acc
            Theta[j, j] = t22
            for k in range(m):
                if k != j:
                    Theta[k, j] = -B[k, j] * t22
        kkt = 0.0
        consistency = 0.0
        for j in range(m):
            for k in range(m):
                if k == j:
                    continue
                gap = W[k, j] - S[k, j]
                b = B[k, j]
                if b > 0.0:
                    r = abs(gap + rho)
                elif b < 0.0:
                    r = abs(gap - rho)
                else:
                    r = max(0.0, abs(gap) - rho)
                kkt += r
                # (W Theta)_{kj} should vanish off the diagonal
                acc = 0.0
                for l in range(m):
                    if l != j:
                        acc += W[k, l] * B[l, j]
                c = abs(acc - W[k, j]) * Theta[j, j] / unit
                if c > consistency:
                    consistency = c
        if m > 1:
            kkt /= m * (m - 1) * unit
        residual = max(kkt, consistency)
        if residual <= tol:
            for i in range(m):
                for k in range(i):
                    v = 0.5 * (Theta[i, k] + Theta[k, i])
                    Theta[i, k] = v
                    Theta[k, i] = v
            return OK, sweep, residual, Theta
    return NO_CONVERGENCE, max_sweeps, residual, Theta


@njit(cache=True)
def mahalanobis_precision(Z, mu, Theta, delta):
    """delta_i = (z_i - mu)' Theta (z_i - mu) for every column of `Z`."""
    m, M = Z.shape
    r = np.empty(m)
    for i in range(M):
        for a in range(m):
            r[a] = Z[a, i] - mu[a]
        acc = 0.0
        for a in range(m):
            ta = 0.0
            for b in range(m):
                ta += Theta[a, b] * r[b]
            acc += r[a] * ta
        delta[i] = acc if acc > 0.0 else 0.0


@njit(cache=True)
def weighted_moments(Z, tau, denom, mu, S):
    """Weighted mean into `mu`, then the weighted scatter about it over `denom` into `S`."""
    m, M = Z.shape
    wsum = 0.0
    for a in range(m):
        mu[a] = 0.0
    for i in range(M):
        wsum += tau[i]
        for a in range(m):
            mu[a] += tau[i] * Z[a, i]
    for a in range(m):
        mu[a] /= wsum
    for a in range(m):
        for b in range(a + 1):
            S[a, b] = 0.0
    r = np.empty(m)
    for i in range(M):
        for a in range(m):
            r[a] = Z[a, i] - mu[a]
        t = tau[i]
        for a in range(m):
            ra = t * r[a]
            for b in range(a + 1):
                S[a, b] += ra * r[b]
    for a in range(m):
        for b in range(a + 1):
            v = S[a, b] / denom
            S[a, b] = v
            S[b, a] = v


@njit(cache=True)
def em_iterations(Z, nu, rho, denom, mu, W, B, Theta, tau, delta,
                  max_iters, em_tol, g_max, g_tol):
    """Run EM updates at a fixed dof until the relative change drops below `em_tol`.

    `mu`, `W`, `B`, `Theta` carry the current estimate in and the final one
    out; `W` is the covariance estimate (inverse of `Theta` at convergence).
    Returns (status, iterations, converged, glasso_residual).
    """
    m, M = Z.shape
    gaussian = np.isinf(nu)
    mu_new = np.empty(m)
    S = np.empty((m, m))
    W_old = np.empty((m, m))
    for it in range(1, max_iters + 1):
        # E-step at the current parameters
        mahalanobis_precision(Z, mu, Theta, delta)
        for i in range(M):
            tau[i] = 1.0 if gaussian else (nu + m) / (nu + delta[i])
        # M-step: mean from the new weights, scatter about the new mean
        weighted_moments(Z, tau, denom, mu_new, S)
        for a in range(m):
            for b in range(m):
                W_old[a, b] = W[a, b]
        if rho > 0.0:
            status, _, resid, Th = glasso_bcd(S, rho, W, B, g_max, g_tol)
            if status != OK:
                # the warm start can be poor after a large reweighting: retry cold
                for a in range(m):
                    for b in range(m):
                        W[a, b] = S[a, b]
                        B[a, b] = 0.0
                status, _, resid, Th = glasso_bcd(S, rho, W, B, g_max, g_tol)
            if status != OK:
                return status, it, False, resid
            for a in range(m):
                for b in range(m):
                    Theta[a, b] = Th[a, b]
        else:
            if not spd_inverse(S, Theta):
                return SINGULAR, it, False, 0.0
            for a in range(m):
                for b in range(m):
                    W[a, b] = S[a, b]
        dmu = 0.0
        nmu = 0.0
        for a in range(m):
            dmu += (mu_new[a] - mu[a]) ** 2
            nmu += mu_new[a] ** 2
            mu[a] = mu_new[a]
        dC = 0.0
        nC = 0.0
        for a in range(m):
            for b in range(m):
                dC += (W[a, b] - W_old[a, b]) ** 2
                nC += W[a, b] ** 2
        change = max(np.sqrt(dmu) / (1.0 + np.sqrt(nmu)),
                     np.sqrt(dC) / (1.0 + np.sqrt(nC)))
        if change < em_tol:
            return OK, it, True, 0.0
    return OK, max_iters, False, 0.0
