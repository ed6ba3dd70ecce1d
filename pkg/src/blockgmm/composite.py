"""Pairwise composite-likelihood block solver with AR(1)-in-rho bivariate
Gaussian margins.

Each pair (r, t), r < t, of response positions within a block contributes
the log-density of a bivariate normal with correlation rho^(t-r) and
common variance sigma^2.  The per-subject estimating function is the
average of the pair scores; the root is found by damped Newton on the
unconstrained parameterization (theta, log sigma, atanh rho).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericDomainError, SolverError

RHO_LIMIT = 0.999


def cl_scores(block, theta, zeta) -> np.ndarray:
    """Per-subject averaged pairwise score rows (n, p + 2).

    Columns are the gradient of the mean pairwise log-likelihood with
    respect to (theta, sigma^2, rho).
    """
    sigma2 = float(zeta[0])
    rho = float(zeta[1])
    if sigma2 <= 0:
        raise NumericDomainError(f"sigma^2 must be positive, got {sigma2}")
    if abs(rho) >= 1.0:
        raise NumericDomainError(f"|rho| >= 1 (rho={rho})")

    n, m, p = block.n, block.m, block.p
    X = block.design
    resid = block.y - X @ theta

    grad_theta = np.zeros((n, p))
    grad_v = np.zeros(n)
    grad_rho = np.zeros(n)
    npairs = m * (m - 1) // 2
    for r in range(m - 1):
        a = resid[:, r]
        xa = X[:, r, :]
        for t in range(r + 1, m):
            b = resid[:, t]
            xb = X[:, t, :]
            lag = t - r
            c = rho**lag
            omc = 1.0 - c * c
            q = a * a - 2.0 * c * a * b + b * b
            grad_theta += ((a - c * b)[:, None] * xa + (b - c * a)[:, None] * xb) / (
                sigma2 * omc
            )
            grad_v += -1.0 / sigma2 + q / (2.0 * sigma2 * sigma2 * omc)
            dc = c / omc + a * b / (sigma2 * omc) - q * c / (sigma2 * omc * omc)
            grad_rho += dc * lag * rho ** (lag - 1)
    out = np.empty((n, p + 2))
    out[:, :p] = grad_theta / npairs
    out[:, p] = grad_v / npairs
    out[:, p + 1] = grad_rho / npairs
    return out


def _mean_score_u(block, u):
    """Mean score in the unconstrained parameterization u = (theta, log sigma, atanh rho)."""
    p = block.p
    sigma = np.exp(u[p])
    rho = np.tanh(u[p + 1])
    zeta = np.array([sigma * sigma, rho])
    s = cl_scores(block, u[:p], zeta).mean(axis=0)
    # chain rule: d/d(log sigma) = 2 sigma^2 * d/d(sigma^2); d/d(atanh rho) = (1-rho^2) d/d(rho)
    s[p] *= 2.0 * sigma * sigma
    s[p + 1] *= 1.0 - rho * rho
    return s


def _jacobian_fd(block, u, h=1e-6):
    dim = u.size
    jac = np.empty((dim, dim))
    for a in range(dim):
        step = h * max(1.0, abs(u[a]))
        up, um = u.copy(), u.copy()
        up[a] += step
        um[a] -= step
        jac[:, a] = (_mean_score_u(block, up) - _mean_score_u(block, um)) / (2.0 * step)
    return jac


def fit_cl_block(block, tol: float = 1e-8, max_iter: int = 100):
    """Damped Newton root of the mean pairwise score.

    Returns (theta, zeta, converged, iterations, rho_clamped).
    """
    if block.n <= block.p + 2:
        raise SolverError(
            f"block ({block.j}, {block.k}): n={block.n} too small for "
            f"p+2={block.p + 2} parameters"
        )
    # start from OLS with moment estimates of (sigma^2, rho)
    X = block.design.reshape(-1, block.p)
    yv = block.y.reshape(-1)
    theta, *_ = np.linalg.lstsq(X, yv, rcond=None)
    resid = block.y - block.design @ theta
    sigma2 = float(np.mean(resid**2))
    if block.m > 1:
        rho = float(np.mean(resid[:, :-1] * resid[:, 1:]) / sigma2)
    else:
        rho = 0.0
    rho = min(max(rho, -RHO_LIMIT), RHO_LIMIT)

    u = np.concatenate([theta, [0.5 * np.log(sigma2), np.arctanh(rho)]])
    score = _mean_score_u(block, u)
    converged = float(np.linalg.norm(score)) <= tol
    iterations = 0
    while not converged and iterations < max_iter:
        iterations += 1
        jac = _jacobian_fd(block, u)
        try:
            step = np.linalg.solve(jac, -score)
        except np.linalg.LinAlgError as exc:
            raise SolverError(
                f"singular score Jacobian in block ({block.j}, {block.k})"
            ) from exc
        lam = 1.0
        norm = float(np.linalg.norm(score))
        while lam > 1e-8:
            u_new = u + lam * step
            try:
                score_new = _mean_score_u(block, u_new)
            except (NumericDomainError, FloatingPointError):
                lam *= 0.5
                continue
            if np.all(np.isfinite(score_new)) and np.linalg.norm(score_new) < norm:
                break
            lam *= 0.5
        else:
            raise SolverError(
                f"line search failed in block ({block.j}, {block.k})"
            )
        u, score = u_new, score_new
        converged = float(np.linalg.norm(score)) <= tol

    p = block.p
    sigma = float(np.exp(u[p]))
    rho = float(np.tanh(u[p + 1]))
    clamped = abs(rho) > RHO_LIMIT
    rho = min(max(rho, -RHO_LIMIT), RHO_LIMIT)
    zeta = np.array([sigma * sigma, rho])
    return u[:p].copy(), zeta, bool(converged), iterations, clamped
