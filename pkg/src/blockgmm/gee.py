"""Gaussian identity-link GEE block solver with moment equations for the
variance/correlation nuisance parameters.

The mean parameter solves the weighted least-squares equations
(1/n) sum_i X_i' R(rho)^-1 r_i = 0 and the nuisance parameters solve
unbiased moment equations on residual products, alternated to joint
convergence.  Working-correlation inverses use closed forms: tridiagonal
for AR(1), Sherman-Morrison for exchangeable.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericDomainError, SolverError

RHO_LIMIT = 0.999


def corr_inverse(kind: str, rho: float, m: int) -> np.ndarray:
    """Inverse of the m x m working correlation matrix R(rho)."""
    if kind == "independence":
        return np.eye(m)
    if abs(rho) >= 1.0:
        raise NumericDomainError(f"|rho| >= 1 (rho={rho})")
    if kind == "ar1":
        if m == 1:
            return np.eye(m)
        inv = np.zeros((m, m))
        c = 1.0 / (1.0 - rho * rho)
        idx = np.arange(m)
        inv[idx, idx] = (1.0 + rho * rho) * c
        inv[0, 0] = inv[m - 1, m - 1] = c
        inv[idx[:-1], idx[1:]] = -rho * c
        inv[idx[1:], idx[:-1]] = -rho * c
        return inv
    if kind == "exchangeable":
        denom = 1.0 + (m - 1) * rho
        if denom <= 0 or rho >= 1.0:
            raise NumericDomainError(f"exchangeable rho={rho} not PD for m={m}")
        a = 1.0 / (1.0 - rho)
        b = -rho / ((1.0 - rho) * denom)
        return a * np.eye(m) + b * np.ones((m, m))
    raise SolverError(f"unknown working structure {kind!r}")


def nuisance_dim(kind: str) -> int:
    return 1 if kind == "independence" else 2


def _residuals(block, theta):
    return block.y - block.design @ theta


def _wls_theta(block, rho, structure):
    """Solve the weighted normal equations for theta given rho."""
    X = block.design  # (n, m, p)
    rinv = corr_inverse(structure, rho, block.m)
    # sigma^2 cancels from the normal equations
    XtR = np.einsum("nmp,mt->ntp", X, rinv)
    A = np.einsum("ntp,ntq->pq", XtR, X)
    b = np.einsum("ntp,nt->p", XtR, block.y)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            f"singular weighted normal equations in block ({block.j}, {block.k})"
        ) from exc


def _moment_zeta(resid, structure, m):
    """Closed-form roots of the residual-product moment equations."""
    sigma2 = float(np.mean(resid**2))
    if structure == "independence":
        return np.array([sigma2]), False
    if structure == "ar1":
        lag1 = np.mean(np.mean(resid[:, :-1] * resid[:, 1:], axis=1))
        rho = float(lag1 / sigma2)
    else:  # exchangeable
        total = resid.sum(axis=1)
        cross = (total**2 - np.sum(resid**2, axis=1)) / 2.0
        npairs = m * (m - 1) / 2.0
        rho = float(np.mean(cross / npairs) / sigma2)
    lo = -RHO_LIMIT
    if structure == "exchangeable":
        lo = max(lo, -1.0 / (m - 1) + 1e-6)
    clamped = rho < lo or rho > RHO_LIMIT
    rho = min(max(rho, lo), RHO_LIMIT)
    return np.array([sigma2, rho]), clamped


def gee_scores(block, theta, zeta, structure) -> np.ndarray:
    """Per-subject score rows (psi_i, g_i) at (theta, zeta)."""
    sigma2 = float(zeta[0])
    if sigma2 <= 0:
        raise NumericDomainError(f"sigma^2 must be positive, got {sigma2}")
    rho = float(zeta[1]) if structure != "independence" else 0.0
    resid = _residuals(block, theta)
    rinv = corr_inverse(structure, rho, block.m)
    psi = np.einsum("nmp,nm->np", block.design, resid @ rinv) / sigma2

    g1 = np.mean(resid**2, axis=1) - sigma2
    if structure == "independence":
        return np.hstack([psi, g1[:, None]])
    if structure == "ar1":
        g2 = np.mean(resid[:, :-1] * resid[:, 1:], axis=1) - rho * sigma2
    else:
        total = resid.sum(axis=1)
        cross = (total**2 - np.sum(resid**2, axis=1)) / 2.0
        npairs = block.m * (block.m - 1) / 2.0
        g2 = cross / npairs - rho * sigma2
    return np.hstack([psi, g1[:, None], g2[:, None]])


def gee_theta_sensitivity(block, zeta, structure) -> np.ndarray:
    """Analytic theta-theta sensitivity (1/n) sum_i D_i' Sigma_i^-1 D_i."""
    sigma2 = float(zeta[0])
    rho = float(zeta[1]) if structure != "independence" else 0.0
    rinv = corr_inverse(structure, rho, block.m)
    X = block.design
    xtr = np.einsum("nmp,mt->ntp", X, rinv)
    return np.einsum("ntp,ntq->pq", xtr, X) / (block.n * sigma2)


def fit_gee_block(block, structure: str, tol: float = 1e-8, max_iter: int = 100):
    """Alternate theta / zeta updates to joint convergence.

    Returns (theta, zeta, converged, iterations, rho_clamped).
    """
    d = nuisance_dim(structure)
    if block.n <= block.p + d:
        raise SolverError(
            f"block ({block.j}, {block.k}): n={block.n} too small for "
            f"p+d={block.p + d} parameters"
        )
    theta = _wls_theta(block, 0.0, "independence")
    zeta, clamped = _moment_zeta(_residuals(block, theta), structure, block.m)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        rho = float(zeta[1]) if structure != "independence" else 0.0
        theta_new = _wls_theta(block, rho, structure)
        zeta_new, clamped = _moment_zeta(
            _residuals(block, theta_new), structure, block.m
        )
        delta = max(
            np.max(np.abs(theta_new - theta)), np.max(np.abs(zeta_new - zeta))
        )
        theta, zeta = theta_new, zeta_new
        if delta < tol:
            converged = True
            break
    return theta, zeta, converged, iterations, clamped
