"""Sandwich standard errors, confidence intervals, the over-identifying
restrictions chi-square test, and a numeric GMM minimizer used as a
verification oracle for the closed-form combiner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.stats

from .combine import CombinedFit, SummaryBundle, WeightBlocks
from .engines import eval_scores
from .errors import CombineError


@dataclass(frozen=True)
class InferenceReport:
    names: tuple  # parameter labels, theta first then zeta (j-fast, k-slow)
    estimates: np.ndarray
    ase: np.ndarray
    z: np.ndarray
    p_values: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    overid_stat: float | None = None
    overid_df: int | None = None
    overid_p: float | None = None

    def rows(self):
        for idx, name in enumerate(self.names):
            yield (
                name,
                self.estimates[idx],
                self.ase[idx],
                self.z[idx],
                self.p_values[idx],
                self.ci_lower[idx],
                self.ci_upper[idx],
            )


def parameter_names(bundle: SummaryBundle) -> tuple:
    names = [f"theta_{a + 1}" for a in range(bundle.p)]
    for k in range(bundle.K):
        for j in range(bundle.J):
            fit = bundle.fits[(j, k)]
            labels = ("sigma2", "rho")[: fit.d]
            names.extend(f"{lbl}_b{j + 1}g{k + 1}" for lbl in labels)
    return tuple(names)


def godambe_cov(fit: CombinedFit, names: tuple, alpha: float = 0.05) -> InferenceReport:
    """Per-parameter sandwich standard errors, Wald z, and normal CIs."""
    variances = np.diag(fit.cov)
    if np.any(variances <= 0):
        raise CombineError("non-positive variance on the covariance diagonal")
    est = np.concatenate([fit.theta, fit.zeta])
    ase = np.sqrt(variances)
    z = est / ase
    p_values = 2.0 * scipy.stats.norm.sf(np.abs(z))
    q = scipy.stats.norm.ppf(1.0 - alpha / 2.0)
    return InferenceReport(
        names=tuple(names),
        estimates=est,
        ase=ase,
        z=z,
        p_values=p_values,
        ci_lower=est - q * ase,
        ci_upper=est + q * ase,
        alpha=alpha,
    )


def _stacked_estfun(blocks: dict, bundle: SummaryBundle, theta, zeta_list):
    """T_N at arbitrary parameters: per-group (n_k/N)-weighted stacked means."""
    N = bundle.plan.N
    parts = []
    for k in range(bundle.K):
        wk = bundle.plan.group_sizes[k] / N
        psi_means, g_means = [], []
        for j in range(bundle.J):
            fit = bundle.fits[(j, k)]
            off = bundle.zeta_offset(j, k)
            zeta = zeta_list[off : off + fit.d]
            scores = eval_scores(blocks[(j, k)], theta, zeta, fit.kind)
            mean = scores.mean(axis=0)
            psi_means.append(mean[: bundle.p])
            g_means.append(mean[bundle.p :])
        parts.append(wk * np.concatenate(psi_means + g_means))
    return parts


def overid_test(
    blocks: dict, bundle: SummaryBundle, fit: CombinedFit, W: WeightBlocks
):
    """Over-identifying restrictions test N * T_N' W T_N at the combined
    estimates, with W frozen at the block-estimate inverse covariance.

    Returns (statistic, df, p_value); p_value is None when df = 0.
    """
    parts = _stacked_estfun(blocks, bundle, fit.theta, fit.zeta)
    stat = 0.0
    for k in range(bundle.K):
        tk = parts[k]
        stat += float(tk @ W.w[k] @ tk)
    stat *= fit.N
    df = (bundle.J * bundle.K - 1) * bundle.p
    p_value = float(scipy.stats.chi2.sf(stat, df)) if df > 0 else None
    return stat, df, p_value


def _objective(blocks, bundle, W, theta, zeta_list):
    parts = _stacked_estfun(blocks, bundle, theta, zeta_list)
    return sum(float(tk @ W.w[k] @ tk) for k, tk in enumerate(parts))


def gmm_oracle(
    blocks: dict,
    bundle: SummaryBundle,
    W: WeightBlocks,
    init_theta,
    init_zeta,
    gtol: float = 1e-7,
):
    """Numeric minimizer of Q_N = T_N' W T_N over all parameters.

    Optimizes on the unconstrained scale (theta, log sigma, atanh rho per
    block) starting from the supplied point.  Returns
    (theta_opt, zeta_opt, success_flag).
    """
    p = bundle.p
    order = [(j, k) for k in range(bundle.K) for j in range(bundle.J)]

    def pack(theta, zeta_list):
        u = [np.asarray(theta, dtype=float)]
        for j, k in order:
            fit = bundle.fits[(j, k)]
            off = bundle.zeta_offset(j, k)
            zeta = zeta_list[off : off + fit.d]
            chunk = [0.5 * np.log(zeta[0])]
            if fit.d > 1:
                chunk.append(np.arctanh(np.clip(zeta[1], -0.999, 0.999)))
            u.append(np.asarray(chunk))
        return np.concatenate(u)

    def unpack(u):
        theta = u[:p]
        zeta_parts = []
        pos = p
        for j, k in order:
            fit = bundle.fits[(j, k)]
            sigma2 = np.exp(2.0 * u[pos])
            pos += 1
            if fit.d > 1:
                zeta_parts.extend([sigma2, np.tanh(u[pos])])
                pos += 1
            else:
                zeta_parts.append(sigma2)
        return theta, np.array(zeta_parts)

    def fun(u):
        theta, zeta_list = unpack(u)
        return _objective(blocks, bundle, W, theta, zeta_list)

    u0 = pack(init_theta, np.asarray(init_zeta, dtype=float))
    res = scipy.optimize.minimize(
        fun, u0, method="BFGS", options={"gtol": gtol, "maxiter": 500}
    )
    best = res.x if res.fun <= fun(u0) else u0
    theta_opt, zeta_opt = unpack(best)
    return theta_opt, zeta_opt, bool(res.success)
