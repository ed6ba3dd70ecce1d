"""Shared fixtures: small simulated datasets and fitted bundles."""

import numpy as np
import pytest

from blockgmm import simstudy
from blockgmm.dataio import Dataset


def make_ar1_design(**overrides):
    """Small AR(1)-error design used across the suite."""
    base = dict(
        family="global-ar1",
        N=200,
        M=12,
        J=2,
        K=2,
        theta0=(0.3, 0.6, 0.8),
        sigma=2.0,
        rho=0.5,
        reps=1,
        seed=12345,
    )
    base.update(overrides)
    return simstudy.SimDesign(**base)


def random_dataset(N, M, p=3, seed=0, sigma=1.0):
    """Independent-error dataset with known coefficients (no correlation)."""
    rng = np.random.default_rng(seed)
    theta0 = np.linspace(0.5, 1.5, p)
    covariates = np.empty((N, M, p))
    covariates[:, :, 0] = 1.0
    if p > 1:
        covariates[:, :, 1:] = rng.standard_normal((N, M, p - 1))
    responses = covariates @ theta0 + sigma * rng.standard_normal((N, M))
    return (
        Dataset(
            responses=responses,
            covariates=covariates,
            subject_ids=tuple(range(1, N + 1)),
        ),
        theta0,
    )


@pytest.fixture(scope="session")
def ar1_dataset():
    return simstudy.generate(make_ar1_design(), rep=0)


@pytest.fixture(scope="session")
def fitted_bundle(ar1_dataset):
    """2x2 GEE-AR(1) bundle plus its blocks, fitted once per session."""
    return simstudy.fit_dataset(ar1_dataset, 2, 2, "gee-ar1")
