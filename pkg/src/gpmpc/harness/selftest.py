"""Kalman-filter GP inference checked against the dense covariance formulation."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, toeplitz

from ..ssgp import Hyperparams, build_lti, filter_batch


def dense_posterior(y, model, dt: float):
    """Latent posterior at the last sample and log-likelihood from the full Gram matrix.

    The covariance is the realized kernel ``H expm(F |tau|) Pinf H^T``, so the
    comparison isolates the inference, not the spectral approximation.
    """
    y = np.asarray(y, dtype=float)
    k = toeplitz(model.kernel(np.arange(len(y)) * dt))
    K = k + model.noise_var * np.eye(len(y))
    cf = cho_factor(K, lower=True)
    alpha = cho_solve(cf, y)
    k_last = k[-1]
    mean = k_last @ alpha
    var = k[-1, -1] - k_last @ cho_solve(cf, k_last)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    loglik = -0.5 * (y @ alpha + logdet + len(y) * np.log(2 * np.pi))
    return mean, var, loglik


def gp_selftest(n_batches: int = 20, seed: int = 0, dt: float = 0.1, rtol: float = 1e-6):
    """Compare filter and dense inference on random batches; returns ``(ok, rows)``."""
    rng = np.random.default_rng(seed)
    rows, ok = [], True
    for _ in range(n_batches):
        n = int(rng.integers(2, 33))
        hyper = Hyperparams(float(np.exp(rng.uniform(-1, 1))), float(np.exp(rng.uniform(-1, 1))),
                            float(np.exp(rng.uniform(-4, -1))))
        y = rng.uniform(-1.0, 1.0, n)
        model = build_lti(hyper, 6, dt)
        belief, ll = filter_batch(y, model)
        mean, var = belief.mean[0], belief.cov[0, 0]
        d_mean, d_var, d_ll = dense_posterior(y, model, dt)
        errs = [abs(mean - d_mean) / max(abs(d_mean), 1e-12),
                abs(var - d_var) / max(abs(d_var), 1e-12),
                abs(ll - d_ll) / max(abs(d_ll), 1e-12)]
        passed = max(errs) <= rtol
        ok &= passed
        rows.append((n, hyper, errs, passed))
    return ok, rows
