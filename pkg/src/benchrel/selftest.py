"""Fast oracle checks runnable from the command line.

These are small versions of the test-suite oracles, meant as a sanity check
on a fresh install (compiled kernels, BLAS, scipy) rather than a proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import MLPParams, _loss_and_grad, forward, init_params, nll_loss
from .reliability import single_seed_summary
from .scoring import PredictiveDistribution, crps_gaussian, crps_mixture
from .trajectory import fit_power_law


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _frozen_weight_loss(theta, d, X, y, beta, weights):
    pred = forward(MLPParams(theta, d), X)
    return float(np.mean(weights * nll_loss(pred, y)))


def check_gradients(draws: int = 3, seed: int = 0) -> Check:
    """Central differences; the beta-NLL weight var**beta is held fixed."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for loss_kind, beta in (("nll", 0.0), ("beta_nll", 0.0), ("beta_nll", 0.5)):
        for _ in range(draws):
            d = 3
            theta = init_params(d, rng).theta.copy()
            X, y = rng.normal(size=(5, d)), rng.normal(size=5)
            _, g = _loss_and_grad(theta, d, X, y, loss_kind, beta)
            w = forward(MLPParams(theta, d), X).var ** beta
            fd = np.empty_like(g)
            for i in range(theta.size):
                tp, tm = theta.copy(), theta.copy()
                tp[i] += h
                tm[i] -= h
                fd[i] = (_frozen_weight_loss(tp, d, X, y, beta, w)
                         - _frozen_weight_loss(tm, d, X, y, beta, w)) / (2 * h)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    return Check("gradient vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}")


def check_crps(samples: int = 200_000, seed: int = 1) -> Check:
    rng = np.random.default_rng(seed)
    ref = float(crps_gaussian(0.0, 1.0, 0.0))
    ok = abs(ref - (math.sqrt(2 / math.pi) - 1 / math.sqrt(math.pi))) < 1e-12
    mu, var, y = rng.normal(size=3), rng.uniform(0.2, 2.0, size=3), 0.3
    exact = float(np.mean(crps_mixture(PredictiveDistribution(mu[None], var[None]), np.array([y]))))
    comp = rng.integers(0, 3, size=(2, samples))
    a = rng.normal(mu[comp[0]], np.sqrt(var[comp[0]]))
    b = rng.normal(mu[comp[1]], np.sqrt(var[comp[1]]))
    est = np.abs(a - y) - 0.5 * np.abs(a - b)
    se = est.std() / math.sqrt(samples)
    ok = ok and abs(est.mean() - exact) < 4 * se
    return Check("CRPS closed form vs Monte Carlo", bool(ok),
                 f"N(0,1) at 0: {ref:.4f}; mixture {exact:.4f} vs MC {est.mean():.4f} +- {se:.1e}")


def check_power_law(seed: int = 2) -> Check:
    rng = np.random.default_rng(seed)
    alpha, C = rng.uniform(0.2, 2.0), rng.uniform(1e-3, 10)
    ns = np.array([10, 20, 30, 50, 100, 200, 500])
    fit = fit_power_law(ns, C * ns ** -alpha)
    err = max(abs(fit.alpha / alpha - 1), abs(fit.C / C - 1), abs(fit.r2 - 1))
    return Check("power-law recovery on exact data", err < 1e-10, f"max rel err {err:.1e}")


def check_single_seed(draws: int = 50_000, seed: int = 3) -> Check:
    rng = np.random.default_rng(seed)
    values = rng.gamma(20.0, 0.05, size=20)
    rel, p10 = single_seed_summary(values)
    picks = values[rng.integers(0, values.size, draws)]
    m = values.mean()
    sim_rel = math.sqrt(np.mean(((picks - m) / m) ** 2))
    sim_p = np.mean(np.abs(picks - m) <= 0.1 * m)
    ok = abs(sim_rel / rel - 1) < 0.02 and abs(sim_p - p10) < 0.02
    return Check("single-seed summary vs resampling", bool(ok),
                 f"rel-RMSE {rel:.4f} vs {sim_rel:.4f}; P(10%) {p10:.3f} vs {sim_p:.3f}")


CHECKS = (check_gradients, check_crps, check_power_law, check_single_seed)


def run_selftest() -> list[Check]:
    return [c() for c in CHECKS]
