"""Uncertainty methods: MAP (with beta-NLL / restart variants), deep
ensembles, MC dropout and Bayes by Backprop.

Every trainer is a pure function of (data, config, seed).  Each returns a
model object whose ``predict`` produces a :class:`PredictiveDistribution`
over a batch of test inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import RegressionDataset
from .nn import (
    _NO_MASK,
    HIDDEN,
    DropoutMask,
    MLPParams,
    _train_epoch,
    _train_epoch_bbb,
    forward,
    init_params,
)
from .scoring import PredictiveDistribution, crps_gaussian
from .seeds import child_seed

KINDS = ("MAP", "MAP_BETA_NLL", "MAP_RESTARTS", "ENSEMBLE", "MC_DROPOUT", "BBB")
KL_WEIGHT_MODES = ("inverse_n", "fixed")


class InvalidRun(Exception):
    """Training produced a non-finite loss; the run is recorded as invalid."""

    def __init__(self, reason: str, epoch: int | None = None):
        super().__init__(f"{reason} (epoch {epoch})" if epoch is not None else reason)
        self.reason = reason
        self.epoch = epoch


@dataclass(frozen=True)
class MethodConfig:
    kind: str = "MAP"
    name: str | None = None
    epochs: int | None = None
    lr: float = 1e-3
    weight_decay: float | None = None
    batch_size: int = 32
    M: int = 5
    T: int = 50
    dropout_rate: float = 0.1
    beta: float = 0.5
    restarts: int = 5
    val_frac: float = 0.2
    prior_std: float = 1.0
    init_posterior_std: float = 0.05
    kl_weight_mode: str = "inverse_n"
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; choose from {KINDS}")
        if self.kl_weight_mode not in KL_WEIGHT_MODES:
            raise ValueError(f"unknown kl_weight_mode {self.kl_weight_mode!r}")
        bbb = self.kind == "BBB"
        if self.epochs is None:
            object.__setattr__(self, "epochs", 1000 if bbb else 500)
        if self.weight_decay is None:
            object.__setattr__(self, "weight_decay", 0.0 if bbb else 1e-5)
        if self.name is None:
            name = f"MAP{self.restarts}" if self.kind == "MAP_RESTARTS" else self.kind
            object.__setattr__(self, "name", name)
        if self.M < 1 or self.T < 1 or self.restarts < 1:
            raise ValueError("M, T and restarts must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------- training

def _fit_network(X, y, config: MethodConfig, seed: int, loss_kind: str, dropout_rate: float = 0.0) -> MLPParams:
    rng = np.random.default_rng(seed)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, d = X.shape
    params = init_params(d, rng)
    theta = params.theta
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    grad = np.empty_like(theta)
    code = 1 if loss_kind == "beta_nll" else 0
    use_mask = dropout_rate > 0
    keep_scale = 1.0 / (1.0 - dropout_rate) if use_mask else 1.0
    masks1 = masks2 = _NO_MASK
    t = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        if use_mask:
            masks1 = (rng.random((n, HIDDEN)) >= dropout_rate) * keep_scale
            masks2 = (rng.random((n, HIDDEN)) >= dropout_rate) * keep_scale
        t = _train_epoch(theta, m, v, t, d, X, y, perm, config.batch_size, code, float(config.beta),
                         masks1, masks2, use_mask, float(config.lr), float(config.weight_decay), grad)
        if t < 0:
            raise InvalidRun("non-finite training loss", epoch)
    if not np.all(np.isfinite(theta)):
        raise InvalidRun("non-finite parameters after training", config.epochs - 1)
    return params


def _loss_kind(config: MethodConfig) -> str:
    return "beta_nll" if config.kind == "MAP_BETA_NLL" else "nll"


@dataclass(frozen=True)
class NetworkModel:
    """One or more deterministic heteroscedastic networks (MAP / ensemble)."""

    members: tuple

    def predict(self, X, eval_seed: int = 0) -> PredictiveDistribution:
        preds = [forward(p, X) for p in self.members]
        return PredictiveDistribution(
            np.stack([p.mu for p in preds], axis=-1),
            np.stack([p.var for p in preds], axis=-1),
        )


def train_map(data: RegressionDataset, config: MethodConfig, seed: int) -> MLPParams:
    if len(data) < 2:
        raise ValueError("MAP training needs at least two rows")
    return _fit_network(data.features, data.targets, config, seed, _loss_kind(config))


def restart_seeds(seed: int, restarts: int) -> list[int]:
    return [seed] + [child_seed(seed, f"restart-{k}") for k in range(1, restarts)]


def validation_split(n: int, seed: int, frac: float = 0.2):
    n_val = max(1, int(round(frac * n)))
    if n - n_val < 2:
        raise ValueError(f"training draw of {n} rows is too small for a validation split")
    perm = np.random.default_rng(child_seed(seed, "validation")).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_map_restarts(data: RegressionDataset, config: MethodConfig, seed: int,
                       restarts: int | None = None, return_scores: bool = False):
    """Best of ``restarts`` MAP runs by validation CRPS.

    With ``restarts == 1`` no selection is needed and the result is plain
    :func:`train_map` on the full draw.  Otherwise every restart trains on
    the same 80% of the draw and is scored on the held-back 20%.
    """
    restarts = config.restarts if restarts is None else restarts
    base = replace(config, kind="MAP" if config.kind == "MAP_RESTARTS" else config.kind)
    if restarts == 1:
        params = train_map(data, base, seed)
        return (params, []) if return_scores else params
    fit_idx, val_idx = validation_split(len(data), seed, config.val_frac)
    fit, val = data.subset(fit_idx), data.subset(val_idx)
    best, best_score, scores = None, np.inf, []
    for s in restart_seeds(seed, restarts):
        try:
            params = train_map(fit, base, s)
        except InvalidRun:
            scores.append(np.nan)
            continue
        pred = forward(params, val.features)
        score = float(np.mean(crps_gaussian(pred.mu, np.sqrt(pred.var), val.targets)))
        scores.append(score)
        if score < best_score:
            best, best_score = params, score
    if best is None:
        raise InvalidRun("all restarts invalid")
    return (best, scores) if return_scores else best


def ensemble_seeds(seed: int, M: int) -> list[int]:
    return [seed] + [child_seed(seed, f"member-{m}") for m in range(1, M)]


def train_ensemble(data: RegressionDataset, config: MethodConfig, seed: int) -> list[MLPParams]:
    base = replace(config, kind="MAP")
    return [train_map(data, base, s) for s in ensemble_seeds(seed, config.M)]


# ---------------------------------------------------------------- MC dropout

def train_mc_dropout(data: RegressionDataset, config: MethodConfig, seed: int) -> MLPParams:
    if len(data) < 2:
        raise ValueError("training needs at least two rows")
    return _fit_network(data.features, data.targets, config, seed, "nll", config.dropout_rate)


def _sample_rng(eval_seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(eval_seed), int(t)]))


def predict_mc_dropout(params: MLPParams, X, T: int = 50, rate: float = 0.1, eval_seed: int = 0) -> PredictiveDistribution:
    """T-component mixture; component t shares one dropout mask across inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mus, vars_ = [], []
    for t in range(T):
        mask = DropoutMask.sample(_sample_rng(eval_seed, t), rate) if rate > 0 else None
        pred = forward(params, X, mask)
        mus.append(pred.mu)
        vars_.append(pred.var)
    return PredictiveDistribution(np.stack(mus, axis=-1), np.stack(vars_, axis=-1))


@dataclass(frozen=True)
class DropoutModel:
    params: MLPParams
    T: int
    rate: float

    def predict(self, X, eval_seed: int = 0) -> PredictiveDistribution:
        return predict_mc_dropout(self.params, X, self.T, self.rate, eval_seed)


# ---------------------------------------------------------------- Bayes by Backprop

def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    return np.log(np.expm1(y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class VariationalParams:
    """Mean-field Gaussian posterior; std = softplus(rho)."""

    mu: np.ndarray
    rho: np.ndarray
    d: int

    @property
    def std(self) -> np.ndarray:
        return softplus(self.rho)

    def mean_params(self) -> MLPParams:
        return MLPParams(self.mu.copy(), self.d)

    def sample(self, rng: np.random.Generator) -> MLPParams:
        return MLPParams(self.mu + self.std * rng.standard_normal(self.mu.shape), self.d)


def kl_mean_field_gaussian(post_mu, post_std, prior_std: float = 1.0) -> float:
    """KL(q || p) for factorised q = N(post_mu, post_std^2), p = N(0, prior_std^2)."""
    post_mu = np.asarray(post_mu, dtype=np.float64)
    post_std = np.asarray(post_std, dtype=np.float64)
    if np.any(post_std <= 0) or prior_std <= 0:
        raise ValueError("standard deviations must be positive")
    terms = (np.log(prior_std / post_std)
             + (post_std**2 + post_mu**2) / (2.0 * prior_std**2) - 0.5)
    return float(np.sum(terms))


def _kl_weight(config: MethodConfig, n: int) -> float:
    return 1.0 / n if config.kl_weight_mode == "inverse_n" else config.kl_weight


def train_bbb(data: RegressionDataset, config: MethodConfig, seed: int) -> VariationalParams:
    """Mean NLL plus weighted KL, one weight sample per gradient step."""
    X = np.ascontiguousarray(data.features)
    y = np.ascontiguousarray(data.targets)
    n, d = X.shape
    if n < 2:
        raise ValueError("BBB training needs at least two rows")
    rng = np.random.default_rng(seed)
    mu0 = init_params(d, rng).theta
    P = mu0.size
    theta = np.concatenate([mu0, np.full(P, inverse_softplus(config.init_posterior_std))])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    grad = np.empty_like(theta)
    w = np.empty(P)
    g_w = np.empty(P)
    kl_w = float(_kl_weight(config, n))
    bs = config.batch_size
    n_batches = -(-n // bs)
    t = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        noise = rng.standard_normal((n_batches, P))
        t = _train_epoch_bbb(theta, m, v, t, d, X, y, perm, bs, noise, kl_w, float(config.prior_std) ** 2,
                             float(config.lr), float(config.weight_decay), grad, w, g_w, _NO_MASK)
        if t < 0:
            raise InvalidRun("non-finite ELBO", epoch)
    if not np.all(np.isfinite(theta)):
        raise InvalidRun("non-finite variational parameters", config.epochs - 1)
    mu, rho = theta[:P], theta[P:]
    return VariationalParams(mu.copy(), rho.copy(), d)


def predict_bbb(vparams: VariationalParams, X, T: int = 50, eval_seed: int = 0) -> PredictiveDistribution:
    """T-component mixture; sample t draws one weight vector shared across inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mus, vars_ = [], []
    for t in range(T):
        pred = forward(vparams.sample(_sample_rng(eval_seed, t)), X)
        mus.append(pred.mu)
        vars_.append(pred.var)
    return PredictiveDistribution(np.stack(mus, axis=-1), np.stack(vars_, axis=-1))


@dataclass(frozen=True)
class BBBModel:
    vparams: VariationalParams
    T: int

    def predict(self, X, eval_seed: int = 0) -> PredictiveDistribution:
        return predict_bbb(self.vparams, X, self.T, eval_seed)


# ---------------------------------------------------------------- dispatch

def train_method(data: RegressionDataset, config: MethodConfig, seed: int):
    """Train the configured method and return an object with ``predict``."""
    kind = config.kind
    if kind in ("MAP", "MAP_BETA_NLL"):
        return NetworkModel((train_map(data, config, seed),))
    if kind == "MAP_RESTARTS":
        return NetworkModel((train_map_restarts(data, config, seed),))
    if kind == "ENSEMBLE":
        return NetworkModel(tuple(train_ensemble(data, config, seed)))
    if kind == "MC_DROPOUT":
        return DropoutModel(train_mc_dropout(data, config, seed), config.T, config.dropout_rate)
    return BBBModel(train_bbb(data, config, seed), config.T)
