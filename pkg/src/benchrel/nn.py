"""Two-hidden-layer MLP with a Gaussian (mean, log-variance) head.

All parameters live in one flat float64 vector; the per-layer arrays are
views into it.  Keeping the vector flat makes the Adam update and the
mean-field variational bookkeeping a handful of vectorised operations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

HIDDEN = 64
VAR_MIN = 1e-3
VAR_MAX = 1e3
LOG_VAR_MIN = float(np.log(VAR_MIN))
LOG_VAR_MAX = float(np.log(VAR_MAX))

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOSS_KINDS = ("nll", "beta_nll")


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN/Inf."""


def param_count(d: int) -> int:
    return HIDDEN * d + HIDDEN + HIDDEN * HIDDEN + HIDDEN + 2 * HIDDEN + 2


@lru_cache(maxsize=None)
def _layout(d: int):
    shapes = [
        ("W1", (HIDDEN, d)),
        ("b1", (HIDDEN,)),
        ("W2", (HIDDEN, HIDDEN)),
        ("b2", (HIDDEN,)),
        ("W3", (2, HIDDEN)),
        ("b3", (2,)),
    ]
    out = {}
    offset = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        out[name] = (offset, offset + size, shape)
        offset += size
    return out


@dataclass
class MLPParams:
    """Network weights stored as a flat vector.

    ``W1 (64, d)``, ``b1 (64,)``, ``W2 (64, 64)``, ``b2 (64,)``, ``W3 (2, 64)``,
    ``b3 (2,)``.  Row 0 of the output layer is the mean, row 1 the raw
    log-variance.  The same container is used for gradients.
    """

    theta: np.ndarray
    d: int

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (param_count(self.d),):
            raise ValueError(
                f"flat parameter vector has shape {self.theta.shape}, "
                f"expected ({param_count(self.d)},) for d={self.d}"
            )

    def _view(self, name):
        lo, hi, shape = _layout(self.d)[name]
        return self.theta[lo:hi].reshape(shape)

    W1 = property(lambda self: self._view("W1"))
    b1 = property(lambda self: self._view("b1"))
    W2 = property(lambda self: self._view("W2"))
    b2 = property(lambda self: self._view("b2"))
    W3 = property(lambda self: self._view("W3"))
    b3 = property(lambda self: self._view("b3"))

    @classmethod
    def zeros(cls, d: int) -> "MLPParams":
        return cls(np.zeros(param_count(d)), d)

    def copy(self) -> "MLPParams":
        return MLPParams(self.theta.copy(), self.d)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))


def init_params(d: int, rng: np.random.Generator) -> MLPParams:
    """He-uniform fan-in weights, zero biases (initial predicted variance 1)."""
    params = MLPParams.zeros(d)
    for name, fan_in in (("W1", d), ("W2", HIDDEN), ("W3", HIDDEN)):
        w = params._view(name)
        bound = np.sqrt(6.0 / fan_in)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


@dataclass(frozen=True)
class GaussianPrediction:
    mu: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class DropoutMask:
    """Keep masks for the two hidden layers, already scaled by 1/(1-rate).

    Each mask is either ``(64,)`` (shared by every input) or ``(batch, 64)``.
    """

    layer1: np.ndarray
    layer2: np.ndarray
    rate: float

    @classmethod
    def sample(cls, rng: np.random.Generator, rate: float, shape=(HIDDEN,)) -> "DropoutMask":
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        scale = 1.0 / (1.0 - rate)
        m1 = (rng.random(shape) >= rate) * scale
        m2 = (rng.random(shape) >= rate) * scale
        return cls(m1, m2, rate)


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {layer}")


def _forward_raw(params: MLPParams, X: np.ndarray, mask: DropoutMask | None):
    """Batch forward pass returning every intermediate needed by backward."""
    pre1 = X @ params.W1.T + params.b1
    h1 = np.maximum(pre1, 0.0)
    if mask is not None:
        h1 = h1 * mask.layer1
    pre2 = h1 @ params.W2.T + params.b2
    h2 = np.maximum(pre2, 0.0)
    if mask is not None:
        h2 = h2 * mask.layer2
    out = h2 @ params.W3.T + params.b3
    return pre1, h1, pre2, h2, out


def forward(params: MLPParams, x, mask: DropoutMask | None = None, check: bool = True) -> GaussianPrediction:
    """Predict mean and clamped variance for one input vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.d:
        raise ValueError(f"input has {X.shape[1]} features, network expects {params.d}")
    if check:
        _check_finite(X, "input")
    pre1, h1, pre2, h2, out = _forward_raw(params, X, mask)
    if check:
        _check_finite(pre1, "hidden layer 1")
        _check_finite(pre2, "hidden layer 2")
        _check_finite(out, "output layer")
    mu = out[:, 0]
    s = out[:, 1]
    # exact bounds when the clamp is active
    var = np.where(s >= LOG_VAR_MAX, VAR_MAX,
                   np.where(s <= LOG_VAR_MIN, VAR_MIN, np.exp(np.clip(s, LOG_VAR_MIN, LOG_VAR_MAX))))
    if single:
        return GaussianPrediction(mu[0], var[0])
    return GaussianPrediction(mu, var)


def nll_loss(pred: GaussianPrediction, y):
    """Heteroscedastic Gaussian NLL without the log(2*pi) constant."""
    r = np.asarray(y) - pred.mu
    return 0.5 * np.log(pred.var) + r * r / (2.0 * pred.var)


def beta_nll_loss(pred: GaussianPrediction, y, beta: float = 0.5):
    """NLL weighted by var**beta.

    The weight is treated as a constant when differentiating (see
    :func:`backward`), so only gradients differ from plain reweighting.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    return pred.var**beta * nll_loss(pred, y)


@njit(cache=True)
def _batch_loss_grad(theta, d, Xb, yb, loss_code, beta, m1, m2, use_mask, grad):
    """Mean loss of one batch; writes the flat gradient into ``grad``.

    loss_code 0 is the NLL, 1 the beta-NLL with a detached var**beta weight.
    """
    H = HIDDEN
    o1 = H * d
    o2 = o1 + H
    o3 = o2 + H * H
    o4 = o3 + H
    o5 = o4 + 2 * H
    W1 = theta[0:o1].reshape((H, d))
    b1 = theta[o1:o2]
    W2 = theta[o2:o3].reshape((H, H))
    b2 = theta[o3:o4]
    W3 = theta[o4:o5].reshape((2, H))
    b3 = theta[o5:o5 + 2]
    B = Xb.shape[0]

    pre1 = Xb @ W1.T + b1
    h1 = np.maximum(pre1, 0.0)
    if use_mask:
        h1 = h1 * m1
    pre2 = h1 @ W2.T + b2
    h2 = np.maximum(pre2, 0.0)
    if use_mask:
        h2 = h2 * m2
    out = h2 @ W3.T + b3

    d_out = np.empty((B, 2))
    total = 0.0
    for i in range(B):
        s = out[i, 1]
        if s < LOG_VAR_MIN:
            s_c = LOG_VAR_MIN
        elif s > LOG_VAR_MAX:
            s_c = LOG_VAR_MAX
        else:
            s_c = s
        var = np.exp(s_c)
        r = yb[i] - out[i, 0]
        r2v = r * r / var
        loss_i = 0.5 * s_c + 0.5 * r2v
        g_mu = -r / var
        g_s = 0.5 - 0.5 * r2v if (s > LOG_VAR_MIN and s < LOG_VAR_MAX) else 0.0
        if loss_code == 1 and beta != 0.0:
            w = var ** beta
            loss_i *= w
            g_mu *= w
            g_s *= w
        total += loss_i
        d_out[i, 0] = g_mu / B
        d_out[i, 1] = g_s / B

    gW3 = d_out.T @ h2
    dh2 = d_out @ W3
    if use_mask:
        dh2 = dh2 * m2
    dh2 = dh2 * (pre2 > 0)
    gW2 = dh2.T @ h1
    dh1 = dh2 @ W2
    if use_mask:
        dh1 = dh1 * m1
    dh1 = dh1 * (pre1 > 0)
    gW1 = dh1.T @ Xb

    grad[0:o1] = gW1.ravel()
    grad[o1:o2] = dh1.sum(axis=0)
    grad[o2:o3] = gW2.ravel()
    grad[o3:o4] = dh2.sum(axis=0)
    grad[o4:o5] = gW3.ravel()
    grad[o5:o5 + 2] = d_out.sum(axis=0)
    return total / B


@njit(cache=True)
def _adam_inplace(theta, grad, m, v, t, lr, weight_decay):
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    decay = 1.0 - lr * weight_decay
    for k in range(theta.shape[0]):
        g = grad[k]
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g
        theta[k] = theta[k] * decay - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + ADAM_EPS)


@njit(cache=True)
def _train_epoch(theta, m, v, t, d, X, y, perm, bs, loss_code, beta, masks1, masks2, use_mask,
                 lr, weight_decay, grad):
    """One shuffled pass of mini-batch Adam.  Returns the new step count, or
    -1 if a batch loss was non-finite."""
    n = perm.shape[0]
    for lo in range(0, n, bs):
        hi = min(lo + bs, n)
        idx = perm[lo:hi]
        Xb = X[idx]
        yb = y[idx]
        if use_mask:
            m1 = masks1[lo:hi]
            m2 = masks2[lo:hi]
        else:
            m1 = masks1
            m2 = masks2
        loss = _batch_loss_grad(theta, d, Xb, yb, loss_code, beta, m1, m2, use_mask, grad)
        if not np.isfinite(loss):
            return -1
        t += 1
        _adam_inplace(theta, grad, m, v, t, lr, weight_decay)
    return t


@njit(cache=True)
def _train_epoch_bbb(params, m, v, t, d, X, y, perm, bs, noise, kl_w, prior_var, lr, weight_decay,
                     grad, w, g_w, dummy):
    """One pass of Bayes-by-Backprop on the concatenated [mu, rho] vector.

    ``noise`` holds one standard-normal weight perturbation per batch.
    """
    P = w.shape[0]
    n = perm.shape[0]
    sigma = np.empty(P)
    dsig = np.empty(P)
    b = 0
    for lo in range(0, n, bs):
        hi = min(lo + bs, n)
        idx = perm[lo:hi]
        eps = noise[b]
        b += 1
        for k in range(P):
            rho = params[P + k]
            # softplus and its derivative (the logistic) from one exp
            e = np.exp(-abs(rho))
            if rho > 0:
                sigma[k] = rho + np.log1p(e)
                dsig[k] = 1.0 / (1.0 + e)
            else:
                sigma[k] = np.log1p(e)
                dsig[k] = e / (1.0 + e)
            w[k] = params[k] + sigma[k] * eps[k]
        loss = _batch_loss_grad(w, d, X[idx], y[idx], 0, 0.0, dummy, dummy, False, g_w)
        if not np.isfinite(loss):
            return -1
        for k in range(P):
            sk = sigma[k]
            grad[k] = g_w[k] + kl_w * params[k] / prior_var
            grad[P + k] = (g_w[k] * eps[k] + kl_w * (sk / prior_var - 1.0 / sk)) * dsig[k]
        t += 1
        _adam_inplace(params, grad, m, v, t, lr, weight_decay)
    return t


_NO_MASK = np.ones((1, HIDDEN))


def _loss_and_grad(theta, d, X, y, loss_kind="nll", beta=0.5, mask=None):
    """Mean loss over the batch and its gradient as a flat vector."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    grad = np.empty_like(theta)
    if mask is None:
        m1 = m2 = _NO_MASK
    else:
        B = X.shape[0]
        m1 = np.ascontiguousarray(np.broadcast_to(mask.layer1, (B, HIDDEN)), dtype=np.float64)
        m2 = np.ascontiguousarray(np.broadcast_to(mask.layer2, (B, HIDDEN)), dtype=np.float64)
    code = 1 if loss_kind == "beta_nll" else 0
    loss = _batch_loss_grad(theta, d, X, y, code, float(beta), m1, m2, mask is not None, grad)
    return loss, grad


def backward(params: MLPParams, batch, loss_kind: str = "nll", mask: DropoutMask | None = None,
             beta: float = 0.5) -> MLPParams:
    """Mean-over-batch gradient of the selected loss, in parameter layout.

    ``batch`` is ``(X, y)``.  Where the variance clamp is active the
    log-variance output receives zero gradient.
    """
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("backward needs a non-empty batch")
    _, grad = _loss_and_grad(params.theta, params.d, X, y, loss_kind, beta, mask)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    return MLPParams(grad, params.d)


def batch_loss(params: MLPParams, batch, loss_kind: str = "nll", mask: DropoutMask | None = None,
               beta: float = 0.5) -> float:
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    pred = forward(params, X, mask)
    if loss_kind == "nll":
        return float(np.mean(nll_loss(pred, y)))
    return float(np.mean(beta_nll_loss(pred, y, beta)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, theta: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


def adam_update(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-3,
                weight_decay: float = 0.0) -> None:
    """In-place Adam step with decoupled weight decay applied first."""
    state.t += 1
    _adam_inplace(theta, grad, state.m, state.v, state.t, lr, weight_decay)


def adam_step(params: MLPParams, grads: MLPParams, state: AdamState, lr: float = 1e-3,
              weight_decay: float = 1e-5) -> tuple[MLPParams, AdamState]:
    """Functional wrapper around :func:`adam_update`; inputs are not modified."""
    if state.m.shape != params.theta.shape:
        raise ValueError("Adam state does not match parameter shapes")
    new = params.copy()
    new_state = AdamState(state.m.copy(), state.v.copy(), state.t)
    adam_update(new.theta, grads.theta, new_state, lr, weight_decay)
    return new, new_state
