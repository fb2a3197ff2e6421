"""Softmax and sigmoid losses with logit-adjustment biases, value and gradient.

Every loss returns the batch-mean value and its exact gradient with respect
to the logits, so callers can push ``grad`` straight into a backward pass.

The biases are built from integer count ratios rather than from float
frequencies. That makes the cancellations exact: a uniform prior gives a
BCE bias of exactly 0.0, not 1e-16, and training with it is bit-identical
to training without it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ConfigError, PriorError, ShapeError, TargetError
from .priors import ClassPrior

BIAS_KINDS = ("ce", "bce", "bce_test_prior")


@dataclass(frozen=True)
class LogitBias:
    """Per-class additive logit correction, applied as ``z + tau * values``."""

    values: np.ndarray
    kind: str
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in BIAS_KINDS:
            raise ConfigError(f"unknown bias kind {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError("bias values must be a vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def C(self) -> int:
        return int(self.values.size)

    def with_tau(self, tau: float) -> "LogitBias":
        return LogitBias(self.values, self.kind, float(tau))

    def scaled(self) -> np.ndarray:
        return self.tau * self.values


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray


@dataclass
class LossConfig:
    """Options for :func:`bce_loss_and_grad`: class weights, NT-BCE lambda, bias."""

    weights: Optional[np.ndarray] = None
    lam: float = 1.0
    bias: Optional[LogitBias] = None

    def __post_init__(self):
        if self.lam < 1:
            raise ConfigError(f"lambda must be >= 1, got {self.lam}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0):
                raise ConfigError("class weights must be nonnegative")
            self.weights = w


def _log_ratio(num: int, den: int) -> float:
    # reduce first so equal ratios give bit-identical logs
    g = math.gcd(num, den)
    return math.log(num // g) - math.log(den // g)


def bias_ce(prior: ClassPrior) -> LogitBias:
    """``log pi_y``: the balanced-softmax bias."""
    return LogitBias(np.log(prior.freqs), "ce")


def bias_bce(prior: ClassPrior) -> LogitBias:
    """``log pi_y - log(1 - pi_y) + log(C - 1)``: the balanced-sigmoid bias against a uniform test prior."""
    C = prior.C
    if C < 2:
        raise PriorError("the BCE bias needs at least two classes")
    N = prior.N
    vals = []
    for n in prior.counts.tolist():
        if n == N:
            raise PriorError("pi_y = 1 gives an infinite BCE bias")
        # pi/(1-pi) * (C-1) = n*(C-1) / (N-n)
        vals.append(_log_ratio(n * (C - 1), N - n))
    return LogitBias(np.array(vals), "bce")


def bias_bce_with_test_prior(prior_s: ClassPrior, prior_t: ClassPrior) -> LogitBias:
    """Balanced-sigmoid bias when the test label distribution ``prior_t`` is known.

    ``(log pi_s - log pi_t) - (log(1 - pi_s) - log(1 - pi_t))``. With a
    uniform ``prior_t`` this is exactly :func:`bias_bce`.
    """
    if prior_s.C != prior_t.C:
        raise ShapeError(f"train prior has C={prior_s.C}, test prior has C={prior_t.C}")
    Ns, Nt = prior_s.N, prior_t.N
    vals = []
    for ns, nt in zip(prior_s.counts.tolist(), prior_t.counts.tolist()):
        if ns == Ns or nt == Nt:
            raise PriorError("pi_y = 1 gives an infinite BCE bias")
        # pi_s (1-pi_t) / (pi_t (1-pi_s)) = ns (Nt-nt) / (nt (Ns-ns))
        vals.append(_log_ratio(ns * (Nt - nt), nt * (Ns - ns)))
    return LogitBias(np.array(vals), "bce_test_prior")


def _as_targets(logits: np.ndarray, targets) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
            raise TargetError("label id outside [0, C)")
        onehot = np.zeros(logits.shape, dtype=np.float64)
        onehot[np.arange(t.size), t] = 1.0
        return onehot
    t = t.astype(np.float64, copy=False)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    return t


def _check_bias(bias: Optional[LogitBias], C: int) -> None:
    if bias is not None and bias.C != C:
        raise ShapeError(f"bias has {bias.C} classes, logits have {C}")


def ce_loss_and_grad(logits, targets, bias: Optional[LogitBias] = None) -> LossOutput:
    """Softmax cross-entropy on ``z + tau*B``; soft (mixup) targets allowed.

    ``targets`` are simplex rows or integer labels. The bias is shifted by
    its maximum before use; softmax ignores the shift, and a uniform-prior
    bias then contributes exact zeros.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("logits must be batch x C")
    t = _as_targets(z, targets)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise TargetError("CE targets must be simplex rows")
    _check_bias(bias, z.shape[1])
    x = z
    if bias is not None:
        x = z + bias.tau * (bias.values - bias.values.max())
    s = x - x.max(axis=1, keepdims=True)
    logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
    batch = z.shape[0]
    value = float(-(t * logp).sum() / batch)
    grad = (np.exp(logp) - t) / batch
    return LossOutput(value, grad)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid_loss(x: np.ndarray, t: np.ndarray, w: np.ndarray, lam: float) -> LossOutput:
    # Per entry: t*softplus(-x) + (1-t)*softplus(lam*x)/lam, i.e.
    # -t log s(x) - (1-t)/lam log(1 - s(lam x)). lam = 1 is plain BCE.
    batch = x.shape[0]
    xl = lam * x
    per = t * _softplus(-x) + (1.0 - t) * (_softplus(xl) / lam)
    value = float((w * per).sum() / batch)
    grad = w * (t * (expit(x) - 1.0) + (1.0 - t) * expit(xl)) / batch
    return LossOutput(value, grad)


def bce_loss_and_grad(logits, targets, config: Optional[LossConfig] = None) -> LossOutput:
    """Per-class sigmoid BCE on ``z + tau*B``, weighted by ``config.weights``.

    Targets may be any values in [0, 1] (mixup mixes them per class).
    Stable for ``|z + B|`` far beyond 1e4 through the softplus form.
    """
    config = config or LossConfig()
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("logits must be batch x C")
    t = _as_targets(z, targets)
    if np.any(t < 0) or np.any(t > 1):
        raise TargetError("BCE targets must lie in [0, 1]")
    C = z.shape[1]
    _check_bias(config.bias, C)
    w = np.ones(C) if config.weights is None else config.weights
    if w.shape != (C,):
        raise ShapeError(f"weights have shape {w.shape}, expected ({C},)")
    x = z if config.bias is None else z + config.bias.scaled()
    return _sigmoid_loss(x, t, w, 1.0)


def ntbce_loss_and_grad(logits, targets, lam: float = 1.0, bias: Optional[LogitBias] = None) -> LossOutput:
    """Negative-tolerant BCE: negatives use ``softplus(lam*x)/lam``.

    Hard (one-hot or integer) targets only. ``lam = 1`` reproduces
    :func:`bce_loss_and_grad` bit for bit.
    """
    if lam < 1:
        raise ConfigError(f"lambda must be >= 1, got {lam}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("logits must be batch x C")
    t = _as_targets(z, targets)
    if not np.all((t == 0) | (t == 1)):
        raise TargetError("NT-BCE needs hard 0/1 targets")
    _check_bias(bias, z.shape[1])
    x = z if bias is None else z + bias.scaled()
    return _sigmoid_loss(x, t, np.ones(z.shape[1]), float(lam))


LOSS_KINDS = ("ce", "bal_ce", "bce", "bal_bce", "ntbce")


def make_loss(kind: str, prior: ClassPrior, tau: float = 1.0, lam: float = 1.0):
    """Return ``(loss_fn, bias)`` for one of :data:`LOSS_KINDS`.

    ``loss_fn(logits, targets) -> LossOutput``. ``ntbce`` carries the BCE bias
    scaled by ``tau``; ``tau = 0`` gives the unbiased form.
    """
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if kind == "ce":
        return (lambda z, t: ce_loss_and_grad(z, t)), None
    if kind == "bal_ce":
        b = bias_ce(prior).with_tau(tau)
        return (lambda z, t: ce_loss_and_grad(z, t, b)), b
    if kind == "bce":
        return (lambda z, t: bce_loss_and_grad(z, t)), None
    b = bias_bce(prior).with_tau(tau)
    if kind == "bal_bce":
        cfg = LossConfig(bias=b)
        return (lambda z, t: bce_loss_and_grad(z, t, cfg)), b
    return (lambda z, t: ntbce_loss_and_grad(z, t, lam, b)), b


def predict_proba(logits, kind: str) -> np.ndarray:
    """Class-probability rows used for calibration metrics.

    Softmax for the CE family; for the sigmoid family the per-class
    sigmoids are renormalised to sum to one.
    """
    z = np.asarray(logits, dtype=np.float64)
    if kind in ("ce", "bal_ce"):
        s = z - z.max(axis=1, keepdims=True)
        p = np.exp(s)
    else:
        p = expit(z)
        # all-saturated rows: fall back to the largest logit
        dead = p.sum(axis=1) == 0
        if np.any(dead):
            p[dead] = (z[dead] == z[dead].max(axis=1, keepdims=True)).astype(np.float64)
    return p / p.sum(axis=1, keepdims=True)
