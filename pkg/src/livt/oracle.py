"""Closed-form and brute-force checkers for the balanced losses.

Everything here is deliberately independent of the training code paths:
Bayes-optimal scores come straight from posterior tables, the per-class
BCE optimum from the logit function, gradients from central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.special import logit as _logit

from .errors import OracleError, ShapeError
from .losses import LOSS_KINDS, LogitBias, LossConfig, bce_loss_and_grad, bias_bce_with_test_prior, make_loss
from .priors import ClassPrior, keyed_rng
from .vit import ViTConfig, ViTParams, classify_grad, mae_loss_and_grad, random_mask_plan

TIE_RTOL = 1e-9


@dataclass(frozen=True)
class DiscreteProblem:
    """Finite input space: ``eta[k, y] = P_train(y | x_k)`` plus train/test priors.

    ``delta_s``/``delta_t`` default to the prior frequencies.
    """

    eta: np.ndarray
    prior_s: ClassPrior
    prior_t: ClassPrior
    delta_s: Optional[np.ndarray] = None
    delta_t: Optional[np.ndarray] = None

    def __post_init__(self):
        eta = np.atleast_2d(np.asarray(self.eta, dtype=np.float64))
        C = eta.shape[1]
        if self.prior_s.C != C or self.prior_t.C != C:
            raise ShapeError("priors and posterior table disagree on C")
        if np.any(eta < 0) or np.any(np.abs(eta.sum(axis=1) - 1) > 1e-9):
            raise OracleError("posterior rows must lie on the simplex")
        ds = self.prior_s.freqs if self.delta_s is None else np.asarray(self.delta_s, dtype=np.float64)
        dt = self.prior_t.freqs if self.delta_t is None else np.asarray(self.delta_t, dtype=np.float64)
        if ds.shape != (C,) or dt.shape != (C,):
            raise ShapeError("delta vectors must have length C")
        if np.any(ds <= 0) or np.any(dt <= 0):
            raise OracleError("delta vectors must be strictly positive")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "delta_s", ds)
        object.__setattr__(self, "delta_t", dt)

    @property
    def K(self) -> int:
        return self.eta.shape[0]

    @property
    def C(self) -> int:
        return self.eta.shape[1]


def bayes_scores(problem: DiscreteProblem, allow_neg_inf: bool = False) -> np.ndarray:
    """Bayes-optimal scores ``log(eta / delta_s * delta_t)`` of the margin-adjusted pairwise loss.

    A zero posterior entry has score -inf; that raises unless
    ``allow_neg_inf`` is set.
    """
    zero = np.argwhere(problem.eta == 0)
    if zero.size and not allow_neg_inf:
        k, y = zero[0]
        raise OracleError(f"eta[{k}, {y}] = 0 gives a -inf Bayes score ({len(zero)} such entries)")
    with np.errstate(divide="ignore"):
        return np.log(problem.eta) - np.log(problem.delta_s) + np.log(problem.delta_t)


def balanced_bayes_argmax(problem: DiscreteProblem) -> np.ndarray:
    """``argmax_y eta_y(x) * pi_t_y / pi_s_y`` per input, lowest index on ties."""
    return np.argmax(balanced_ratio(problem), axis=1)


def balanced_ratio(problem: DiscreteProblem) -> np.ndarray:
    return problem.eta * problem.prior_t.freqs / problem.prior_s.freqs


def tied_rows(scores: np.ndarray, rtol: float = TIE_RTOL) -> np.ndarray:
    """Rows whose top two entries are within ``rtol`` (relative) of each other."""
    s = np.sort(scores, axis=1)
    top, second = s[:, -1], s[:, -2]
    return (top - second) <= rtol * np.maximum(np.abs(top), 1e-300)


def tabular_bce_optimum(eta_row, bias: Optional[LogitBias]) -> np.ndarray:
    """Minimiser of expected per-class sigmoid BCE on ``z + tau*B``: ``logit(eta) - tau*B``."""
    eta = np.asarray(eta_row, dtype=np.float64)
    if np.any(eta <= 0) or np.any(eta >= 1):
        raise OracleError("eta in {0, 1} has no finite optimum")
    z = _logit(eta)
    if bias is not None:
        z = z - bias.scaled()
    return z


def gd_bce_optimum(eta_row, bias: Optional[LogitBias], tol: float = 1e-10, max_steps: int = 1_000_000):
    """Gradient descent on expected Bal-BCE from ``z = 0``.

    The expected loss for class ``y`` is BCE with soft target ``eta_y``, so
    the gradient is taken from :func:`bce_loss_and_grad`. Step size 4 is
    ``1/L`` for the sigmoid's curvature bound 1/4. Stops when the Newton
    distance ``|grad| / (eta (1-eta))`` drops below ``tol``.
    """
    eta = np.asarray(eta_row, dtype=np.float64)[None, :]
    cfg = LossConfig(bias=bias)
    curv = eta * (1 - eta)
    z = np.zeros_like(eta)
    for step in range(max_steps):
        g = bce_loss_and_grad(z, eta, cfg).grad  # batch of one: grad = s(z+B) - eta
        if np.max(np.abs(g) / curv) < tol:
            return z[0], step
        z = z - 4.0 * g
    raise OracleError(f"gradient descent did not converge in {max_steps} steps")


def random_problem(rng: np.random.Generator, C_max: int = 5, K_max: int = 20) -> DiscreteProblem:
    C = int(rng.integers(2, C_max + 1))
    K = int(rng.integers(1, K_max + 1))
    eta = rng.dirichlet(np.ones(C), size=K)
    # keep entries off the {0, 1} boundary for the sigmoid form
    eta = np.clip(eta, 1e-9, None)
    eta /= eta.sum(axis=1, keepdims=True)
    counts_s = np.sort(rng.integers(1, 1001, size=C))[::-1]
    counts_t = rng.integers(1, 1001, size=C)
    return DiscreteProblem(eta, ClassPrior(counts_s), ClassPrior(counts_t, role="test"))


@dataclass
class Counterexample:
    eta_row: np.ndarray
    counts_s: np.ndarray
    counts_t: np.ndarray
    balanced_label: int
    sigmoid_label: int

    def replay(self) -> bool:
        """Re-evaluate from scratch; True if the two decisions still disagree."""
        p = DiscreteProblem(self.eta_row[None, :], ClassPrior(self.counts_s), ClassPrior(self.counts_t, role="test"))
        bal = int(balanced_bayes_argmax(p)[0])
        sig = int(np.argmax(tabular_bce_optimum(self.eta_row, bias_bce_with_test_prior(p.prior_s, p.prior_t))))
        return bal == self.balanced_label and sig == self.sigmoid_label and bal != sig


@dataclass
class FisherReport:
    problems: int
    inputs: int
    ties_excluded: int
    pairwise_agreement_rate: float
    sigmoid_agreement_rate: float
    pairwise_disagreements: list = field(default_factory=list)
    counterexamples: list = field(default_factory=list)

    def to_csv(self) -> str:
        head = "problems,inputs,ties_excluded,pairwise_agreement_rate,sigmoid_agreement_rate,counterexamples\n"
        return head + (
            f"{self.problems},{self.inputs},{self.ties_excluded},{self.pairwise_agreement_rate!r},"
            f"{self.sigmoid_agreement_rate!r},{len(self.counterexamples)}\n"
        )


def fisher_consistency_check(
    problems: Optional[Sequence[DiscreteProblem]] = None,
    trials: int = 1000,
    seed: int = 0,
    C_max: int = 5,
    K_max: int = 20,
) -> FisherReport:
    """Compare decision rules against the balanced Bayes classifier.

    Pairwise form: argmax of :func:`bayes_scores` with ``delta = pi``.
    Sigmoid form: argmax of :func:`tabular_bce_optimum` under the test-prior
    BCE bias; its disagreements are collected, not treated as failures.
    Inputs whose balanced scores tie are excluded from both rates.
    """
    if problems is None:
        problems = [random_problem(keyed_rng(seed, t), C_max, K_max) for t in range(trials)]
    n_inputs = n_ties = pair_ok = sig_ok = 0
    pair_bad, cex = [], []
    for pi, p in enumerate(problems):
        ratio = balanced_ratio(p)
        ties = tied_rows(ratio) if p.C > 1 else np.zeros(p.K, bool)
        bal = np.argmax(ratio, axis=1)
        pair = np.argmax(bayes_scores(p, allow_neg_inf=True), axis=1)
        b = bias_bce_with_test_prior(p.prior_s, p.prior_t)
        for k in range(p.K):
            n_inputs += 1
            if ties[k]:
                n_ties += 1
                continue
            if pair[k] == bal[k]:
                pair_ok += 1
            else:
                pair_bad.append((pi, k, int(bal[k]), int(pair[k])))
            row = p.eta[k]
            if np.all((row > 0) & (row < 1)):
                sig = int(np.argmax(tabular_bce_optimum(row, b)))
            else:
                sig = int(np.argmax(row))
            if sig == bal[k]:
                sig_ok += 1
            else:
                cex.append(Counterexample(row.copy(), p.prior_s.counts.copy(), p.prior_t.counts.copy(), int(bal[k]), sig))
    counted = n_inputs - n_ties
    return FisherReport(
        problems=len(problems),
        inputs=n_inputs,
        ties_excluded=n_ties,
        pairwise_agreement_rate=pair_ok / counted if counted else 1.0,
        sigmoid_agreement_rate=sig_ok / counted if counted else 1.0,
        pairwise_disagreements=pair_bad,
        counterexamples=cex,
    )


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x,
    eps: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``coords`` (flat indices) only those entries are estimated and a
    vector of matching length is returned; otherwise the result has the
    shape of ``x``.
    """
    x0 = np.array(x, dtype=np.float64)
    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x0)
        flat[i] = orig - eps
        fm = f(x0)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value around coordinate {i}")
        out.append((fp - fm) / (2 * eps))
    g = np.array(out)
    return g.reshape(x0.shape) if coords is None else g


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

GRAD_TOL = 1e-6


@dataclass
class GradCheckRow:
    target: str
    trials: int
    max_rel_err: float
    tol: float = GRAD_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_rows_csv(rows: Sequence[GradCheckRow]) -> str:
    lines = ["target,trials,max_rel_err,tol,passed"]
    lines += [f"{r.target},{r.trials},{r.max_rel_err!r},{r.tol!r},{int(r.passed)}" for r in rows]
    return "\n".join(lines) + "\n"


def _random_loss_case(rng: np.random.Generator, kind: str):
    C = int(rng.integers(2, 9))
    B = int(rng.integers(1, 7))
    z = rng.normal(0.0, 3.0, size=(B, C))
    counts = rng.integers(1, 500, size=C)
    tau = float(rng.uniform(0, 2))
    lam = float(rng.uniform(1, 5))
    if kind == "ntbce":
        t = np.eye(C)[rng.integers(0, C, size=B)]
    elif kind in ("ce", "bal_ce"):
        t = rng.dirichlet(np.ones(C), size=B)
    else:
        t = rng.uniform(0, 1, size=(B, C))
    fn, _ = make_loss(kind, ClassPrior(counts), tau=tau, lam=lam)
    return z, t, fn


def check_loss_gradients(trials: int = 100, seed: int = 0, tol: float = GRAD_TOL) -> list:
    """Analytic logit gradients of every loss kind against central differences."""
    rows = []
    for ki, kind in enumerate(LOSS_KINDS):
        worst = 0.0
        for trial in range(trials):
            z, t, fn = _random_loss_case(keyed_rng(seed, 31, ki, trial), kind)
            g = fn(z, t).grad
            fd = finite_diff_grad(lambda x: fn(x, t).value, z)
            worst = max(worst, relative_error(g, fd))
        rows.append(GradCheckRow(kind, trials, worst, tol))
    return rows


def tiny_vit_config():
    """One encoder block of width 8 on 4x4 single-channel images."""
    return ViTConfig(image_size=4, channels=1, patch_size=2, embed_dim=8, depth=1, heads=2, mlp_ratio=2,
                     decoder_dim=8, decoder_depth=1, decoder_heads=2, mask_ratio=0.5, num_classes=3)


def check_vit_gradients(seed: int = 0, coords: int = 200, tol: float = GRAD_TOL, batch: int = 3) -> list:
    """Backpropagated gradients of the tiny ViT against central differences.

    Runs in float64. Parameters are perturbed away from their initial
    values first: the zero-initialised head would otherwise zero every
    encoder gradient of the classification path. ``coords`` flat
    coordinates are sampled per path across all trained parameters.
    """
    cfg = tiny_vit_config()
    rng = keyed_rng(seed, 41)
    params = ViTParams(cfg, seed=seed).double()
    with torch.no_grad():
        for p in params.parameters():
            p.add_(torch.from_numpy(rng.normal(0.0, 0.3, size=tuple(p.shape))))
    images = rng.normal(size=(batch, cfg.channels, cfg.image_size, cfg.image_size))
    plans = [random_mask_plan(cfg.num_patches, cfg.mask_ratio, rng) for _ in range(batch)]
    labels = rng.integers(0, cfg.num_classes, size=batch)
    prior = ClassPrior(rng.integers(1, 100, size=cfg.num_classes))
    loss_fn, _ = make_loss("bal_bce", prior)
    targets = np.eye(cfg.num_classes)[labels]

    def mae_value():
        with torch.no_grad():
            return float(params.mae_forward(params.as_tensor(images), plans)[0])

    def cls_value():
        with torch.no_grad():
            logits, _ = params.classify(params.as_tensor(images))
        return loss_fn(logits.numpy(), targets).value

    paths = [
        ("vit_mae", ("encoder", "decoder"), lambda: mae_loss_and_grad(params, images, plans)[1], mae_value),
        ("vit_classify", ("encoder", "head"), lambda: classify_grad(params, images, lambda z: loss_fn(z, targets))[0], cls_value),
    ]
    rows = []
    for name, groups, analytic, value in paths:
        named = {}
        for g in groups:
            named.update(params.group(g))
        grads = analytic()
        names = list(named)
        flat_g = np.concatenate([np.asarray(grads[n]).ravel() for n in names])
        tensors = [named[n] for n in names]
        sizes = np.cumsum([0] + [t.numel() for t in tensors])
        x0 = np.concatenate([t.detach().numpy().ravel() for t in tensors])

        def load(x):
            with torch.no_grad():
                for t, lo, hi in zip(tensors, sizes[:-1], sizes[1:]):
                    t.copy_(torch.from_numpy(x[lo:hi].reshape(t.shape)))

        def f(x):
            load(x)
            return value()

        pick = np.sort(rng.choice(x0.size, size=min(coords, x0.size), replace=False))
        fd = finite_diff_grad(f, x0, coords=pick)
        load(x0)
        rows.append(GradCheckRow(name, len(pick), relative_error(flat_g[pick], fd), tol))
    return rows
