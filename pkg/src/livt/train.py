"""Two-stage training: masked generative pretraining, then balanced fine-tuning.

Both loops are single-threaded and draw every random decision (shuffle,
flips, masks, mixup) from generators keyed by ``(seed, epoch, batch)``, so
a run is bit-reproducible from its config and data.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, NumericalError, OptimizerError, ScheduleError, ShapeError
from .losses import LOSS_KINDS, LogitBias, make_loss, predict_proba
from .metrics import EvalReport, evaluate
from .priors import ClassPrior, ImbalanceProfile, LtDataset, keyed_rng, synth_gaussian_lt
from .vit import (
    ViTConfig,
    ViTParams,
    classify_forward,
    classify_grad,
    layer_lr_scales,
    mae_loss_and_grad,
    random_mask_plan,
)

log = logging.getLogger(__name__)

_TAG_SHUFFLE, _TAG_FLIP, _TAG_MASK, _TAG_MIXUP, _TAG_EVAL_MASK = 10, 11, 12, 13, 14
AUGMENTATIONS = ("flip", "mixup", "none")


def threads() -> int:
    return max(1, int(os.environ.get("LIVT_THREADS", "1")))


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "bft"
    epochs: int = 20
    warmup_epochs: int = 2
    batch_size: int = 128
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.99)
    layer_decay: float = 0.75
    tau: float = 1.0
    mixup_alpha: float = 0.8
    loss_kind: str = "bal_bce"
    lam: float = 1.0
    seed: int = 0
    augmentations: tuple = ("flip", "mixup")

    def __post_init__(self):
        if self.stage not in ("mgp", "bft"):
            raise ConfigError(f"stage must be 'mgp' or 'bft', got {self.stage!r}")
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise ConfigError("need 0 <= warmup_epochs <= epochs")
        if not self.base_lr >= self.min_lr >= 0:
            raise ConfigError("need base_lr >= min_lr >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 < self.layer_decay <= 1:
            raise ConfigError("layer_decay must lie in (0, 1]")
        if self.mixup_alpha < 0:
            raise ConfigError("mixup_alpha must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.lam < 1:
            raise ConfigError("lambda must be >= 1")
        bad = set(self.augmentations) - set(AUGMENTATIONS)
        if bad:
            raise ConfigError(f"unknown augmentations {sorted(bad)}")

    @classmethod
    def mgp(cls, **kw) -> "TrainConfig":
        """Desk-scale pretraining defaults."""
        base = dict(stage="mgp", epochs=80, warmup_epochs=8, batch_size=128, base_lr=1.5e-4, min_lr=0.0,
                    weight_decay=0.05, betas=(0.9, 0.95), layer_decay=1.0, mixup_alpha=0.0,
                    augmentations=("flip",))
        base.update(kw)
        return cls(**base)

    @classmethod
    def bft(cls, **kw) -> "TrainConfig":
        """Desk-scale balanced fine-tuning defaults."""
        base = dict(stage="bft")
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------------------
# Config files: ``key = value`` lines
# ---------------------------------------------------------------------------

# file keys that are Python keywords
_KEY_ALIASES = {"lambda": "lam"}


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _coerce(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.strip("()[] ").split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
    except ValueError as e:
        raise ConfigError(f"bad value {raw!r} for {key}") from e
    return raw


def coerce_overrides(obj, values: dict, strict: bool = True) -> dict:
    """Field name -> typed value for the string ``values`` that match fields of ``obj``."""
    names = {f.name for f in dataclasses.fields(obj)}
    upd = {}
    for k, raw in values.items():
        name = _KEY_ALIASES.get(k, k)
        if name not in names:
            if strict:
                raise ConfigError(f"unknown key {k!r} for {type(obj).__name__}")
            continue
        upd[name] = _coerce(getattr(obj, name), raw, k)
    return upd


def apply_overrides(obj, values: dict, strict: bool = True):
    """New dataclass instance with string ``values`` coerced onto matching fields."""
    return dataclasses.replace(obj, **coerce_overrides(obj, values, strict))


# ---------------------------------------------------------------------------
# Schedule, optimiser, augmentation
# ---------------------------------------------------------------------------


def cosine_lr(step: int, warmup_steps: int, total_steps: int, base: float, min: float) -> float:
    """Linear warmup 0 -> ``base``, then half-cosine ``base`` -> ``min`` at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base * step / warmup_steps
    if total_steps == warmup_steps:
        return base
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return min + (base - min) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@torch.no_grad()
def adamw_step(
    params: dict,
    grads: dict,
    state: OptimizerState,
    lr: float,
    betas=(0.9, 0.999),
    weight_decay: float = 0.0,
    layer_lr_scales: Optional[dict] = None,
    eps: float = 1e-8,
    decay_mask: Optional[dict] = None,
):
    """One AdamW update, in place on the tensors in ``params``.

    Decay is decoupled and applied first: ``p *= 1 - lr*scale*wd``. Then
    bias-corrected moments give ``p -= lr*scale * m_hat / (sqrt(v_hat) + eps)``.
    Parameters without a gradient entry are left alone.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        if name not in grads:
            continue
        g = torch.as_tensor(grads[name]).to(p.dtype)
        if g.shape != p.shape:
            raise OptimizerError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        scale = 1.0 if layer_lr_scales is None else layer_lr_scales[name]
        step_lr = lr * scale
        if weight_decay and (decay_mask is None or decay_mask[name]):
            p.mul_(1 - step_lr * weight_decay)
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise OptimizerError(f"moment shape mismatch for {name}")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(step_lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params, state


def mixup(features, targets, alpha: float, rng: np.random.Generator):
    """Convex combination with a permuted copy of the batch, ``lam ~ Beta(alpha, alpha)``.

    Returns ``(features, targets, lam)``; ``alpha = 0`` returns the batch as is.
    """
    if alpha < 0:
        raise ConfigError("mixup alpha must be >= 0")
    if alpha == 0:
        return features, targets, 1.0
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(features))
    x = lam * features + (1.0 - lam) * features[perm]
    t = lam * targets + (1.0 - lam) * targets[perm]
    return x.astype(features.dtype, copy=False), t, lam


def hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = keyed_rng(seed, _TAG_SHUFFLE, epoch).permutation(n)
    for b, start in enumerate(range(0, n, batch_size)):
        yield b, order[start : start + batch_size]


def _decay_mask(params: dict) -> dict:
    # no decay on biases, norms, mask token
    return {n: p.dim() >= 2 for n, p in params.items()}


def _check_data(data: LtDataset, cfg: ViTConfig) -> None:
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if data.image_shape != want:
        raise ShapeError(f"dataset images {data.image_shape} do not match model input {want}")


# ---------------------------------------------------------------------------
# Stage 1: masked generative pretraining
# ---------------------------------------------------------------------------


@dataclass
class MgpResult:
    params: ViTParams
    history: list


def run_mgp(config: TrainConfig, data: LtDataset, vit_config: ViTConfig, params: Optional[ViTParams] = None) -> MgpResult:
    """Train encoder and decoder to reconstruct masked patches.

    ``history`` holds the mean masked-patch MSE of each epoch.
    """
    if config.stage != "mgp":
        raise ConfigError("run_mgp needs a stage='mgp' config")
    _check_data(data, vit_config)
    torch.set_num_threads(threads())
    if params is None:
        params = ViTParams(vit_config, seed=config.seed)
    trained = {**params.group("encoder"), **params.group("decoder")}
    scales = layer_lr_scales(params, config.layer_decay)
    mask = _decay_mask(trained)
    state = OptimizerState()
    images = data.images()
    n = len(data)
    spe = math.ceil(n / config.batch_size)
    total, warm = config.epochs * spe, config.warmup_epochs * spe
    flip = "flip" in config.augmentations and not data.synthetic
    T = vit_config.num_patches
    history, step = [], 0
    for epoch in range(config.epochs):
        tot = 0.0
        for b, idx in _batches(n, config.batch_size, config.seed, epoch):
            x = images[idx]
            if flip:
                x = hflip(x, keyed_rng(config.seed, _TAG_FLIP, epoch, b))
            mrng = keyed_rng(config.seed, _TAG_MASK, epoch, b)
            plans = [random_mask_plan(T, vit_config.mask_ratio, mrng) for _ in range(len(idx))]
            loss, grads, _ = mae_loss_and_grad(params, x, plans)
            if not math.isfinite(loss):
                raise NumericalError("mae.loss", f"step {step}")
            lr = cosine_lr(step, warm, total, config.base_lr, config.min_lr)
            adamw_step(trained, grads, state, lr, config.betas, config.weight_decay, scales, decay_mask=mask)
            tot += loss * len(idx)
            step += 1
        history.append(tot / n)
        log.info("mgp epoch %d loss %.6f", epoch, history[-1])
    return MgpResult(params, history)


@torch.no_grad()
def evaluate_mae(params: ViTParams, data: LtDataset, seed: int = 0, batch_size: int = 256) -> float:
    """Masked-patch MSE over the whole dataset with masks fixed by ``seed``."""
    cfg = params.config
    images = data.images()
    tot = 0.0
    for b, start in enumerate(range(0, len(data), batch_size)):
        x = params.as_tensor(images[start : start + batch_size])
        rng = keyed_rng(seed, _TAG_EVAL_MASK, b)
        plans = [random_mask_plan(cfg.num_patches, cfg.mask_ratio, rng) for _ in range(len(x))]
        loss, _, _ = params.mae_forward(x, plans)
        tot += float(loss) * len(x)
    return tot / len(data)


# ---------------------------------------------------------------------------
# Stage 2: balanced fine-tuning
# ---------------------------------------------------------------------------


HISTORY_FIELDS = ("epoch", "loss", "acc", "many", "med", "few", "ece", "mce")


@dataclass
class BftResult:
    params: ViTParams
    history: list
    bias: Optional[LogitBias]


def predict(params: ViTParams, data: LtDataset, batch_size: int = 512) -> np.ndarray:
    images = data.images()
    out = [classify_forward(params, images[s : s + batch_size])[0] for s in range(0, len(data), batch_size)]
    return np.concatenate(out).astype(np.float64)


def evaluate_classifier(params: ViTParams, data: LtDataset, train_counts, loss_kind: str) -> EvalReport:
    probs = predict_proba(predict(params, data), loss_kind)
    return evaluate(probs, data.labels, train_counts)


def run_bft(
    config: TrainConfig,
    data: LtDataset,
    params: ViTParams,
    prior: ClassPrior,
    eval_data: Optional[LtDataset] = None,
) -> BftResult:
    """Fine-tune encoder and a fresh head with a (balanced) classification loss.

    The logit bias is computed once from ``prior`` and scaled by
    ``config.tau``. The decoder is never touched. Each epoch is evaluated
    on ``eval_data`` (the training set if omitted), with shot groups taken
    from ``prior``.
    """
    if config.stage != "bft":
        raise ConfigError("run_bft needs a stage='bft' config")
    vcfg = params.config
    if prior.C != vcfg.num_classes or data.num_classes != vcfg.num_classes:
        raise ConfigError(f"prior has C={prior.C}, head has {vcfg.num_classes} outputs")
    _check_data(data, vcfg)
    torch.set_num_threads(threads())
    params.reset_head()
    loss_fn, bias = make_loss(config.loss_kind, prior, config.tau, config.lam)
    trained = {**params.group("encoder"), **params.group("head")}
    scales = layer_lr_scales(params, config.layer_decay)
    mask = _decay_mask(trained)
    state = OptimizerState()
    images = data.images()
    onehot = np.eye(vcfg.num_classes)[data.labels]
    n = len(data)
    spe = math.ceil(n / config.batch_size)
    total, warm = config.epochs * spe, config.warmup_epochs * spe
    flip = "flip" in config.augmentations and not data.synthetic
    use_mixup = "mixup" in config.augmentations and config.mixup_alpha > 0
    if use_mixup and config.loss_kind == "ntbce":
        log.warning("NT-BCE takes hard targets only; mixup disabled")
        use_mixup = False
    eval_data = data if eval_data is None else eval_data
    history, step = [], 0
    for epoch in range(config.epochs):
        tot = 0.0
        for b, idx in _batches(n, config.batch_size, config.seed, epoch):
            x, t = images[idx], onehot[idx]
            if flip:
                x = hflip(x, keyed_rng(config.seed, _TAG_FLIP, epoch, b))
            if use_mixup:
                x, t, _ = mixup(x, t, config.mixup_alpha, keyed_rng(config.seed, _TAG_MIXUP, epoch, b))
            grads, out = classify_grad(params, x, lambda z: loss_fn(z, t))
            lr = cosine_lr(step, warm, total, config.base_lr, config.min_lr)
            adamw_step(trained, grads, state, lr, config.betas, config.weight_decay, scales, decay_mask=mask)
            tot += out.value * len(idx)
            step += 1
        rep = evaluate_classifier(params, eval_data, prior.counts, config.loss_kind)
        row = dict(epoch=epoch, loss=tot / n, acc=rep.overall_acc, many=rep.many_acc, med=rep.med_acc,
                   few=rep.few_acc, ece=rep.ece, mce=rep.mce)
        history.append(row)
        log.info("bft epoch %d loss %.6f acc %.4f few %s", epoch, row["loss"], rep.overall_acc, rep.few_acc)
    return BftResult(params, history, bias)


def history_csv(rows: list, fields=HISTORY_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(k) is None else (r[k] if isinstance(r[k], int) else repr(float(r[k]))) for k in fields])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Desk-scale synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeskBenchmark:
    """Seeded long-tailed Gaussian benchmark sized for a single CPU core.

    Ten classes drawn with an exponential profile (1150 down to 11 images,
    2,850 in total), each sample an 8x8 single-channel "image". Evaluation
    uses a balanced split of ``test_per_class`` images per class with the
    same class geometry. Learning rates are raised over the desk defaults:
    with only ~23 steps per epoch the default rates barely move the tiny
    model in the epoch budget.
    """

    seed: int = 0
    class_separation: float = 3.0
    n_max: int = 1150
    gamma: float = 100.0
    num_classes: int = 10
    test_per_class: int = 100
    mgp_epochs: int = 30
    mgp_lr: float = 1.5e-3
    bft_epochs: int = 60
    bft_lr: float = 3e-3

    def vit_config(self) -> ViTConfig:
        return ViTConfig(image_size=8, channels=1, patch_size=4, embed_dim=32, depth=2, heads=2,
                         decoder_dim=16, decoder_depth=1, decoder_heads=2, num_classes=self.num_classes)

    def data(self):
        """``(train, test)`` datasets."""
        C, shape = self.num_classes, (1, 8, 8)
        prof = ImbalanceProfile("exponential", self.n_max, self.gamma, C)
        train = synth_gaussian_lt(C, 64, prof, self.class_separation, self.seed, shape).dataset
        flat = ImbalanceProfile.uniform(self.test_per_class, C)
        test = synth_gaussian_lt(C, 64, flat, self.class_separation, self.seed, shape, split="test").dataset
        return train, test

    def mgp_config(self, **kw) -> TrainConfig:
        base = dict(seed=self.seed, epochs=self.mgp_epochs, warmup_epochs=max(1, self.mgp_epochs // 10),
                    base_lr=self.mgp_lr)
        base.update(kw)
        return TrainConfig.mgp(**base)

    def bft_config(self, loss_kind: str, tau: float = 1.0, **kw) -> TrainConfig:
        base = dict(seed=self.seed, epochs=self.bft_epochs, warmup_epochs=max(1, self.bft_epochs // 12),
                    base_lr=self.bft_lr, loss_kind=loss_kind, tau=tau)
        base.update(kw)
        return TrainConfig.bft(**base)

    def run(self, arms) -> dict:
        """Pretrain once, then fine-tune a copy per ``(loss_kind, tau)`` arm.

        Returns ``{(loss_kind, tau): final-epoch history row}``.
        """
        train, test = self.data()
        pre = run_mgp(self.mgp_config(), train, self.vit_config())
        out = {}
        for kind, tau in arms:
            res = run_bft(self.bft_config(kind, tau), train, copy.deepcopy(pre.params), train.prior, test)
            out[(kind, tau)] = res.history[-1]
        return out
