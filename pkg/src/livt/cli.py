"""Command-line entry point: ``livt <verb> ...``.

Verbs::

    build [SOURCE]              long-tailed dataset (synthetic, or subsampled from SOURCE)
    pretrain DATA               masked generative pretraining -> mgp.ckpt
    finetune CKPT DATA [EVAL]   balanced fine-tuning -> bft.ckpt, history.csv
    eval CKPT DATA PRIOR_CSV    accuracy groups and calibration -> eval.csv, eval.txt, bins.csv
    bias-table                  per-class logit biases for a profile or prior CSV
    check grad|fisher           oracle self-checks; exit 1 on failure

Every verb takes ``--config FILE`` (``key = value`` lines), repeatable
``--set key=value`` (wins over the file), ``--seed N`` and ``--out DIR``.
Exit codes: 0 success, 1 failed check or bad input file, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, LivtError, MaskError, ShapeError
from .losses import bias_bce, bias_ce, predict_proba
from .metrics import bins_csv, evaluate
from .oracle import check_loss_gradients, check_vit_gradients, fisher_consistency_check, grad_rows_csv
from .priors import (
    ImbalanceProfile,
    read_ltds,
    read_prior_csv,
    subsample_dataset,
    synth_gaussian_lt,
    write_ltds,
    write_prior_csv,
)
from .train import TrainConfig, apply_overrides, coerce_overrides, history_csv, parse_kv_text, predict, run_bft, run_mgp, threads
from .vit import ViTConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("livt")


@dataclass(frozen=True)
class ProfileConfig:
    kind: str = "exponential"
    n_max: int = 5000
    gamma: float = 100.0
    C: int = 10
    alpha: float = 6.0

    def profile(self) -> ImbalanceProfile:
        if self.kind == "uniform":
            return ImbalanceProfile.uniform(self.n_max, self.C)
        return ImbalanceProfile(self.kind, self.n_max, self.gamma, self.C, self.alpha)


@dataclass(frozen=True)
class SynthConfig:
    class_separation: float = 3.0
    channels: int = 1
    height: int = 8
    width: int = 8
    split: str = "train"


@dataclass(frozen=True)
class CheckConfig:
    trials: int = 100
    coords: int = 200
    fisher_trials: int = 1000


@dataclass(frozen=True)
class EvalConfig:
    loss_kind: str = "bal_bce"


def _settings(args) -> dict:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_kv_text(path.read_text(), str(path)))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def _resolve(values: dict, *objs):
    """Spread ``values`` over dataclass defaults; every key must land somewhere."""
    out, used = [], set()
    for obj in objs:
        names = {f.name for f in dataclasses.fields(obj)} | ({"lambda"} if isinstance(obj, TrainConfig) else set())
        mine = {k: v for k, v in values.items() if k in names}
        used |= set(mine)
        out.append(apply_overrides(obj, mine))
    unknown = sorted(set(values) - used)
    if unknown:
        raise ConfigError(f"unknown config keys for this command: {', '.join(unknown)}")
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(values: dict) -> int:
    return int(values.pop("seed", "0"))


def cmd_build(args) -> int:
    values = _settings(args)
    seed = _seed(values)
    prof_cfg, syn = _resolve(values, ProfileConfig(), SynthConfig())
    profile = prof_cfg.profile()
    if args.source:
        ds = subsample_dataset(read_ltds(args.source), profile, seed)
    else:
        shape = (syn.channels, syn.height, syn.width)
        ds = synth_gaussian_lt(profile.C, int(np.prod(shape)), profile, syn.class_separation, seed, shape,
                               split=syn.split).dataset
    out = _out_dir(args)
    write_ltds(ds, out / "dataset.ltds")
    write_prior_csv(ds.prior, out / "prior.csv")
    print(f"wrote {len(ds)} rows, {ds.num_classes} classes to {out / 'dataset.ltds'}")
    return 0


def cmd_pretrain(args) -> int:
    data = read_ltds(args.data)
    c, h, w = data.image_shape
    if h != w:
        raise ConfigError(f"images must be square, got {h}x{w}")
    values = _settings(args)
    vit_keys = {f.name for f in dataclasses.fields(ViTConfig)}
    base = dict(dataclasses.asdict(ViTConfig()), image_size=h, channels=c, num_classes=data.num_classes)
    base.update(coerce_overrides(ViTConfig(), {k: v for k, v in values.items() if k in vit_keys}))
    try:
        vcfg = ViTConfig(**base)
    except (ShapeError, MaskError) as e:
        raise ConfigError(f"invalid model settings: {e}") from e
    (cfg,) = _resolve({k: v for k, v in values.items() if k not in vit_keys}, TrainConfig.mgp())
    res = run_mgp(cfg, data, vcfg)
    out = _out_dir(args)
    save_checkpoint(res.params, out / "mgp.ckpt")
    rows = [dict(epoch=i, loss=v) for i, v in enumerate(res.history)]
    (out / "mgp_history.csv").write_text(history_csv(rows, ("epoch", "loss")))
    print(f"pretrained {cfg.epochs} epochs; checkpoint {out / 'mgp.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    params = load_checkpoint(args.ckpt)
    data = read_ltds(args.data)
    eval_data = read_ltds(args.eval) if args.eval else None
    (cfg,) = _resolve(_settings(args), TrainConfig.bft())
    res = run_bft(cfg, data, params, data.prior, eval_data)
    out = _out_dir(args)
    save_checkpoint(res.params, out / "bft.ckpt")
    (out / "history.csv").write_text(history_csv(res.history))
    write_prior_csv(data.prior, out / "prior.csv")
    print(f"fine-tuned {cfg.epochs} epochs with {cfg.loss_kind}; checkpoint {out / 'bft.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    data = read_ltds(args.data)
    prior = read_prior_csv(args.prior)
    values = _settings(args)
    values.pop("seed", None)
    (ecfg,) = _resolve(values, EvalConfig())
    if prior.C != data.num_classes:
        raise ConfigError(f"prior has C={prior.C}, dataset has {data.num_classes} classes")
    probs = predict_proba(predict(params, data), ecfg.loss_kind)
    rep = evaluate(probs, data.labels, prior.counts)
    out = _out_dir(args)
    (out / "eval.csv").write_text(rep.to_csv())
    (out / "eval.txt").write_text(rep.to_table())
    (out / "bins.csv").write_text(bins_csv(probs, data.labels))
    sys.stdout.write(rep.to_table())
    return 0


def cmd_bias_table(args) -> int:
    values = _settings(args)
    values.pop("seed", None)
    if args.prior:
        _resolve(values)
        prior = read_prior_csv(args.prior)
    else:
        (pc,) = _resolve(values, ProfileConfig())
        prior = pc.profile().prior()
    bce, ce = bias_bce(prior).values, bias_ce(prior).values
    lines = ["class,pi,bias_ce,bias_bce,delta"]
    for y in range(prior.C):
        row = (prior.freqs[y], ce[y], bce[y], bce[y] - ce[y])
        lines.append(f"{y}," + ",".join(repr(float(v)) for v in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        (_out_dir(args) / "bias.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_check(args) -> int:
    values = _settings(args)
    seed = _seed(values)
    (cc,) = _resolve(values, CheckConfig())
    if args.what == "grad":
        rows = check_loss_gradients(cc.trials, seed) + check_vit_gradients(seed, cc.coords)
        text, ok = grad_rows_csv(rows), all(r.passed for r in rows)
        name = "grad_check.csv"
    else:
        rep = fisher_consistency_check(trials=cc.fisher_trials, seed=seed)
        text, ok = rep.to_csv(), rep.pairwise_agreement_rate == 1.0
        name = "fisher_check.csv"
    if args.out:
        (_out_dir(args) / name).write_text(text)
    sys.stdout.write(text)
    if not ok:
        print("check FAILED", file=sys.stderr)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of 'key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="livt", description="Long-tailed ViT training with balanced losses.")
    sub = ap.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("build", parents=[common], help="build a long-tailed dataset")
    p.add_argument("source", nargs="?", help="balanced LTDS1 dataset to subsample")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("pretrain", parents=[common], help="masked generative pretraining")
    p.add_argument("data")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="balanced fine-tuning from a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("data")
    p.add_argument("eval", nargs="?", help="dataset evaluated after each epoch (default: DATA)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="accuracy by shot group and calibration")
    p.add_argument("ckpt")
    p.add_argument("data")
    p.add_argument("prior", help="training class counts (CSV class,count)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bias-table", parents=[common], help="per-class CE and BCE logit biases")
    p.add_argument("--prior", help="class-count CSV instead of a profile")
    p.set_defaults(func=cmd_bias_table, out=None)

    p = sub.add_parser("check", parents=[common], help="gradient or Fisher-consistency self-check")
    p.add_argument("what", choices=("grad", "fisher"))
    p.set_defaults(func=cmd_check, out=None)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(threads())
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"livt {args.verb}: {e}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2
    except (LivtError, OSError) as e:
        print(f"livt {args.verb}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
