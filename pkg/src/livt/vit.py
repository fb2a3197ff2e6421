"""Tiny vision transformer: MAE encoder/decoder plus a linear classifier head.

Parameters live in one ``nn.Module`` with three sub-trees, ``encoder``
(theta_f), ``decoder`` (theta_d) and ``head`` (theta_w). Gradients come from
reverse-mode autodiff; the classification path accepts logit gradients from
:mod:`livt.losses` so any of those losses can drive it.

Checkpoints use the ``LIVTCKPT1`` container::

    b"LIVTCKPT1" | u32 len | ViTConfig JSON | u32 n_tensors
    | n x (u16 len, name, u8 dtype=0 (f32), u8 ndim, ndim x u32 dims)
    | payloads, little-endian f32, in manifest order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, MaskError, NumericalError, ShapeError
from .losses import LossOutput

CKPT_MAGIC = b"LIVTCKPT1"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    num_classes: int = 10
    # MSE over every patch instead of only the masked ones
    loss_on_all_patches: bool = False
    # per-patch mean/var normalised reconstruction targets
    norm_pix_target: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ShapeError("embedding widths must be divisible by their head counts")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ShapeError("2-D sin-cos position tables need widths divisible by 4")
        if not 0 < self.mask_ratio < 1:
            raise MaskError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        n_mask = round(self.mask_ratio * self.num_patches)
        if n_mask < 1 or n_mask > self.num_patches - 1:
            raise MaskError(f"mask ratio {self.mask_ratio} on {self.num_patches} patches leaves nothing to mask or see")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


# ---------------------------------------------------------------------------
# Tokenisation and masking
# ---------------------------------------------------------------------------


def patchify(images, P: int):
    """``(..., C, H, W) -> (..., T, P*P*C)`` with row-major patch order.

    Works on numpy arrays and torch tensors alike.
    """
    *lead, C, H, W = images.shape
    if H % P or W % P:
        raise ShapeError(f"image {H}x{W} not divisible into {P}x{P} patches")
    h, w = H // P, W // P
    n = len(lead)
    x = images.reshape(*lead, C, h, P, w, P)
    perm = tuple(range(n)) + (n + 1, n + 3, n + 2, n + 4, n)
    x = x.permute(perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(*lead, h * w, P * P * C)


def unpatchify(tokens, P: int, channels: int):
    """Inverse of :func:`patchify` for square images."""
    *lead, T, D = tokens.shape
    h = math.isqrt(T)
    if h * h != T or D != P * P * channels:
        raise ShapeError(f"{T} tokens of width {D} do not form a square {channels}-channel image")
    n = len(lead)
    x = tokens.reshape(*lead, h, h, P, P, channels)
    perm = tuple(range(n)) + (n + 4, n, n + 2, n + 1, n + 3)
    x = x.permute(perm) if isinstance(x, torch.Tensor) else x.transpose(perm)
    return x.reshape(*lead, channels, h * P, h * P)


@dataclass(frozen=True)
class MaskPlan:
    """Masked and visible patch indices for one image.

    ``masked`` is sorted; ``visible`` is the complement in the order the
    encoder sees it (sorted unless deliberately permuted).
    """

    masked: np.ndarray
    visible: np.ndarray
    ratio: float

    def __post_init__(self):
        m = np.asarray(self.masked, dtype=np.int64)
        v = np.asarray(self.visible, dtype=np.int64)
        T = m.size + v.size
        if np.any(np.diff(m) <= 0):
            raise MaskError("masked indices must be sorted and unique")
        if not np.array_equal(np.sort(np.concatenate([m, v])), np.arange(T)):
            raise MaskError("masked and visible must partition the patch indices")
        object.__setattr__(self, "masked", m)
        object.__setattr__(self, "visible", v)

    @property
    def num_tokens(self) -> int:
        return self.masked.size + self.visible.size


def random_mask_plan(num_tokens: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask exactly ``round(ratio * num_tokens)`` patches, uniformly without replacement."""
    if not 0 < ratio < 1:
        raise MaskError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_mask = round(ratio * num_tokens)
    if n_mask < 1 or n_mask > num_tokens - 1:
        raise MaskError(f"ratio {ratio} on {num_tokens} tokens masks {n_mask}")
    masked = np.sort(rng.choice(num_tokens, size=n_mask, replace=False))
    keep = np.ones(num_tokens, dtype=bool)
    keep[masked] = False
    return MaskPlan(masked, np.flatnonzero(keep), ratio)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table, ``(grid*grid, dim)``: half the width encodes rows, half columns."""
    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([one_axis(dim // 2, gy.ravel()), one_axis(dim // 2, gx.ravel())], axis=1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _check(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError(name)
    return t


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn: bool = False):
        B, T, D = x.shape
        hd = D // self.heads
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(hd), dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(B, T, D))
        return (out, attn) if return_attn else out


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, return_attn: bool = False):
        a, attn = self.attn(self.norm1(x), return_attn=True)
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return (x, attn) if return_attn else x


class Encoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.register_buffer("pos_embed", torch.from_numpy(sincos_pos_embed(cfg.embed_dim, cfg.grid)), persistent=False)

    def forward(self, patches, visible: Optional[torch.Tensor] = None):
        x = _check("encoder.patch_embed", self.patch_embed(patches)) + self.pos_embed.to(patches.dtype)
        if visible is not None:
            x = torch.gather(x, 1, visible[..., None].expand(-1, -1, x.shape[-1]))
        for i, blk in enumerate(self.blocks):
            x = _check(f"encoder.blocks.{i}", blk(x))
        return _check("encoder.norm", self.norm(x))


class Decoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.decoder_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)
        )
        self.norm = nn.LayerNorm(cfg.decoder_dim)
        self.pred = nn.Linear(cfg.decoder_dim, cfg.patch_dim)
        self.register_buffer("pos_embed", torch.from_numpy(sincos_pos_embed(cfg.decoder_dim, cfg.grid)), persistent=False)

    def forward(self, latent, visible, num_patches: int):
        x = self.embed(latent)
        B, _, D = x.shape
        full = self.mask_token.expand(B, num_patches, D)
        full = torch.scatter(full, 1, visible[..., None].expand(-1, -1, D), x)
        x = full + self.pos_embed.to(x.dtype)
        for i, blk in enumerate(self.blocks):
            x = _check(f"decoder.blocks.{i}", blk(x))
        return _check("decoder.pred", self.pred(self.norm(x)))


class ViTParams(nn.Module):
    """All trainable state: ``encoder`` (theta_f), ``decoder`` (theta_d), ``head`` (theta_w)."""

    def __init__(self, cfg: ViTConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0):
        """Truncated-normal(0.02) weights, zero biases, unit norms, zero head."""
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.startswith("head."):
                p.zero_()
            elif ".norm" in name or name.split(".")[-2].startswith("norm"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=g)

    @torch.no_grad()
    def reset_head(self):
        self.head.weight.zero_()
        self.head.bias.zero_()

    def group(self, which: str) -> dict:
        """Named parameters of one sub-tree: ``"encoder"``, ``"decoder"`` or ``"head"``."""
        return {n: p for n, p in self.named_parameters() if n.startswith(which + ".")}

    @property
    def dtype(self):
        return self.head.weight.dtype

    def as_tensor(self, images) -> torch.Tensor:
        t = images if isinstance(images, torch.Tensor) else torch.tensor(np.asarray(images))
        t = t.to(self.dtype)
        c, s = self.config.channels, self.config.image_size
        if t.dim() == 2:
            t = t.reshape(-1, c, s, s)
        if tuple(t.shape[1:]) != (c, s, s):
            raise ShapeError(f"images of shape {tuple(t.shape)}; model expects (B, {c}, {s}, {s})")
        return t

    def mae_forward(self, images: torch.Tensor, plans: Sequence[MaskPlan]):
        """Returns ``(loss, predicted patches, target patches)``."""
        cfg = self.config
        if len(plans) != images.shape[0]:
            raise MaskError(f"{len(plans)} mask plans for {images.shape[0]} images")
        T = cfg.num_patches
        for p in plans:
            if p.num_tokens != T or p.visible.size != plans[0].visible.size:
                raise MaskError("mask plans inconsistent with the configuration")
        patches = patchify(images, cfg.patch_size)
        visible = torch.from_numpy(np.stack([p.visible for p in plans]))
        latent = self.encoder(patches, visible)
        pred = self.decoder(latent, visible, T)
        target = patches
        if cfg.norm_pix_target:
            mu = target.mean(-1, keepdim=True)
            var = target.var(-1, keepdim=True)
            target = (target - mu) / (var + 1e-6) ** 0.5
        per_patch = ((pred - target) ** 2).mean(-1)
        if cfg.loss_on_all_patches:
            loss = per_patch.mean()
        else:
            mask = torch.zeros(per_patch.shape, dtype=per_patch.dtype)
            for i, p in enumerate(plans):
                mask[i, torch.from_numpy(p.masked)] = 1.0
            loss = (per_patch * mask).sum() / mask.sum()
        return _check("mae.loss", loss), pred, target

    def classify(self, images: torch.Tensor):
        """Returns ``(logits, features)``; features are the mean of normed patch tokens."""
        patches = patchify(images, self.config.patch_size)
        feats = self.encoder(patches).mean(dim=1)
        return _check("head.logits", self.head(feats)), feats


def count_parameters(params: ViTParams, which: Optional[str] = None) -> int:
    items = params.named_parameters()
    return sum(p.numel() for n, p in items if which is None or n.startswith(which + "."))


def layer_id(name: str, depth: int) -> int:
    """0 for the patch embedding, i+1 for encoder block i, depth+1 for everything above."""
    if name.startswith("encoder.patch_embed"):
        return 0
    if name.startswith("encoder.blocks."):
        return int(name.split(".")[2]) + 1
    return depth + 1


def layer_lr_scales(params: ViTParams, layer_decay: float) -> dict:
    """``layer_decay ** (depth + 1 - layer_id)`` per parameter name."""
    depth = params.config.depth
    return {n: layer_decay ** (depth + 1 - layer_id(n, depth)) for n, _ in params.named_parameters()}


def _grads(params: dict) -> dict:
    return {n: p.grad.detach().cpu().numpy().copy() for n, p in params.items() if p.grad is not None}


def mae_loss_and_grad(params: ViTParams, images, plans: Sequence[MaskPlan]):
    """Masked-patch MSE, gradients of encoder and decoder, and the reconstruction.

    Returns ``(loss, grads, recon)`` where ``grads`` maps parameter names to
    arrays and ``recon`` is the decoder output reassembled into images.
    """
    x = params.as_tensor(images)
    params.zero_grad(set_to_none=True)
    loss, pred, _ = params.mae_forward(x, plans)
    loss.backward()
    grads = _grads({**params.group("encoder"), **params.group("decoder")})
    recon = unpatchify(pred.detach(), params.config.patch_size, params.config.channels).numpy()
    return float(loss.detach()), grads, recon


@torch.no_grad()
def classify_forward(params: ViTParams, images):
    """Logits ``batch x C`` and pooled features ``batch x d`` for full (unmasked) images."""
    logits, feats = params.classify(params.as_tensor(images))
    return logits.numpy().copy(), feats.numpy().copy()


def classify_grad(params: ViTParams, images, loss_fn: Callable[[np.ndarray], LossOutput]):
    """Gradients of ``loss_fn(logits)`` for encoder and head.

    ``loss_fn`` maps a logit array to a :class:`LossOutput`; its ``grad`` is
    pushed back through the network. The decoder takes no part and gets no
    gradient entry.
    """
    x = params.as_tensor(images)
    params.zero_grad(set_to_none=True)
    logits, _ = params.classify(x)
    out = loss_fn(logits.detach().numpy().astype(np.float64))
    if not (np.isfinite(out.value) and np.all(np.isfinite(out.grad))):
        raise NumericalError("classification loss")
    logits.backward(torch.from_numpy(out.grad).to(logits.dtype))
    return _grads({**params.group("encoder"), **params.group("head")}), out


@torch.no_grad()
def encoder_attention(params: ViTParams, images) -> list:
    """Attention maps ``(B, heads, T, T)`` of every encoder block on full images."""
    x = params.as_tensor(images)
    enc = params.encoder
    h = enc.patch_embed(patchify(x, params.config.patch_size)) + enc.pos_embed.to(x.dtype)
    maps = []
    for blk in enc.blocks:
        h, attn = blk(h, return_attn=True)
        maps.append(attn.numpy().copy())
    return maps


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ViTParams, path) -> None:
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode()
    named = [(n, p.detach().cpu().to(torch.float32).numpy()) for n, p in params.named_parameters()]
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(named))
    for n, a in named:
        nb = n.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 0, a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
    for _, a in named:
        out += a.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ViTParams:
    blob = Path(path).read_bytes()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:len(CKPT_MAGIC)]!r}", 0)
    off = len(CKPT_MAGIC)
    try:
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        cfg = ViTConfig(**json.loads(blob[off : off + n]))
        off += n
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        manifest = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + ln].decode()
            off += ln
            dtype, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            if dtype != 0:
                raise FormatError(f"{path}: unsupported dtype code {dtype} for {name}", off - 2)
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            manifest.append((name, shape))
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, TypeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint manifest: {e}", off) from e
    params = ViTParams(cfg)
    own = dict(params.named_parameters())
    with torch.no_grad():
        for name, shape in manifest:
            size = math.prod(shape)
            if name not in own or tuple(own[name].shape) != tuple(shape):
                raise FormatError(f"{path}: tensor {name} {shape} does not fit the configuration", off)
            if off + 4 * size > len(blob):
                raise FormatError(f"{path}: truncated payload for {name}", len(blob))
            a = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
            own[name].copy_(torch.from_numpy(a.astype(np.float32)))
            off += 4 * size
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes", off)
    return params
