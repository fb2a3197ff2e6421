"""Class-count profiles, long-tailed datasets and the label priors derived from them.

Datasets serialize to the LTDS1 binary layout::

    b"LTDS1" | u32 N | u32 C | u32 channels | u32 H | u32 W
    | N*channels*H*W f32 features (image-major) | N u32 labels

all little-endian. Provenance (profile, seed, synthetic flag) goes into an
optional JSON sidecar ``<path>.json``; priors and profiles are CSV files with
header ``class,count``.
"""

from __future__ import annotations

import csv
import decimal
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CoverageError, FormatError, PriorError, ProfileError, ShapeError

LTDS_MAGIC = b"LTDS1"
_HEADER = struct.Struct("<5I")

# Stream tags for the keyed generators below.
_STREAM_SAMPLES = 0
_STREAM_MEANS = 1
_STREAM_SUBSAMPLE = 2
_SPLITS = {"train": 0, "test": 1}


def keyed_rng(*key: int) -> np.random.Generator:
    """Counter-based generator whose stream depends only on ``key``.

    Streams for distinct keys are independent, so per-class draws do not
    depend on the order classes are visited in.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassPrior:
    """Per-class training (or test) label counts and their frequencies."""

    counts: np.ndarray
    role: str = "train"

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size == 0:
            raise PriorError("counts must be a non-empty 1-D vector")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.floor(counts)):
                raise PriorError("counts must be integers")
        counts = counts.astype(np.int64)
        bad = np.flatnonzero(counts <= 0)
        if bad.size:
            raise PriorError(f"class {int(bad[0])} has count {int(counts[bad[0]])}; every class needs n_y > 0")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def C(self) -> int:
        return int(self.counts.size)

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def freqs(self) -> np.ndarray:
        return self.counts / self.N

    def is_uniform(self) -> bool:
        return bool(np.all(self.counts == self.counts[0]))


def class_prior_from_counts(counts: Sequence[int], role: str = "train") -> ClassPrior:
    return ClassPrior(np.asarray(counts), role=role)


def uniform_prior(C: int, role: str = "test") -> ClassPrior:
    return ClassPrior(np.ones(C, dtype=np.int64), role=role)


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------


def _floor_exact(n_max: int, gamma: float, i: int, C: int) -> int:
    # floor(n_max * gamma^(-i/(C-1))) at 60 digits; values within 1e-40 of an
    # integer are snapped so exact cases (e.g. 100 * 100^(-1/2)) never land below.
    with decimal.localcontext() as ctx:
        ctx.prec = 60
        x = decimal.Decimal(n_max) * decimal.Decimal(gamma) ** (decimal.Decimal(-i) / decimal.Decimal(C - 1))
        nearest = x.to_integral_value(rounding=decimal.ROUND_HALF_EVEN)
        if abs(x - nearest) < decimal.Decimal("1e-40"):
            return int(nearest)
        return int(x.to_integral_value(rounding=decimal.ROUND_FLOOR))


def exponential_profile(n_max: int, gamma: float, C: int) -> np.ndarray:
    """Counts ``floor(n_max * gamma**(-i/(C-1)))`` for class ``i``.

    This is the usual CIFAR-LT discarding rule; it reproduces the 12,406 /
    20,431 / 10,847 / 19,573 training-set sizes of CIFAR-10/100-LT at
    gamma 100 and 10.
    """
    if n_max < 1:
        raise ProfileError(f"n_max must be positive, got {n_max}")
    if C < 1:
        raise ProfileError(f"C must be positive, got {C}")
    if gamma < 1:
        raise ProfileError(f"imbalance factor gamma must be >= 1, got {gamma}")
    if gamma == 1:
        return np.full(C, n_max, dtype=np.int64)
    if C < 2:
        raise ProfileError("gamma > 1 needs at least two classes")
    counts = np.array([_floor_exact(n_max, gamma, i, C) for i in range(C)], dtype=np.int64)
    if counts[-1] == 0:
        raise ProfileError(f"floor(n_max/gamma) = floor({n_max}/{gamma}) = 0: tail class would be empty")
    return counts


def pareto_profile(n_max: int, alpha: float, C: int, n_min: int) -> np.ndarray:
    """Pareto-shaped counts ``round(n_max * (1 + s*i)**(-alpha))`` pinned to both ends.

    ``s`` is chosen so that the last class lands on ``n_min``; the interior
    shape is a modelling choice, only the endpoints are fixed.
    """
    if n_min < 1 or n_max < 1:
        raise ProfileError("n_min and n_max must be positive")
    if n_min > n_max:
        raise ProfileError(f"n_min={n_min} exceeds n_max={n_max}")
    if alpha <= 0:
        raise ProfileError(f"alpha must be positive, got {alpha}")
    if C < 1:
        raise ProfileError(f"C must be positive, got {C}")
    if C == 1:
        if n_min != n_max:
            raise ProfileError("a single-class profile needs n_min == n_max")
        return np.array([n_max], dtype=np.int64)
    s = ((n_max / n_min) ** (1.0 / alpha) - 1.0) / (C - 1)
    i = np.arange(C, dtype=np.float64)
    counts = np.rint(n_max * (1.0 + s * i) ** (-alpha)).astype(np.int64)
    counts[0] = n_max
    counts[-1] = n_min
    return np.clip(counts, n_min, n_max)


PROFILE_KINDS = ("exponential", "pareto", "uniform")


@dataclass(frozen=True)
class ImbalanceProfile:
    """Recipe for a per-class count vector.

    For ``pareto`` the tail count is ``round(n_max / gamma)`` and ``alpha``
    is the power; ``alpha`` is ignored by the other kinds.
    """

    kind: str
    n_max: int
    gamma: float
    C: int
    alpha: float = 6.0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ProfileError(f"unknown profile kind {self.kind!r}; expected one of {PROFILE_KINDS}")
        if self.gamma < 1:
            raise ProfileError(f"imbalance factor gamma must be >= 1, got {self.gamma}")
        if self.kind == "uniform" and self.gamma != 1:
            raise ProfileError("uniform profile requires gamma == 1")

    @classmethod
    def uniform(cls, n: int, C: int) -> "ImbalanceProfile":
        return cls("uniform", n, 1.0, C)

    def counts(self) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(self.C, self.n_max, dtype=np.int64)
        if self.kind == "exponential":
            return exponential_profile(self.n_max, self.gamma, self.C)
        n_min = max(1, int(round(self.n_max / self.gamma)))
        return pareto_profile(self.n_max, self.alpha, self.C, n_min)

    def prior(self) -> ClassPrior:
        return ClassPrior(self.counts())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LtDataset:
    """Flattened images, integer labels and how they were produced.

    ``features`` is N x (channels*H*W) float32; ``synthetic`` marks data
    without image semantics (flip augmentation is skipped for it).
    """

    features: np.ndarray
    labels: np.ndarray
    image_shape: tuple
    num_classes: int
    profile: ImbalanceProfile | None = None
    seed: int = 0
    synthetic: bool = False
    prior: ClassPrior = field(init=False)

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        shape = tuple(int(s) for s in self.image_shape)
        if len(shape) != 3:
            raise ShapeError(f"image_shape must be (channels, H, W), got {shape}")
        if feats.ndim != 2 or feats.shape[1] != math.prod(shape):
            raise ShapeError(f"features {feats.shape} do not match image shape {shape}")
        if labels.shape != (feats.shape[0],):
            raise ShapeError(f"{labels.shape[0]} labels for {feats.shape[0]} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ShapeError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(feats)):
            raise ShapeError("features must be finite")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image_shape", shape)
        object.__setattr__(self, "prior", ClassPrior(self.class_counts()))

    def __len__(self) -> int:
        return int(self.labels.size)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def images(self) -> np.ndarray:
        return self.features.reshape((-1,) + self.image_shape)


def subsample_dataset(full: LtDataset, profile: ImbalanceProfile, seed: int) -> LtDataset:
    """Keep exactly ``profile.counts()[y]`` instances of each class ``y``.

    Which instances survive depends only on ``(seed, y)``; retained rows
    keep their original relative order.
    """
    if profile.C != full.num_classes:
        raise ShapeError(f"profile has C={profile.C}, dataset has {full.num_classes} classes")
    sel = subsample_indices(full, profile, seed)
    return LtDataset(
        full.features[sel],
        full.labels[sel],
        full.image_shape,
        full.num_classes,
        profile=profile,
        seed=seed,
        synthetic=full.synthetic,
    )


def subsample_indices(full: LtDataset, profile: ImbalanceProfile, seed: int) -> np.ndarray:
    """Row indices :func:`subsample_dataset` would keep."""
    need = profile.counts()
    keep = []
    for y in range(full.num_classes):
        idx = np.flatnonzero(full.labels == y)
        if idx.size < need[y]:
            raise CoverageError(y, int(idx.size), int(need[y]))
        if idx.size == need[y]:
            keep.append(idx)
        else:
            rng = keyed_rng(seed, _STREAM_SUBSAMPLE, y)
            keep.append(idx[np.sort(rng.choice(idx.size, size=int(need[y]), replace=False))])
    return np.sort(np.concatenate(keep))


class SyntheticLt(NamedTuple):
    dataset: LtDataset
    posteriors: np.ndarray
    means: np.ndarray


def class_means(C: int, dim: int, class_separation: float, seed: int) -> np.ndarray:
    """Class centres ``class_separation * u_y`` with ``u_y`` random unit vectors."""
    rng = keyed_rng(seed, _STREAM_MEANS)
    u = rng.standard_normal((C, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return class_separation * u


def gaussian_posteriors(x: np.ndarray, means: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Exact ``P(y | x)`` for unit-variance isotropic Gaussians with class priors ``freqs``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    logit = np.log(freqs)[None, :] - 0.5 * d2
    logit -= logit.max(axis=1, keepdims=True)
    p = np.exp(logit)
    return p / p.sum(axis=1, keepdims=True)


def synth_gaussian_lt(
    C: int,
    dim: int,
    profile: ImbalanceProfile,
    class_separation: float,
    seed: int,
    image_shape: tuple | None = None,
    split: str = "train",
) -> SyntheticLt:
    """Long-tailed mixture of unit-variance Gaussians with known posteriors.

    Class means depend only on ``seed``, so a ``split="test"`` draw with the
    same seed shares the class geometry but not the samples. Posteriors use
    the profile's class frequencies as the prior.
    """
    if dim < 1:
        raise ShapeError(f"dim must be >= 1, got {dim}")
    if class_separation <= 0:
        raise ShapeError(f"class_separation must be positive, got {class_separation}")
    if profile.C != C:
        raise ShapeError(f"profile has C={profile.C}, asked for C={C}")
    if image_shape is None:
        image_shape = (1, 1, dim)
    if math.prod(image_shape) != dim:
        raise ShapeError(f"image_shape {image_shape} does not hold {dim} values")
    counts = profile.counts()
    means = class_means(C, dim, class_separation, seed)
    split_id = _SPLITS[split]
    feats, labels = [], []
    for y in range(C):
        rng = keyed_rng(seed, _STREAM_SAMPLES, split_id, y)
        feats.append(means[y] + rng.standard_normal((int(counts[y]), dim)))
        labels.append(np.full(int(counts[y]), y, dtype=np.int64))
    ds = LtDataset(
        np.concatenate(feats).astype(np.float32),
        np.concatenate(labels),
        image_shape,
        C,
        profile=profile,
        seed=seed,
        synthetic=True,
    )
    eta = gaussian_posteriors(ds.features.astype(np.float64), means, ClassPrior(counts).freqs)
    return SyntheticLt(ds, eta, means)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_ltds(ds: LtDataset, path) -> None:
    path = Path(path)
    c, h, w = ds.image_shape
    with open(path, "wb") as f:
        f.write(LTDS_MAGIC)
        f.write(_HEADER.pack(len(ds), ds.num_classes, c, h, w))
        f.write(ds.features.astype("<f4", copy=False).tobytes())
        f.write(ds.labels.astype("<u4").tobytes())
    meta = {"synthetic": ds.synthetic, "seed": ds.seed, "profile": asdict(ds.profile) if ds.profile else None}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_ltds(path) -> LtDataset:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:5] != LTDS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:5]!r}, expected {LTDS_MAGIC!r}", 0)
    if len(blob) < 5 + _HEADER.size:
        raise FormatError(f"{path}: truncated header", len(blob))
    n, C, c, h, w = _HEADER.unpack_from(blob, 5)
    off = 5 + _HEADER.size
    nfeat = n * c * h * w
    end = off + 4 * nfeat + 4 * n
    if len(blob) != end:
        raise FormatError(f"{path}: expected {end} bytes for N={n}, got {len(blob)}", min(len(blob), end))
    feats = np.frombuffer(blob, dtype="<f4", count=nfeat, offset=off).reshape(n, c * h * w)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off + 4 * nfeat).astype(np.int64)
    if n and labels.max() >= C:
        bad = int(np.argmax(labels >= C))
        raise FormatError(f"{path}: label {labels[bad]} >= C={C}", off + 4 * nfeat + 4 * bad)
    synthetic, seed, profile = False, 0, None
    side = Path(str(path) + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
        synthetic = bool(meta.get("synthetic", False))
        seed = int(meta.get("seed", 0))
        if meta.get("profile"):
            profile = ImbalanceProfile(**meta["profile"])
    return LtDataset(feats.astype(np.float32), labels, (c, h, w), C, profile=profile, seed=seed, synthetic=synthetic)


def counts_to_csv(counts: Sequence[int]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["class", "count"])
    for y, n in enumerate(counts):
        wr.writerow([y, int(n)])
    return buf.getvalue()


def write_prior_csv(prior: ClassPrior, path) -> None:
    Path(path).write_text(counts_to_csv(prior.counts))


def read_prior_csv(path, role: str = "train") -> ClassPrior:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["class", "count"]:
        raise FormatError(f"{path}: expected header 'class,count'", 0)
    body = sorted((int(r[0]), int(r[1])) for r in rows[1:] if r)
    if [c for c, _ in body] != list(range(len(body))):
        raise FormatError(f"{path}: class ids must be 0..C-1", 0)
    return ClassPrior(np.array([n for _, n in body]), role=role)
