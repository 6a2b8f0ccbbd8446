"""Backdoor triggers and poison-set construction.

Three trigger families are supported:

* ``corner_patch`` -- a small square pasted at a corner (BadNets style);
* ``blend`` -- ``(1 - alpha) * x + alpha * pattern`` with an image-sized pattern;
* ``per_patch_pixel`` -- a single-pixel lattice with a fixed gap that recurs
  identically inside every ``patch_size`` cell, added to the image and clipped.

Images are ``(H, W, C)`` or ``(n, H, W, C)``, either uint8 in [0, 255] or float
in [0, 1]. ``intensity`` is always expressed on the byte scale.
"""

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import DimensionError, DomainError, EmptyMaskError, InfeasibleRateError, PlanError
from .seeding import floor_count

TRIGGER_KINDS = ("corner_patch", "blend", "per_patch_pixel")
CORNERS = ("bottom_right", "bottom_left", "top_right", "top_left")
BLEND_PATTERN_SEED = 20240917


@dataclass
class TriggerSpec:
    kind: str
    target: int = 0
    pattern: Optional[np.ndarray] = field(default=None, repr=False)
    size: Optional[int] = None  # corner side; None -> 3 for images up to 64 px, else 16
    pos: Union[str, tuple] = "bottom_right"
    alpha: float = 0.2
    gap: int = 1
    intensity: float = 30.0
    patch_size: int = 16

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise DomainError(f"unknown trigger kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gap < 0:
            raise DomainError("gap must be >= 0")
        if self.intensity < 0:
            raise DomainError("intensity must be >= 0")
        if isinstance(self.pos, list):
            self.pos = tuple(self.pos)
        if isinstance(self.pos, str) and self.pos not in CORNERS:
            raise DomainError(f"pos must be one of {CORNERS} or (row, col)")

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("kind", "target", "size", "pos", "alpha", "gap", "intensity", "patch_size")}
        d["pos"] = list(d["pos"]) if isinstance(d["pos"], tuple) else d["pos"]
        d["pattern"] = None if self.pattern is None else "custom"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("pattern"), str):
            d["pattern"] = None if d["pattern"] in ("builtin", "custom") else np.load(d["pattern"])
        return cls(**d)


def _byte_scale(x):
    return 255.0 if x.dtype == np.uint8 else 1.0


def _finish(out, like):
    lo, hi = 0.0, _byte_scale(like)
    out = np.clip(out, lo, hi)
    if like.dtype == np.uint8:
        return np.rint(out).astype(np.uint8)
    return out.astype(like.dtype, copy=False)


def builtin_blend_pattern(H, W, C):
    """Fixed noise pattern in [0, 1] used when a blend trigger has no pattern."""
    return np.random.default_rng(BLEND_PATTERN_SEED).random((H, W, C))


def make_per_patch_trigger(P, gap, intensity):
    """``(P, P)`` additive mask: ``intensity`` on a lattice of stride ``gap + 1`` from (0, 0)."""
    if P < 2:
        raise DomainError(f"patch size must be >= 2, got {P}")
    if gap < 0:
        raise DomainError("gap must be >= 0")
    stride = gap + 1
    if stride > P:
        raise EmptyMaskError(f"lattice stride {stride} exceeds patch size {P}")
    mask = np.zeros((P, P))
    mask[::stride, ::stride] = intensity
    return mask


def tile_per_patch_trigger(H, W, P, gap, intensity):
    if H % P or W % P:
        raise DimensionError(f"image {H}x{W} not divisible by trigger patch size {P}")
    return np.tile(make_per_patch_trigger(P, gap, intensity), (H // P, W // P))


def _corner_origin(spec, H, W, s):
    if isinstance(spec.pos, tuple):
        r, c = spec.pos
    else:
        r = H - s if spec.pos.startswith("bottom") else 0
        c = W - s if spec.pos.endswith("right") else 0
    if r < 0 or c < 0 or r + s > H or c + s > W:
        raise DimensionError(f"corner pattern of side {s} at {(r, c)} does not fit a {H}x{W} image")
    return r, c


def apply_trigger(x, spec: TriggerSpec):
    """Return a triggered copy of ``x``; output stays in the valid pixel range and dtype."""
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected (H, W, C) or (n, H, W, C), got shape {x.shape}")
    H, W, C = x.shape[-3:]
    scale = _byte_scale(x)
    work = x.astype(np.float64) if x.dtype == np.uint8 else x

    if spec.kind == "corner_patch":
        if spec.pattern is not None:
            pattern = np.asarray(spec.pattern, dtype=np.float64)
            if pattern.ndim == 2:
                pattern = pattern[..., None]
            s = pattern.shape[0]
            if pattern.shape[1] != s:
                raise DimensionError("corner pattern must be square")
        else:
            s = spec.size if spec.size is not None else (3 if max(H, W) <= 64 else 16)
            pattern = np.ones((s, s, 1))
        if s > H or s > W:
            raise DimensionError(f"corner pattern of side {s} larger than {H}x{W} image")
        r, c = _corner_origin(spec, H, W, s)
        out = np.array(work, copy=True)
        out[..., r:r + s, c:c + s, :] = np.broadcast_to(pattern * scale, (s, s, C))
        return _finish(out, x)

    if spec.kind == "blend":
        pattern = builtin_blend_pattern(H, W, C) if spec.pattern is None else np.asarray(spec.pattern, dtype=np.float64)
        if pattern.shape != (H, W, C):
            raise DimensionError(f"blend pattern {pattern.shape} must match image {(H, W, C)}")
        pattern = (pattern * scale).astype(work.dtype)
        out = (1 - spec.alpha) * work + spec.alpha * pattern
        return _finish(out, x)

    mask = tile_per_patch_trigger(H, W, spec.patch_size, spec.gap, spec.intensity / 255.0 * scale)
    out = work + mask.astype(work.dtype)[:, :, None]
    return _finish(out, x)


@dataclass(frozen=True)
class PoisonPlan:
    rate: float
    indices: np.ndarray
    seed: int
    target: int


def select_poison_indices(labels, rate, target, seed) -> PoisonPlan:
    """Draw ``floor(rate * n)`` ids uniformly, without replacement, among non-target samples."""
    labels = np.asarray(labels)
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"rate must lie in [0, 1], got {rate}")
    count = floor_count(rate, labels.size)
    candidates = np.flatnonzero(labels != target)
    if count > candidates.size:
        raise InfeasibleRateError(
            f"rate {rate} needs {count} samples but only {candidates.size} are outside the target class")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(candidates, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    return PoisonPlan(rate=float(rate), indices=chosen.astype(np.int64), seed=int(seed), target=int(target))


@dataclass
class PoisonedDataset:
    images: np.ndarray
    labels: np.ndarray
    original_labels: np.ndarray
    poison_indices: np.ndarray
    spec: TriggerSpec
    seed: int

    @property
    def clean_indices(self):
        mask = np.ones(len(self.labels), dtype=bool)
        mask[self.poison_indices] = False
        return np.flatnonzero(mask)

    def manifest(self):
        return [
            {"id": int(i), "original_label": int(self.original_labels[i]), "new_label": int(self.labels[i]),
             "trigger": self.spec.kind, "seed": self.seed}
            for i in self.poison_indices
        ]


def poison_dataset(images, labels, spec: TriggerSpec, plan: PoisonPlan) -> PoisonedDataset:
    """Trigger and relabel the planned samples; order and size of the set are preserved."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    idx = np.asarray(plan.indices, dtype=np.int64)
    if np.unique(idx).size != idx.size:
        raise PlanError("poison plan contains duplicate indices")
    if idx.size and (idx.min() < 0 or idx.max() >= labels.size):
        raise PlanError("poison plan index out of range")
    if np.any(labels[idx] == spec.target):
        raise PlanError("poison plan selects samples already in the target class")

    out_images = images.copy()
    out_labels = labels.copy()
    if idx.size:
        out_images[idx] = apply_trigger(images[idx], spec)
        out_labels[idx] = spec.target
    return PoisonedDataset(out_images, out_labels, labels.copy(), idx, spec, plan.seed)


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
