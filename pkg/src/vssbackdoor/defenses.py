"""Patch-processing input transforms: PatchDrop and PatchShuffle.

Both operate in image space on a grid of ``patch_size`` cells. Dropped cells
are zero-filled so the output keeps the input shape. In a batch, image ``i``
draws its randomness from ``(spec.seed, ids[i])`` so results do not depend on
batch composition.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .seeding import floor_count, rng_for

DEFENSE_KINDS = ("none", "patch_drop", "patch_shuffle")


@dataclass
class DefenseSpec:
    kind: str = "none"
    patch_size: int = 16
    drop_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise DomainError(f"unknown defense kind {self.kind!r}")
        if self.patch_size < 1:
            raise DomainError("patch_size must be positive")
        if not 0.0 <= self.drop_rate < 1.0:
            raise DomainError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")

    def to_dict(self):
        return asdict(self)


def _to_cells(img, P):
    H, W, C = img.shape
    if H % P or W % P:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    return img.reshape(gh, P, gw, P, C).transpose(0, 2, 1, 3, 4).reshape(gh * gw, P, P, C), (gh, gw)


def _from_cells(cells, grid, P):
    gh, gw = grid
    C = cells.shape[-1]
    return cells.reshape(gh, gw, P, P, C).transpose(0, 2, 1, 3, 4).reshape(gh * P, gw * P, C)


def _batched(x, ids, fn):
    x = np.asarray(x)
    if x.ndim == 3:
        return fn(x, 0 if ids is None else int(np.ravel(ids)[0]))
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (n, H, W, C), got {x.shape}")
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    if len(ids) != len(x):
        raise DimensionError("need one id per image")
    return np.stack([fn(img, int(i)) for img, i in zip(x, ids)]) if len(x) else x.copy()


def dropped_cells(n_cells, spec: DefenseSpec, image_id=0):
    count = floor_count(spec.drop_rate, n_cells)
    return np.sort(rng_for(spec.seed, image_id).choice(n_cells, size=count, replace=False))


def patch_drop(x, spec: DefenseSpec, ids=None):
    """Zero ``floor(drop_rate * n_cells)`` cells chosen uniformly without replacement."""
    P = spec.patch_size

    def one(img, image_id):
        cells, grid = _to_cells(img, P)
        cells = cells.copy()
        cells[dropped_cells(len(cells), spec, image_id)] = 0
        return _from_cells(cells, grid, P)

    return _batched(x, ids, one)


def shuffle_permutation(n_cells, spec: DefenseSpec, image_id=0):
    return rng_for(spec.seed, image_id).permutation(n_cells)


def patch_shuffle(x, spec: DefenseSpec, ids=None, permutation=None):
    """Permute the cell grid: output cell ``j`` is input cell ``permutation[j]``.

    ``permutation`` forces one permutation for every image (test hook);
    otherwise each image draws its own.
    """
    P = spec.patch_size

    def one(img, image_id):
        cells, grid = _to_cells(img, P)
        perm = shuffle_permutation(len(cells), spec, image_id) if permutation is None else np.asarray(permutation)
        if sorted(perm.tolist()) != list(range(len(cells))):
            raise DomainError("permutation must be a permutation of the cell indices")
        return _from_cells(cells[perm], grid, P)

    return _batched(x, ids, one)


def patch_unshuffle(x, patch_size, permutation):
    """Inverse of :func:`patch_shuffle` for a known permutation."""
    inverse = np.argsort(permutation)
    return patch_shuffle(x, DefenseSpec("patch_shuffle", patch_size=patch_size), permutation=inverse)


def apply_defense(x, spec, ids=None):
    if spec is None or spec.kind == "none":
        return np.asarray(x)
    if spec.kind == "patch_drop":
        return patch_drop(x, spec, ids)
    return patch_shuffle(x, spec, ids)
