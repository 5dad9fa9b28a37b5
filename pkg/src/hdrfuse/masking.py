"""Patch partitioning and random masking for the self-supervised phase.

An image is divided into non-overlapping square patches and a fixed-count
random subset is blanked out.  The mask count is exact (``round(ratio *
cells)``, no stochastic rounding drift) and fully determined by the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PatchMask:
    """Boolean patch grid; ``True`` marks a masked patch."""

    grid: np.ndarray
    patch_size: int
    ratio: float
    seed: int

    @property
    def num_masked(self) -> int:
        return int(self.grid.sum())

    def pixel_mask(self) -> np.ndarray:
        """Expand the patch grid to a boolean per-pixel mask."""
        p = self.patch_size
        return np.kron(self.grid, np.ones((p, p), dtype=bool))


def sample_mask(h: int, w: int, patch_size: int = 8, ratio: float = 0.75,
                seed: int = 0) -> PatchMask:
    """Draw a uniformly random patch mask covering exactly round(ratio*cells) patches."""
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise ValueError(
            f"patch size {patch_size} must divide image dims {h}x{w}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    gh, gw = h // patch_size, w // patch_size
    cells = gh * gw
    n_masked = int(round(ratio * cells))
    rng = np.random.default_rng(seed)
    flat = np.zeros(cells, dtype=bool)
    flat[rng.permutation(cells)[:n_masked]] = True
    return PatchMask(grid=flat.reshape(gh, gw), patch_size=patch_size,
                     ratio=ratio, seed=seed)


def apply_mask(plane, mask: PatchMask, fill: float = 0.0):
    """Replace pixels inside masked patches with ``fill``; others are untouched.

    Works on H x W x C numpy arrays and torch tensors (channel-last).
    """
    p = mask.patch_size
    gh, gw = mask.grid.shape
    if plane.shape[0] != gh * p or plane.shape[1] != gw * p:
        raise ValueError(
            f"mask for {gh * p}x{gw * p} does not fit plane {tuple(plane.shape)}")
    pix = mask.pixel_mask()
    if isinstance(plane, torch.Tensor):
        keep = torch.from_numpy(~pix).to(plane.device).unsqueeze(-1)
        return torch.where(keep, plane, torch.as_tensor(
            fill, dtype=plane.dtype, device=plane.device))
    out = plane.copy()
    out[pix] = fill
    return out
