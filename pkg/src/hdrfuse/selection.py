"""Adaptive selection of pseudo-labeled samples for the semi-supervised loop.

Each unlabeled sample gets a scalar agreement score between the current
prediction and its pseudo label, measured only where the input bracket is
well exposed.  A percentile of the labeled samples' scores sets the
acceptance threshold; samples beyond it get linearly decaying weights
instead of a hard cut.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .transforms import mu_law_tonemap

DEFAULT_BETA = 85.0
DEFAULT_EPS_LOW = 0.05
DEFAULT_EPS_HIGH = 0.95


def well_exposed_mask(frames: Union[np.ndarray, Sequence[np.ndarray]],
                      eps_low: float = DEFAULT_EPS_LOW,
                      eps_high: float = DEFAULT_EPS_HIGH) -> np.ndarray:
    """Boolean H x W map of pixels strictly inside (eps_low, eps_high)
    in every channel of every given frame."""
    if not 0.0 <= eps_low < eps_high <= 1.0:
        raise ValueError(
            f"need 0 <= eps_low < eps_high <= 1, got ({eps_low}, {eps_high})")
    if isinstance(frames, np.ndarray):
        frames = [frames]
    if not frames:
        raise ValueError("need at least one frame")
    mask = None
    shape = frames[0].shape[:2]
    for f in frames:
        f = np.asarray(f)
        if f.shape[:2] != shape:
            raise ValueError("frames must share spatial dims")
        ok = np.all((f > eps_low) & (f < eps_high), axis=-1) if f.ndim == 3 \
            else (f > eps_low) & (f < eps_high)
        mask = ok if mask is None else (mask & ok)
    return mask


def selection_loss(pred: np.ndarray, pseudo: np.ndarray,
                   valid: Optional[np.ndarray] = None,
                   mu: float = 5000.0) -> float:
    """Mean tonemapped L1 between prediction and pseudo label over valid
    pixels.  NaN when no pixel is valid (the sample is unselectable)."""
    pred = np.asarray(pred, dtype=np.float64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if pred.shape != pseudo.shape:
        raise ValueError(
            f"shape mismatch: {pred.shape} vs {pseudo.shape}")
    diff = np.abs(mu_law_tonemap(pred, mu) - mu_law_tonemap(pseudo, mu))
    if valid is None:
        return float(diff.mean())
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != pred.shape[:2]:
        raise ValueError(
            f"valid mask {valid.shape} does not match image {pred.shape[:2]}")
    if not valid.any():
        return float("nan")
    return float(diff[valid].mean())


def pooled_selection_losses(pred: np.ndarray, pseudo: np.ndarray,
                            valid: Optional[np.ndarray] = None,
                            pool: int = 64, mu: float = 5000.0) -> np.ndarray:
    """Per-cell selection losses on a pool x pool grid, row-major.

    Cells without any valid pixel come back NaN.
    """
    h, w = np.asarray(pred).shape[:2]
    if pool <= 0 or h % pool or w % pool:
        raise ValueError(f"pool {pool} must divide image dims {h}x{w}")
    out = []
    for i in range(0, h, pool):
        for j in range(0, w, pool):
            v = None if valid is None else valid[i:i + pool, j:j + pool]
            out.append(selection_loss(pred[i:i + pool, j:j + pool],
                                      pseudo[i:i + pool, j:j + pool], v, mu))
    return np.array(out, dtype=np.float64)


def compute_threshold(labeled_losses: Sequence[float],
                      beta: float = DEFAULT_BETA) -> float:
    """beta-th percentile (linear interpolation) of the labeled samples'
    selection losses."""
    losses = np.asarray(labeled_losses, dtype=np.float64)
    losses = losses[np.isfinite(losses)]
    if losses.size == 0:
        raise ValueError("no finite labeled losses to take a percentile of")
    if not 0.0 < beta <= 100.0:
        raise ValueError(f"beta must be in (0, 100], got {beta}")
    return float(np.percentile(losses, beta))


def assign_weights(unlabeled_losses: Sequence[float], tau: float) -> np.ndarray:
    """Per-sample weights in [0, 1].

    loss <= tau gets weight 1; above tau the weight falls off linearly to 0
    at the worst loss m, as (m - loss) / (m - tau).  If even the worst loss
    is within the threshold everyone gets 1.  NaN losses get 0.
    """
    losses = np.asarray(unlabeled_losses, dtype=np.float64)
    weights = np.zeros(losses.shape, dtype=np.float64)
    finite = np.isfinite(losses)
    if not finite.any():
        return weights
    m = losses[finite].max()
    if m <= tau:
        weights[finite] = 1.0
        return weights
    lf = losses[finite]
    w = np.where(lf <= tau, 1.0, (m - lf) / (m - tau))
    weights[finite] = np.clip(w, 0.0, 1.0)
    return weights


@dataclass
class SelectionRecord:
    """Everything one selection round decided, for the per-timestep report."""

    timestep: int
    beta: float
    tau: float
    labeled_losses: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)
    unlabeled_losses: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    @classmethod
    def build(cls, timestep: int, beta: float, tau: float,
              labeled_losses: Sequence[float], sample_ids: Sequence[str],
              unlabeled_losses: Sequence[float],
              weights: Sequence[float]) -> "SelectionRecord":
        if not (len(sample_ids) == len(unlabeled_losses) == len(weights)):
            raise ValueError("ids, losses and weights must align")
        return cls(timestep=timestep, beta=float(beta), tau=float(tau),
                   labeled_losses=[float(x) for x in labeled_losses],
                   sample_ids=list(sample_ids),
                   unlabeled_losses=[float(x) for x in unlabeled_losses],
                   weights=[float(w) for w in weights])

    def to_dict(self) -> dict:
        n_full = sum(1 for w in self.weights if w >= 1.0)
        n_partial = sum(1 for w in self.weights if 0.0 < w < 1.0)
        samples = [
            {
                "id": sid,
                "loss": None if not np.isfinite(loss) else loss,
                "weight": w,
                "selectable": bool(np.isfinite(loss)),
            }
            for sid, loss, w in zip(self.sample_ids, self.unlabeled_losses,
                                    self.weights)
        ]
        return {
            "timestep": self.timestep,
            "beta": self.beta,
            "tau": self.tau,
            "n_unlabeled": len(self.sample_ids),
            "n_full_weight": n_full,
            "n_partial_weight": n_partial,
            "labeled_losses": self.labeled_losses,
            "samples": samples,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def load_selection_record(path) -> dict:
    return json.loads(Path(path).read_text())
