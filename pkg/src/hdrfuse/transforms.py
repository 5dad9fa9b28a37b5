"""Deterministic domain math between LDR, linear HDR, and tonemapped images.

All functions are elementwise, per-channel, and work on numpy arrays and
torch tensors alike (torch inputs stay differentiable).  LDR pixels live
in [0, 1]; linear radiance is non-negative and, by dataset convention,
normalized to [0, 1] in the frame it is aligned to.  Exposure times come
from EV stops (t = 2^EV); only ratios enter the math, so callers pick the
reference frame by normalizing the times they pass in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class GammaParams:
    """Display gamma and mu-law compression strength."""

    gamma: float = 2.2
    mu: float = 5000.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")


def _clip01(x):
    if isinstance(x, torch.Tensor):
        return x.clamp(0.0, 1.0)
    return np.clip(x, 0.0, 1.0)


def _log1p(x):
    if isinstance(x, torch.Tensor):
        return torch.log1p(x)
    return np.log1p(x)


def _check_time(t, name: str = "t") -> None:
    t = float(t)
    if not math.isfinite(t) or t <= 0:
        raise ValueError(f"{name} must be a positive finite exposure time, got {t}")


def exposure_adjust(x, t_src: float, t_dst: float, gamma: float = 2.2):
    """Re-expose an LDR image from exposure time ``t_src`` to ``t_dst``.

    The image is linearized with the display gamma, scaled by the exposure
    ratio, and brought back to the LDR domain; the result is clipped to
    [0, 1], which reproduces the saturation a longer real exposure would
    show.  Identity when ``t_src == t_dst``.
    """
    _check_time(t_src, "t_src")
    _check_time(t_dst, "t_dst")
    linear = (x ** gamma) * (t_dst / t_src)
    return _clip01(linear ** (1.0 / gamma))


def ldr_to_hdr(x, t: float, gamma: float = 2.2):
    """Map an LDR image to linear radiance: x^gamma / t."""
    _check_time(t)
    return (x ** gamma) / t


def hdr_to_ldr(y, t: float, gamma: float = 2.2, clip: bool = True):
    """Render linear radiance at exposure time ``t``: (y * t)^(1/gamma).

    Clipping to [0, 1] (the default) matches LDR semantics and is what the
    losses compare against; pass ``clip=False`` for the exact algebraic
    inverse of :func:`ldr_to_hdr`.
    """
    _check_time(t)
    ldr = (y * t) ** (1.0 / gamma)
    return _clip01(ldr) if clip else ldr


def make_pretrain_targets(x_short, times: Sequence[float], gamma: float = 2.2):
    """Synthesize the three bracket targets from the short-exposure frame.

    Returns the short frame re-exposed to each of the three exposure times
    (clipped to [0, 1]); the first target is the input frame unchanged.
    These are the reconstruction targets of the self-supervised phase.
    """
    if len(times) != 3:
        raise ValueError(f"expected three exposure times, got {len(times)}")
    t1, t2, t3 = times
    for t in times:
        _check_time(t)
    # Unit exposure ratio is the identity; returning the input directly keeps
    # the first target bit-exact instead of a power round-trip.
    return (
        x_short,
        exposure_adjust(x_short, t1, t2, gamma),
        exposure_adjust(x_short, t1, t3, gamma),
    )


def mu_law_tonemap(y, mu: float = 5000.0):
    """Compress radiance in [0, 1] with the mu-law curve log(1+mu*y)/log(1+mu).

    Strictly increasing with fixed points at 0 and 1.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    return _log1p(mu * y) / math.log1p(mu)


def make_six_channel_input(x, t: float, gamma: float = 2.2):
    """Concatenate an LDR frame with its linear-radiance version along channels.

    Input is H x W x 3 (channel-last); output is H x W x 6 with the LDR
    pixels in channels 0-2 and ``ldr_to_hdr(x, t)`` in channels 3-5.
    """
    hdr = ldr_to_hdr(x, t, gamma)
    if isinstance(x, torch.Tensor):
        return torch.cat([x, hdr], dim=-1)
    return np.concatenate([x, hdr], axis=-1)
