"""Training losses for both stages.

Pretraining compares the predicted radiance re-exposed at each bracket time
against the synthesized exposure stack.  Finetuning compares tonemapped
radiance against ground truth, optionally with a frozen feature backbone as
a perceptual term.  The semi-supervised composite adds per-sample weighted
unlabeled terms on top of the labeled ones and is linear in each weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .masking import PatchMask
from .transforms import mu_law_tonemap

SSL_LOSS_MODES = ("all", "masked_only")

# keeps the re-exposure power law differentiable at zero radiance
REEXPOSE_EPS = 1e-10


def _pixel_mask_tensor(mask, pred: torch.Tensor) -> torch.Tensor:
    """Normalize a mask (PatchMask, H x W, or B x H x W) to B x H x W bool."""
    if isinstance(mask, PatchMask):
        pix = mask.pixel_mask()
    else:
        pix = mask
    m = torch.as_tensor(np.asarray(pix) if not torch.is_tensor(pix) else pix,
                        device=pred.device)
    if m.dtype != torch.bool:
        m = m != 0
    if m.dim() == 2:
        m = m.unsqueeze(0).expand(pred.shape[0], -1, -1)
    if m.shape != (pred.shape[0], *pred.shape[-2:]):
        raise ValueError(
            f"mask shape {tuple(m.shape)} does not match batch {tuple(pred.shape)}")
    return m


def ssl_loss(pred: torch.Tensor,
             targets: Sequence[torch.Tensor],
             times: Sequence[float],
             gamma: float = 2.2,
             mask=None,
             loss_on: str = "all") -> torch.Tensor:
    """Sum over bracket positions of mean L1 between the prediction
    re-exposed at that position and the corresponding target frame.

    ``loss_on="masked_only"`` restricts every mean to pixels hidden from
    the encoder (requires ``mask``); ``"all"`` averages over the full image.

    The re-exposed prediction is clipped to [0, 1] like the targets were;
    otherwise pixels saturated at the longer exposures receive mutually
    contradictory targets across the sum and the loss acquires an
    irreducible floor.  Clipping costs no gradient coverage: the shortest
    exposure term never clips (sigmoid output times t=1 stays in range),
    so every pixel keeps a live path.  The power-law base is offset by a
    tiny epsilon because d(x^(1/gamma))/dx diverges at x = 0: a prediction
    that underflows to exact zero would otherwise poison the backward pass
    with NaNs.
    """
    if loss_on not in SSL_LOSS_MODES:
        raise ValueError(f"loss_on must be one of {SSL_LOSS_MODES}, got {loss_on!r}")
    if len(targets) != len(times):
        raise ValueError(f"{len(targets)} targets but {len(times)} times")
    if loss_on == "masked_only" and mask is None:
        raise ValueError("loss_on='masked_only' requires a mask")

    pix = _pixel_mask_tensor(mask, pred) if loss_on == "masked_only" else None
    total = pred.new_zeros(())
    inv_gamma = 1.0 / gamma
    for target, t in zip(targets, times):
        if t <= 0:
            raise ValueError(f"exposure time must be positive, got {t}")
        reexposed = ((pred * t).clamp_min(0) + REEXPOSE_EPS) \
            .pow(inv_gamma).clamp_max(1.0)
        diff = (reexposed - target).abs()
        if pix is None:
            total = total + diff.mean()
        else:
            m = pix.to(diff.dtype)
            total = total + (diff * m.unsqueeze(1)).sum() / (m.sum() * diff.shape[1])
    return total


def recon_loss(pred: torch.Tensor, target: torch.Tensor,
               mu: float = 5000.0) -> torch.Tensor:
    """Mean L1 between log-compressed prediction and target radiance."""
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (mu_law_tonemap(pred, mu) - mu_law_tonemap(target, mu)).abs().mean()


class PerceptualBackbone(nn.Module):
    """Frozen convolutional feature extractor for the perceptual term.

    ``kind="random"`` builds a seeded random conv stack (no downloads, fully
    deterministic); ``kind="vgg19"`` pulls torchvision's pretrained VGG19 at
    construction time.  ``taps`` is how many feature stages contribute.
    """

    CHANNELS = (16, 32, 64, 128, 128)
    VGG_TAPS = (3, 8, 17, 26, 35)  # relu1_2, relu2_2, relu3_4, relu4_4, relu5_4

    def __init__(self, kind: str = "random", taps: int = 3, seed: int = 0):
        super().__init__()
        if not 1 <= taps <= len(self.CHANNELS):
            raise ValueError(f"taps must be in [1, {len(self.CHANNELS)}], got {taps}")
        self.kind = kind
        self.taps = taps
        if kind == "random":
            self.stages = self._build_random(taps, seed)
        elif kind == "vgg19":
            self.stages = self._build_vgg(taps)
        else:
            raise ValueError(f"unknown backbone kind {kind!r}")
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _build_random(self, taps: int, seed: int) -> nn.ModuleList:
        gen = torch.Generator().manual_seed(seed)
        stages = nn.ModuleList()
        c_in = 3
        for c_out in self.CHANNELS[:taps]:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                std = (2.0 / (c_in * 9)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU(inplace=False)))
            c_in = c_out
        return stages

    def _build_vgg(self, taps: int) -> nn.ModuleList:
        try:
            from torchvision.models import vgg19, VGG19_Weights
        except ImportError as exc:
            raise ImportError(
                "backbone 'vgg19' needs torchvision; install it or use "
                "the default 'random' backbone") from exc
        features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        stages = nn.ModuleList()
        start = 0
        for end in self.VGG_TAPS[:taps]:
            stages.append(nn.Sequential(*list(features.children())[start:end + 1]))
            start = end + 1
        return stages

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def train(self, mode: bool = True):  # stays frozen under model.train()
        return super().train(False)


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor,
                    backbone: PerceptualBackbone) -> torch.Tensor:
    """Sum over backbone stages of mean L1 feature distance."""
    feats_p = backbone(pred)
    with torch.no_grad():
        feats_t = backbone(target)
    total = pred.new_zeros(())
    for fp, ft in zip(feats_p, feats_t):
        total = total + (fp - ft).abs().mean()
    return total


def finetune_loss(pred: torch.Tensor, target: torch.Tensor,
                  backbone: Optional[PerceptualBackbone] = None,
                  lam: float = 1e-2, mu: float = 5000.0):
    """Tonemapped reconstruction plus ``lam`` times the perceptual term.

    Returns ``(total, parts)`` where ``parts`` maps term names to floats.
    """
    l_rec = recon_loss(pred, target, mu)
    parts = {"recon": float(l_rec.detach())}
    total = l_rec
    if backbone is not None and lam > 0:
        l_per = perceptual_loss(mu_law_tonemap(pred, mu),
                                mu_law_tonemap(target, mu), backbone)
        parts["percep"] = float(l_per.detach())
        total = total + lam * l_per
    parts["total"] = float(total.detach())
    return total, parts


@dataclass
class LossTerms:
    """Scalar decomposition of one semi-supervised step, for logging."""

    dynamic: float
    static: float
    unlabeled: float
    total: float

    def to_dict(self) -> dict:
        return {"dynamic": self.dynamic, "static": self.static,
                "unlabeled": self.unlabeled, "total": self.total}


def iteration_loss(loss_dynamic: torch.Tensor,
                   loss_static: Union[torch.Tensor, float],
                   unlabeled_losses: torch.Tensor,
                   weights: torch.Tensor):
    """Labeled terms plus the weighted sum of per-sample unlabeled losses.

    ``unlabeled_losses`` and ``weights`` are matching 1-D tensors; the
    contribution is exactly ``sum(w_i * l_i)``, linear in every weight.
    Returns ``(total, LossTerms)``.
    """
    if unlabeled_losses.dim() != 1 or weights.dim() != 1:
        raise ValueError("unlabeled losses and weights must be 1-D")
    if unlabeled_losses.shape != weights.shape:
        raise ValueError(
            f"{unlabeled_losses.shape[0]} unlabeled losses but "
            f"{weights.shape[0]} weights")
    if bool((weights < 0).any()) or bool((weights > 1).any()):
        raise ValueError("weights must lie in [0, 1]")
    ls = loss_static if isinstance(loss_static, torch.Tensor) \
        else torch.as_tensor(float(loss_static))
    unlab = (weights.detach() * unlabeled_losses).sum()
    total = loss_dynamic + ls + unlab
    terms = LossTerms(float(loss_dynamic.detach()), float(ls.detach()),
                      float(unlab.detach()), float(total.detach()))
    return total, terms
