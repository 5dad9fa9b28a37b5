"""Few-shot HDR deghosting toolkit.

Library plus batch CLI for fusing three-exposure LDR brackets into a
ghost-free HDR radiance image.  Training runs in three phases: masked
self-supervised pretraining on unlabeled brackets, supervised finetuning
on a handful of labeled samples, and an iterative semi-supervised loop
that trains on model-generated pseudo-labels filtered by an adaptive
quality-selection rule.
"""

__version__ = "0.1.0"

from hdrfuse.transforms import (
    GammaParams,
    exposure_adjust,
    hdr_to_ldr,
    ldr_to_hdr,
    make_pretrain_targets,
    make_six_channel_input,
    mu_law_tonemap,
)

__all__ = [
    "GammaParams",
    "exposure_adjust",
    "hdr_to_ldr",
    "ldr_to_hdr",
    "make_pretrain_targets",
    "make_six_channel_input",
    "mu_law_tonemap",
    "__version__",
]
