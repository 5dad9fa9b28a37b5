"""Bracket dataset I/O, cropping, and a synthetic scene generator.

Sample layout: one directory per sample holding ``ldr_1``/``ldr_2``/``ldr_3``
(PNG 8/16-bit or PFM), ``exposures.txt`` with three EV lines, and optional
``gt.pfm`` or ``gt.hdr``.  A top-level ``manifest.json`` assigns roles:

    {"samples": [{"id": ..., "path": ..., "role": "U"|"S"|"D"}], "seed": ...}

Exposure times are handled as ratios relative to the short frame
(EVs {-2, 0, +2} give {1, 4, 16}), which keeps ground-truth radiance in
[0, 1] whenever the short frame is unclipped.  PNG values normalize as
value / (2^bits - 1).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

ROLES = ("U", "S", "D")
LDR_EXTENSIONS = (".png", ".pfm")
GT_CANDIDATES = ("gt.pfm", "gt.hdr")
DEFAULT_EVS = (-2.0, 0.0, 2.0)


class DataError(ValueError):
    """Dataset is missing, malformed, or violates a sample invariant."""


def read_image(path) -> np.ndarray:
    """Load an image as float32 H x W x 3 RGB.

    PNG comes back normalized by its bit depth; PFM and Radiance HDR are
    linear floats passed through unchanged.
    """
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float32) / 65535.0
    else:
        img = raw.astype(np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.shape[-1] == 4:
        img = img[..., :3]
    return np.ascontiguousarray(img[..., ::-1])  # BGR -> RGB


def write_image(path, img: np.ndarray) -> Path:
    """Write RGB float data; .png as 16-bit, .pfm/.hdr as float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    bgr = np.ascontiguousarray(img[..., ::-1])
    ext = path.suffix.lower()
    if ext == ".png":
        data = np.round(np.clip(bgr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    elif ext in (".pfm", ".hdr"):
        data = bgr
    else:
        raise DataError(f"unsupported image extension {ext!r} for {path}")
    if not cv2.imwrite(str(path), data):
        raise DataError(f"failed to write image {path}")
    return path


@dataclass(frozen=True)
class ExposureStack:
    """Three ascending exposures of one scene, with optional ground truth.

    ``gt`` is scene radiance in short-frame units, spatially aligned to the
    medium (reference) frame.  Labeled roles (S, D) require it; unlabeled
    samples may carry one only as oracle data for synthetic tests.
    """

    ldr_1: np.ndarray
    ldr_2: np.ndarray
    ldr_3: np.ndarray
    evs: tuple[float, float, float]
    gt: Optional[np.ndarray] = None
    role: str = "U"
    sample_id: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        if not (self.evs[0] < self.evs[1] < self.evs[2]):
            raise DataError(f"EVs must be strictly increasing, got {self.evs}")
        shape = self.ldr_1.shape
        if self.ldr_2.shape != shape or self.ldr_3.shape != shape:
            raise DataError("all three LDR frames must share one shape")
        if self.role in ("S", "D") and self.gt is None:
            raise DataError(
                f"sample {self.sample_id!r} has role {self.role} but no ground truth")
        if self.gt is not None and self.gt.shape[:2] != shape[:2]:
            raise DataError("ground truth spatial dims must match the frames")

    @property
    def frames(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.ldr_1, self.ldr_2, self.ldr_3)

    @property
    def times(self) -> tuple[float, float, float]:
        """Exposure ratios relative to the short frame."""
        return tuple(float(2.0 ** (ev - self.evs[0])) for ev in self.evs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ldr_1.shape[:2]

    def with_gt(self, gt: np.ndarray) -> "ExposureStack":
        """Copy of this stack with a different target (e.g. a pseudo-label)."""
        return replace(self, gt=gt)


def _find_ldr(sample_dir: Path, stem: str) -> Path:
    for ext in LDR_EXTENSIONS:
        p = sample_dir / (stem + ext)
        if p.exists():
            return p
    raise DataError(f"missing {stem}{{{','.join(LDR_EXTENSIONS)}}} in {sample_dir}")


def _read_evs(sample_dir: Path) -> tuple[float, float, float]:
    path = sample_dir / "exposures.txt"
    if not path.exists():
        raise DataError(f"missing {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 3:
        raise DataError(f"{path} must hold exactly 3 EV lines, found {len(lines)}")
    try:
        evs = tuple(float(ln) for ln in lines)
    except ValueError as exc:
        raise DataError(f"{path} holds a non-numeric EV: {exc}") from exc
    if not (evs[0] < evs[1] < evs[2]):
        raise DataError(f"{path}: EVs must be strictly increasing, got {evs}")
    return evs


def load_bracket(sample_dir, role: str = "U",
                 sample_id: Optional[str] = None) -> ExposureStack:
    """Read one sample directory into an :class:`ExposureStack`."""
    sample_dir = Path(sample_dir)
    if not sample_dir.is_dir():
        raise DataError(f"sample directory {sample_dir} does not exist")
    frames = [read_image(_find_ldr(sample_dir, f"ldr_{i}")) for i in (1, 2, 3)]
    evs = _read_evs(sample_dir)
    gt = None
    if role in ("S", "D"):
        for name in GT_CANDIDATES:
            p = sample_dir / name
            if p.exists():
                gt = read_image(p)
                break
        if gt is None:
            raise DataError(
                f"role {role} sample {sample_dir} is missing "
                f"{' or '.join(GT_CANDIDATES)}")
    return ExposureStack(*frames, evs=evs, gt=gt, role=role,
                         sample_id=sample_id or sample_dir.name)


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if "samples" not in manifest or not isinstance(manifest["samples"], list):
        raise DataError(f"manifest {path} lacks a 'samples' list")
    return manifest


def write_manifest(root, samples: Sequence[dict], seed: int) -> Path:
    path = Path(root) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(
        {"samples": list(samples), "seed": seed}, indent=2) + "\n")
    return path


def load_dataset(root, roles: Optional[Sequence[str]] = None) -> list[ExposureStack]:
    """Load every manifest sample, optionally filtered to the given roles."""
    root = Path(root)
    manifest = load_manifest(root)
    stacks = []
    for entry in manifest["samples"]:
        for key in ("id", "path", "role"):
            if key not in entry:
                raise DataError(f"manifest entry {entry} lacks {key!r}")
        if entry["role"] not in ROLES:
            raise DataError(
                f"manifest sample {entry['id']}: bad role {entry['role']!r}")
        if roles is not None and entry["role"] not in roles:
            continue
        stacks.append(load_bracket(root / entry["path"], role=entry["role"],
                                   sample_id=entry["id"]))
    return stacks


def write_sample(sample_dir, stack: ExposureStack, ldr_format: str = "png",
                 gt_format: str = "pfm", write_gt: Optional[bool] = None) -> Path:
    """Write one stack in the on-disk layout.  By default ground truth is
    written only for labeled roles."""
    sample_dir = Path(sample_dir)
    sample_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(stack.frames, start=1):
        write_image(sample_dir / f"ldr_{i}.{ldr_format}", frame)
    (sample_dir / "exposures.txt").write_text(
        "".join(f"{ev:g}\n" for ev in stack.evs))
    if write_gt is None:
        write_gt = stack.role in ("S", "D")
    if write_gt:
        if stack.gt is None:
            raise DataError(f"sample {stack.sample_id!r} has no gt to write")
        write_image(sample_dir / f"gt.{gt_format}", stack.gt)
    return sample_dir


def _crop_positions(extent: int, size: int, stride: int) -> list[int]:
    return list(range(0, extent - size + 1, stride))


def _center_pad(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    py, px = max(0, size - h), max(0, size - w)
    pad = ((py // 2, py - py // 2), (px // 2, px - px // 2))
    if img.ndim == 3:
        pad = pad + ((0, 0),)
    return np.pad(img, pad, mode="constant")


def crop_patches(stack: ExposureStack, size: int, stride: int,
                 rng: Optional[np.random.Generator] = None) -> list[ExposureStack]:
    """Aligned crops across all frames and gt on a deterministic grid.

    With an rng, each grid position gets an independent jitter in
    [0, stride) clamped to the image, so the crop count never changes.
    A crop larger than the image degrades to one zero-padded center crop.
    """
    h, w = stack.shape
    if size > h or size > w:
        warnings.warn(
            f"crop {size} exceeds image {h}x{w}; using one padded center crop",
            stacklevel=2)
        planes = [_center_pad(f, size) for f in stack.frames]
        gt = _center_pad(stack.gt, size) if stack.gt is not None else None
        return [replace(stack, ldr_1=planes[0], ldr_2=planes[1],
                        ldr_3=planes[2], gt=gt,
                        sample_id=f"{stack.sample_id}#pad")]
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    crops = []
    for y0 in _crop_positions(h, size, stride):
        for x0 in _crop_positions(w, size, stride):
            y, x = y0, x0
            if rng is not None:
                y = min(y0 + int(rng.integers(0, stride)), h - size)
                x = min(x0 + int(rng.integers(0, stride)), w - size)
            sl = (slice(y, y + size), slice(x, x + size))
            gt = stack.gt[sl] if stack.gt is not None else None
            crops.append(replace(
                stack,
                ldr_1=stack.ldr_1[sl], ldr_2=stack.ldr_2[sl],
                ldr_3=stack.ldr_3[sl], gt=gt,
                sample_id=f"{stack.sample_id}#{y}_{x}"))
    return crops


@dataclass(frozen=True)
class SynthSceneParams:
    """Knobs for one rendered scene."""

    size: tuple[int, int] = (64, 64)
    motion_px: int = 3
    saturation_frac: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0
    evs: tuple[float, float, float] = DEFAULT_EVS

    def __post_init__(self):
        if self.motion_px < 0:
            raise ValueError(f"motion_px must be >= 0, got {self.motion_px}")
        if not 0.0 <= self.saturation_frac < 1.0:
            raise ValueError(
                f"saturation_frac must be in [0, 1), got {self.saturation_frac}")


def _render_fields(params: SynthSceneParams, rng: np.random.Generator):
    """Unscaled radiance layers: background, foreground, foreground mask."""
    h, w = params.size
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w),
                         indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    background = 0.25 + 0.4 * (np.cos(angle) * xx + np.sin(angle) * yy)
    background += 0.1 * np.sin(2 * np.pi * (xx * rng.uniform(1, 3)
                                            + rng.uniform()))
    background = np.abs(background)

    fg_mask = np.zeros((h, w), dtype=bool)
    fg_field = np.zeros((h, w), dtype=np.float64)
    for _ in range(3):
        cy, cx = rng.integers(h // 8, 7 * h // 8), rng.integers(w // 8, 7 * w // 8)
        r = int(rng.integers(max(2, h // 16), max(3, h // 5)))
        if rng.random() < 0.5:
            region = (np.abs(yy * (h - 1) - cy) < r) & (np.abs(xx * (w - 1) - cx) < r)
        else:
            region = ((yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2) < r * r
        level = rng.uniform(1.5, 4.0)
        texture = 1.0 + 0.2 * np.sin(2 * np.pi * (xx * rng.uniform(4, 9)
                                                  + yy * rng.uniform(4, 9)))
        fg_field = np.where(region, level * texture, fg_field)
        fg_mask |= region
    return background, fg_field, fg_mask


def synth_scene(params: SynthSceneParams, role: str = "U",
                sample_id: str = "synth") -> ExposureStack:
    """Render a bracket with known radiance.

    The foreground is displaced by ``motion_px`` per frame step around the
    reference; the long frame's clipped-pixel fraction is calibrated to
    ``saturation_frac`` by scaling the radiance field.  Ground truth is the
    radiance at the reference position, always attached regardless of role.
    """
    rng = np.random.default_rng(params.seed)
    background, fg_field, fg_mask = _render_fields(params, rng)
    tint_bg = rng.uniform(0.6, 1.0, size=3)
    tint_fg = rng.uniform(0.6, 1.0, size=3)

    def radiance(shift: int) -> np.ndarray:
        mask = np.roll(fg_mask, shift, axis=1)
        field = np.roll(fg_field, shift, axis=1)
        rgb = background[..., None] * tint_bg
        return np.where(mask[..., None], field[..., None] * tint_fg, rgb)

    times = tuple(2.0 ** (ev - params.evs[0]) for ev in params.evs)
    long_field = radiance(params.motion_px)
    peak = long_field.max(axis=-1)
    if params.saturation_frac > 0:
        thresh = np.quantile(peak, 1.0 - params.saturation_frac)
        scale = (1.0 / times[2]) / max(thresh, 1e-12)
    else:
        scale = 0.999 / (times[2] * peak.max())

    gamma = 2.2
    frames = []
    for i, t in enumerate(times):
        shift = (i - 1) * params.motion_px
        y = np.minimum(radiance(shift) * scale, 1.0)
        ldr = np.clip((y * t) ** (1.0 / gamma), 0.0, 1.0)
        if params.noise_sigma > 0:
            ldr = np.clip(ldr + rng.normal(0, params.noise_sigma, ldr.shape),
                          0.0, 1.0)
        frames.append(ldr.astype(np.float32))

    gt = np.minimum(radiance(0) * scale, 1.0).astype(np.float32)
    return ExposureStack(*frames, evs=params.evs, gt=gt, role=role,
                         sample_id=sample_id)


def make_synth_dataset(root, n_unlabeled: int, m_static: int, k_dynamic: int,
                       size: tuple[int, int] = (64, 64), seed: int = 0,
                       motion_px: int = 3, saturation_frac: float = 0.1,
                       noise_sigma: float = 0.0,
                       evs: tuple[float, float, float] = DEFAULT_EVS) -> Path:
    """Write N unlabeled + M static + K dynamic samples plus a manifest.

    Unlabeled samples move and get no gt file; static labeled samples have
    zero motion; dynamic labeled samples move and keep their gt.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    specs = ([("u", "U", motion_px)] * n_unlabeled
             + [("s", "S", 0)] * m_static
             + [("d", "D", motion_px)] * k_dynamic)
    child_seeds = np.random.SeedSequence(seed).generate_state(max(len(specs), 1))
    entries = []
    counters = {"u": 0, "s": 0, "d": 0}
    for idx, (prefix, role, motion) in enumerate(specs):
        name = f"{prefix}_{counters[prefix]:03d}"
        counters[prefix] += 1
        params = SynthSceneParams(size=size, motion_px=motion,
                                  saturation_frac=saturation_frac,
                                  noise_sigma=noise_sigma,
                                  seed=int(child_seeds[idx]), evs=evs)
        stack = synth_scene(params, role=role, sample_id=name)
        write_sample(root / name, stack)
        entries.append({"id": name, "path": name, "role": role})
    write_manifest(root, entries, seed)
    return root
