"""Training phases and inference.

Order is fixed: pretraining on unlabeled brackets (masked single-exposure
reconstruction), finetuning on the small labeled set, then the iterative
semi-supervised loop where each timestep regenerates pseudo-labels, scores
them against a labeled-percentile threshold, and trains one epoch on the
weighted mix.  Every run writes ``ckpt/``, ``logs/metrics.jsonl`` (one JSON
object per line, no timestamps), and ``apss/timestep_<t>.json``.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .config import RunConfig
from .datasets import DataError, ExposureStack, crop_patches
from .losses import PerceptualBackbone, finetune_loss, iteration_loss, ssl_loss
from .masking import apply_mask, sample_mask
from .metrics import EvalReport
from .network import (BracketFusionNet, Checkpoint, load_checkpoint,
                      save_checkpoint)
from .selection import (SelectionRecord, assign_weights, compute_threshold,
                        pooled_selection_losses, selection_loss,
                        well_exposed_mask)
from .transforms import make_pretrain_targets, make_six_channel_input, \
    mu_law_tonemap


class NumericalAbort(RuntimeError):
    """Loss went non-finite; diagnostics were dumped to the run directory."""


_PHASE_IDS = {"pretrain": 1, "finetune": 2, "iterate": 3}


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(_PHASE_IDS[phase], epoch))
    return np.random.default_rng(ss)


class MetricsLogger:
    """Appends one JSON object per line to logs/metrics.jsonl."""

    def __init__(self, run_dir):
        path = Path(run_dir) / "logs" / "metrics.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("a")
        self.path = path

    def log(self, **record) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _abort(run_dir, phase: str, step: int, lr: float, detail: dict) -> None:
    dump = {"phase": phase, "step": step, "lr": lr, **detail}
    path = Path(run_dir) / "logs" / "abort_dump.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dump, indent=2) + "\n")
    raise NumericalAbort(
        f"non-finite loss at {phase} step {step}; diagnostics in {path}")


def _check_finite(loss: torch.Tensor, run_dir, phase, step, lr, inputs) -> None:
    if torch.isfinite(loss):
        return
    stats = {}
    for name, arr in inputs.items():
        a = arr.detach() if torch.is_tensor(arr) else torch.as_tensor(arr)
        stats[name] = {"min": float(a.min()), "max": float(a.max()),
                       "mean": float(a.float().mean())}
    _abort(run_dir, phase, step, lr, {"loss": float(loss), "inputs": stats})


def _to_bchw(arrays: Sequence[np.ndarray], device) -> torch.Tensor:
    batch = np.stack([np.asarray(a, dtype=np.float32) for a in arrays])
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous().to(device)


def _make_optimizer(model, cfg: RunConfig) -> torch.optim.Adam:
    t = cfg.train
    return torch.optim.Adam(model.parameters(), lr=t.lr,
                            betas=(t.beta1, t.beta2), eps=t.eps)


def _step(model, optimizer, loss, clip: float) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()


def _grouped_batches(items: list, batch_size: int, rng: np.random.Generator,
                     key_fn) -> list:
    """Shuffle into batches, keeping each batch homogeneous under key_fn."""
    groups: dict = {}
    for item in items:
        groups.setdefault(key_fn(item), []).append(item)
    batches = []
    for key in sorted(groups):
        members = groups[key]
        order = rng.permutation(len(members))
        for i in range(0, len(members), batch_size):
            batches.append([members[j] for j in order[i:i + batch_size]])
    final = rng.permutation(len(batches))
    return [batches[i] for i in final]


def _epoch_crops(stacks: Sequence[ExposureStack], cfg: RunConfig,
                 rng: Optional[np.random.Generator]) -> list[ExposureStack]:
    crops = []
    jitter_rng = rng if cfg.train.jitter else None
    for stack in stacks:
        crops.extend(crop_patches(stack, cfg.train.crop, cfg.train.stride,
                                  jitter_rng))
    return crops


def _backbone_from(cfg: RunConfig) -> Optional[PerceptualBackbone]:
    if cfg.loss.lam <= 0:
        return None
    return PerceptualBackbone(cfg.loss.backbone, cfg.loss.taps,
                              seed=cfg.train.seed)


def pretrain(cfg: RunConfig, unlabeled: Sequence[ExposureStack], run_dir,
             init: Optional[Checkpoint] = None) -> Path:
    """Masked single-exposure pretraining; writes ckpt/pretrained.pt.

    Only the short frame of each bracket is used: the two brighter inputs
    and all three targets are synthesized from it, the inputs are patch-
    masked, and the loss compares the re-exposed prediction against the
    unmasked synthesized frames.
    """
    if not unlabeled:
        raise DataError("pretraining needs at least one sample")
    run_dir = Path(run_dir)
    t = cfg.train
    gamma = cfg.data.gamma
    device = torch.device(t.device)

    seed_everything(t.seed)
    if init is not None:
        model = init.build_model()
        global_step = init.step
        parent = init.ckpt_id or None
    else:
        model = BracketFusionNet(cfg.network_config())
        global_step = 0
        parent = None
    model.to(device).train()
    optimizer = _make_optimizer(model, cfg)

    with MetricsLogger(run_dir) as logger:
        for epoch in range(t.epochs):
            rng = _epoch_rng(t.seed, "pretrain", epoch)
            crops = _epoch_crops(unlabeled, cfg, rng)
            batches = _grouped_batches(crops, t.batch_size, rng,
                                       key_fn=lambda c: c.evs)
            epoch_losses = []
            for batch in batches:
                times = batch[0].times
                planes = [[], [], []]
                targets = [[], [], []]
                masks = []
                for crop in batch:
                    synth = make_pretrain_targets(crop.ldr_1, times, gamma)
                    h, w = crop.shape
                    mask = sample_mask(h, w, cfg.mask.patch_size,
                                       cfg.mask.ratio,
                                       seed=int(rng.integers(2 ** 63)))
                    masks.append(mask.pixel_mask())
                    for i in range(3):
                        masked = apply_mask(synth[i], mask)
                        planes[i].append(
                            make_six_channel_input(masked, times[i], gamma))
                        targets[i].append(synth[i])
                inputs = [_to_bchw(p, device) for p in planes]
                target_t = [_to_bchw(tg, device) for tg in targets]
                mask_t = torch.from_numpy(np.stack(masks)).to(device)

                pred = model(*inputs)
                loss = ssl_loss(pred, target_t, times, gamma,
                                mask=mask_t, loss_on=cfg.ssl.loss_on)
                _check_finite(loss, run_dir, "pretrain", global_step, t.lr,
                              {"input_medium": inputs[1], "pred": pred})
                _step(model, optimizer, loss, t.grad_clip)
                global_step += 1
                epoch_losses.append(float(loss.detach()))
                logger.log(phase="pretrain", epoch=epoch, step=global_step,
                           loss=epoch_losses[-1])
            logger.log(phase="pretrain", epoch=epoch,
                       mean_loss=float(np.mean(epoch_losses)))

    ckpt_dir = run_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / "pretrained.pt"
    save_checkpoint(path, model.cpu(), "pretrained", global_step, t.seed,
                    config=cfg.to_dict(), parent=parent)
    return path


def _labeled_batch_tensors(batch, gamma, device):
    planes = [[], [], []]
    gts = []
    for crop in batch:
        for i, frame in enumerate(crop.frames):
            planes[i].append(
                make_six_channel_input(frame, crop.times[i], gamma))
        gts.append(crop.gt)
    inputs = [_to_bchw(p, device) for p in planes]
    return inputs, _to_bchw(gts, device)


def finetune(cfg: RunConfig, ckpt: Union[Checkpoint, str, Path],
             labeled: Sequence[ExposureStack], run_dir) -> Path:
    """Supervised finetuning of a pretrained checkpoint on real brackets."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.stage != "pretrained":
        raise ValueError(
            f"finetune requires a pretrained checkpoint, got {ckpt.stage!r}")
    if not labeled:
        raise DataError("finetuning needs at least one labeled sample")
    for s in labeled:
        if s.gt is None:
            raise DataError(f"labeled sample {s.sample_id!r} has no ground truth")

    run_dir = Path(run_dir)
    t = cfg.train
    gamma = cfg.data.gamma
    device = torch.device(t.device)
    seed_everything(t.seed)
    model = ckpt.build_model().to(device).train()
    optimizer = _make_optimizer(model, cfg)
    backbone = _backbone_from(cfg)
    if backbone is not None:
        backbone.to(device)
    global_step = ckpt.step

    with MetricsLogger(run_dir) as logger:
        for epoch in range(t.epochs):
            rng = _epoch_rng(t.seed, "finetune", epoch)
            crops = _epoch_crops(labeled, cfg, rng)
            batches = _grouped_batches(crops, t.batch_size, rng,
                                       key_fn=lambda c: c.evs)
            epoch_losses = []
            for batch in batches:
                inputs, gt = _labeled_batch_tensors(batch, gamma, device)
                pred = model(*inputs)
                loss, parts = finetune_loss(pred, gt, backbone,
                                            lam=cfg.loss.lam, mu=cfg.loss.mu)
                _check_finite(loss, run_dir, "finetune", global_step, t.lr,
                              {"input_medium": inputs[1], "pred": pred,
                               "gt": gt})
                _step(model, optimizer, loss, t.grad_clip)
                global_step += 1
                epoch_losses.append(parts["total"])
                logger.log(phase="finetune", epoch=epoch, step=global_step,
                           **parts)
            logger.log(phase="finetune", epoch=epoch,
                       mean_loss=float(np.mean(epoch_losses)))

    ckpt_dir = run_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / "finetuned.pt"
    save_checkpoint(path, model.cpu(), "finetuned", global_step, t.seed,
                    config=cfg.to_dict(), parent=ckpt.ckpt_id or None)
    return path


def _per_sample_losses(pred, target, backbone, lam, mu):
    """Per-sample reconstruction (+ perceptual) losses, shape (B,)."""
    tm_p = mu_law_tonemap(pred, mu)
    tm_t = mu_law_tonemap(target, mu)
    per = (tm_p - tm_t).abs().mean(dim=(1, 2, 3))
    if backbone is not None and lam > 0:
        feats_p = backbone(tm_p)
        with torch.no_grad():
            feats_t = backbone(tm_t)
        for fp, ft in zip(feats_p, feats_t):
            per = per + lam * (fp - ft).abs().mean(dim=(1, 2, 3))
    return per


def _select_pool(cfg: RunConfig, shape: tuple[int, int]) -> int:
    pool = cfg.apss.pool
    h, w = shape
    if h % pool == 0 and w % pool == 0:
        return pool
    raise DataError(
        f"apss.pool {pool} must divide image dims {h}x{w}")


def iterate(cfg: RunConfig, ckpt: Union[Checkpoint, str, Path],
            labeled: Sequence[ExposureStack],
            unlabeled: Sequence[ExposureStack], run_dir,
            timesteps: Optional[int] = None) -> Path:
    """Semi-supervised refinement with adaptive pseudo-label selection.

    Each timestep: regenerate pseudo-labels with the current model, pool
    labeled per-patch losses into a percentile threshold, weight every
    unlabeled sample by how far its fresh pseudo-label drifted from the
    previous timestep's (all weights start at 1), then train one epoch on
    labeled crops plus weighted pseudo-labeled crops.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.stage not in ("finetuned", "iterated"):
        raise ValueError(
            f"iterate requires a finetuned or iterated checkpoint, "
            f"got {ckpt.stage!r}")
    if not labeled:
        raise DataError("iteration needs labeled samples for the threshold")

    run_dir = Path(run_dir)
    t = cfg.train
    gamma = cfg.data.gamma
    device = torch.device(t.device)
    T = t.timesteps if timesteps is None else timesteps
    seed_everything(t.seed)
    model = ckpt.build_model().to(device)
    global_step = ckpt.step

    ckpt_dir = run_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / "iterated.pt"
    if T == 0:
        save_checkpoint(path, model.cpu(), "iterated", global_step, t.seed,
                        config=cfg.to_dict(), parent=ckpt.ckpt_id or None)
        return path

    optimizer = _make_optimizer(model, cfg)
    backbone = _backbone_from(cfg)
    if backbone is not None:
        backbone.to(device)
    apss_dir = run_dir / "apss"
    apss_dir.mkdir(parents=True, exist_ok=True)

    valid_masks = {
        s.sample_id: well_exposed_mask(s.ldr_2, cfg.apss.eps_low,
                                       cfg.apss.eps_high)
        for s in list(labeled) + list(unlabeled)
    }
    prev_pseudo: Optional[dict] = None

    with MetricsLogger(run_dir) as logger:
        for ts in range(T):
            model.eval()
            pseudo = {s.sample_id: predict(model, s, gamma=gamma,
                                           device=t.device)
                      for s in unlabeled}
            pooled = []
            for s in labeled:
                pred = predict(model, s, gamma=gamma, device=t.device)
                cells = pooled_selection_losses(
                    pred, s.gt, valid_masks[s.sample_id],
                    pool=_select_pool(cfg, s.shape), mu=cfg.loss.mu)
                pooled.extend(cells[np.isfinite(cells)].tolist())
            tau = compute_threshold(pooled, cfg.apss.beta)

            ids = [s.sample_id for s in unlabeled]
            if prev_pseudo is None:
                sample_losses = [0.0] * len(ids)
            else:
                sample_losses = [
                    selection_loss(pseudo[sid], prev_pseudo[sid],
                                   valid_masks[sid], mu=cfg.loss.mu)
                    for sid in ids
                ]
            weights = assign_weights(sample_losses, tau)
            SelectionRecord.build(ts, cfg.apss.beta, tau, pooled, ids,
                                  sample_losses, weights).write(
                apss_dir / f"timestep_{ts}.json")
            logger.log(phase="iterate", timestep=ts, tau=tau,
                       n_selected=int((weights > 0).sum()),
                       n_unlabeled=len(ids))
            if len(ids) and not (weights > 0).any():
                warnings.warn(
                    f"timestep {ts}: no selectable pseudo-labels; "
                    "training labeled-only", stacklevel=2)

            weight_by_id = dict(zip(ids, weights))
            items = [(s, 1.0, s.role) for s in labeled]
            for s in unlabeled:
                w = float(weight_by_id[s.sample_id])
                if w > 0:
                    items.append((s.with_gt(pseudo[s.sample_id]), w, "U"))

            model.train()
            rng = _epoch_rng(t.seed, "iterate", ts)
            crop_items = []
            for stack, w, kind in items:
                for crop in crop_patches(stack, t.crop, t.stride,
                                         rng if t.jitter else None):
                    crop_items.append((crop, w, kind))
            batches = _grouped_batches(crop_items, t.batch_size, rng,
                                       key_fn=lambda it: it[0].evs)
            for batch in batches:
                crops = [it[0] for it in batch]
                inputs, target = _labeled_batch_tensors(crops, gamma, device)
                pred = model(*inputs)
                per = _per_sample_losses(pred, target, backbone,
                                         cfg.loss.lam, cfg.loss.mu)
                kinds = [it[2] for it in batch]
                d_idx = [i for i, k in enumerate(kinds) if k == "D"]
                s_idx = [i for i, k in enumerate(kinds) if k == "S"]
                u_idx = [i for i, k in enumerate(kinds) if k == "U"]
                zero = per.new_zeros(())
                loss_d = per[d_idx].mean() if d_idx else zero
                loss_s = per[s_idx].mean() if s_idx else zero
                w_u = per.new_tensor([batch[i][1] for i in u_idx])
                total, terms = iteration_loss(loss_d, loss_s, per[u_idx], w_u)
                _check_finite(total, run_dir, "iterate", global_step, t.lr,
                              {"input_medium": inputs[1], "pred": pred,
                               "target": target})
                _step(model, optimizer, total, t.grad_clip)
                global_step += 1
                logger.log(phase="iterate", timestep=ts, step=global_step,
                           **terms.to_dict())
            prev_pseudo = pseudo

    save_checkpoint(path, model.cpu(), "iterated", global_step, t.seed,
                    config=cfg.to_dict(), parent=ckpt.ckpt_id or None)
    return path


def _pad_to_multiple(x: torch.Tensor, d: int) -> tuple[torch.Tensor, int, int]:
    """Edge-replicate on the bottom/right up to a multiple of d.

    Manual replication instead of F.pad so the pad may exceed the input
    extent (tiny images against a large divisor).
    """
    h, w = x.shape[-2:]
    ph = (d - h % d) % d
    pw = (d - w % d) % d
    if ph:
        edge = x[..., -1:, :].expand(*x.shape[:-2], ph, x.shape[-1])
        x = torch.cat([x, edge], dim=-2)
    if pw:
        edge = x[..., :, -1:].expand(*x.shape[:-2], x.shape[-2], pw)
        x = torch.cat([x, edge], dim=-1)
    return x, ph, pw


def predict(model_or_ckpt, stack: ExposureStack, gamma: float = 2.2,
            tile: Optional[int] = None, halo: int = 32,
            device: str = "cpu") -> np.ndarray:
    """Fuse one bracket into radiance (H x W x 3 float32 in [0, 1]).

    ``tile`` enables windowed inference for large images: cores on a grid
    aligned to the network's divisibility constraint, each padded with
    ``halo`` pixels of real context that are discarded afterwards, so
    tiled and whole-image outputs agree away from the image border.
    """
    if isinstance(model_or_ckpt, Checkpoint):
        model = model_or_ckpt.build_model()
    elif isinstance(model_or_ckpt, (str, Path)):
        model = load_checkpoint(model_or_ckpt).build_model()
    else:
        model = model_or_ckpt
    model = model.to(device).eval()
    d = model.config.divisor

    planes = [make_six_channel_input(f, t, gamma)
              for f, t in zip(stack.frames, stack.times)]
    full = torch.from_numpy(np.stack(planes).astype(np.float32)) \
        .permute(0, 3, 1, 2).to(device)
    h, w = full.shape[-2:]

    def run(window: torch.Tensor) -> torch.Tensor:
        window, ph, pw = _pad_to_multiple(window, d)
        with torch.no_grad():
            out = model(window[0:1], window[1:2], window[2:3])[0]
        return out[:, :out.shape[-2] - ph, :out.shape[-1] - pw]

    if tile is None or (h <= tile and w <= tile):
        out = run(full)
        return out.permute(1, 2, 0).cpu().numpy().astype(np.float32)

    if tile % d:
        raise ValueError(f"tile {tile} must be divisible by {d}")
    halo = ((halo + d - 1) // d) * d
    out = torch.zeros(3, h, w, device=device)
    for y0 in range(0, h, tile):
        for x0 in range(0, w, tile):
            y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
            wy0, wx0 = max(0, y0 - halo), max(0, x0 - halo)
            wy1, wx1 = min(h, y1 + halo), min(w, x1 + halo)
            pred = run(full[:, :, wy0:wy1, wx0:wx1])
            out[:, y0:y1, x0:x1] = pred[:, y0 - wy0:y1 - wy0,
                                        x0 - wx0:x1 - wx0]
    return out.permute(1, 2, 0).cpu().numpy().astype(np.float32)


def evaluate_checkpoint(ckpt, testset: Sequence[ExposureStack],
                        mu: float = 5000.0, gamma: float = 2.2,
                        tile: Optional[int] = None,
                        device: str = "cpu") -> EvalReport:
    """Predict every sample with ground truth and score it."""
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    model = ckpt.build_model() if isinstance(ckpt, Checkpoint) else ckpt
    report = EvalReport(mu=mu)
    for stack in testset:
        if stack.gt is None:
            warnings.warn(f"sample {stack.sample_id!r} has no ground truth; "
                          "skipped", stacklevel=2)
            continue
        pred = predict(model, stack, gamma=gamma, tile=tile, device=device)
        report.add(stack.sample_id, pred, stack.gt)
    return report
