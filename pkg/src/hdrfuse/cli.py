"""Batch command-line interface.

Subcommands mirror the training phases plus data and evaluation utilities:

    hdrfuse synth     --out DIR [--seed N]
    hdrfuse pretrain  --data DIR --run-dir DIR [--resume CKPT]
    hdrfuse finetune  --data DIR --ckpt pretrained.pt --run-dir DIR
    hdrfuse iterate   --data DIR --ckpt finetuned.pt --run-dir DIR
    hdrfuse eval      --data DIR --ckpt CKPT [--out DIR] [--plot]
    hdrfuse predict   --data DIR|--sample DIR --ckpt CKPT --out DIR

All commands accept --config FILE and repeated --set section.key=value
overrides.  When no run dir is given, $HDRFUSE_RUN_ROOT/<command> is used.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .datasets import (DataError, load_bracket, load_dataset,
                       make_synth_dataset, write_image)
from .trainer import (NumericalAbort, evaluate_checkpoint, finetune, iterate,
                      predict, pretrain)
from .network import load_checkpoint

RUN_ROOT_ENV = "HDRFUSE_RUN_ROOT"


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    if cfg.data.run_dir:
        return Path(cfg.data.run_dir)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / command


def _data_root(args, cfg: RunConfig) -> Path:
    root = getattr(args, "data", None) or cfg.data.root
    if not root:
        raise ConfigError("no data root: pass --data or set data.root")
    return Path(root)


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data.root or "")
    if not str(out):
        raise ConfigError("synth needs --out or data.root")
    s = cfg.synth
    root = make_synth_dataset(
        out, s.n_unlabeled, s.m_static, s.k_dynamic,
        size=(s.height, s.width), seed=cfg.train.seed,
        motion_px=s.motion_px, saturation_frac=s.saturation_frac,
        noise_sigma=s.noise_sigma)
    total = s.n_unlabeled + s.m_static + s.k_dynamic
    print(f"wrote {total} samples to {root}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    stacks = load_dataset(_data_root(args, cfg), roles=("U",))
    run_dir = _run_dir(args, cfg, "pretrain")
    init = load_checkpoint(args.resume) if args.resume else None
    path = pretrain(cfg, stacks, run_dir, init=init)
    print(f"pretrained checkpoint: {path}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    labeled = load_dataset(_data_root(args, cfg), roles=("S", "D"))
    run_dir = _run_dir(args, cfg, "finetune")
    path = finetune(cfg, args.ckpt, labeled, run_dir)
    print(f"finetuned checkpoint: {path}")
    return 0


def cmd_iterate(args, cfg: RunConfig) -> int:
    root = _data_root(args, cfg)
    labeled = load_dataset(root, roles=("S", "D"))
    unlabeled = load_dataset(root, roles=("U",))
    run_dir = _run_dir(args, cfg, "iterate")
    path = iterate(cfg, args.ckpt, labeled, unlabeled, run_dir)
    print(f"iterated checkpoint: {path}")
    return 0


def _print_table(report) -> None:
    header = f"{'name':<20}{'psnr_l':>9}{'psnr_mu':>9}{'ssim_l':>9}{'ssim_mu':>9}"
    print(header)
    rows = report.samples + [{"name": "mean", **report.summary}]
    for s in rows:
        print(f"{s['name']:<20}{s['psnr_l']:>9.3f}{s['psnr_mu']:>9.3f}"
              f"{s['ssim_l']:>9.4f}{s['ssim_mu']:>9.4f}")


def cmd_eval(args, cfg: RunConfig) -> int:
    import json

    stacks = load_dataset(_data_root(args, cfg), roles=("S", "D"))
    report = evaluate_checkpoint(args.ckpt, stacks, mu=cfg.loss.mu,
                                 gamma=cfg.data.gamma, tile=args.tile,
                                 device=cfg.train.device)
    out_dir = Path(args.out) if args.out else _run_dir(args, cfg, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg.to_dict(), **report.to_dict()}
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
    report.write_csv(out_dir / "metrics.csv")
    _print_table(report)
    if args.plot:
        from .reporting import plot_metrics
        for p in plot_metrics(report, out_dir):
            print(f"figure: {p}")
    print(f"report: {out_dir / 'metrics.json'}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    if bool(args.sample) == bool(args.data or cfg.data.root):
        raise ConfigError("predict needs exactly one of --sample or --data")
    if args.sample:
        stacks = [load_bracket(args.sample)]
    else:
        stacks = load_dataset(_data_root(args, cfg))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    for stack in stacks:
        pred = predict(model, stack, gamma=cfg.data.gamma, tile=args.tile,
                       device=cfg.train.device)
        path = write_image(out_dir / f"{stack.sample_id}.{args.format}", pred)
        print(f"wrote {path}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set loss.lambda=0.02")
    p.add_argument("--seed", type=int, help="override train.seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdrfuse",
        description="Few-shot HDR fusion: synthetic data, three-phase "
                    "training, evaluation, inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic bracket dataset")
    _add_common(p)
    p.add_argument("--out", help="dataset directory (default: data.root)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="masked self-supervised pretraining")
    _add_common(p)
    p.add_argument("--data", help="dataset root with manifest.json")
    p.add_argument("--run-dir", help="output run directory")
    p.add_argument("--resume", help="continue from a pretrained checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning")
    _add_common(p)
    p.add_argument("--data", help="dataset root with manifest.json")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--run-dir", help="output run directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("iterate", help="semi-supervised refinement loop")
    _add_common(p)
    p.add_argument("--data", help="dataset root with manifest.json")
    p.add_argument("--ckpt", required=True, help="finetuned checkpoint")
    p.add_argument("--run-dir", help="output run directory")
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("eval", help="score a checkpoint on labeled samples")
    _add_common(p)
    p.add_argument("--data", help="dataset root with manifest.json")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--out", help="report directory (default: run dir)")
    p.add_argument("--tile", type=int, help="tile size for large images")
    p.add_argument("--plot", action="store_true",
                   help="emit per-sample metric bar charts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="fuse brackets into radiance files")
    _add_common(p)
    p.add_argument("--data", help="dataset root with manifest.json")
    p.add_argument("--sample", help="single sample directory (no manifest)")
    p.add_argument("--ckpt", required=True, help="checkpoint to run")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("hdr", "pfm"), default="hdr")
    p.add_argument("--tile", type=int, help="tile size for large images")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
