"""Command-line surface.

Subcommands: train, gradcheck, params, memsweep, flops, weights-dump,
compare.  Every subcommand accepts --config and --out.  Exit codes: 0 on
success, 1 on validation/usage errors, 2 on runtime errors.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .accounting import (Scheme, activation_ledger, count_params,
                         entanglement_sweep, flop_count, synqt_scheme)
from .backbone import BackboneConfig, ConfigError, build_backbone, toy_config, vit_b16_config
from .blocks import SynqtConfig
from .checkpoint import CheckpointError
from .data import SyntheticDataset
from .fdcheck import full_grad_check
from .head import dump_feature_weights
from .models import SynqtModel
from .rng import Rng
from .tensor import ShapeError
from .train import TrainConfig, RunError, arm_config, compare, load_config, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _arch_from_args(args):
    if args.config:
        return load_config(args.config).backbone
    if args.arch == "vitb16":
        return vit_b16_config()
    if args.arch == "toy":
        return toy_config()
    raise ConfigError(f"unknown architecture {args.arch!r}")


def _scheme_from_args(args, arch):
    kind = args.scheme
    if kind == "synqt":
        return synqt_scheme(arch, n=args.n, hidden=args.hidden,
                            qkv_hidden=args.qkv, num_classes=args.classes)
    extra = {}
    if kind == "vpt_deep":
        extra["tokens"] = args.tokens
    if kind == "lora":
        extra["rank"] = args.rank
        if args.at_layer:
            extra["at_layer"] = args.at_layer
    if kind == "adapter":
        extra["adapter_hidden"] = args.adapter_hidden
    return Scheme(kind=kind, arch=arch, num_classes=args.classes, **extra)


def _emit(payload, out):
    text = json.dumps(payload, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text)
    print(text)


def _add_scheme_args(sub):
    sub.add_argument("--arch", default="vitb16", choices=["vitb16", "toy"])
    sub.add_argument("--scheme", default="synqt",
                     choices=["full_finetune", "linear_probe", "bitfit",
                              "vpt_deep", "lora", "adapter", "synqt"])
    sub.add_argument("--classes", type=int, default=100)
    sub.add_argument("--hidden", type=int, default=48)
    sub.add_argument("--qkv", type=int, default=8)
    sub.add_argument("--n", type=int, default=4)
    sub.add_argument("--tokens", type=int, default=10)
    sub.add_argument("--rank", type=int, default=4)
    sub.add_argument("--at-layer", type=int, default=None, dest="at_layer")
    sub.add_argument("--adapter-hidden", type=int, default=64, dest="adapter_hidden")


def build_parser():
    parser = _Parser(prog="synqt", description=__doc__)
    subs = parser.add_subparsers(dest="command")

    p_train = subs.add_parser("train", help="run one training configuration")
    p_train.add_argument("--config", required=False)
    p_train.add_argument("--out")
    p_train.add_argument("--save-checkpoint", dest="save_checkpoint")

    p_grad = subs.add_parser("gradcheck", help="full finite-difference check")
    p_grad.add_argument("--config")
    p_grad.add_argument("--out")
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--eps", type=float, default=1e-5)

    p_params = subs.add_parser("params", help="trainable-parameter ledger")
    p_params.add_argument("--config")
    p_params.add_argument("--out")
    _add_scheme_args(p_params)

    p_mem = subs.add_parser("memsweep", help="LoRA-at-layer-k activation sweep")
    p_mem.add_argument("--config")
    p_mem.add_argument("--out")
    p_mem.add_argument("--arch", default="vitb16", choices=["vitb16", "toy"])
    p_mem.add_argument("--rank", type=int, default=4)
    p_mem.add_argument("--batch-size", type=int, default=1, dest="batch_size")

    p_flops = subs.add_parser("flops", help="inference-cost ledger")
    p_flops.add_argument("--config")
    p_flops.add_argument("--out")
    _add_scheme_args(p_flops)

    p_mem2 = subs.add_parser("memory", help="stored-activation ledger")
    p_mem2.add_argument("--config")
    p_mem2.add_argument("--out")
    p_mem2.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    _add_scheme_args(p_mem2)

    p_dump = subs.add_parser("weights-dump", help="per-sample feature weights")
    p_dump.add_argument("--config")
    p_dump.add_argument("--out")
    p_dump.add_argument("--samples", type=int, default=4)
    p_dump.add_argument("--train-epochs", type=int, default=0,
                        dest="train_epochs",
                        help="optionally train briefly before dumping")

    p_cmp = subs.add_parser("compare", help="train several arms and tabulate")
    p_cmp.add_argument("--config")
    p_cmp.add_argument("--out")
    p_cmp.add_argument("--arms", default="linear,random_query,synqt,synqt_nodrop")
    p_cmp.add_argument("--seeds", default="0,1,2")
    p_cmp.add_argument("--lr-grid", dest="lr_grid", default="")
    p_cmp.add_argument("--scale-grid", dest="scale_grid", default="")
    return parser


def _cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig().validate()
    report = train(cfg)
    if args.save_checkpoint:
        from .checkpoint import save_checkpoint
        save_checkpoint(report.model.trainable(), args.save_checkpoint)
    if args.out:
        report.save(args.out)
    print(json.dumps({"final_train_accuracy": report["final_train_accuracy"],
                      "final_test_accuracy": report["final_test_accuracy"],
                      "steps": report["steps"]}, sort_keys=True))
    return 0


def _cmd_gradcheck(args):
    cfg = load_config(args.config) if args.config else TrainConfig().validate()
    ds = SyntheticDataset(cfg.data)
    bb = build_backbone(cfg.backbone, Rng(cfg.seed).child("backbone-init"))
    # wide init keeps every gradient path large enough for the difference
    # quotients to resolve; production init stays at 0.02
    model = SynqtModel(bb, cfg.synqt, cfg.head, Rng(cfg.seed).child("gradcheck"),
                       init_std=0.5)
    img, label = ds.train[0]
    worst = full_grad_check(model, img, label, eps=args.eps)
    payload = {"max_relative_error": worst, "tolerance": args.tolerance,
               "parameters_checked": int(sum(p.numel
                                             for p in model.trainable().values()))}
    _emit(payload, args.out)
    return 0 if worst < args.tolerance else 1


def _cmd_params(args):
    arch = _arch_from_args(args)
    ledger = count_params(_scheme_from_args(args, arch))
    _emit(ledger.to_dict(), args.out)
    return 0


def _cmd_flops(args):
    arch = _arch_from_args(args)
    ledger = flop_count(_scheme_from_args(args, arch))
    _emit(ledger.to_dict(), args.out)
    return 0


def _cmd_memory(args):
    arch = _arch_from_args(args)
    ledger = activation_ledger(_scheme_from_args(args, arch), args.batch_size)
    _emit(ledger.to_dict(), args.out)
    return 0


def _cmd_memsweep(args):
    if args.config:
        arch = load_config(args.config).backbone
    elif args.arch == "vitb16":
        arch = vit_b16_config()
    else:
        arch = toy_config()
    points = entanglement_sweep(arch, rank=args.rank, batch_size=args.batch_size)
    lines = ["k,stored_scalars,bytes"]
    for k, scalars in points:
        lines.append(f"{k},{scalars},{scalars * 4}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _cmd_weights_dump(args):
    cfg = load_config(args.config) if args.config else TrainConfig().validate()
    ds = SyntheticDataset(cfg.data)
    if args.train_epochs > 0:
        import dataclasses as _dc
        run_cfg = _dc.replace(cfg, epochs=args.train_epochs)
        model = train(run_cfg).model
        bb = model.backbone
    else:
        bb = build_backbone(cfg.backbone, Rng(cfg.seed).child("backbone-init"))
        model = SynqtModel(bb, cfg.synqt, cfg.head,
                           Rng(cfg.seed).child(f"run:{cfg.variant}").child("init"))
    records = []
    for sample_id in range(min(args.samples, len(ds.test))):
        img, _ = ds.test[sample_id]
        bundle = model.bundle(img)
        records.append({"sample_id": sample_id,
                        "weights": dump_feature_weights(model.head, bundle)})
    _emit(records, args.out)
    return 0


def _cmd_compare(args):
    cfg = load_config(args.config) if args.config else TrainConfig().validate()
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    lr_grid = [float(x) for x in args.lr_grid.split(",") if x.strip()]
    scale_grid = [float(x) for x in args.scale_grid.split(",") if x.strip()]
    table = compare(cfg, arms, seeds, lr_grid=lr_grid or None,
                    scale_grid=scale_grid or None)
    _emit(table, args.out)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
    "flops": _cmd_flops,
    "memory": _cmd_memory,
    "memsweep": _cmd_memsweep,
    "weights-dump": _cmd_weights_dump,
    "compare": _cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, ShapeError, CheckpointError, FileNotFoundError,
            IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
