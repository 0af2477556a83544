"""Command line entry point: ``surgseg {synth,train,eval,fuse,overlay,ablate}``.

Failures exit with status 1 and print ``{"error": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, TrainConfig, apply_overrides, load_config


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = _parse_set(args.set)
    for flag, key in (("dataset_root", "dataset_root"), ("output_dir", "output_dir"), ("head", "head"),
                      ("epochs", "epochs"), ("seed", "seed"), ("variant", "variant")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    return apply_overrides(cfg, overrides) if overrides else cfg


def _ckpts(args):
    return {"anatomy": args.anatomy, "tool": args.tool}


def cmd_synth(args):
    from .data import synth_generate
    root = synth_generate(args.out, seed=args.seed, n_train=args.n_train, n_val=args.n_val,
                          n_test=args.n_test, size=args.size)
    return {"dataset": str(root)}


def cmd_train(args):
    from .train import train
    res = train(_config(args))
    return {"best": str(res.best_checkpoint), "last": str(res.last_checkpoint),
            "steps": res.step, "history": res.history}


def cmd_eval(args):
    from .evaluate import evaluate
    from .metrics import write_report
    report = evaluate(_ckpts(args), args.data, args.split, args.mode, refine_radius=args.refine_radius,
                      fusion_mode=args.fusion, include_background=not args.exclude_background,
                      label_space=args.label_space)
    out = {"miou": report["miou"], "mean_dice": report["mean_dice"]}
    if args.out:
        j, c = write_report(report, args.out)
        out |= {"json": str(j), "csv": str(c)}
    return out


def cmd_fuse(args):
    from .evaluate import export_fused
    paths = export_fused(_ckpts(args), args.data, args.split, args.out,
                         refine_radius=args.refine_radius, fusion_mode=args.fusion)
    return {"written": len(paths), "out": str(args.out)}


def cmd_overlay(args):
    from .evaluate import infer_overlay
    res = infer_overlay(_ckpts(args), args.image, args.out, refine_radius=args.refine_radius,
                        fusion_mode=args.fusion)
    return {k: str(v) if isinstance(v, Path) else v for k, v in res.items()}


def cmd_ablate(args):
    from .evaluate import ablate_losses
    report = ablate_losses(_config(args), seeds=args.seeds, out_dir=args.out)
    return {"rows": [{k: r[k] for k in ("loss", "lambda_combined", "miou", "dice")} for r in report["rows"]]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surgseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic surgical-scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-val", type=int, default=50)
    s.add_argument("--n-test", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    def config_args(sp):
        sp.add_argument("--config", help="YAML or JSON training config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        sp.add_argument("--dataset-root")
        sp.add_argument("--output-dir")
        sp.add_argument("--head", choices=("anatomy", "tool"))
        sp.add_argument("--variant")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one model instance")
    config_args(t)
    t.set_defaults(func=cmd_train)

    def pair_args(sp, data=True):
        sp.add_argument("--anatomy", help="SegAnatomy checkpoint")
        sp.add_argument("--tool", help="SegTool checkpoint")
        if data:
            sp.add_argument("--data", required=True, help="dataset root")
            sp.add_argument("--split", default="val")
        sp.add_argument("--refine-radius", type=int, default=None)
        sp.add_argument("--fusion", choices=("priority", "or"), default="priority")

    e = sub.add_parser("eval", help="metrics for one head or the fused pair")
    pair_args(e)
    e.add_argument("--mode", choices=("anatomy", "tool", "fused"), default="fused")
    e.add_argument("--label-space", choices=("head", "global"), default="head")
    e.add_argument("--exclude-background", action="store_true")
    e.add_argument("--out", help="report stem; writes <stem>.json and <stem>.csv")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="write fused masks for a split")
    pair_args(f)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    o = sub.add_parser("overlay", help="fused mask and colour overlay for one image")
    pair_args(o, data=False)
    o.add_argument("--image", required=True)
    o.add_argument("--out", required=True, help="output prefix")
    o.set_defaults(func=cmd_overlay)

    a = sub.add_parser("ablate", help="Tversky / CE / combined loss comparison")
    config_args(a)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args)
    except Exception as e:  # noqa: BLE001 - surfaced as a machine-readable error
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
