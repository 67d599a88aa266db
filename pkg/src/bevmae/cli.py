"""Command-line entry point: ``bevmae <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .io import save_bin_cloud


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "mask_ratio", None) is not None:
        overrides["mask_ratio"] = args.mask_ratio
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return cfg.replace(**overrides).validate()


def cmd_pretrain(args) -> int:
    from .pipeline import pretrain

    cfg = _load_config(args)
    emit = (lambda r: print(json.dumps(r), flush=True)) if not args.quiet else None
    res = pretrain(cfg, on_metrics=emit)
    if cfg.out_dir:
        print(f"final checkpoint: {Path(cfg.out_dir) / 'final.bvma'} (step {res.checkpoint.step})", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    from .pipeline import format_sweep_table, sweep_mask_ratio

    cfg = _load_config(args)
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    rows = sweep_mask_ratio(cfg, ratios)
    print(format_sweep_table(rows))
    return 0


def cmd_export(args) -> int:
    from .pipeline import export_encoder_file

    out = export_encoder_file(args.checkpoint, args.out)
    print(out)
    return 0


def cmd_gradcheck(args) -> int:
    from .pipeline import pipeline_grad_check

    report = pipeline_grad_check(n_points=args.points, samples_per_param=args.samples, h=args.h, seed=args.seed)
    ok = True
    for name, err in report.per_parameter().items():
        status = "PASS" if err < args.tol else "FAIL"
        ok &= status == "PASS"
        print(f"{status}  {name:<28s} max rel err {err:.3e}")
    print(f"checked {len(report.entries)} components, skipped {report.skipped_kinks} at kinks; "
          f"worst {report.max_rel_error:.3e} (tol {args.tol:g})")
    return 0 if ok else 1


def cmd_gen_scenes(args) -> int:
    from .pipeline import derive_seed
    from .synthetic import generate_scene

    cfg = _load_config(args)
    spec = cfg.grid_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.n):
        cloud = generate_scene(cfg.scene_config(derive_seed(cfg.seed, 0x5CE, k)), spec)
        save_bin_cloud(cloud, out / f"scene_{k:05d}.bin")
    print(f"wrote {args.n} scenes to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevmae", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="flat key = value run config")
        sp.add_argument("--mask-ratio", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("pretrain", help="run pre-training")
    run_opts(sp)
    sp.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("sweep", help="pre-train once per mask ratio")
    run_opts(sp)
    sp.add_argument("--ratios", default="0.5,0.6,0.7,0.8")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("export-encoder", help="strip decoder, heads and token from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    sp.add_argument("--points", type=int, default=200)
    sp.add_argument("--samples", type=int, default=12, help="components checked per parameter tensor")
    sp.add_argument("--h", type=float, default=1e-4)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("gen-scenes", help="write synthetic scenes as .bin scans")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_scenes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
