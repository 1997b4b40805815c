"""Command-line entry point.

Subcommands: generate, refine, render, eval, demo2d. Exit codes: 0 success,
2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import ConfigurationError, EngineError
from .pipeline import apply_ablation, load_config, preset, run_eval, run_generate, run_refine, run_render

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(p: argparse.ArgumentParser, require_out: bool = True) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=["sphere", "demo2d"], help="built-in configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=require_out, help="output directory")
    p.add_argument("--workers", type=int, help="worker pool size")
    p.add_argument("--dump-intermediates", action="store_true")


def _load(args) -> "RunConfig":
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigurationError("provide --config or --preset")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "dump_intermediates", False):
        cfg = replace(cfg, dump_intermediates=True)
    if getattr(args, "backend_cmd", None):
        cfg = replace(cfg, denoiser="remote", backend_cmd=args.backend_cmd.split())
    if getattr(args, "backend_addr", None):
        cfg = replace(cfg, denoiser="remote", backend_addr=args.backend_addr)
    if getattr(args, "ablation", None):
        cfg = apply_ablation(cfg, args.ablation)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvd", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="multi-view sampling run")
    _add_common(g)
    g.add_argument("--ablation", choices=["conditions", "cg", "optim", "full"])
    g.add_argument("--backend-cmd", help="spawn an external denoiser over stdio")
    g.add_argument("--backend-addr", help="connect to an external denoiser host:port")

    d = sub.add_parser("demo2d", help="identical-view consistency demonstration")
    _add_common(d)

    r = sub.add_parser("refine", help="normal-driven mesh refinement")
    _add_common(r)
    r.add_argument("--mesh", required=True, help="input OBJ")
    r.add_argument("--targets", required=True, help="directory of normal_XX.pfm targets")

    n = sub.add_parser("render", help="free-view orbit rendering")
    _add_common(n)
    n.add_argument("--mesh", required=True, help="OBJ to render (colors baked if absent)")
    n.add_argument("--images", required=True, help="directory of view_XX.pfm images")
    n.add_argument("--poses", type=int, default=16)

    e = sub.add_parser("eval", help="cross-view consistency metrics")
    _add_common(e)
    e.add_argument("--images", required=True, help="directory of view_XX.pfm images")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = _load(args)
            out = run_generate(cfg, args.out)
            print(f"generated {len(out['images'])} views -> {args.out}")
            if out.get("report") is not None:
                print(f"mean cross-view PSNR {out['report'].mean_psnr:.3f} dB, "
                      f"SSIM {out['report'].mean_ssim:.4f}")
        elif args.command == "demo2d":
            if not args.config and not args.preset:
                args.preset = "demo2d"
            cfg = _load(args)
            if cfg.mode != "demo2d":
                raise ConfigurationError("demo2d: config must have mode 'demo2d'")
            out = run_generate(cfg, args.out)
            s = out["summary"]
            print(f"processes: {cfg.demo2d.n_views}, pairwise max-abs {s['pairwise_max_abs']:.2e}, "
                  f"consistent: {s['consistent']}")
        elif args.command == "refine":
            cfg = _load(args)
            out = run_refine(cfg, args.mesh, args.targets, args.out)
            first, last = out["trace"][0], out["trace"][-1]
            print(f"refined mesh -> {args.out}/refined.obj "
                  f"(data loss {first['data']:.4g} -> {last['data']:.4g})")
        elif args.command == "render":
            cfg = _load(args)
            out = run_render(cfg, args.mesh, args.images, args.out, n_poses=args.poses)
            print(f"rendered {len(out['frames'])} frames -> {args.out}/frames")
        elif args.command == "eval":
            cfg = _load(args)
            report = run_eval(cfg, args.images, args.out)
            print(f"pairs: {len(report.pairs)}, mean PSNR {report.mean_psnr:.3f} dB, "
                  f"mean SSIM {report.mean_ssim:.4f}")
            for s, t in report.excluded:
                print(f"excluded empty-overlap pair {s}->{t}")
        return EXIT_OK
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
