"""Command-line front end.

Exit status: 0 on success, 1 on input/config errors, 2 when no
collision-free grasp was found.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cloudio import CloudFormatError, save_poses, write_json
from .config import ConfigError, load_config
from .geometry import centroid
from .scenario import cached_sdf, initial_poses, load_inputs, run_scenario, write_demo

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_GRASP = 2

log = logging.getLogger("shapegrasp")


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.run.workers = args.workers
    return cfg


def cmd_grasp(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    report = run_scenario(cfg, report_path=args.report, trace_path=args.trace)
    if args.report is None and cfg.output.report is None:
        write_json(report)
    if not report["found"]:
        log.error("no collision-free grasp found among %d particles", len(report["particles"]))
        return EXIT_NO_GRASP
    log.info("grasp found: preshape %s, loss %.6g, %.2f s", report["preshape"], report["loss"],
             report["timing"]["wall_clock_s"])
    return EXIT_OK


def cmd_sdf(args) -> int:
    cfg = load_config(args.config)
    cache_dir = args.cache_dir or cfg.sdf.cache_dir
    if cache_dir is None:
        raise ConfigError("no cache directory: set [sdf] cache_dir or pass --cache-dir")
    _, _, preshapes = load_inputs(cfg)
    for p in preshapes:
        grid, hit = cached_sdf(p.full, cfg.sdf.voxel, cfg.sdf.padding, cache_dir)
        print(f"{p.name}: dims={grid.dims} voxel={grid.voxel} {'cached' if hit else 'built'}")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    obj, _, preshapes = load_inputs(cfg)
    poses = initial_poses(cfg, centroid(obj), len(preshapes))
    if args.out:
        for p, arr in zip(preshapes, poses):
            path = Path(args.out)
            if len(preshapes) > 1:
                path = path.with_name(f"{path.stem}_{p.name}{path.suffix}")
            save_poses(path, arr)
    else:
        write_json({p.name: arr.tolist() for p, arr in zip(preshapes, poses)})
    return EXIT_OK


def cmd_demo(args) -> int:
    path = write_demo(args.directory)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapegrasp", description="Grasp synthesis by gripper-object shape matching.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grasp", help="run a scenario and write the report")
    p.add_argument("config", help="scenario TOML file")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--workers", type=int, help="override [run] workers")
    p.add_argument("--trace", type=Path, help="write an NDJSON optimization trace here")
    p.add_argument("--report", type=Path, help="report path (default: [output] report, else stdout)")
    p.set_defaults(func=cmd_grasp)

    p = sub.add_parser("sdf", help="precompute and cache the preshape SDFs")
    p.add_argument("config")
    p.add_argument("--cache-dir", type=Path)
    p.set_defaults(func=cmd_sdf)

    p = sub.add_parser("init", help="emit the initial poses for inspection")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="pose text file (default: JSON on stdout)")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("demo", help="write the bundled cylinder scenario")
    p.add_argument("directory", type=Path)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CloudFormatError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
