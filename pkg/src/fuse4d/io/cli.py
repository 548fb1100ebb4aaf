"""Command-line pipeline driver.

Every subcommand reads one config file plus --set overrides; stages are
content addressed, so re-running a finished stage is a no-op and a partial
pipeline resumes where it stopped.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import Config, apply_overrides, load_config, save_config
from .manifest import ManifestError, parse_manifest
from .pipeline import Pipeline


def _add_common(p: argparse.ArgumentParser, needs_manifest: bool = True) -> None:
    if needs_manifest:
        p.add_argument("manifest", help="sequence manifest JSON")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out", default="out", help="pipeline output root")


def _build(args) -> Pipeline:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        overrides[dotted] = value
    apply_overrides(cfg, overrides)
    manifest = parse_manifest(args.manifest)
    return Pipeline(manifest, cfg, Path(args.out))


def cmd_reconstruct(args) -> int:
    pipe = _build(args)
    grids = pipe.reconstruct()
    for tag in sorted(grids):
        print(f"{tag}: {len(grids[tag])} voxels")
    return 0


def cmd_raycast(args) -> int:
    pipe = _build(args)
    tables = pipe.raycast()
    total = sum(len(sl) for sl in tables.values())
    print(f"{len(tables)} slices, {total} pixel-voxel entries")
    return 0


def cmd_fuse(args) -> int:
    pipe = _build(args)
    fused = pipe.fuse()
    for vm in fused.masklets:
        score = fused.scores[vm.masklet_id]
        shown = "n/a" if score is None else f"{score:.6f}"
        print(f"masklet {vm.masklet_id}: {len(vm)} voxels, score {shown}")
    if fused.directory is not None:
        print(f"artifacts: {fused.directory}")
    return 0


def cmd_stats(args) -> int:
    pipe = _build(args)
    report = pipe.stats()
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    pipe = _build(args)
    payload = pipe.evaluate(args.protocol, oracle_kind=args.oracle,
                            iou_threshold=args.iou_threshold,
                            frame_budget=args.frame_budget,
                            prompt_kind=args.prompt_kind, n_clicks=args.n_clicks)
    out_path = Path(args.out) / f"eval_{args.protocol}.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(payload["report_text"])
    print(f"results: {out_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    pipe = _build(args)
    app = create_app(pipe, verdict_log=Path(args.out) / "verdicts.jsonl")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_make_fixture(args) -> int:
    from ..synthetic import build_scene, write_fixture

    scene = build_scene(n_frames=args.frames)
    manifest = write_fixture(scene, Path(args.dir))
    print(f"fixture written: {Path(args.dir) / 'manifest.json'} "
          f"({manifest.frame_count} frames, {len(manifest.masklets)} masklets)")
    return 0


def cmd_write_config(args) -> int:
    save_config(Config(), args.path)
    print(f"default config written: {args.path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fuse4d",
                                     description="cross-modal 4D annotation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_text in (
        ("reconstruct", cmd_reconstruct, "build voxel grids from a manifest"),
        ("raycast", cmd_raycast, "build pixel-voxel tables from grids"),
        ("fuse", cmd_fuse, "fuse 2D masklets into voxel and point masklets"),
        ("stats", cmd_stats, "dataset statistics report"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval", help="run an interaction protocol")
    _add_common(p)
    p.add_argument("--protocol", required=True,
                   choices=["offline", "online", "semisupervised"])
    p.add_argument("--oracle", default="perfect", choices=["perfect", "noisy"])
    p.add_argument("--iou-threshold", type=float, default=None)
    p.add_argument("--frame-budget", type=int, default=None)
    p.add_argument("--prompt-kind", default="click", choices=["click", "box", "mask"])
    p.add_argument("--n-clicks", type=int, default=3)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="HTTP review service over fused artifacts")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8437)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("make-fixture", help="generate the synthetic demo sequence")
    p.add_argument("dir", help="output directory")
    p.add_argument("--frames", type=int, default=20)
    p.set_defaults(fn=cmd_make_fixture)

    p = sub.add_parser("write-config", help="write the default config file")
    p.add_argument("path")
    p.set_defaults(fn=cmd_write_config)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ManifestError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
