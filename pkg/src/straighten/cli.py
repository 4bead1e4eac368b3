"""Command line interface: ``straighten run`` and ``straighten replay``.

Exit codes: 0 compressed with every invariant passing, 2 compressed with a
failed invariant, 3 precondition or convergence failure, 4 I/O or schema
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .compress import (CompressionConfig, CompressionResult, compress_global,
                       compress_local, compress_multi)
from .errors import SchemaError, StraightenError
from .export import CAMERAS, export_frames, write_frame_csv
from .flow import IsotopyTrace
from .scenes import builtin, load_scene
from .verify import verify_run

EXIT_OK, EXIT_INVARIANT, EXIT_PRECONDITION, EXIT_SCHEMA = 0, 2, 3, 4
MODES = {"global": compress_global, "local": compress_local, "multi": compress_multi}


def _load(source):
    if source.startswith("builtin:"):
        try:
            return builtin(source.split(":", 1)[1])
        except TypeError as exc:
            raise SchemaError(str(exc)) from exc
    return load_scene(source)


def build_config(scene, args):
    """Scene overrides, then command line flags, as a CompressionConfig."""
    over = dict(scene.overrides)
    over.pop("mode", None)
    for flag, key in (("mu", "mu"), ("epsilon_budget", "epsilon_budget"), ("seed", "rng_seed"),
                      ("record_every", "record_every")):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = value
    try:
        return CompressionConfig(relative=scene.relative, **over)
    except TypeError as exc:
        raise SchemaError(f"config: {exc}") from exc


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(args, out=sys.stdout):
    try:
        scene = _load(args.scene)
        mode = args.mode or scene.overrides.get("mode", "global")
        if mode not in MODES:
            raise SchemaError(f"config: field 'mode': unknown mode {mode!r}")
        cfg = build_config(scene, args)
        os.makedirs(args.out, exist_ok=True)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: cannot create {args.out}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        result = MODES[mode](scene.manifold, scene.frame, cfg)
    except StraightenError as exc:
        result = CompressionResult.from_error(exc)
    extra = {"scene": scene.name, "mode": mode, "seed": cfg.rng_seed}
    try:
        _write_json(os.path.join(args.out, "manifest.json"), result.manifest(cfg, extra))
        write_frame_csv(scene.manifold, os.path.join(args.out, "initial.csv"),
                        scene.manifold.positions, scene.frame.field(0))
        if result.trace is not None:
            result.trace.write_jsonl(os.path.join(args.out, "trace.jsonl"))
        if result.marking is not None:
            result.marking.write_csv(os.path.join(args.out, "marking.csv"))
        if result.status == "compressed":
            _write_json(os.path.join(args.out, "report.json"), result.report.to_dict())
            write_frame_csv(scene.manifold, os.path.join(args.out, "final.csv"),
                            result.trace.positions[-1], result.trace.frames[-1])
            if not args.no_frames:
                export_frames(result.trace, os.path.join(args.out, "frames"), args.view)
    except OSError as exc:
        print(f"error: writing outputs failed: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    if result.status != "compressed":
        err = result.error
        cond = getattr(err, "condition", None)
        label = f"{type(err).__name__}" + (f" ({cond})" if cond else "")
        print(f"{result.status}: {label}: {err}", file=out)
        return EXIT_PRECONDITION
    print(result.report.table(), file=out)
    dp = result.double_points()
    if dp is not None:
        print(f"double points of the final projection: {dp}", file=out)
    return EXIT_OK if result.report.overall else EXIT_INVARIANT


def cmd_replay(args, out=sys.stdout):
    try:
        trace = IsotopyTrace.read_jsonl(args.trace)
        report = verify_run(trace)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: {args.trace}: trace metadata is inconsistent ({exc})", file=sys.stderr)
        return EXIT_SCHEMA
    if args.out:
        try:
            os.makedirs(args.out, exist_ok=True)
            _write_json(os.path.join(args.out, "report.json"), report.to_dict())
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SCHEMA
    print(report.to_json() if args.json else report.table(), file=out)
    return EXIT_OK if report.overall else EXIT_INVARIANT


def build_parser():
    p = argparse.ArgumentParser(
        prog="straighten",
        description="Straighten normal vector fields by the compression flows and verify "
                    "every bound along the way.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="compress a scene and write trace, manifest and report")
    r.add_argument("scene", help="scene file (YAML) or builtin:NAME")
    r.add_argument("--mode", choices=sorted(MODES), default=None,
                   help="pipeline (default: the scene's config, else global)")
    r.add_argument("--mu", type=float, default=None, help="rotation margin in radians")
    r.add_argument("--epsilon-budget", dest="epsilon_budget", type=float, default=None,
                   help="displacement budget for local and multi modes")
    r.add_argument("--seed", type=int, default=None, help="seed for general-position perturbation")
    r.add_argument("--out", default="out", help="output directory (default: out)")
    r.add_argument("--record-every", dest="record_every", type=int, default=None,
                   help="keep one snapshot every this many steps")
    r.add_argument("--view", choices=sorted(CAMERAS), default="top",
                   help="orthographic camera for SVG frames (default: top)")
    r.add_argument("--no-frames", action="store_true", help="skip per-snapshot SVG/OBJ export")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="re-verify a stored trace")
    rp.add_argument("trace", help="trace.jsonl written by run")
    rp.add_argument("--out", default=None, help="directory for report.json")
    rp.add_argument("--json", action="store_true", help="print the report as JSON")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
