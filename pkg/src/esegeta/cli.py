"""Command-line front end: run, eval, export-png, list-methods."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import numpy as np

from .pipeline import CONFIG_SCHEMA, REGISTRY, ConfigError, load_config, run_pipeline
from .volume_io import export_overlay_png, read_evf, slice_3d

EXIT_OK, EXIT_FATAL, EXIT_METHOD_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        print("config schema:\n" + json.dumps(CONFIG_SCHEMA, indent=2), file=sys.stderr)
        raise SystemExit(EXIT_FATAL)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="esegeta", description="Attribution maps for segmentation networks.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    for name, help_ in (("run", "run all configured methods"), ("eval", "metrics only, on existing maps")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
    e = sub.add_parser("export-png", help="overlay one slice of a map on its input")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--base", required=True)
    e.add_argument("--axis", type=int, default=0)
    e.add_argument("--index", type=int, default=None)
    e.add_argument("--channel", type=int, default=0)
    e.add_argument("--percentile", type=float, default=99.0)
    e.add_argument("--out", required=True)
    sub.add_parser("list-methods", help="print registered method ids")
    return p


def _to_slice(vol: np.ndarray, channel: int, axis: int, index: Optional[int]) -> np.ndarray:
    """2D plane from a (1, C, *spatial) map or a bare 2D/3D volume."""
    if vol.ndim in (4, 5):
        vol = vol[0, channel]
    if vol.ndim == 2:
        return vol
    if vol.ndim != 3:
        raise ValueError(f"cannot take a 2D slice of shape {vol.shape}")
    return slice_3d(vol, axis, vol.shape[axis] // 2 if index is None else index)


def _export(args) -> int:
    attr = read_evf(args.inp).data
    base = read_evf(args.base).data
    export_overlay_png(
        _to_slice(base, 0, args.axis, args.index),
        _to_slice(attr, args.channel, args.axis, args.index),
        args.out,
        args.percentile,
    )
    return EXIT_OK


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.cmd == "list-methods":
            print("\n".join(sorted(REGISTRY)))
            return EXIT_OK
        if args.cmd == "export-png":
            return _export(args)
        cfg = load_config(args.config)
        report = run_pipeline(cfg, eval_only=args.cmd == "eval")
    except ConfigError as e:
        print(f"esegeta: {e}", file=sys.stderr)
        return EXIT_FATAL
    except Exception as e:
        print(f"esegeta: fatal: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FATAL
    failed = report["totals"]["timeout"] + report["totals"]["error"]
    return EXIT_METHOD_FAILED if failed else EXIT_OK


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
