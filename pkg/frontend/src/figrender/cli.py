"""Command line: render --manifest <path> --figure fig2 --out <img>."""

from __future__ import annotations

import argparse
import sys

from figrender.render import FIGURES, PlotSpec, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="render", description="Render ddpclab experiment artifacts into figures"
    )
    parser.add_argument("--manifest", required=True, help="path to manifest.json")
    parser.add_argument("--figure", required=True, choices=FIGURES)
    parser.add_argument("--out", required=True, help="output image path (suffix picks the format)")
    parser.add_argument("--dpi", type=int, default=130)
    args = parser.parse_args(argv)
    spec = PlotSpec(args.manifest, args.figure, args.out, {"dpi": args.dpi})
    try:
        written = render(spec)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
