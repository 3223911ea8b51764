"""plot_results: render sweep CSVs to figure files."""

from __future__ import annotations

import argparse
import sys

from .plots import PlotSpec, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_results",
        description="Render MSE-vs-SNR figures from a sweep results CSV.",
    )
    parser.add_argument("csv", help="sweep results CSV")
    parser.add_argument("--out", default="fig.png", help="output image path")
    parser.add_argument("--fig2", action="store_true",
                        help="block-mask vs diagonal-mask comparison only")
    parser.add_argument("--variants",
                        help="comma list of variants to draw (default: all)")
    parser.add_argument("--linear-y", action="store_true",
                        help="linear instead of log MSE axis")
    args = parser.parse_args(argv)
    spec = PlotSpec(
        csv_path=args.csv,
        out_path=args.out,
        log_y=not args.linear_y,
        variants=tuple(v.strip() for v in args.variants.split(","))
        if args.variants
        else None,
        fig2=args.fig2,
    )
    try:
        for path in render(spec):
            print(f"wrote {path}")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
