"""Deterministic stand-ins for pre-trained model tools.

Bench cases register these as ``external_command`` catalog entries, e.g.::

    {python} -m geoflow.models threshold --input {input} --output {output} --above 0.6
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from geoflow.validation import read_ascii_grid, write_ascii_grid


def threshold_segment(values: np.ndarray, nodata: float, above: float | None, below: float | None) -> np.ndarray:
    valid = values != nodata
    hit = np.ones(values.shape, dtype=bool)
    if above is not None:
        hit &= values > above
    if below is not None:
        hit &= values < below
    out = np.where(hit, 1.0, 0.0)
    out[~valid] = nodata
    return out


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="geoflow.models")
    sub = parser.add_subparsers(dest="model", required=True)
    seg = sub.add_parser("threshold", help="binary segmentation by thresholding one band")
    seg.add_argument("--input", required=True)
    seg.add_argument("--output", required=True)
    seg.add_argument("--above", type=float)
    seg.add_argument("--below", type=float)
    args = parser.parse_args(argv)
    if args.above is None and args.below is None:
        parser.error("give --above and/or --below")
    grid = read_ascii_grid(args.input)
    out = threshold_segment(grid.values, grid.nodata, args.above, args.below)
    crs = grid.stats.crs if grid.stats.crs != "unknown" else None
    write_ascii_grid(
        args.output,
        out,
        nodata=grid.nodata,
        cellsize=grid.header["cellsize"],
        xll=grid.header.get("xllcorner", grid.header.get("xllcenter", 0.0)),
        yll=grid.header.get("yllcorner", grid.header.get("yllcenter", 0.0)),
        crs=crs,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
