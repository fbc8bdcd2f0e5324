"""Command-line surface: precompute, render, validate, inspect-lut, presets.

Exit codes: 0 success, 1 usage error, 2 data/config error.  The
SKYLUT_THREADS environment variable caps precompute worker threads.
"""

from __future__ import annotations

import argparse
import math
import sys
import time

import numpy as np

from . import renderer, validation
from .config import ConfigError, list_presets, load_config, load_preset
from .precompute import (
    BuildSettings,
    DivergenceError,
    LutFormatError,
    TableDims,
    build_tables,
    load_tables,
    save_tables,
    table_stats,
)
from .spectra import DomainError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_length(text: str) -> float:
    """'400km', '2000m' or bare meters -> meters."""
    lowered = text.strip().lower()
    if lowered.endswith("km"):
        return float(lowered[:-2]) * 1000.0
    if lowered.endswith("m"):
        return float(lowered[:-1])
    return float(lowered)


def _parse_size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise _UsageError(f"bad --size {text!r}, expected WxH") from None


def _parse_dims(text: str) -> TableDims:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 8:
        raise _UsageError("--dims needs 8 integers: "
                          "tw,th,iw,ih,r,mu,mu_s,nu")
    return TableDims(*parts)


def _load_model(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "preset", None):
        return load_preset(args.preset)
    raise _UsageError("one of --preset or --config is required")


def _build_parser() -> _Parser:
    parser = _Parser(prog="skylut", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_args(p):
        p.add_argument("--preset", help="bundled preset name")
        p.add_argument("--config", help="path to a model config file")

    p = sub.add_parser("precompute", help="build scattering tables")
    add_model_args(p)
    p.add_argument("--out", required=True, help="output .skyl path")
    p.add_argument("--orders", type=int, default=None,
                   help="scattering orders (default: model setting)")
    p.add_argument("--dims", type=_parse_dims, default=TableDims(),
                   help="override table dims: tw,th,iw,ih,r,mu,mu_s,nu")
    p.add_argument("--path-samples", type=int, default=50)
    p.add_argument("--transmittance-samples", type=int, default=500)

    p = sub.add_parser("render", help="render a frame from prebuilt tables")
    add_model_args(p)
    p.add_argument("--lut", required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--hdr-out", help="optional float HDR dump path")
    p.add_argument("--alt", type=_parse_length, default=2.0,
                   help="camera altitude, e.g. 400km (default 2m)")
    p.add_argument("--lat", type=float, default=0.0)
    p.add_argument("--lon", type=float, default=0.0)
    p.add_argument("--sun-elev", type=float, default=30.0,
                   help="sun elevation above the horizon, degrees")
    p.add_argument("--sun-az", type=float, default=0.0)
    p.add_argument("--view-elev", type=float, default=None,
                   help="view elevation (default: toward the horizon)")
    p.add_argument("--view-az", type=float, default=0.0)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--size", type=_parse_size, default=(256, 256))
    p.add_argument("--exposure", type=float, default=120.0)
    p.add_argument("--albedo-map", help="equirectangular PPM ground texture")
    p.add_argument("--force", action="store_true",
                   help="render even if the table model hash mismatches")

    p = sub.add_parser("validate", help="compare sky luminance with CIE")
    add_model_args(p)
    p.add_argument("--lut", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--sun-elev", default="30,60",
                   help="comma-separated sun elevations, degrees")
    p.add_argument("--step", type=float, default=2.5)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("inspect-lut", help="print table dims and checksums")
    p.add_argument("lut")

    sub.add_parser("presets", help="list bundled presets")
    return parser


def _cmd_precompute(args) -> int:
    model = _load_model(args)
    settings = BuildSettings(transmittance_samples=args.transmittance_samples,
                             path_samples=args.path_samples)
    t0 = time.perf_counter()
    tables, report = build_tables(model, args.dims, settings, orders=args.orders)
    save_tables(tables, args.out)
    norms = ", ".join(f"order {k}: {v:.3e}" for k, v in report.delta_norms.items())
    print(f"built {model.name} tables in {time.perf_counter() - t0:.1f}s"
          + (f" ({norms})" if norms else ""))
    print(f"wrote {args.out} ({tables.dims.file_bytes()} bytes)")
    return 0


def _load_tables_checked(args, model):
    return load_tables(args.lut, expected_hash=model.content_hash(),
                       allow_model_mismatch=args.force)


def _cmd_render(args) -> int:
    model = _load_model(args)
    tables = _load_tables_checked(args, model)
    geom = model.geometry
    r = geom.rg + args.alt
    if args.view_elev is None:
        # default: aim at the horizon point of the planet
        view_elev = -math.degrees(math.acos(min(geom.rg / r, 1.0)))
    else:
        view_elev = args.view_elev
    position, orientation = renderer.make_camera(
        geom, args.alt, args.lat, args.lon, args.view_az, view_elev)
    sun = renderer.direction_from_angles(args.lat, args.lon, args.sun_az,
                                         args.sun_elev)
    albedo_map = renderer.read_ppm(args.albedo_map) if args.albedo_map else None
    job = renderer.RenderJob(
        camera_position=tuple(position),
        orientation=tuple(map(tuple, orientation)),
        vertical_fov_deg=args.fov,
        width=args.size[0], height=args.size[1],
        sun_direction=tuple(sun),
        exposure=args.exposure,
        albedo_map=albedo_map,
    )
    result = renderer.render(job, model, tables)
    renderer.write_ppm(args.out, result.display)
    print(f"wrote {args.out} ({args.size[0]}x{args.size[1]})")
    if args.hdr_out:
        renderer.save_hdr(args.hdr_out, result.hdr)
        print(f"wrote {args.hdr_out}")
    return 0


def _cmd_validate(args) -> int:
    model = _load_model(args)
    tables = _load_tables_checked(args, model)
    try:
        elevations = [float(v) for v in args.sun_elev.split(",") if v.strip()]
    except ValueError:
        raise _UsageError(f"bad --sun-elev {args.sun_elev!r}") from None
    if not elevations:
        raise _UsageError("--sun-elev needs at least one elevation")
    curves = [validation.build_validation_curve(model, tables, elev,
                                                step_deg=args.step)
              for elev in elevations]
    validation.export_curves(curves, args.out)
    for curve in curves:
        ratios = np.array([(m, c) for _, m, c in curve.samples])
        dev = np.abs(ratios[:, 0] - ratios[:, 1]) / ratios[:, 1]
        print(f"sun {curve.sun_elevation_deg:g} deg: "
              f"mean |model-CIE|/CIE = {dev.mean():.1%} over "
              f"{len(curve.samples)} angles")
    print(f"wrote {args.out} and {args.out}.gp")
    return 0


def _cmd_inspect(args) -> int:
    tables = load_tables(args.lut)
    stats = table_stats(tables)
    dims = tables.dims
    print(f"dims: transmittance {dims.transmittance_w}x{dims.transmittance_h}, "
          f"irradiance {dims.irradiance_w}x{dims.irradiance_h}, "
          f"inscatter r={dims.inscatter_r} mu={dims.inscatter_mu} "
          f"mu_s={dims.inscatter_mu_s} nu={dims.inscatter_nu} (x2 grids)")
    print(f"file bytes: {dims.file_bytes()}")
    print(f"model hash: {stats['model_hash']}")
    for name in ("transmittance", "irradiance", "inscatter_rayleigh",
                 "inscatter_mie"):
        s = stats[name]
        print(f"{name}: shape {s['shape']}, min {s['min']:.6g}, "
              f"max {s['max']:.6g}")
    print(f"payload sha256: {stats['sha256']}")
    return 0


def _cmd_presets(_args) -> int:
    for name in list_presets():
        print(name)
    return 0


_COMMANDS = {
    "precompute": _cmd_precompute,
    "render": _cmd_render,
    "validate": _cmd_validate,
    "inspect-lut": _cmd_inspect,
    "presets": _cmd_presets,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, LutFormatError, DivergenceError, DomainError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
