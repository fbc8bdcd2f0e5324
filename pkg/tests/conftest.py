"""Shared fixtures: coarse builds for unit tests, cached default-dims
builds for the acceptance suite."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from skylut.config import AtmosphereModel, load_preset
from skylut.optics import ShellGeometry
from skylut.precompute import (
    BuildSettings,
    TableDims,
    build_tables,
    load_tables,
    save_tables,
)
from skylut.spectra import MieParams, RayleighParams, SpectralTriple

CACHE_DIR = Path(__file__).parent / "_cache"

COARSE_DIMS = TableDims(transmittance_w=64, transmittance_h=16,
                        irradiance_w=16, irradiance_h=8,
                        inscatter_r=8, inscatter_mu=32,
                        inscatter_mu_s=8, inscatter_nu=2)
COARSE_SETTINGS = BuildSettings(transmittance_samples=150, path_samples=30,
                                gather_theta=8, gather_phi=16,
                                irradiance_theta=8, irradiance_phi=16)


def zero_atmosphere_model(geometry=None) -> AtmosphereModel:
    """A shell with no scattering or absorption at all."""
    geometry = geometry or ShellGeometry(6360e3, 6420e3)
    zero = SpectralTriple.uniform(0.0)
    return AtmosphereModel(
        name="zero",
        geometry=geometry,
        rayleigh=RayleighParams(scale_height_km=8.0, precomputed_beta_scat=zero),
        mie=MieParams(scale_height_km=1.2, precomputed_beta_scat=zero,
                      precomputed_beta_ext=zero),
        ground_albedo=SpectralTriple.uniform(0.3),
        curved_paths=False,
    )


@pytest.fixture(scope="session")
def earth_standard_model():
    return load_preset("earth_standard")


@pytest.fixture(scope="session")
def earth_advanced_model():
    return load_preset("earth_advanced")


@pytest.fixture(scope="session")
def mars_model():
    return load_preset("mars_advanced")


@pytest.fixture(scope="session")
def zero_model():
    return zero_atmosphere_model()


@pytest.fixture(scope="session")
def earth_coarse(earth_standard_model):
    """Coarse standard-Earth build with the order-1 snapshot."""
    tables, report, single = build_tables(
        earth_standard_model, COARSE_DIMS, COARSE_SETTINGS, orders=3,
        keep_single_scatter=True)
    return earth_standard_model, tables, report, single


@pytest.fixture(scope="session")
def zero_coarse(zero_model):
    tables, report = build_tables(zero_model, COARSE_DIMS, COARSE_SETTINGS,
                                  orders=2)
    return zero_model, tables, report


def cached_build(model: AtmosphereModel, dims: TableDims,
                 settings: BuildSettings, orders: int,
                 keep_single_scatter: bool = False, tag: str = ""):
    """Build once per (model, dims, settings, orders); reuse across runs.

    Builds are bitwise deterministic, so reloading a cached file is
    equivalent to rebuilding.  The recorded wall time and delta norms of
    the original build ride along in a JSON sidecar.
    """
    CACHE_DIR.mkdir(exist_ok=True)
    key = f"{tag or model.name}-{model.content_hash():016x}-" \
          f"{'x'.join(str(d) for d in dims.as_tuple())}-o{orders}-" \
          f"s{settings.path_samples}-{settings.transmittance_samples}"
    base = CACHE_DIR / key
    meta_path = base.with_suffix(".json")
    main_path = base.with_suffix(".skyl")
    single_path = base.with_suffix(".single.skyl")
    if meta_path.exists() and main_path.exists() and \
            (not keep_single_scatter or single_path.exists()):
        meta = json.loads(meta_path.read_text())
        tables = load_tables(main_path, expected_hash=model.content_hash())
        single = load_tables(single_path) if keep_single_scatter else None
        return tables, meta, single
    result = build_tables(model, dims, settings, orders=orders,
                          keep_single_scatter=keep_single_scatter)
    if keep_single_scatter:
        tables, report, single = result
        save_tables(single, single_path)
    else:
        (tables, report), single = result, None
    save_tables(tables, main_path)
    meta = {"wall_seconds": report.wall_seconds,
            "delta_norms": {str(k): v for k, v in report.delta_norms.items()},
            "stage_seconds": report.stage_seconds}
    meta_path.write_text(json.dumps(meta, indent=1))
    return tables, meta, single
