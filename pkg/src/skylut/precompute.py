"""Scattering-table precomputation and lookup.

Three tables drive rendering, all 32-bit float triples:

* transmittance T(r, mu), 256 x 64: extinction from radius r along view
  cosine mu to the shell boundary (ground for downward rays).
* irradiance E(r, mu_s), 64 x 32: cosine-weighted sun irradiance on a
  horizontal surface, direct plus accumulated multiple-scattering terms.
* in-scatter S(r, mu, mu_s, nu): two 4D grids.  The aerosol grid holds
  single scattering without its phase function; the molecular grid holds
  phase-free single scattering plus every higher order divided by the
  molecular phase, so applying the phase functions at lookup reconstructs
  the total.  Storing phase-free values keeps the grids smooth and lets
  the wavelength-dependent aerosol phase be applied exactly at lookup.

Grid mappings follow the Bruneton non-linear parameterization: r through
the distance-to-horizon variable rho/H, mu through boundary distances
with separate sub-ranges above and below the horizon (the discontinuity
never interpolates across), mu_s through an exponential-bias curve over
[-0.2, 1], nu linear.  The two in-scatter grids together hold
(mu_s * nu_total = 256) x 128 x 32 texels and are flattened that way on
disk.

Higher orders iterate the gathering integral: each pass integrates the
previous order's radiance (plus ground bounces lit by the previous
irradiance delta) over the sphere at every shell point, then marches the
result along view rays.  Per-order sup norms are recorded and the build
aborts if they ever grow.
"""

from __future__ import annotations

import math
import os
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import AtmosphereModel
from .optics import ShellGeometry, pickering_air_mass
from .spectra import DomainError

# mu_s below this never receives meaningful light; lower bound of the axis
MU_S_MIN = -0.2
# divisor floor for transmittance reconstruction near the horizon
MIN_TRANSMITTANCE_DIVISOR = 1e-6

LUT_MAGIC = b"SKYL"
LUT_VERSION = 1
HDR_MAGIC = b"SKYI"


class LutFormatError(ValueError):
    """A table file is malformed, truncated or from another version."""


class DivergenceError(RuntimeError):
    """Scattering-order deltas grew instead of decaying; build aborted."""


@dataclass(frozen=True)
class TableDims:
    """Grid sizes.  The two in-scatter grids share the 256-column storage
    budget (2 grids x mu_s 32 x nu 4) of the combined in-scatter texture."""

    transmittance_w: int = 256
    transmittance_h: int = 64
    irradiance_w: int = 64
    irradiance_h: int = 32
    inscatter_r: int = 32
    inscatter_mu: int = 128
    inscatter_mu_s: int = 32
    inscatter_nu: int = 4

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 2:
                raise DomainError(f"dimension {name} must be >= 2")
        if self.inscatter_mu % 2:
            raise DomainError("inscatter_mu must be even (horizon split)")

    def as_tuple(self):
        return (self.transmittance_w, self.transmittance_h,
                self.irradiance_w, self.irradiance_h,
                self.inscatter_r, self.inscatter_mu,
                self.inscatter_mu_s, self.inscatter_nu)

    def texel_count(self) -> int:
        return (self.transmittance_w * self.transmittance_h
                + self.irradiance_w * self.irradiance_h
                + 2 * self.inscatter_r * self.inscatter_mu
                * self.inscatter_mu_s * self.inscatter_nu)

    def payload_bytes(self) -> int:
        return self.texel_count() * 3 * 4

    def file_bytes(self) -> int:
        return _HEADER_SIZE + self.payload_bytes()


@dataclass(frozen=True)
class LutCoords:
    """Physical lookup coordinates: radius and three direction cosines."""

    r: float      # m, in [Rg, Rt]
    mu: float     # cos(view zenith)
    mu_s: float   # cos(sun zenith)
    nu: float     # cos(sun-view angle)

    def __post_init__(self):
        for name in ("mu", "mu_s", "nu"):
            v = getattr(self, name)
            if not -1.0 - 1e-12 <= v <= 1.0 + 1e-12:
                raise DomainError(f"{name} must be in [-1, 1], got {v}")


@dataclass(frozen=True)
class BuildSettings:
    """Integration sample counts (defaults per the error budget)."""

    transmittance_samples: int = 500
    path_samples: int = 50
    gather_theta: int = 16
    gather_phi: int = 32
    irradiance_theta: int = 16
    irradiance_phi: int = 32


@dataclass
class BuildReport:
    """Per-order sup norms of the in-scatter deltas and stage timings."""

    delta_norms: dict = field(default_factory=dict)   # order -> ||dS||_inf
    stage_seconds: dict = field(default_factory=dict)
    wall_seconds: float = 0.0


@dataclass(frozen=True)
class ScatteringTables:
    """Immutable precomputed tables for one atmosphere model."""

    transmittance: np.ndarray        # (h, w, 3) float32
    irradiance: np.ndarray           # (h, w, 3) float32
    inscatter_rayleigh: np.ndarray   # (r, mu, mu_s, nu, 3) float32
    inscatter_mie: np.ndarray        # (r, mu, mu_s, nu, 3) float32
    dims: TableDims
    model_hash: int

    def __post_init__(self):
        for name in ("transmittance", "irradiance", "inscatter_rayleigh",
                     "inscatter_mie"):
            grid = getattr(self, name)
            if not np.all(np.isfinite(grid)):
                raise DomainError(f"{name} grid has non-finite entries")
            if np.any(grid < 0.0):
                raise DomainError(f"{name} grid has negative entries")
            grid.setflags(write=False)


# ---------------------------------------------------------------------------
# Axis mappings (forward: physical -> fractional texel index; all vectorized)


def _rho_h(geom: ShellGeometry, r):
    h_top = math.sqrt(geom.rt**2 - geom.rg**2)
    rho = np.sqrt(np.maximum(np.asarray(r, float) ** 2 - geom.rg**2, 0.0))
    return rho, h_top


def r_to_index(geom, size, r):
    rho, h_top = _rho_h(geom, r)
    return np.clip(rho / h_top, 0.0, 1.0) * (size - 1)


def index_to_r(geom, size, idx):
    x = np.asarray(idx, float) / (size - 1)
    h_top = math.sqrt(geom.rt**2 - geom.rg**2)
    return np.sqrt(geom.rg**2 + (x * h_top) ** 2)


_TAN_SHAPE = math.tan(1.5)


def trans_mu_to_index(geom, size, mu):
    mu_lo = -math.sqrt(1.0 - (geom.rg / geom.rt) ** 2)
    x = (np.clip(mu, mu_lo, 1.0) - mu_lo) / (1.0 - mu_lo)
    return np.arctan(x * _TAN_SHAPE) / 1.5 * (size - 1)


def index_to_trans_mu(geom, size, idx):
    mu_lo = -math.sqrt(1.0 - (geom.rg / geom.rt) ** 2)
    u = np.asarray(idx, float) / (size - 1)
    return mu_lo + np.tan(1.5 * u) / _TAN_SHAPE * (1.0 - mu_lo)


def ray_hits_ground(geom, r, mu):
    r = np.asarray(r, float)
    mu = np.asarray(mu, float)
    disc = r * r * (mu * mu - 1.0) + geom.rg**2
    return (mu < 0.0) & (disc >= 0.0)


def distance_to_top(geom, r, mu):
    r = np.asarray(r, float)
    mu = np.asarray(mu, float)
    disc = r * r * (mu * mu - 1.0) + geom.rt**2
    return np.maximum(-r * mu + np.sqrt(np.maximum(disc, 0.0)), 0.0)


def distance_to_ground(geom, r, mu):
    r = np.asarray(r, float)
    mu = np.asarray(mu, float)
    disc = r * r * (mu * mu - 1.0) + geom.rg**2
    return np.maximum(-r * mu - np.sqrt(np.maximum(disc, 0.0)), 0.0)


def mu_to_index(geom, size, r, mu, hits_ground):
    """Fractional index on the split mu axis; never crosses the horizon."""
    r = np.asarray(r, float)
    mu = np.clip(np.asarray(mu, float), -1.0, 1.0)
    hits_ground = np.asarray(hits_ground, bool)
    rho, h_top = _rho_h(geom, r)
    half = size // 2

    d_ground = distance_to_ground(geom, r, mu)
    span_g = np.maximum(rho - (r - geom.rg), 1e-9)
    idx_below = (d_ground - (r - geom.rg)) / span_g * (half - 1)

    d_top = distance_to_top(geom, r, mu)
    d_max = rho + h_top
    d_min = geom.rt - r
    span_t = np.maximum(d_max - d_min, 1e-9)
    idx_above = half + (d_max - d_top) / span_t * (half - 1)

    idx = np.where(hits_ground, idx_below, idx_above)
    lo = np.where(hits_ground, 0.0, float(half))
    hi = np.where(hits_ground, half - 1.0, size - 1.0)
    return np.clip(idx, lo, hi)


def index_to_mu(geom, size, r, idx):
    """Inverse mu mapping; indices below size/2 are ground-hitting rays."""
    r = np.asarray(r, float)
    idx = np.asarray(idx, float)
    rho, h_top = _rho_h(geom, r)
    half = size // 2
    below = idx < half

    y_b = np.clip(idx, 0, half - 1) / (half - 1)
    d_b = (r - geom.rg) + y_b * (rho - (r - geom.rg))
    mu_b = np.where(d_b > 0.0, -(rho**2 + d_b**2) / (2.0 * r * np.maximum(d_b, 1e-9)), -1.0)

    y_a = (np.clip(idx, half, size - 1) - half) / (half - 1)
    d_max = rho + h_top
    d_min = geom.rt - r
    d_a = d_max + y_a * (d_min - d_max)
    mu_a = np.where(
        d_a > 0.0,
        (geom.rt**2 - r * r - d_a**2) / (2.0 * r * np.maximum(d_a, 1e-9)),
        1.0,
    )
    return np.clip(np.where(below, mu_b, mu_a), -1.0, 1.0)


_MU_S_EXP = 1.0 - math.exp(-3.6)


def mu_s_to_index(size, mu_s):
    x = np.clip(np.asarray(mu_s, float), MU_S_MIN, 1.0)
    u = (1.0 - np.exp(-3.0 * x - 0.6)) / _MU_S_EXP
    return np.clip(u, 0.0, 1.0) * (size - 1)


def index_to_mu_s(size, idx):
    u = np.asarray(idx, float) / (size - 1)
    return -(0.6 + np.log(1.0 - np.clip(u, 0.0, 1.0 - 1e-12) * _MU_S_EXP)) / 3.0


def nu_to_index(size, nu):
    return (np.clip(np.asarray(nu, float), -1.0, 1.0) + 1.0) / 2.0 * (size - 1)


def index_to_nu(size, idx):
    return -1.0 + 2.0 * np.asarray(idx, float) / (size - 1)


def irradiance_indices(geom, dims: TableDims, r, mu_s):
    row = np.clip((np.asarray(r, float) - geom.rg) / (geom.rt - geom.rg), 0, 1) \
        * (dims.irradiance_h - 1)
    col = np.clip((np.asarray(mu_s, float) - MU_S_MIN) / (1.0 - MU_S_MIN), 0, 1) \
        * (dims.irradiance_w - 1)
    return row, col


def map_coords(c: LutCoords, dims: TableDims, geom: ShellGeometry) -> np.ndarray:
    """Physical coordinates -> fractional texel indices (r, mu, mu_s, nu)."""
    ground = bool(ray_hits_ground(geom, c.r, c.mu))
    return np.array([
        float(r_to_index(geom, dims.inscatter_r, c.r)),
        float(mu_to_index(geom, dims.inscatter_mu, c.r, c.mu, ground)),
        float(mu_s_to_index(dims.inscatter_mu_s, c.mu_s)),
        float(nu_to_index(dims.inscatter_nu, c.nu)),
    ])


def unmap_coords(texel, dims: TableDims, geom: ShellGeometry) -> LutCoords:
    """Fractional texel indices -> physical coordinates."""
    ir, imu, imus, inu = (float(v) for v in texel)
    r = float(index_to_r(geom, dims.inscatter_r, ir))
    return LutCoords(
        r=r,
        mu=float(index_to_mu(geom, dims.inscatter_mu, r, imu)),
        mu_s=float(index_to_mu_s(dims.inscatter_mu_s, imus)),
        nu=float(index_to_nu(dims.inscatter_nu, inu)),
    )


# ---------------------------------------------------------------------------
# Grid sampling


def _bilinear(grid, row_idx, col_idx):
    h, w, _ = grid.shape
    r0 = np.clip(np.floor(row_idx).astype(int), 0, h - 2)
    c0 = np.clip(np.floor(col_idx).astype(int), 0, w - 2)
    fr = np.clip(row_idx - r0, 0.0, 1.0)[..., None]
    fc = np.clip(col_idx - c0, 0.0, 1.0)[..., None]
    flat = grid.reshape(h * w, grid.shape[-1])
    i00 = r0 * w + c0
    v00 = flat[i00]
    v01 = flat[i00 + 1]
    v10 = flat[i00 + w]
    v11 = flat[i00 + w + 1]
    return (v00 * (1 - fr) * (1 - fc) + v01 * (1 - fr) * fc
            + v10 * fr * (1 - fc) + v11 * fr * fc)


def sample_transmittance(table, geom, r, mu):
    """T from (r, mu) to the shell boundary, bilinear over the 2D table."""
    h, w, _ = table.shape
    return _bilinear(table, r_to_index(geom, h, r), trans_mu_to_index(geom, w, mu))


def transmittance_between(table, geom, r, mu, d, hits_ground):
    """T along a straight segment of length d from (r, mu).

    Reconstructed as the ratio of boundary transmittances, evaluated from
    the far endpoint for ground-hitting rays so both lookups stay on
    upward directions.  The divisor is floored at 1e-6.
    """
    r = np.asarray(r, float)
    mu = np.asarray(mu, float)
    d = np.maximum(np.asarray(d, float), 0.0)
    hits_ground = np.asarray(hits_ground, bool)
    r1 = np.sqrt(np.maximum(r * r + d * d + 2.0 * r * d * mu, geom.rg**2))
    r1 = np.minimum(r1, geom.rt)
    mu1 = np.clip((r * mu + d) / np.maximum(r1, 1.0), -1.0, 1.0)
    t_up = sample_transmittance(table, geom, r, mu) \
        / np.maximum(sample_transmittance(table, geom, r1, mu1),
                     MIN_TRANSMITTANCE_DIVISOR)
    t_down = sample_transmittance(table, geom, r1, -mu1) \
        / np.maximum(sample_transmittance(table, geom, r, -mu),
                     MIN_TRANSMITTANCE_DIVISOR)
    return np.clip(np.where(hits_ground[..., None], t_down, t_up), 0.0, 1.0)


def sun_visibility_transmittance(table, geom, r, mu_s):
    """T toward the sun, zero when the sun is below the local horizon."""
    r = np.asarray(r, float)
    mu_s = np.asarray(mu_s, float)
    visible = mu_s >= geom.horizon_mu(r)
    return np.where(visible[..., None],
                    sample_transmittance(table, geom, r, mu_s), 0.0)


def sample_irradiance(table, geom, r, mu_s):
    h, w, _ = table.shape
    row = np.clip((np.asarray(r, float) - geom.rg) / (geom.rt - geom.rg), 0, 1) * (h - 1)
    col = np.clip((np.asarray(mu_s, float) - MU_S_MIN) / (1.0 - MU_S_MIN), 0, 1) * (w - 1)
    return _bilinear(table, row, col)


def sample_inscatter_grid(grid, geom, dims: TableDims, r, mu, mu_s, nu, hits_ground):
    """Quadrilinear fetch of one 4D in-scatter grid.

    mu interpolation stays inside the half selected by ``hits_ground``;
    nu blends the two neighbouring 3D slices.
    """
    nr, nm, ns, nn, _ = grid.shape
    fi_r = r_to_index(geom, nr, r)
    fi_mu = mu_to_index(geom, nm, r, mu, hits_ground)
    fi_ms = mu_s_to_index(ns, mu_s)
    fi_nu = nu_to_index(nn, nu)

    shape = np.broadcast_shapes(np.shape(fi_r), np.shape(fi_mu),
                                np.shape(fi_ms), np.shape(fi_nu))
    hits_ground = np.broadcast_to(np.asarray(hits_ground, bool), shape)
    half = nm // 2
    i_r0 = np.clip(np.floor(fi_r).astype(int), 0, nr - 2)
    mu_lo = np.where(hits_ground, 0, half)
    mu_hi = np.where(hits_ground, half - 1, nm - 1)
    i_mu0 = np.clip(np.floor(fi_mu).astype(int), mu_lo, mu_hi - 1)
    i_ms0 = np.clip(np.floor(fi_ms).astype(int), 0, ns - 2)
    i_nu0 = np.clip(np.floor(fi_nu).astype(int), 0, nn - 2)

    f_r = np.clip(fi_r - i_r0, 0, 1)
    f_mu = np.clip(fi_mu - i_mu0, 0, 1)
    f_ms = np.clip(fi_ms - i_ms0, 0, 1)
    f_nu = np.clip(fi_nu - i_nu0, 0, 1)

    flat = grid.reshape(-1, 3)
    out = np.zeros(shape + (3,), dtype=np.float64)
    strides = (nm * ns * nn, ns * nn, nn, 1)
    base = (i_r0 * strides[0] + i_mu0 * strides[1]
            + i_ms0 * strides[2] + i_nu0 * strides[3])
    for dr in (0, 1):
        w_r = (1 - f_r) if dr == 0 else f_r
        for dm in (0, 1):
            w_m = w_r * ((1 - f_mu) if dm == 0 else f_mu)
            for ds in (0, 1):
                w_s = w_m * ((1 - f_ms) if ds == 0 else f_ms)
                for dn in (0, 1):
                    w = w_s * ((1 - f_nu) if dn == 0 else f_nu)
                    idx = base + dr * strides[0] + dm * strides[1] \
                        + ds * strides[2] + dn * strides[3]
                    out += w[..., None] * flat[idx]
    return out


def sample_inscatter(tables: ScatteringTables, model: AtmosphereModel,
                     r, mu, mu_s, nu, hits_ground):
    """Phase-weighted total in-scatter radiance at a lookup point."""
    parts = sample_inscatter_parts(tables, model, r, mu, mu_s, nu, hits_ground)
    return parts[0] + parts[1]


def sample_inscatter_parts(tables: ScatteringTables, model: AtmosphereModel,
                           r, mu, mu_s, nu, hits_ground):
    """(molecular+multiple, aerosol) in-scatter parts, phases applied."""
    geom = model.geometry
    ray = sample_inscatter_grid(tables.inscatter_rayleigh, geom, tables.dims,
                                r, mu, mu_s, nu, hits_ground)
    mie = sample_inscatter_grid(tables.inscatter_mie, geom, tables.dims,
                                r, mu, mu_s, nu, hits_ground)
    nu = np.asarray(nu, float)
    p_ray = model.phase_rayleigh(np.clip(nu, -1.0, 1.0))[..., None]
    p_mie = model.phase_mie(np.clip(nu, -1.0, 1.0))
    return np.maximum(p_ray * ray, 0.0), np.maximum(p_mie * mie, 0.0)


# ---------------------------------------------------------------------------
# Builders


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SKYLUT_THREADS", "1")))
    except ValueError:
        return 1


def _run_slices(fn, count):
    workers = _thread_count()
    if workers == 1:
        for i in range(count):
            fn(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fn, range(count)))


def build_transmittance(model: AtmosphereModel, dims: TableDims,
                        settings: BuildSettings = BuildSettings()) -> np.ndarray:
    """Boundary transmittance grid; ground-observer rows get the
    refraction-corrected path stretch when the model asks for it."""
    geom = model.geometry
    h, w = dims.transmittance_h, dims.transmittance_w
    n = settings.transmittance_samples
    table = np.empty((h, w, 3), dtype=np.float64)
    mu = index_to_trans_mu(geom, w, np.arange(w))

    def one_row(i):
        r = float(index_to_r(geom, h, i))
        hits = ray_hits_ground(geom, r, mu)
        d = np.where(hits, distance_to_ground(geom, r, mu),
                     distance_to_top(geom, r, mu))
        t = np.linspace(0.0, 1.0, n)[:, None]
        radii = np.sqrt(r * r + (t * d) ** 2 + 2.0 * r * (t * d) * mu)
        h_km = geom.altitude_km(np.clip(radii, geom.rg, geom.rt))
        beta = model.extinction(h_km)
        seg = d.copy()
        if model.curved_paths and i == 0:
            # Pickering stretch for ground observers looking above horizon
            up = mu >= 0.0
            theta = np.degrees(np.arccos(np.clip(mu[up], 0.0, 1.0)))
            stretch = pickering_air_mass(theta) * geom.shell_thickness_m \
                / np.maximum(d[up], 1.0)
            seg[up] = d[up] * np.maximum(stretch, 1.0)
        tau = np.trapezoid(beta, dx=1.0 / (n - 1), axis=0) * seg[:, None]
        table[i] = np.exp(-tau)

    _run_slices(one_row, h)
    return table


def _slice_radius(geom, dims, i):
    r = float(index_to_r(geom, dims.inscatter_r, i))
    return min(max(r, geom.rg + 10.0), geom.rt - 1.0)


def _slice_nodes(geom, dims: TableDims, i):
    """Texel-center coordinates for one r-slice of the in-scatter grids.

    Ground flags follow the axis construction (lower half of the mu axis),
    so grazing-horizon nodes stay on their own side.
    """
    r = _slice_radius(geom, dims, i)
    mu = index_to_mu(geom, dims.inscatter_mu, r, np.arange(dims.inscatter_mu))
    mu_s = index_to_mu_s(dims.inscatter_mu_s, np.arange(dims.inscatter_mu_s))
    nu = index_to_nu(dims.inscatter_nu, np.arange(dims.inscatter_nu))
    m = mu[:, None, None]
    s = mu_s[None, :, None]
    n = nu[None, None, :]
    spread = np.sqrt(np.maximum(1 - m * m, 0.0)) * np.sqrt(np.maximum(1 - s * s, 0.0))
    nu_eff = np.clip(n, m * s - spread, m * s + spread)
    ground = np.arange(dims.inscatter_mu) < dims.inscatter_mu // 2
    return r, mu, mu_s, nu, nu_eff, ground


def build_order1(model: AtmosphereModel, dims: TableDims, trans,
                 settings: BuildSettings = BuildSettings()):
    """Single-scatter grids (phase functions not applied) and the direct
    cosine-weighted irradiance."""
    geom = model.geometry
    shape = (dims.inscatter_r, dims.inscatter_mu, dims.inscatter_mu_s,
             dims.inscatter_nu, 3)
    delta_ray = np.zeros(shape)
    delta_mie = np.zeros(shape)
    n = settings.path_samples

    def one_slice(i):
        r, mu, mu_s, nu, nu_eff, ground = _slice_nodes(geom, dims, i)
        d_end = np.where(ground, distance_to_ground(geom, r, mu),
                         distance_to_top(geom, r, mu))
        dt = (d_end / n)[:, None, None]
        mu_b = mu[:, None, None]
        ray_sum = np.zeros((dims.inscatter_mu, dims.inscatter_mu_s,
                            dims.inscatter_nu, 3))
        mie_sum = np.zeros_like(ray_sum)
        for k in range(n):
            t = ((k + 0.5) * d_end / n)[:, None, None]
            r_t = np.sqrt(r * r + t * t + 2.0 * r * t * mu_b)
            r_t = np.clip(r_t, geom.rg, geom.rt)
            mu_s_t = (r * mu_s[None, :, None] + t * nu_eff) / r_t
            t_path = transmittance_between(trans, geom, r, mu_b, t, ground[:, None, None])
            t_sun = sun_visibility_transmittance(trans, geom, r_t,
                                                 np.clip(mu_s_t, -1.0, 1.0))
            w = t_path * t_sun
            h_km = geom.altitude_km(r_t)
            ray_sum += w * model.scatter_rayleigh(h_km)
            mie_sum += w * model.scatter_mie(h_km)
        delta_ray[i] = ray_sum * dt[..., None]
        delta_mie[i] = mie_sum * dt[..., None]

    _run_slices(one_slice, dims.inscatter_r)

    rows = np.linspace(geom.rg, geom.rt, dims.irradiance_h)
    mu_s = MU_S_MIN + (np.arange(dims.irradiance_w) / (dims.irradiance_w - 1)) \
        * (1.0 - MU_S_MIN)
    t_sun = sun_visibility_transmittance(trans, geom, rows[:, None], mu_s[None, :])
    irr_direct = t_sun * np.maximum(mu_s, 0.0)[None, :, None]
    return delta_ray, delta_mie, irr_direct


def _sphere_quadrature(n_theta, n_phi, hemisphere=False):
    span = math.pi / 2.0 if hemisphere else math.pi
    d_theta = span / n_theta
    d_phi = 2.0 * math.pi / n_phi
    theta = (np.arange(n_theta) + 0.5) * d_theta
    phi = (np.arange(n_phi) + 0.5) * d_phi
    return theta, phi, d_theta * d_phi


def _interp_nu_rows(slab, s_index, fi_nu):
    """slab (S, N, 3) interpolated along nu at per-point rows s_index."""
    n = slab.shape[1]
    i0 = np.clip(np.floor(fi_nu).astype(int), 0, n - 2)
    f = np.clip(fi_nu - i0, 0.0, 1.0)[..., None]
    v0 = slab[s_index, i0]
    v1 = slab[s_index, i0 + 1]
    return v0 * (1 - f) + v1 * f


def _mu_slab(grid, geom, dims, i_r, r, mu_value, hits_ground):
    """grid[i_r] interpolated along mu, leaving a (S, N, 3) slab."""
    nm = dims.inscatter_mu
    half = nm // 2
    fi = float(mu_to_index(geom, nm, r, mu_value, hits_ground))
    lo, hi = (0, half - 1) if hits_ground else (half, nm - 1)
    i0 = int(np.clip(math.floor(fi), lo, hi - 1))
    f = min(max(fi - i0, 0.0), 1.0)
    return grid[i_r, i0] * (1 - f) + grid[i_r, i0 + 1] * f


def gather_delta_j(model, dims, trans, prev_ray, prev_mie, prev_multi,
                   prev_irr, first: bool,
                   settings: BuildSettings = BuildSettings()):
    """Gathering integral: radiance scattered toward every texel direction
    from the previous order's light field, including ground bounces."""
    geom = model.geometry
    theta, phi, dw0 = _sphere_quadrature(settings.gather_theta, settings.gather_phi)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    w_dirs = np.stack([np.cos(phi)[:, None] * sin_t[None, :],
                       np.sin(phi)[:, None] * sin_t[None, :],
                       np.broadcast_to(cos_t[None, :], (phi.size, theta.size))],
                      axis=-1)        # (phi, theta, 3)

    shape = (dims.inscatter_r, dims.inscatter_mu, dims.inscatter_mu_s,
             dims.inscatter_nu, 3)
    delta_j = np.zeros(shape)
    albedo = model.ground_albedo.as_array() / math.pi
    nn = dims.inscatter_nu
    s_rows = np.arange(dims.inscatter_mu_s)[None, :, None, None]

    def one_slice(i):
        r, mu, mu_s, nu, nu_eff, _ = _slice_nodes(geom, dims, i)
        h_km = geom.altitude_km(r)
        beta_ray = model.scatter_rayleigh(h_km)
        beta_mie = model.scatter_mie(h_km)
        mu_h = float(geom.horizon_mu(r))

        sin_view = np.sqrt(np.maximum(1.0 - mu * mu, 1e-12))
        m_b = mu[:, None, None]
        s_b = mu_s[None, :, None]
        s_x = (nu_eff - m_b * s_b) / sin_view[:, None, None]
        s_y = np.sqrt(np.maximum(1.0 - s_x**2 - s_b**2, 0.0))
        sun = np.stack([s_x, s_y, np.broadcast_to(s_b, s_x.shape)], axis=-1)

        acc = np.zeros((dims.inscatter_mu, dims.inscatter_mu_s, nn, 3))
        for it in range(theta.size):
            ct, st = float(cos_t[it]), float(sin_t[it])
            ground_dir = ct < mu_h
            if first:
                slab_ray = _mu_slab(prev_ray, geom, dims, i, r, ct, ground_dir)
                slab_mie = _mu_slab(prev_mie, geom, dims, i, r, ct, ground_dir)
            else:
                slab_multi = _mu_slab(prev_multi, geom, dims, i, r, ct, ground_dir)
            if ground_dir:
                d_g = float(distance_to_ground(geom, r, ct))
                t_ground = transmittance_between(trans, geom, r, ct, d_g, True)
            w_theta = w_dirs[:, it, :]                       # (phi, 3)
            # incident-direction cosine with the sun, per texel and phi
            nu1 = np.einsum("msnc,pc->msnp", sun, w_theta)
            nu1 = np.clip(nu1, -1.0, 1.0)
            fi_nu1 = nu_to_index(nn, nu1)
            if first:
                incident = (
                    _interp_nu_rows(slab_ray, s_rows, fi_nu1)
                    * model.phase_rayleigh(nu1)[..., None]
                    + _interp_nu_rows(slab_mie, s_rows, fi_nu1)
                    * model.phase_mie(nu1)
                )
            else:
                incident = _interp_nu_rows(slab_multi, s_rows, fi_nu1)
            if ground_dir:
                n_dot_s = (r * s_b[..., None] + d_g * nu1) / geom.rg
                girr = sample_irradiance(prev_irr, geom, geom.rg,
                                         np.clip(n_dot_s, -1.0, 1.0))
                incident = incident + albedo * t_ground * girr
            # scatter toward the view direction: cos between w and v
            cos_wv = sin_view[:, None] * w_theta[None, :, 0] \
                + mu[:, None] * w_theta[None, :, 2]
            cos_wv = np.clip(cos_wv, -1.0, 1.0)
            p_out = beta_ray * model.phase_rayleigh(cos_wv)[..., None] \
                + beta_mie * model.phase_mie(cos_wv)       # (mu, phi, 3)
            acc += np.einsum("msnpc,mpc->msnc", incident, p_out) * (st * dw0)
        delta_j[i] = acc

    _run_slices(one_slice, dims.inscatter_r)
    return delta_j


def gather_delta_irradiance(model, dims, prev_ray, prev_mie, prev_multi,
                            first: bool,
                            settings: BuildSettings = BuildSettings()):
    """Hemispherical gather of the previous order onto horizontal surfaces."""
    geom = model.geometry
    theta, phi, dw0 = _sphere_quadrature(settings.irradiance_theta,
                                         settings.irradiance_phi, hemisphere=True)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rows = np.linspace(geom.rg, geom.rt, dims.irradiance_h)
    mu_s = MU_S_MIN + (np.arange(dims.irradiance_w) / (dims.irradiance_w - 1)) \
        * (1.0 - MU_S_MIN)
    sin_s = np.sqrt(np.maximum(1.0 - mu_s**2, 0.0))

    out = np.zeros((dims.irradiance_h, dims.irradiance_w, 3))
    for i, r in enumerate(rows):
        r = min(max(float(r), geom.rg + 10.0), geom.rt - 1.0)
        wx = sin_t[None, :, None] * np.cos(phi)[None, None, :]
        # nu1 = w . s with s = (sin_s, 0, mu_s)
        nu1 = sin_s[:, None, None] * wx + mu_s[:, None, None] * cos_t[None, :, None]
        nu1 = np.clip(nu1, -1.0, 1.0)
        mu_w = np.broadcast_to(cos_t[None, :, None], nu1.shape)
        mus_q = np.broadcast_to(mu_s[:, None, None], nu1.shape)
        if first:
            ray = sample_inscatter_grid(prev_ray, geom, dims, r, mu_w, mus_q,
                                        nu1, False)
            mie = sample_inscatter_grid(prev_mie, geom, dims, r, mu_w, mus_q,
                                        nu1, False)
            radiance = ray * model.phase_rayleigh(nu1)[..., None] \
                + mie * model.phase_mie(nu1)
        else:
            radiance = sample_inscatter_grid(prev_multi, geom, dims, r, mu_w,
                                             mus_q, nu1, False)
        weight = (cos_t * sin_t)[None, :, None, None] * dw0
        out[i] = np.sum(radiance * weight, axis=(1, 2))
    return out


def integrate_delta_inscatter(model, dims, trans, delta_j,
                              settings: BuildSettings = BuildSettings()):
    """March the gathered radiance along view rays: dS_i = int T dJ dt."""
    geom = model.geometry
    shape = delta_j.shape
    delta_s = np.zeros(shape)
    n = settings.path_samples

    def one_slice(i):
        r, mu, mu_s, nu, nu_eff, ground = _slice_nodes(geom, dims, i)
        d_end = np.where(ground, distance_to_ground(geom, r, mu),
                         distance_to_top(geom, r, mu))
        dt = (d_end / n)[:, None, None]
        mu_b = mu[:, None, None]
        g_b = ground[:, None, None]
        acc = np.zeros((dims.inscatter_mu, dims.inscatter_mu_s,
                        dims.inscatter_nu, 3))
        for k in range(n):
            t = ((k + 0.5) * d_end / n)[:, None, None]
            r_t = np.clip(np.sqrt(r * r + t * t + 2.0 * r * t * mu_b),
                          geom.rg, geom.rt)
            mu_t = np.clip((r * mu_b + t) / r_t, -1.0, 1.0)
            mu_s_t = np.clip((r * mu_s[None, :, None] + t * nu_eff) / r_t, -1.0, 1.0)
            t_path = transmittance_between(trans, geom, r, mu_b, t, g_b)
            j_val = sample_inscatter_grid(delta_j, geom, dims, r_t, mu_t,
                                          mu_s_t, nu_eff, g_b)
            acc += t_path * j_val
        delta_s[i] = acc * dt[..., None]

    _run_slices(one_slice, dims.inscatter_r)
    return delta_s


def iterate_order(model, dims, trans, prev_ray, prev_mie, prev_multi,
                  prev_irr, order: int,
                  settings: BuildSettings = BuildSettings()):
    """One multiple-scattering pass; returns (delta_inscatter, delta_irr)."""
    if order < 2:
        raise DomainError("iterate_order applies to orders >= 2")
    first = order == 2
    delta_j = gather_delta_j(model, dims, trans, prev_ray, prev_mie,
                             prev_multi, prev_irr, first, settings)
    delta_irr = gather_delta_irradiance(model, dims, prev_ray, prev_mie,
                                        prev_multi, first, settings)
    delta_s = integrate_delta_inscatter(model, dims, trans, delta_j, settings)
    return delta_s, delta_irr


def build_tables(model: AtmosphereModel, dims: TableDims = TableDims(),
                 settings: BuildSettings = BuildSettings(),
                 orders: int | None = None,
                 keep_single_scatter: bool = False):
    """Run the full precomputation.

    Returns (tables, report) or (tables, report, single_scatter_tables)
    with ``keep_single_scatter``; the snapshot holds only order-1 grids.
    """
    t_start = time.perf_counter()
    orders = model.scattering_orders if orders is None else orders
    if orders < 1:
        raise DomainError("orders must be >= 1")
    report = BuildReport()

    t0 = time.perf_counter()
    trans = build_transmittance(model, dims, settings)
    report.stage_seconds["transmittance"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ray1, mie1, irr_direct = build_order1(model, dims, trans, settings)
    report.stage_seconds["order1"] = time.perf_counter() - t0

    nu_nodes = index_to_nu(dims.inscatter_nu, np.arange(dims.inscatter_nu))
    phase_nodes = model.phase_rayleigh(nu_nodes)[None, None, None, :, None]

    acc_ray = ray1.copy()
    acc_mie = mie1.copy()
    acc_irr = irr_direct.copy()
    prev_multi = None
    prev_irr = irr_direct

    for order in range(2, orders + 1):
        t0 = time.perf_counter()
        delta_s, delta_irr = iterate_order(model, dims, trans, ray1, mie1,
                                           prev_multi, prev_irr, order, settings)
        norm = float(np.max(np.abs(delta_s)))
        report.delta_norms[order] = norm
        previous = report.delta_norms.get(order - 1)
        if previous is not None and norm > previous:
            raise DivergenceError(
                f"order {order} delta grew: {norm:.3e} > {previous:.3e}; "
                f"check scattering/extinction balance of model {model.name!r}")
        acc_ray += delta_s / phase_nodes
        acc_irr += delta_irr
        prev_multi, prev_irr = delta_s, delta_irr
        report.stage_seconds[f"order{order}"] = time.perf_counter() - t0

    model_hash = model.content_hash()

    def freeze(grid):
        return np.ascontiguousarray(np.maximum(grid, 0.0), dtype=np.float32)

    tables = ScatteringTables(
        transmittance=freeze(trans),
        irradiance=freeze(acc_irr),
        inscatter_rayleigh=freeze(acc_ray),
        inscatter_mie=freeze(acc_mie),
        dims=dims,
        model_hash=model_hash,
    )
    report.wall_seconds = time.perf_counter() - t_start
    if not keep_single_scatter:
        return tables, report
    single = ScatteringTables(
        transmittance=tables.transmittance,
        irradiance=freeze(irr_direct),
        inscatter_rayleigh=freeze(ray1),
        inscatter_mie=freeze(mie1),
        dims=dims,
        model_hash=model_hash,
    )
    return tables, report, single


# ---------------------------------------------------------------------------
# Serialization

_HEADER_FMT = "<4sI8IQ"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def _grid_to_disk(grid):
    """(r, mu, mu_s, nu, 3) -> (nu*mu_s, mu, r, 3) row-major float32 LE."""
    nr, nm, ns, nn, _ = grid.shape
    out = np.transpose(grid, (3, 2, 1, 0, 4)).reshape(nn * ns, nm, nr, 3)
    return np.ascontiguousarray(out, dtype="<f4")


def _grid_from_disk(flat, dims: TableDims):
    nr, nm = dims.inscatter_r, dims.inscatter_mu
    ns, nn = dims.inscatter_mu_s, dims.inscatter_nu
    grid = flat.reshape(nn, ns, nm, nr, 3)
    return np.ascontiguousarray(np.transpose(grid, (3, 2, 1, 0, 4)))


def save_tables(tables: ScatteringTables, path) -> None:
    dims = tables.dims
    header = struct.pack(_HEADER_FMT, LUT_MAGIC, LUT_VERSION,
                         *dims.as_tuple(), tables.model_hash)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(tables.transmittance, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(tables.irradiance, dtype="<f4").tobytes())
        fh.write(_grid_to_disk(tables.inscatter_rayleigh).tobytes())
        fh.write(_grid_to_disk(tables.inscatter_mie).tobytes())


def load_tables(path, expected_hash: int | None = None,
                allow_model_mismatch: bool = False) -> ScatteringTables:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER_SIZE:
        raise LutFormatError(
            f"{path}: truncated header, expected {_HEADER_SIZE} bytes, "
            f"got {len(blob)}")
    magic, version, *rest = struct.unpack_from(_HEADER_FMT, blob)
    if magic != LUT_MAGIC:
        raise LutFormatError(f"{path}: bad magic {magic!r}, expected {LUT_MAGIC!r}")
    if version != LUT_VERSION:
        raise LutFormatError(f"{path}: unsupported version {version}")
    dims = TableDims(*rest[:8])
    model_hash = rest[8]
    expected = dims.file_bytes()
    if len(blob) != expected:
        raise LutFormatError(
            f"{path}: expected {expected} bytes for dims {dims.as_tuple()}, "
            f"got {len(blob)}")
    if expected_hash is not None and expected_hash != model_hash:
        message = (f"{path}: model hash {model_hash:#018x} does not match "
                   f"expected {expected_hash:#018x}")
        if not allow_model_mismatch:
            raise LutFormatError(message)
        warnings.warn(message, stacklevel=2)

    offset = _HEADER_SIZE

    def take(count):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=offset)
        offset += count * 3 * 4
        return arr

    trans = take(dims.transmittance_w * dims.transmittance_h).reshape(
        dims.transmittance_h, dims.transmittance_w, 3).copy()
    irr = take(dims.irradiance_w * dims.irradiance_h).reshape(
        dims.irradiance_h, dims.irradiance_w, 3).copy()
    volume = dims.inscatter_r * dims.inscatter_mu * dims.inscatter_mu_s \
        * dims.inscatter_nu
    ray = _grid_from_disk(take(volume), dims)
    mie = _grid_from_disk(take(volume), dims)
    return ScatteringTables(transmittance=trans, irradiance=irr,
                            inscatter_rayleigh=ray, inscatter_mie=mie,
                            dims=dims, model_hash=model_hash)


def table_stats(tables: ScatteringTables) -> dict:
    """Per-grid ranges and payload checksum, for inspection tools."""
    import hashlib

    stats = {}
    payload = hashlib.sha256()
    for name in ("transmittance", "irradiance", "inscatter_rayleigh",
                 "inscatter_mie"):
        grid = getattr(tables, name)
        payload.update(np.ascontiguousarray(grid, dtype="<f4").tobytes())
        stats[name] = {"shape": tuple(grid.shape),
                       "min": float(grid.min()), "max": float(grid.max())}
    stats["sha256"] = payload.hexdigest()
    stats["model_hash"] = f"{tables.model_hash:#018x}"
    return stats
