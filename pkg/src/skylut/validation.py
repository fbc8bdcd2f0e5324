"""Validation against the CIE general sky and brute-force oracles.

The CIE relative luminance ratio for a sky element at zenith angle Z and
angular distance chi from the sun, with gradation phi and indicatrix f,

    L / Lz = f(chi) phi(Z) / (f(Zs) phi(0)),
    phi(Z) = 1 + a exp(b / cos Z),
    f(chi) = 1 + c (exp(d chi) - exp(d pi/2)) + e cos^2(chi),

is compared against scans of the rendered sky in the solar meridian.
Radiance triples are collapsed to luminance with photopic efficiency
weights sampled at the three wavelengths.

The brute-force integrators here evaluate single (and double) scattering
directly from the coefficient functions with dense quadrature and no
lookup tables; they are the reference implementations the acceptance
suite measures the tables against.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AtmosphereModel, load_cie_sky_types
from .optics import shell_path
from .precompute import ScatteringTables
from .renderer import shade_rays
from .spectra import DomainError

# photopic efficiency sampled at (680, 550, 440) nm, normalized below
_PHOTOPIC_RAW = np.array([0.017, 0.995, 0.023])
LUMINANCE_WEIGHTS = _PHOTOPIC_RAW / _PHOTOPIC_RAW.sum()

CIE_CLEAR_SKY_TYPE = 12
# gradation cap just short of the horizon singularity
_MAX_ZENITH_RAD = math.radians(89.9)


def luminance(triple) -> np.ndarray:
    """Photopic luminance of radiance triples, shape (...)."""
    return np.einsum("...c,c->...", np.asarray(triple, float), LUMINANCE_WEIGHTS)


def cie_relative_luminance(view_zenith_rad, sun_zenith_rad,
                           view_sun_angle_rad,
                           sky_type: int = CIE_CLEAR_SKY_TYPE) -> np.ndarray:
    """CIE general-sky luminance over zenith luminance, L/Lz."""
    z = np.asarray(view_zenith_rad, float)
    zs = np.asarray(sun_zenith_rad, float)
    chi = np.asarray(view_sun_angle_rad, float)
    if np.any(z < 0.0) or np.any(z >= math.pi / 2.0):
        raise DomainError("view zenith must be in [0, pi/2)")
    if np.any(zs < 0.0) or np.any(zs >= math.pi / 2.0):
        raise DomainError("sun zenith must be in [0, pi/2)")
    a, b, c, d, e = load_cie_sky_types()[sky_type]
    z = np.minimum(z, _MAX_ZENITH_RAD)

    def gradation(zenith):
        return 1.0 + a * np.exp(b / np.cos(zenith))

    def indicatrix(angle):
        return 1.0 + c * (np.exp(d * angle) - math.exp(d * math.pi / 2.0)) \
            + e * np.cos(angle) ** 2

    return (indicatrix(chi) * gradation(z)) / (indicatrix(zs) * (1.0 + a * math.exp(b)))


@dataclass(frozen=True)
class ValidationCurve:
    """Model and CIE relative-luminance samples for one sun elevation.

    ``samples`` rows are (signed view zenith deg, model L/Lz, CIE L/Lz);
    negative zenith angles lie on the anti-solar side of the meridian.
    """

    sun_elevation_deg: float
    samples: tuple


def solar_meridian_directions(zenith_deg):
    """Unit view vectors in the x-z plane; +x is the sun's azimuth."""
    z = np.radians(np.asarray(zenith_deg, float))
    return np.stack([np.sin(z), np.zeros_like(z), np.cos(z)], axis=-1)


def model_sky_scan(model: AtmosphereModel, tables: ScatteringTables,
                   sun_elevation_deg: float, step_deg: float = 2.5,
                   max_zenith_deg: float = 88.0):
    """Scan shaded sky radiance through the solar meridian for a ground
    observer; returns (signed zenith degrees, L/Lz) or ([], []) with a
    diagnostic when the zenith luminance vanishes."""
    geom = model.geometry
    observer = np.array([0.0, 0.0, geom.rg + 2.0])
    elev = math.radians(sun_elevation_deg)
    sun = np.array([math.cos(elev), 0.0, math.sin(elev)])
    angles = np.arange(-max_zenith_deg, max_zenith_deg + 1e-9, step_deg)
    views = solar_meridian_directions(angles)
    radiance, _ = shade_rays(model, tables, observer, views, sun,
                             include_sun_disc=False)
    lum = luminance(radiance)
    zenith_lum = luminance(shade_rays(model, tables, observer,
                                      np.array([[0.0, 0.0, 1.0]]), sun,
                                      include_sun_disc=False)[0][0])
    if not zenith_lum > 0.0:
        warnings.warn("zenith luminance is zero; sky scan is undefined "
                      "(zero atmosphere?)", stacklevel=2)
        return np.array([]), np.array([])
    return angles, lum / zenith_lum


def build_validation_curve(model, tables, sun_elevation_deg: float,
                           step_deg: float = 2.5,
                           max_zenith_deg: float = 88.0) -> ValidationCurve:
    """Model scan paired with the CIE clear-sky ratio at the same geometry."""
    angles, ratios = model_sky_scan(model, tables, sun_elevation_deg,
                                    step_deg, max_zenith_deg)
    zs = math.radians(90.0 - sun_elevation_deg)
    rows = []
    for angle, ratio in zip(angles, ratios):
        z = math.radians(abs(angle))
        if z >= _MAX_ZENITH_RAD:
            continue
        # angular sun-view distance in the meridian plane
        chi = abs(math.radians(angle) - zs) if angle >= 0 else z + zs
        cie = float(cie_relative_luminance(z, zs, chi))
        rows.append((float(angle), float(ratio), cie))
    return ValidationCurve(sun_elevation_deg=sun_elevation_deg,
                           samples=tuple(rows))


# ---------------------------------------------------------------------------
# Brute-force reference integrators (no lookup tables)


def probe_geometry(geom, r, mu, mu_s, nu):
    """(observer, view, sun) vectors realizing LUT coordinates."""
    sin_v = math.sqrt(max(1.0 - mu * mu, 1e-12))
    spread = sin_v * math.sqrt(max(1.0 - mu_s * mu_s, 0.0))
    nu = min(max(nu, mu * mu_s - spread), mu * mu_s + spread)
    observer = np.array([0.0, 0.0, r])
    view = np.array([sin_v, 0.0, mu])
    s_x = (nu - mu * mu_s) / sin_v
    s_y = math.sqrt(max(1.0 - s_x * s_x - mu_s * mu_s, 0.0))
    sun = np.array([s_x, s_y, mu_s])
    sun /= np.linalg.norm(sun)
    return observer, view, sun


def _sun_optical_depth(model, points, sun, samples):
    """Optical depth from each point to the shell top along the sun."""
    geom = model.geometry
    r = np.linalg.norm(points, axis=-1)
    mu_s = points @ sun / r
    disc = r * r * (mu_s * mu_s - 1.0) + geom.rt**2
    d_exit = -r * mu_s + np.sqrt(np.maximum(disc, 0.0))
    t = (np.arange(samples) + 0.5)[:, None] / samples
    sample_pts = points[None, :, :] + (t * d_exit[None, :])[..., None] * sun
    radii = np.linalg.norm(sample_pts, axis=-1)
    h_km = geom.altitude_km(np.clip(radii, geom.rg, geom.rt))
    beta = model.extinction(h_km)
    occluded = mu_s < geom.horizon_mu(r)
    tau = beta.mean(axis=0) * d_exit[:, None]
    return tau, occluded


def brute_force_single_scatter(model: AtmosphereModel, observer, view, sun,
                               path_samples: int = 400,
                               sun_samples: int = 100) -> np.ndarray:
    """Single-scatter radiance by direct nested quadrature.

    Marches the view path through the shell, accumulating
    T(x,y) [beta_R P_R + beta_M P_M](y) T(y,sun) with midpoint sampling
    and per-point sun transmittance integrals.  Linear in the sun
    irradiance; independent of every lookup table.
    """
    geom = model.geometry
    observer = np.asarray(observer, float)
    view = np.asarray(view, float)
    sun = np.asarray(sun, float)
    seg = shell_path(geom, observer, view)
    if seg is None:
        return np.zeros(3)
    t0, t1, _ = seg
    length = t1 - t0
    tm = t0 + (np.arange(path_samples) + 0.5) / path_samples * length
    points = observer[None, :] + tm[:, None] * view[None, :]
    radii = np.clip(np.linalg.norm(points, axis=-1), geom.rg, geom.rt)
    h_km = geom.altitude_km(radii)

    beta_ext = model.extinction(h_km)
    # cumulative optical depth from the segment start to each midpoint
    dt = length / path_samples
    cum = np.cumsum(beta_ext, axis=0) * dt
    tau_path = cum - 0.5 * beta_ext * dt
    tau_sun, occluded = _sun_optical_depth(model, points, sun, sun_samples)
    t_total = np.exp(-(tau_path + tau_sun))
    t_total[occluded] = 0.0

    nu = float(view @ sun)
    p_ray = float(model.phase_rayleigh(nu))
    p_mie = model.phase_mie(nu)
    integrand = (model.scatter_rayleigh(h_km) * p_ray
                 + model.scatter_mie(h_km) * p_mie) * t_total
    return integrand.sum(axis=0) * dt * model.sun_irradiance.as_array()


def _direct_ground_irradiance(model, points, sun, sun_samples):
    """Cosine-weighted direct sun irradiance on ground points (unit sun)."""
    geom = model.geometry
    tau_sun, occluded = _sun_optical_depth(model, points, sun, sun_samples)
    t_sun = np.exp(-tau_sun)
    t_sun[occluded] = 0.0
    n_dot_s = points @ sun / np.linalg.norm(points, axis=-1)
    return t_sun * np.maximum(n_dot_s, 0.0)[:, None]


def brute_force_two_order_radiance(model: AtmosphereModel, observer, view,
                                   sun, path_samples: int = 30,
                                   inner_samples: int = 30,
                                   sun_samples: int = 24,
                                   gather_theta: int = 12,
                                   gather_phi: int = 24) -> np.ndarray:
    """Single plus double scattering by direct double quadrature.

    At each of ``path_samples`` points y along the view ray, gathers over
    the sphere the single-scatter radiance arriving at y (plus the
    ground-reflected direct term for downward directions), applies the
    local phase-weighted scattering coefficients toward the view
    direction, and accumulates with the path transmittance.  Expensive;
    meant for a handful of probe points.
    """
    geom = model.geometry
    observer = np.asarray(observer, float)
    view = np.asarray(view, float)
    sun = np.asarray(sun, float)
    total = brute_force_single_scatter(model, observer, view, sun,
                                       path_samples=inner_samples * 4,
                                       sun_samples=sun_samples)
    seg = shell_path(geom, observer, view)
    if seg is None:
        return total
    t0, t1, _ = seg
    length = t1 - t0
    dt = length / path_samples
    tm = t0 + (np.arange(path_samples) + 0.5) * dt
    points = observer[None, :] + tm[:, None] * view[None, :]
    radii = np.clip(np.linalg.norm(points, axis=-1), geom.rg, geom.rt)
    h_km = geom.altitude_km(radii)
    beta_ext = model.extinction(h_km)
    cum = np.cumsum(beta_ext, axis=0) * dt
    t_path = np.exp(-(cum - 0.5 * beta_ext * dt))

    d_theta = math.pi / gather_theta
    d_phi = 2.0 * math.pi / gather_phi
    theta = (np.arange(gather_theta) + 0.5) * d_theta
    phi = (np.arange(gather_phi) + 0.5) * d_phi
    dirs = np.stack([
        np.outer(np.sin(theta), np.cos(phi)).ravel(),
        np.outer(np.sin(theta), np.sin(phi)).ravel(),
        np.repeat(np.cos(theta), gather_phi),
    ], axis=-1)
    dw = np.repeat(np.sin(theta), gather_phi) * d_theta * d_phi

    albedo = model.ground_albedo.as_array() / math.pi
    nu_out = dirs @ view
    double = np.zeros(3)
    for k, y in enumerate(points):
        incident = np.zeros((dirs.shape[0], 3))
        for j, w in enumerate(dirs):
            incident[j] = brute_force_single_scatter(
                model, y, w, sun, path_samples=inner_samples,
                sun_samples=sun_samples)
        # ground-reflected direct light for directions that hit the ground
        r_y = np.linalg.norm(y)
        mu_w = dirs @ y / r_y
        hits = mu_w < -math.sqrt(max(1.0 - (geom.rg / r_y) ** 2, 0.0))
        if np.any(hits):
            d_g = -r_y * mu_w[hits] - np.sqrt(np.maximum(
                r_y**2 * (mu_w[hits] ** 2 - 1.0) + geom.rg**2, 0.0))
            gpoints = y[None, :] + d_g[:, None] * dirs[hits]
            girr = _direct_ground_irradiance(model, gpoints, sun, sun_samples)
            tau_g = np.empty((hits.sum(), 3))
            for j, (gp, w) in enumerate(zip(gpoints, dirs[hits])):
                seg_pts = y[None, :] + (np.arange(inner_samples) + 0.5)[:, None] \
                    / inner_samples * (gp - y)[None, :]
                seg_r = np.clip(np.linalg.norm(seg_pts, axis=-1), geom.rg, geom.rt)
                tau_g[j] = model.extinction(geom.altitude_km(seg_r)).mean(axis=0) \
                    * np.linalg.norm(gp - y)
            incident[hits] += albedo * girr * np.exp(-tau_g)
        p_out = model.scatter_rayleigh(h_km[k]) \
            * np.asarray(model.phase_rayleigh(nu_out))[:, None] \
            + model.scatter_mie(h_km[k]) * model.phase_mie(nu_out)
        gathered = np.sum(incident * p_out * dw[:, None], axis=0)
        double += t_path[k] * gathered * dt
    return total + double * model.sun_irradiance.as_array()


# ---------------------------------------------------------------------------
# Curve export


def export_curves(curves, path) -> None:
    """CSV of validation curves plus a gnuplot script alongside."""
    curves = list(curves)
    if not curves:
        raise DomainError("no validation curves to export")
    path = Path(path)
    lines = ["sun_elev,view_zenith,model,cie"]
    for curve in sorted(curves, key=lambda c: c.sun_elevation_deg):
        for zenith, model_ratio, cie_ratio in curve.samples:
            lines.append(f"{curve.sun_elevation_deg:g},{zenith:g},"
                         f"{model_ratio:.6g},{cie_ratio:.6g}")
    path.write_text("\n".join(lines) + "\n")

    elevations = sorted({c.sun_elevation_deg for c in curves})
    plots = ", \\\n  ".join(
        f"'{path.name}' using 2:($1=={e:g}?$3:1/0) with lines"
        f" title 'model {e:g} deg', \\\n  "
        f"'{path.name}' using 2:($1=={e:g}?$4:1/0) with lines dt 2"
        f" title 'CIE {e:g} deg'" for e in elevations)
    script = (
        "set datafile separator ','\n"
        "set xlabel 'view zenith (deg, signed, solar meridian)'\n"
        "set ylabel 'L / Lz'\n"
        "set key top left\n"
        f"plot \\\n  {plots}\n"
        "pause -1\n")
    path.with_suffix(path.suffix + ".gp").write_text(script)


def parse_curves_csv(path):
    """Inverse of :func:`export_curves`, for round-trip checks."""
    rows = Path(path).read_text().strip().splitlines()
    if rows[0] != "sun_elev,view_zenith,model,cie":
        raise DomainError(f"{path}: unexpected CSV header {rows[0]!r}")
    by_elev: dict = {}
    for row in rows[1:]:
        elev, zenith, model_ratio, cie_ratio = (float(v) for v in row.split(","))
        by_elev.setdefault(elev, []).append((zenith, model_ratio, cie_ratio))
    return [ValidationCurve(sun_elevation_deg=e, samples=tuple(samples))
            for e, samples in sorted(by_elev.items())]
