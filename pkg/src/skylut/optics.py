"""Ray geometry, optical depth and path-length corrections.

The planet is a sphere of radius Rg centered at the origin and the
atmosphere a concentric shell out to Rt, both in meters.  Optical depth
is a trapezoidal integral of the extinction coefficient along straight
segments; transmittance is its exponential.  For ground observers the
Pickering air-mass fit

    AM(t) = 1 / sin((90 - t) + 244 / (165 + 47 (90 - t)^1.1))   [degrees]

approximates the slant path length through the refracting atmosphere
relative to the vertical shell thickness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectra import DomainError

# Points this far (m) below the ground are treated as sitting on it.
GROUND_CLAMP_M = 1.0


@dataclass(frozen=True)
class Ray:
    """Origin (m, planet-centered) and unit direction."""

    origin: tuple
    direction: tuple

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if o.shape != (3,) or d.shape != (3,):
            raise DomainError("ray origin/direction must be 3-vectors")
        norm = float(np.linalg.norm(d))
        if abs(norm - 1.0) > 1e-9:
            raise DomainError(f"ray direction must be unit length, |d| = {norm}")
        object.__setattr__(self, "origin", tuple(float(v) for v in o))
        object.__setattr__(self, "direction", tuple(float(v) for v in d))

    @property
    def o(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def d(self) -> np.ndarray:
        return np.asarray(self.direction)


@dataclass(frozen=True)
class ShellGeometry:
    """Planet radius Rg and atmosphere top radius Rt, meters."""

    planet_radius_m: float
    atmosphere_radius_m: float

    def __post_init__(self):
        if not 0.0 < self.planet_radius_m < self.atmosphere_radius_m:
            raise DomainError(
                f"need 0 < Rg < Rt, got Rg={self.planet_radius_m}, "
                f"Rt={self.atmosphere_radius_m}"
            )

    @property
    def rg(self) -> float:
        return self.planet_radius_m

    @property
    def rt(self) -> float:
        return self.atmosphere_radius_m

    @property
    def shell_thickness_m(self) -> float:
        return self.atmosphere_radius_m - self.planet_radius_m

    def horizon_mu(self, r):
        """Cosine of the view zenith angle that grazes the ground from radius r."""
        r = np.asarray(r, dtype=float)
        return -np.sqrt(np.maximum(1.0 - (self.rg / r) ** 2, 0.0))

    def altitude_km(self, r_m):
        return (np.asarray(r_m, dtype=float) - self.rg) * 1e-3


def ray_sphere_intersect(ray: Ray, radius: float, cull_negative: bool = False):
    """Intersect with the origin-centered sphere; None on miss.

    Returns (t_near, t_far) with t_near <= t_far.  With ``cull_negative``
    intersections behind the origin are dropped (None if both are).
    """
    if radius <= 0.0:
        raise DomainError(f"sphere radius must be > 0, got {radius}")
    o, d = ray.o, ray.d
    b = float(np.dot(o, d))
    c = float(np.dot(o, o)) - radius * radius
    disc = b * b - c
    if disc < 0.0:
        return None
    s = math.sqrt(disc)
    t_near, t_far = -b - s, -b + s
    if cull_negative:
        if t_far < 0.0:
            return None
        t_near = max(t_near, 0.0)
    return (t_near, t_far)


def shell_path(geom: ShellGeometry, origin, direction):
    """Entry/exit distances of the in-atmosphere segment of a ray.

    Returns (t_enter, t_exit, hits_ground) with the segment truncated at
    the ground hit when there is one, or None if the shell is missed.
    """
    ray = Ray(tuple(origin), tuple(direction))
    top = ray_sphere_intersect(ray, geom.rt, cull_negative=True)
    if top is None:
        return None
    t_enter, t_exit = top
    ground = ray_sphere_intersect(ray, geom.rg, cull_negative=True)
    hits_ground = False
    if ground is not None and ground[0] > 0.0:
        t_exit = min(t_exit, ground[0])
        hits_ground = True
    if t_exit <= t_enter:
        return None
    return t_enter, t_exit, hits_ground


def optical_depth(geom: ShellGeometry, a, b, extinction, samples: int = 500):
    """Trapezoidal optical depth of the segment a -> b, per wavelength.

    ``extinction`` maps altitude in km (any array shape) to coefficients
    of shape (..., 3) in 1/m.  Both endpoints must lie inside the shell
    (1 m ground clamp); a segment dipping below the surface is an error
    since the caller must split paths at the ground hit.
    """
    if samples < 2:
        raise DomainError(f"need >= 2 samples, got {samples}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for name, p in (("a", a), ("b", b)):
        r = float(np.linalg.norm(p))
        if r < geom.rg - GROUND_CLAMP_M or r > geom.rt + GROUND_CLAMP_M:
            raise DomainError(f"point {name} (|{name}| = {r}) is outside the shell")
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        return np.zeros(3)
    # closest approach of the chord to the planet center
    t = np.linspace(0.0, 1.0, samples)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    radii = np.linalg.norm(pts, axis=-1)
    if np.min(radii) < geom.rg - GROUND_CLAMP_M:
        raise DomainError("segment passes below the planet surface; split at ground")
    h_km = geom.altitude_km(np.maximum(radii, geom.rg))
    beta = np.asarray(extinction(h_km), dtype=float)
    return np.trapezoid(beta, dx=length / (samples - 1), axis=0)


def transmittance(depth):
    """Componentwise exp(-tau) of an optical-depth triple."""
    tau = np.asarray(depth, dtype=float)
    if np.any(tau < 0.0):
        raise DomainError(f"optical depth must be >= 0, got {depth}")
    return np.exp(-tau)


def pickering_air_mass(zenith_deg):
    """Relative air mass for a ground observer, zenith angle in [0, 90] deg."""
    theta = np.asarray(zenith_deg, dtype=float)
    if np.any(theta < 0.0) or np.any(theta > 90.0):
        raise DomainError(f"zenith angle must be in [0, 90] degrees, got {zenith_deg}")
    apparent_alt = 90.0 - theta
    correction = 244.0 / (165.0 + 47.0 * apparent_alt**1.1)
    return 1.0 / np.sin(np.radians(apparent_alt + correction))


def curved_path_length(geom: ShellGeometry, zenith_deg):
    """Refraction-corrected slant path length for a ground observer, m."""
    return pickering_air_mass(zenith_deg) * geom.shell_thickness_m


def straight_path_length(geom: ShellGeometry, zenith_deg):
    """Geometric chord from the ground to the shell top at a zenith angle."""
    mu = np.cos(np.radians(np.asarray(zenith_deg, dtype=float)))
    rg, rt = geom.rg, geom.rt
    return -rg * mu + np.sqrt(rg * rg * (mu * mu - 1.0) + rt * rt)
