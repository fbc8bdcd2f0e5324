"""CPU renderer: per-pixel rays against planet + shell, shaded from tables.

Per pixel: trace the ray, advance the origin to the shell entry when the
camera is outside, then combine three terms.  The direct term is the sun
disc attenuated by transmittance (zero when the planet occludes it).  The
ground term is the diffuse surface radiance, albedo/pi times the tabulated
irradiance, attenuated along the view segment.  The in-scatter term uses
the aerial-perspective identity S(x->y) = S(x) - T(x,y) S(y), so partial
segments need no extra integration.  Camera-space intersection math runs
in 64-bit; shading reads 32-bit tables.

Output is linear HDR radiance plus an exponentially tone-mapped display
image (1 - exp(-exposure * hdr), then the sRGB transfer), written as
binary PPM.  HDR buffers can be dumped in the same float32 layout as the
lookup tables under the "SKYI" magic.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .config import AtmosphereModel
from .precompute import (
    HDR_MAGIC,
    LutFormatError,
    ScatteringTables,
    sample_inscatter_parts,
    sample_irradiance,
    sample_transmittance,
    transmittance_between,
)
from .spectra import DomainError, SpectralTriple

SUN_ANGULAR_RADIUS_DEG = 0.2665
# smooth antialiasing band of +-5% around the disc edge
SUN_EDGE_FRACTION = 0.05
# pixels shaded per batch; bounds temporary-buffer footprint
_SHADE_CHUNK = 16384


@dataclass(frozen=True)
class RenderJob:
    """Camera, image and lighting description for one frame."""

    camera_position: tuple          # m, planet-centered
    orientation: tuple              # 3x3, columns = (right, up, forward)
    vertical_fov_deg: float
    width: int
    height: int
    sun_direction: tuple            # unit vector toward the sun
    exposure: float = 120.0
    ground_albedo: SpectralTriple | None = None   # None -> model albedo
    albedo_map: np.ndarray | None = None          # equirectangular, (h, w, 3)

    def __post_init__(self):
        pos = np.asarray(self.camera_position, float)
        basis = np.asarray(self.orientation, float)
        sun = np.asarray(self.sun_direction, float)
        if pos.shape != (3,) or sun.shape != (3,) or basis.shape != (3, 3):
            raise DomainError("camera position/sun must be 3-vectors, basis 3x3")
        if abs(np.linalg.norm(sun) - 1.0) > 1e-9:
            raise DomainError("sun direction must be unit length")
        if not (np.allclose(basis.T @ basis, np.eye(3), atol=1e-9)):
            raise DomainError("orientation must be orthonormal")
        if self.exposure <= 0.0:
            raise DomainError("exposure must be > 0")
        if self.width < 1 or self.height < 1 or not 0 < self.vertical_fov_deg < 180:
            raise DomainError("bad image size or field of view")
        object.__setattr__(self, "camera_position", tuple(float(v) for v in pos))
        object.__setattr__(self, "orientation",
                           tuple(tuple(float(v) for v in row) for row in basis))
        object.__setattr__(self, "sun_direction", tuple(float(v) for v in sun))


@dataclass
class GBuffer:
    """Per-pixel geometry of the planet pass; depth is +inf for sky."""

    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    depth: np.ndarray


@dataclass
class RenderResult:
    hdr: np.ndarray                 # (h, w, 3) linear radiance
    display: np.ndarray             # (h, w, 3) in [0, 1], sRGB-encoded
    gbuffer: GBuffer
    inscatter_mie: np.ndarray       # (h, w, 3) aerosol in-scatter component


def look_at(position, target, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Orthonormal camera basis with forward from position toward target."""
    position = np.asarray(position, float)
    forward = np.asarray(target, float) - position
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise DomainError("camera target coincides with position")
    forward = forward / norm
    up_hint = np.asarray(up_hint, float)
    right = np.cross(forward, up_hint)
    if np.linalg.norm(right) < 1e-9:
        up_hint = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return np.stack([right, up, forward], axis=1)


def pixel_rays(job: RenderJob):
    """Unit view directions through every pixel center, shape (h, w, 3)."""
    basis = np.asarray(job.orientation)
    right, up, forward = basis[:, 0], basis[:, 1], basis[:, 2]
    tan_half = math.tan(math.radians(job.vertical_fov_deg) / 2.0)
    aspect = job.width / job.height
    xs = (np.arange(job.width) + 0.5) / job.width * 2.0 - 1.0
    ys = 1.0 - (np.arange(job.height) + 0.5) / job.height * 2.0
    dirs = (forward[None, None, :]
            + xs[None, :, None] * (tan_half * aspect) * right[None, None, :]
            + ys[:, None, None] * tan_half * up[None, None, :])
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def rasterize_planet(job: RenderJob, model: AtmosphereModel) -> GBuffer:
    """Analytic nearest planet-sphere hit per pixel, 64-bit precision."""
    geom = model.geometry
    origin = np.asarray(job.camera_position)
    if np.linalg.norm(origin) <= geom.rg:
        raise DomainError("camera must be outside the planet body")
    v = pixel_rays(job)
    b = np.einsum("...c,c->...", v, origin)
    c = float(origin @ origin) - geom.rg**2
    disc = b * b - c
    hit = disc >= 0.0
    t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
    hit &= t > 0.0
    depth = np.where(hit, t, np.inf)
    position = origin[None, None, :] + np.where(hit, t, 0.0)[..., None] * v
    normal = np.zeros_like(position)
    normal[hit] = position[hit] / np.linalg.norm(position[hit], axis=-1,
                                                 keepdims=True)
    albedo = (job.ground_albedo or model.ground_albedo).as_array()
    color = np.zeros_like(position)
    color[hit] = albedo
    if job.albedo_map is not None:
        n = normal[hit]
        lon = np.arctan2(n[:, 1], n[:, 0])
        lat = np.arcsin(np.clip(n[:, 2], -1.0, 1.0))
        u = (lon / (2.0 * math.pi) + 0.5) * (job.albedo_map.shape[1] - 1)
        w = (0.5 - lat / math.pi) * (job.albedo_map.shape[0] - 1)
        color[hit] = job.albedo_map[np.round(w).astype(int),
                                    np.round(u).astype(int)]
    return GBuffer(position=position, normal=normal, color=color, depth=depth)


def sun_disc_radiance(view, sun, transmittance_to_space, sun_radiance=1.0):
    """Direct solar radiance: T * L_sun inside the disc, smooth at the rim."""
    view = np.asarray(view, float)
    sun = np.asarray(sun, float)
    cos_angle = np.clip(np.einsum("...c,c->...", view, sun), -1.0, 1.0)
    radius = math.radians(SUN_ANGULAR_RADIUS_DEG)
    inner = math.cos(radius * (1.0 - SUN_EDGE_FRACTION))
    outer = math.cos(radius * (1.0 + SUN_EDGE_FRACTION))
    t = np.clip((cos_angle - outer) / (inner - outer), 0.0, 1.0)
    edge = t * t * (3.0 - 2.0 * t)
    return np.asarray(transmittance_to_space, float) * sun_radiance \
        * edge[..., None]


def sun_solid_angle() -> float:
    return 2.0 * math.pi * (1.0 - math.cos(math.radians(SUN_ANGULAR_RADIUS_DEG)))


def tone_map(hdr, exposure: float):
    """Exponential operator 1 - exp(-exposure * L), then sRGB encoding."""
    if exposure <= 0.0:
        raise DomainError("exposure must be > 0")
    mapped = 1.0 - np.exp(-exposure * np.maximum(np.asarray(hdr, float), 0.0))
    return srgb_encode(mapped)


def srgb_encode(linear):
    linear = np.clip(np.asarray(linear, float), 0.0, 1.0)
    return np.where(linear <= 0.0031308,
                    12.92 * linear,
                    1.055 * np.power(linear, 1.0 / 2.4) - 0.055)


def shade_rays(model: AtmosphereModel, tables: ScatteringTables, origin,
               view, sun, scene_depth=None, scene_color=None,
               include_sun_disc: bool = True):
    """Radiance along rays from one origin; the Algorithm-1 core.

    origin is a single 3-vector; view has shape (..., 3).  scene_depth,
    when given, truncates rays at opaque geometry with the supplied
    color buffer.  ``include_sun_disc=False`` drops the direct solar
    orb (sky-luminance scans).  Returns (radiance, aerosol part).
    """
    geom = model.geometry
    trans = tables.transmittance
    origin = np.asarray(origin, float)
    v = np.asarray(view, float)
    sun = np.asarray(sun, float)
    lead = v.shape[:-1]
    if scene_depth is None:
        scene_depth = np.full(lead, np.inf)
    if scene_color is None:
        scene_color = np.zeros(lead + (3,))

    # keep per-call temporaries cache-resident: large buffers go in chunks
    count = int(np.prod(lead)) if lead else 1
    if count > _SHADE_CHUNK:
        flat_v = v.reshape(count, 3)
        flat_depth = np.asarray(scene_depth, float).reshape(count)
        flat_color = np.asarray(scene_color, float).reshape(count, 3)
        radiance = np.empty((count, 3))
        mie = np.empty((count, 3))
        for lo in range(0, count, _SHADE_CHUNK):
            hi = min(lo + _SHADE_CHUNK, count)
            radiance[lo:hi], mie[lo:hi] = shade_rays(
                model, tables, origin, flat_v[lo:hi], sun,
                scene_depth=flat_depth[lo:hi], scene_color=flat_color[lo:hi],
                include_sun_disc=include_sun_disc)
        return radiance.reshape(lead + (3,)), mie.reshape(lead + (3,))

    e_sun = model.sun_irradiance.as_array()
    disc_radiance = e_sun / sun_solid_angle()

    b = np.einsum("...c,c->...", v, origin)
    c_top = float(origin @ origin) - geom.rt**2
    disc_top = b * b - c_top
    sqrt_top = np.sqrt(np.maximum(disc_top, 0.0))
    t_enter = np.maximum(-b - sqrt_top, 0.0)
    t_exit = -b + sqrt_top
    in_shell = (disc_top > 0.0) & (t_exit > 0.0)
    # occluded-atmosphere branch: opaque geometry before the shell entry
    occluded = in_shell & (scene_depth <= t_enter)
    active = in_shell & ~occluded
    # scene shown directly when the atmosphere never enters the path
    direct_scene = (occluded | ~in_shell) & np.isfinite(scene_depth)

    t_end = np.minimum(t_exit, scene_depth)
    ground_pixel = active & np.isfinite(scene_depth) & (scene_depth <= t_exit)
    d = np.maximum(t_end - t_enter, 0.0)

    x = origin[None] + t_enter[..., None] * v
    r = np.clip(np.linalg.norm(x, axis=-1), geom.rg, geom.rt)
    mu = np.clip(np.einsum("...c,...c->...", x, v) / r, -1.0, 1.0)
    mu_s = np.clip(np.einsum("...c,c->...", x, sun) / r, -1.0, 1.0)
    nu = np.clip(np.einsum("...c,c->...", v, sun), -1.0, 1.0)

    r_y = np.clip(np.sqrt(np.maximum(r * r + d * d + 2.0 * r * d * mu,
                                     geom.rg**2)), geom.rg, geom.rt)
    mu_y = np.clip((r * mu + d) / r_y, -1.0, 1.0)
    mu_s_y = np.clip((r * mu_s + d * nu) / r_y, -1.0, 1.0)

    near_ray, near_mie = sample_inscatter_parts(tables, model, r, mu, mu_s,
                                                nu, ground_pixel)
    far_ray, far_mie = sample_inscatter_parts(tables, model, r_y, mu_y,
                                              mu_s_y, nu, ground_pixel)
    t_seg = transmittance_between(trans, geom, r, mu, d, ground_pixel)
    ins_ray = np.maximum(near_ray - t_seg * far_ray, 0.0)
    ins_mie = np.maximum(near_mie - t_seg * far_mie, 0.0)
    inscatter = (ins_ray + ins_mie) * e_sun * active[..., None]
    mie_part = ins_mie * e_sun * active[..., None]

    # diffuse ground: albedo/pi * tabulated irradiance, attenuated to x
    irr = sample_irradiance(tables.irradiance, geom, r_y, mu_s_y)
    ground_radiance = scene_color / math.pi * irr * e_sun
    ground_term = t_seg * ground_radiance * (active & ground_pixel)[..., None]

    radiance = inscatter + ground_term + direct_scene[..., None] * scene_color
    if include_sun_disc:
        # direct sun disc on sky pixels; unit transmittance outside the shell
        t_space = np.where(active[..., None],
                           sample_transmittance(trans, geom, r, mu), 1.0)
        disc = sun_disc_radiance(v, sun, t_space, disc_radiance)
        radiance = radiance + disc * (~ground_pixel & ~direct_scene)[..., None]
    return radiance, mie_part


def render(job: RenderJob, model: AtmosphereModel,
           tables: ScatteringTables) -> RenderResult:
    """Render one frame; deterministic for a fixed (job, tables).

    Pixels are shaded in fixed-size row bands (each band an independent
    pure computation), so cost stays proportional to pixel count.
    """
    gbuffer = rasterize_planet(job, model)
    view = pixel_rays(job)
    origin = np.asarray(job.camera_position)
    sun = np.asarray(job.sun_direction)
    hdr = np.empty((job.height, job.width, 3))
    mie = np.empty_like(hdr)
    display = np.empty_like(hdr)
    band = max(1, _SHADE_CHUNK // job.width)
    for lo in range(0, job.height, band):
        hi = min(lo + band, job.height)
        hdr[lo:hi], mie[lo:hi] = shade_rays(
            model, tables, origin, view[lo:hi], sun,
            scene_depth=gbuffer.depth[lo:hi], scene_color=gbuffer.color[lo:hi])
        display[lo:hi] = tone_map(hdr[lo:hi], job.exposure)
    return RenderResult(hdr=hdr.astype(np.float32), display=display,
                        gbuffer=gbuffer, inscatter_mie=mie.astype(np.float32))


# ---------------------------------------------------------------------------
# Camera helpers


def surface_frame(lat_deg: float, lon_deg: float):
    """(up, east, north) unit vectors at a latitude/longitude."""
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    up = np.array([math.cos(lat) * math.cos(lon),
                   math.cos(lat) * math.sin(lon),
                   math.sin(lat)])
    east = np.array([-math.sin(lon), math.cos(lon), 0.0])
    north = np.cross(up, east)
    north /= np.linalg.norm(north)
    return up, east, north


def direction_from_angles(lat_deg, lon_deg, azimuth_deg, elevation_deg):
    """Unit vector from local azimuth (degrees from north, eastward)
    and elevation above the horizon at an observer location."""
    up, east, north = surface_frame(lat_deg, lon_deg)
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    horiz = math.cos(az) * north + math.sin(az) * east
    return math.cos(el) * horiz + math.sin(el) * up


def make_camera(geom, altitude_m: float, lat_deg: float = 0.0,
                lon_deg: float = 0.0, view_azimuth_deg: float = 0.0,
                view_elevation_deg: float = 0.0):
    """Observer at altitude above (lat, lon), looking along a local
    azimuth/elevation.  Returns (position, orientation)."""
    up, _, _ = surface_frame(lat_deg, lon_deg)
    position = (geom.rg + altitude_m) * up
    forward = direction_from_angles(lat_deg, lon_deg, view_azimuth_deg,
                                    view_elevation_deg)
    return position, look_at(position, position + forward, up_hint=up)


# ---------------------------------------------------------------------------
# Image IO


def write_ppm(path, image01) -> None:
    """Binary PPM (P6, maxval 255) from an (h, w, 3) image in [0, 1]."""
    img = np.clip(np.asarray(image01, float), 0.0, 1.0)
    data = (img * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) to an (h, w, 3) float image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise LutFormatError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    if data.size != w * h * 3:
        raise LutFormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(float) / maxval


def save_hdr(path, hdr) -> None:
    """Float HDR dump: magic SKYI, version, u32 w/h, little-endian f32."""
    img = np.ascontiguousarray(hdr, dtype="<f4")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", HDR_MAGIC, 1, w, h))
        fh.write(img.tobytes())


def load_hdr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != HDR_MAGIC:
        raise LutFormatError(f"{path}: not an HDR dump")
    _, version, w, h = struct.unpack_from("<4sIII", blob)
    if version != 1:
        raise LutFormatError(f"{path}: unsupported HDR version {version}")
    expected = 16 + w * h * 12
    if len(blob) != expected:
        raise LutFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, 3).copy()
