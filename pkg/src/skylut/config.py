"""Atmosphere model assembly, preset/config parsing and bundled data files.

Configs are flat sectioned ``key = value`` text ('#' comments).  Every key
is validated against the schema below; unknown keys, missing required keys
and out-of-range values are reported with the offending key and line.
Spectral values take one float (broadcast) or three floats (680/550/440 nm
order).  Cross-section and profile tables live in plain-text data files,
one ``wavelength_nm value`` or ``altitude_km density_per_m3`` record per
line.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .optics import ShellGeometry
from .spectra import (
    AbsorberLayer,
    DomainError,
    HydrostaticProfile,
    MieParams,
    RayleighParams,
    SpectralTriple,
    SplineProfile,
    build_ozone_spline,
    dhg_phase_triple,
    mie_extinction_coeff_triple,
    mie_scatter_coeff_triple,
    molecular_absorption_coeff_triple,
    rayleigh_absorption_coeff_triple,
    rayleigh_phase,
    rayleigh_scatter_coeff_triple,
)

GAS_CONSTANT = 8.314462618          # J / (mol K)
AVOGADRO = 6.02214076e23            # 1 / mol


class ConfigError(ValueError):
    """A config file failed validation; message names key and line."""


def scale_height_km_from_gas(temperature_k: float, molar_mass_kg: float,
                             surface_gravity: float) -> float:
    """H = RT / (M g), returned in km."""
    return GAS_CONSTANT * temperature_k / (molar_mass_kg * surface_gravity) * 1e-3


def molecular_density_from_mass_density(mass_density_kg_m3: float,
                                        molar_mass_kg: float) -> float:
    """N = N_A rho / M, particles per m^3."""
    return AVOGADRO * mass_density_kg_m3 / molar_mass_kg


@dataclass(frozen=True)
class AtmosphereModel:
    """Full parameter set for one planetary atmosphere."""

    name: str
    geometry: ShellGeometry
    rayleigh: RayleighParams
    mie: MieParams
    absorbers: tuple = ()
    ground_albedo: SpectralTriple = SpectralTriple.uniform(0.1)
    sun_irradiance: SpectralTriple = SpectralTriple.uniform(1.0)
    curved_paths: bool = False
    scattering_orders: int = 4
    temperature_k: float = 273.0
    rayleigh_phase_mode: str = "penndorf"

    def __post_init__(self):
        a = self.ground_albedo.as_array()
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise DomainError(f"ground albedo must be in [0, 1], got {self.ground_albedo}")
        self.sun_irradiance.require_non_negative("sun irradiance")
        if self.scattering_orders < 1:
            raise DomainError("scattering orders must be >= 1")
        if self.rayleigh_phase_mode not in ("classic", "penndorf"):
            raise DomainError(f"unknown Rayleigh phase mode {self.rayleigh_phase_mode!r}")

    # -- coefficient evaluation (h in km, arrays broadcast, results (..., 3) in 1/m)

    def scatter_rayleigh(self, h_km):
        return rayleigh_scatter_coeff_triple(self.rayleigh, h_km)

    def scatter_mie(self, h_km):
        return mie_scatter_coeff_triple(self.mie, h_km)

    def extinction(self, h_km):
        """Total extinction: molecular scattering + absorption + aerosols."""
        h = np.asarray(h_km, dtype=float)
        beta = rayleigh_scatter_coeff_triple(self.rayleigh, h)
        beta = beta + rayleigh_absorption_coeff_triple(self.rayleigh, h)
        beta = beta + mie_extinction_coeff_triple(self.mie, h)
        for layer in self.absorbers:
            beta = beta + molecular_absorption_coeff_triple(layer, h)
        return beta

    def phase_rayleigh(self, cos_theta):
        return rayleigh_phase(cos_theta, self.rayleigh_phase_mode)

    def phase_mie(self, cos_theta):
        """Per-wavelength DHG, shape cos_theta.shape + (3,)."""
        return dhg_phase_triple(cos_theta, self.mie)

    def canonical_description(self) -> str:
        """Deterministic text form of every parameter, for hashing."""
        lines = [f"name={self.name}", f"curved_paths={self.curved_paths}",
                 f"orders={self.scattering_orders}",
                 f"temperature={self.temperature_k!r}",
                 f"phase={self.rayleigh_phase_mode}",
                 f"geometry={self.geometry.rg!r},{self.geometry.rt!r}",
                 f"albedo={self.ground_albedo.as_array().tolist()!r}",
                 f"sun={self.sun_irradiance.as_array().tolist()!r}",
                 f"rayleigh={self.rayleigh!r}", f"mie={self.mie!r}"]
        for layer in self.absorbers:
            lines.append(f"absorber={layer!r}")
        return "\n".join(lines)

    def content_hash(self) -> int:
        digest = hashlib.sha256(self.canonical_description().encode()).digest()
        return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Data files


def data_path(name: str) -> Path:
    p = resources.files("skylut").joinpath("data", name)
    return Path(str(p))


def _read_table_file(path: Path, what: str) -> list:
    rows = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected two columns, got {raw!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad number in {raw!r}") from exc
    if not rows:
        raise ConfigError(f"{what} file {path} has no data rows")
    return rows


def load_cross_section_file(path) -> SpectralTriple:
    """Read `wavelength_nm value` rows; must cover 680, 550 and 440 nm."""
    rows = dict((int(round(w)), v) for w, v in _read_table_file(Path(path), "cross-section"))
    missing = [w for w in (680, 550, 440) if w not in rows]
    if missing:
        raise ConfigError(f"cross-section file {path} missing wavelengths {missing}")
    return SpectralTriple(rows[680], rows[550], rows[440])


def load_profile_file(path) -> SplineProfile:
    """Read `altitude_km density_per_m3` rows into a spline profile."""
    return build_ozone_spline(_read_table_file(Path(path), "density profile"))


def load_cie_sky_types(path=None) -> dict:
    """CIE general-sky gradation/indicatrix coefficients, keyed by type."""
    if path is None:
        path = data_path("cie_sky_types.txt")
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ConfigError(f"{path}:{lineno}: expected `type a b c d e`, got {raw!r}")
        table[int(parts[0])] = tuple(float(v) for v in parts[1:])
    return table


# ---------------------------------------------------------------------------
# Config parsing


@dataclass
class _Entry:
    value: str
    line: int
    used: bool = False


def _parse_sections(text: str, origin: str) -> dict:
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected `key = value`, got {raw!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = _Entry(value, lineno)
    return sections


class _Section:
    def __init__(self, origin: str, name: str, entries: dict):
        self.origin = origin
        self.name = name
        self.entries = entries

    def _fail(self, key: str, line, msg: str):
        where = f"{self.origin}:{line}" if line else self.origin
        raise ConfigError(f"{where}: [{self.name}] {key}: {msg}")

    def _get(self, key: str):
        entry = self.entries.get(key)
        if entry is not None:
            entry.used = True
        return entry

    def has(self, key: str) -> bool:
        return key in self.entries

    def scalar(self, key: str, default=None, lo=None, hi=None):
        entry = self._get(key)
        if entry is None:
            if default is None:
                self._fail(key, None, "missing required key")
            return default
        try:
            value = float(entry.value)
        except ValueError:
            self._fail(key, entry.line, f"not a number: {entry.value!r}")
        if lo is not None and value < lo or hi is not None and value > hi:
            self._fail(key, entry.line, f"value {value} outside [{lo}, {hi}]")
        return value

    def integer(self, key: str, default=None, lo=None):
        value = self.scalar(key, default=default, lo=lo)
        if value != int(value):
            self._fail(key, self._get(key).line, f"expected integer, got {value}")
        return int(value)

    def boolean(self, key: str, default=None):
        entry = self._get(key)
        if entry is None:
            if default is None:
                self._fail(key, None, "missing required key")
            return default
        lowered = entry.value.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        self._fail(key, entry.line, f"expected boolean, got {entry.value!r}")

    def text(self, key: str, default=None, choices=None):
        entry = self._get(key)
        if entry is None:
            if default is None:
                self._fail(key, None, "missing required key")
            return default
        if choices and entry.value not in choices:
            self._fail(key, entry.line, f"must be one of {sorted(choices)}")
        return entry.value

    def triple(self, key: str, default=None) -> SpectralTriple | None:
        entry = self._get(key)
        if entry is None:
            return default
        parts = entry.value.split()
        try:
            values = [float(p) for p in parts]
        except ValueError:
            self._fail(key, entry.line, f"not numbers: {entry.value!r}")
        if len(values) == 1:
            values = values * 3
        if len(values) != 3:
            self._fail(key, entry.line, "expected one or three values")
        return SpectralTriple(*values)

    def unknown_keys(self):
        return [(k, e.line) for k, e in self.entries.items() if not e.used]


def _resolve_file(name: str, base_dir: Path | None) -> Path:
    candidate = Path(name)
    if candidate.is_absolute() and candidate.exists():
        return candidate
    if base_dir is not None and (base_dir / name).exists():
        return base_dir / name
    bundled = data_path(name)
    if bundled.exists():
        return bundled
    raise ConfigError(f"data file {name!r} not found (searched {base_dir} and bundled data)")


def _build_absorber(section: _Section, base_dir) -> AbsorberLayer:
    name = section.name.split(".", 1)[1]
    if section.has("cross_section"):
        sigma = section.triple("cross_section")
    else:
        sigma = load_cross_section_file(
            _resolve_file(section.text("cross_section_file"), base_dir))
    kind = section.text("profile", choices={"hydrostatic", "spline"})
    if kind == "hydrostatic":
        profile = HydrostaticProfile(
            n0=section.scalar("number_density_m3", lo=0.0),
            fraction=section.scalar("fraction", default=1.0, lo=0.0, hi=1.0),
            scale_height_km=section.scalar("scale_height_km", lo=1e-9),
        )
    else:
        profile = load_profile_file(_resolve_file(section.text("density_file"), base_dir))
    return AbsorberLayer(name=name, cross_section=sigma, profile=profile)


def parse_model(text: str, origin: str = "<config>", base_dir=None) -> AtmosphereModel:
    sections = _parse_sections(text, origin)
    known = {"model", "geometry", "sun", "ground", "rayleigh", "mie"}
    for section_name in sections:
        if section_name not in known and not section_name.startswith("absorber."):
            raise ConfigError(f"{origin}: unknown section [{section_name}]")
    missing = [s for s in ("model", "geometry", "rayleigh", "mie") if s not in sections]
    if missing:
        raise ConfigError(f"{origin}: missing required sections {missing}")

    wrapped = {name: _Section(origin, name, entries) for name, entries in sections.items()}

    def sec(name: str) -> _Section:
        return wrapped.get(name) or _Section(origin, name, {})

    model_sec = sec("model")
    geometry_sec = sec("geometry")
    rayleigh_sec = sec("rayleigh")
    mie_sec = sec("mie")

    try:
        geometry = ShellGeometry(
            planet_radius_m=geometry_sec.scalar("planet_radius_m", lo=1.0),
            atmosphere_radius_m=geometry_sec.scalar("atmosphere_radius_m", lo=1.0),
        )
        rayleigh = RayleighParams(
            scale_height_km=rayleigh_sec.scalar("scale_height_km", lo=1e-9),
            molecular_density=rayleigh_sec.scalar("molecular_density_m3", default=0.0, lo=0.0),
            refractive_index_real=rayleigh_sec.triple(
                "refractive_index_real", SpectralTriple.uniform(1.0)),
            refractive_index_imag=rayleigh_sec.triple(
                "refractive_index_imag", SpectralTriple.uniform(0.0)),
            depolarization=rayleigh_sec.scalar("depolarization", default=0.0,
                                               lo=0.0, hi=6.0 / 7.0 - 1e-12),
            absorber_radius_m=rayleigh_sec.scalar("absorber_radius_m", default=0.0, lo=0.0),
            precomputed_beta_scat=rayleigh_sec.triple("beta_scat"),
        )
        mie = MieParams(
            scale_height_km=mie_sec.scalar("scale_height_km", lo=1e-9),
            g1=mie_sec.triple("g1", SpectralTriple.uniform(0.0)),
            g2=mie_sec.triple("g2", SpectralTriple.uniform(0.0)),
            alpha=mie_sec.triple("alpha", SpectralTriple.uniform(1.0)),
            turbidity=mie_sec.scalar("turbidity", default=2.0, lo=2.0, hi=10.0),
            junge_exponent=mie_sec.scalar("junge_exponent", default=4.0, lo=2.0, hi=6.0),
            fudge_k=mie_sec.triple("fudge_k", SpectralTriple.uniform(0.0)),
            mean_radius_m=mie_sec.scalar("mean_radius_m", default=0.0, lo=0.0),
            particle_count=mie_sec.scalar("particle_density_m3", default=0.0, lo=0.0),
            complex_index_real=mie_sec.triple("refractive_index_real",
                                              SpectralTriple.uniform(1.5)),
            complex_index_imag=mie_sec.triple("refractive_index_imag",
                                              SpectralTriple.uniform(0.0)),
            precomputed_beta_scat=mie_sec.triple("beta_scat"),
            precomputed_beta_ext=mie_sec.triple("beta_ext"),
        )
        absorbers = tuple(
            _build_absorber(wrapped[name], base_dir)
            for name in sections if name.startswith("absorber.")
        )
        model = AtmosphereModel(
            name=model_sec.text("name"),
            geometry=geometry,
            rayleigh=rayleigh,
            mie=mie,
            absorbers=absorbers,
            ground_albedo=sec("ground").triple("albedo", SpectralTriple.uniform(0.1)),
            sun_irradiance=sec("sun").triple("irradiance", SpectralTriple.uniform(1.0)),
            curved_paths=model_sec.boolean("curved_paths", default=False),
            scattering_orders=model_sec.integer("scattering_orders", default=4, lo=1),
            temperature_k=model_sec.scalar("temperature_k", default=273.0, lo=1.0),
            rayleigh_phase_mode=model_sec.text("rayleigh_phase", default="penndorf",
                                               choices={"classic", "penndorf"}),
        )
    except DomainError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc

    for section in wrapped.values():
        for key, line in section.unknown_keys():
            raise ConfigError(f"{origin}:{line}: unknown key {key!r} in [{section.name}]")
    return model


def load_config(path) -> AtmosphereModel:
    """Load and fully validate an atmosphere model config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_model(text, origin=str(path), base_dir=path.parent)


def preset_dir() -> Path:
    return data_path("presets")


def list_presets() -> list:
    return sorted(p.stem for p in preset_dir().glob("*.cfg"))


def load_preset(name: str) -> AtmosphereModel:
    path = preset_dir() / f"{name}.cfg"
    if not path.exists():
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return load_config(path)
