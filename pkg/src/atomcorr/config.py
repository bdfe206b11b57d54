"""Run configuration: strict YAML parsing, validation and digests.

Every section maps one-to-one onto a dataclass.  Unknown keys are fatal and
errors carry the dotted field path plus the YAML line when known, e.g.
``detector.sigma_xy (line 12): must be a finite non-negative number``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import yaml

from ._validation import ConfigurationError
from .core import (
    DetectorConfig,
    PhysicalConstants,
    SourceGeometry,
    SpeciesTag,
    Statistics,
    TofConfig,
    TrapSource,
)
from .halo import HaloConfig
from .sources import FanoDemo, build_far_field, build_occupation_spectrum

__all__ = [
    "ConfigError",
    "EXPERIMENTS",
    "RunConfig",
    "load_config",
    "parse_config",
    "config_digest",
]

EXPERIMENTS = ("hbt_boson", "hbt_fermion", "halo", "fano_demo")
_DEFAULT_SPECIES = {"hbt_boson": "he4", "hbt_fermion": "he3", "halo": "he4", "fano_demo": "he4"}
_SPECIES = {"he4": SpeciesTag.helium4, "he3": SpeciesTag.helium3}


class ConfigError(ConfigurationError):
    """Configuration error tied to a field path (and YAML line if known)."""

    def __init__(self, path, message, line=None):
        self.path = path
        self.line = line
        where = path or "<root>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class ConstantsSection:
    hbar: float = PhysicalConstants.hbar
    gravity_g: float = PhysicalConstants.gravity_g
    mass_he4: float = PhysicalConstants.mass_he4
    mass_he3: float = PhysicalConstants.mass_he3


@dataclass(frozen=True)
class SourceSection:
    """Trapped source and sampler settings.

    ``sampler`` is ``"modes"`` (thermal mode amplitudes, exact) or
    ``"spectral"`` (filtered noise on a speckle grid) for bosons; fermions
    always use the mode expansion.  ``cells_per_length`` defaults to 8 for
    the mode samplers and 4 for the speckle grid.
    """

    sizes: tuple = (2e-5, 4e-5, 3e-5)
    mean_atoms_per_shot: Optional[float] = None
    mode_count_per_axis: tuple = (24, 24, 24)
    degeneracy_parameter: Optional[float] = None
    envelope_widths: Optional[tuple] = None
    sampler: str = "modes"
    cells_per_length: Optional[float] = None
    extent: float = 6.0


@dataclass(frozen=True)
class TofSection:
    fall_time: float = 0.32
    include_gravity: bool = True


@dataclass(frozen=True)
class DetectorSection:
    quantum_efficiency: float = 0.05
    sigma_t: float = 1e-9
    sigma_xy: float = 5e-4
    aperture_diameter: float = 0.08
    v_arrival: float = 3.5
    v_spread_fraction: float = 0.005
    t_ref: float = 0.0
    dead_time: float = 0.0


@dataclass(frozen=True)
class SliceSection:
    enabled: bool = False
    thickness: float = 2e-3
    bins: int = 64
    shot_id: int = 0


@dataclass(frozen=True)
class HaloSection:
    """Collision halo; ``pair_sum_widths`` defaults to ``hbar / s_i``."""

    k_recoil: float = HaloConfig.k_recoil
    mean_pairs_per_shot: float = 20.0
    pair_sum_widths: Optional[tuple] = None
    mean_field_broadening: float = 0.0
    scattered_fraction: float = 0.05
    condensate_atoms_per_shot: Optional[float] = None
    condensate_momentum_widths: Optional[tuple] = None
    colinear_multiplicity: float = 1.0
    shell_half_width: float = 0.25
    condensate_cone: float = 0.95
    slices: SliceSection = field(default_factory=SliceSection)


@dataclass(frozen=True)
class FanoSection:
    source_size: float = 3e-5
    half_width: Optional[float] = None
    pairs_per_shot: int = 1


@dataclass(frozen=True)
class CorrelateSection:
    """Histogram and fit settings; ``None`` entries are derived from the physics.

    ``fit_method`` is ``"ratio"`` (Gaussian on the normalised ``g2``) or
    ``"excess"`` (Gaussian over the mixed-event background shape).
    """

    axes: Optional[tuple] = None
    coordinates: Optional[str] = None
    longitudinal: str = "z"
    half_range: Optional[tuple] = None
    bin_width: Optional[tuple] = None
    window: Optional[dict] = None
    center: Optional[tuple] = None
    mixing_factor: Optional[int] = None
    engine: str = "fast"
    fit: bool = True
    fit_method: Optional[str] = None


@dataclass(frozen=True)
class OutputSection:
    events: str = "events.csv"
    directory: str = "."
    summary: str = "summary.txt"


_SECTIONS = {
    "constants": ConstantsSection,
    "source": SourceSection,
    "tof": TofSection,
    "detector": DetectorSection,
    "halo": HaloSection,
    "fano": FanoSection,
    "correlate": CorrelateSection,
    "output": OutputSection,
    "slices": SliceSection,
}

# Settings that do not change the simulated events.
_NOT_DIGESTED = ("n_jobs", "output", "correlate")


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "hbt_boson"
    n_shots: int = 100
    master_seed: int = 0
    n_jobs: int = 1
    species: Optional[str] = None
    constants: ConstantsSection = field(default_factory=ConstantsSection)
    source: SourceSection = field(default_factory=SourceSection)
    tof: TofSection = field(default_factory=TofSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    halo: HaloSection = field(default_factory=HaloSection)
    fano: FanoSection = field(default_factory=FanoSection)
    correlate: CorrelateSection = field(default_factory=CorrelateSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ---- derived domain objects -------------------------------------------

    @property
    def physical_constants(self):
        return PhysicalConstants(**dataclasses.asdict(self.constants))

    @property
    def species_tag(self):
        return _SPECIES[self.species or _DEFAULT_SPECIES[self.experiment]]()

    @property
    def mass(self):
        return self.physical_constants.mass(self.species_tag.mass_ref)

    def tof_config(self):
        return TofConfig(self.tof.fall_time, self.tof.include_gravity)

    def detector_config(self):
        return DetectorConfig(**dataclasses.asdict(self.detector))

    def trap_source(self):
        fermion = self.species_tag.statistics is Statistics.FERMION
        s = self.source
        n = s.mean_atoms_per_shot if s.mean_atoms_per_shot is not None else (50.0 if fermion else 100.0)
        d = s.degeneracy_parameter if s.degeneracy_parameter is not None else (0.3 if fermion else 0.4)
        return TrapSource(
            self.species_tag, SourceGeometry(*s.sizes), n, tuple(int(m) for m in s.mode_count_per_axis), d
        )

    def far_field(self):
        return build_far_field(
            self.trap_source(), self.tof_config(), self.physical_constants, self.source.envelope_widths
        )

    def cells_per_length(self):
        if self.source.cells_per_length is not None:
            return float(self.source.cells_per_length)
        uses_grid = self.experiment == "hbt_boson" and self.source.sampler == "spectral"
        return 4.0 if uses_grid else 8.0

    def halo_config(self):
        h = self.halo
        c = self.physical_constants
        widths = h.pair_sum_widths
        if widths is None:
            widths = tuple(c.hbar / s for s in self.source.sizes)
        return HaloConfig(
            k_recoil=h.k_recoil,
            species_mass=self.mass,
            mean_pairs_per_shot=h.mean_pairs_per_shot,
            pair_sum_widths=widths,
            mean_field_broadening=h.mean_field_broadening,
            scattered_fraction=h.scattered_fraction,
            condensate_atoms_per_shot=h.condensate_atoms_per_shot,
            condensate_momentum_widths=h.condensate_momentum_widths,
            colinear_multiplicity=h.colinear_multiplicity,
        )

    def fano_demo(self):
        f = self.fano
        c = self.physical_constants
        demo = FanoDemo(f.source_size, self.mass, self.tof.fall_time, 1.0, int(f.pairs_per_shot), c.hbar)
        half = f.half_width if f.half_width is not None else 4.0 * demo.correlation_length
        return dataclasses.replace(demo, half_width=float(half))

    # ---- validation ---------------------------------------------------------

    def validate(self, lines=None):
        """Check every nested invariant; raise :class:`ConfigError` on the first failure."""
        lines = lines or {}

        def fail(path, msg):
            raise ConfigError(path, msg, _line_for(lines, path))

        if self.experiment not in EXPERIMENTS:
            fail("experiment", f"must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if not isinstance(self.n_shots, int) or isinstance(self.n_shots, bool) or self.n_shots < 1:
            fail("n_shots", f"must be an integer >= 1, got {self.n_shots!r}")
        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            fail("master_seed", f"must be a non-negative integer, got {self.master_seed!r}")
        if not isinstance(self.n_jobs, int) or self.n_jobs == 0:
            fail("n_jobs", f"must be a non-zero integer, got {self.n_jobs!r}")
        if self.species is not None and self.species not in _SPECIES:
            fail("species", f"must be one of {', '.join(_SPECIES)}, got {self.species!r}")
        stats = self.species_tag.statistics
        if self.experiment == "hbt_boson" and stats is not Statistics.BOSON:
            fail("species", "hbt_boson needs a bosonic species (he4)")
        if self.experiment == "hbt_fermion" and stats is not Statistics.FERMION:
            fail("species", "hbt_fermion needs a fermionic species (he3)")
        if self.source.sampler not in ("modes", "spectral"):
            fail("source.sampler", f"must be 'modes' or 'spectral', got {self.source.sampler!r}")
        if self.correlate.engine not in ("fast", "naive"):
            fail("correlate.engine", f"must be 'fast' or 'naive', got {self.correlate.engine!r}")
        if self.correlate.fit_method not in (None, "ratio", "excess"):
            fail("correlate.fit_method", f"must be 'ratio' or 'excess', got {self.correlate.fit_method!r}")
        checks = [
            ("constants", lambda: self.physical_constants),
            ("tof", self.tof_config),
            ("detector", self.detector_config),
        ]
        if self.experiment in ("hbt_boson", "hbt_fermion"):
            checks.append(("source", self.far_field))
            if stats is Statistics.FERMION:
                checks.append(("source", lambda: build_occupation_spectrum(self.trap_source(), self.far_field())))
        elif self.experiment == "halo":
            checks.append(("source.sizes", lambda: SourceGeometry(*self.source.sizes)))
            checks.append(("halo", self.halo_config))
        else:
            checks.append(("fano", self.fano_demo))
        for path, build in checks:
            try:
                build()
            except (ConfigurationError, ValueError, TypeError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                fail(_blame(path, str(exc)), str(exc))
        return self

    # ---- serialisation ------------------------------------------------------

    def to_dict(self):
        return _jsonable(dataclasses.asdict(self))

    def digest(self):
        return config_digest(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def default(cls, experiment="hbt_boson"):
        return cls(experiment=experiment)


def _blame(section, message):
    """Point at the field a domain error names, when it names one."""
    sec_cls = _SECTIONS.get(section.split(".")[0])
    if sec_cls is None or "." in section:
        return section
    for f in fields(sec_cls):
        if message.startswith(f.name + " "):
            return f"{section}.{f.name}"
    return section


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def config_digest(config):
    """SHA-256 of the canonical JSON of everything that shapes the events.

    Worker count, output paths and correlation settings are left out, so
    they can change without invalidating event files.
    """
    data = config.to_dict()
    for key in _NOT_DIGESTED:
        data.pop(key, None)
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# parsing


def _line_map(text):
    lines = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, "")
    return lines


def _line_for(lines, path):
    while path:
        if path in lines:
            return lines[path]
        path = path.rpartition(".")[0]
    return None


def _number(value):
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _coerce(value, default, path, lines):
    """Light type coercion driven by the default value's type."""
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}", _line_for(lines, path))
        return tuple(_number(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}", _line_for(lines, path))
        return value
    if isinstance(default, (int, float)) and isinstance(value, str):
        # YAML 1.1 reads exponents without a dot ("1e-4") as strings
        try:
            value = float(value)
        except ValueError:
            pass
        else:
            value = int(value) if isinstance(default, int) and value.is_integer() else value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}", _line_for(lines, path))
        return float(value) if isinstance(default, float) else value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}", _line_for(lines, path))
    return value


def _build(cls, data, prefix, lines):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}", _line_for(lines, prefix))
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            path = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError(
                path, f"unknown key (allowed: {', '.join(sorted(known))})", _line_for(lines, path)
            )
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        sub = _SECTIONS.get(key)
        default = getattr(defaults, key)
        if sub is not None and dataclasses.is_dataclass(default):
            kwargs[key] = _build(sub, value, path, lines)
        elif value is None:
            kwargs[key] = None
        else:
            kwargs[key] = _coerce(value, default, path, lines)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc), _line_for(lines, prefix)) from exc


def parse_config(text, overrides=None):
    """Build a validated :class:`RunConfig` from YAML text.

    ``overrides`` maps dotted paths (``"detector.sigma_xy"``) to values and is
    applied before validation.
    """
    try:
        data = yaml.safe_load(text) if text else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("", f"invalid YAML: {exc}", mark.line + 1 if mark else None) from exc
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be a mapping")
    for path, value in (overrides or {}).items():
        node = data
        parts = path.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(path, "cannot override inside a non-mapping value")
            node = nxt
        node[parts[-1]] = value
    lines = _line_map(text or "")
    return _build(RunConfig, data, "", lines).validate(lines)


def load_config(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, overrides)
