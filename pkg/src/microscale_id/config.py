"""Experiment configuration (INI file, one section per concern).

Every key has a default reproducing the porous-cantilever experiment, so an
empty file is a valid configuration. See ``paper.cfg`` at the repository root
for the full annotated schema.
"""
from configparser import ConfigParser
from dataclasses import asdict, dataclass, field, fields
import os

from .errors import ParameterError
from .macro import LOAD_POLICIES


class ConfigError(ParameterError):
    """Malformed or out-of-range configuration."""


@dataclass
class BeamConfig:
    length: float = 30.0        # mm
    depth: float = 10.0         # mm
    nx: int = 75
    ny: int = 25
    load: float = 1.0           # kN per unit thickness
    load_location: str = "mid-depth"


@dataclass
class MatrixConfig:
    youngs_modulus: float = 70.0    # GPa
    poisson_ratio: float = 0.3
    pore_stiffness_ratio: float = 1e-6


@dataclass
class ReferenceConfig:
    phi: float = 0.3            # mm
    vf: float = 0.15
    size_factor: float = 10.0
    seed: int = 7
    raster_n: int = 200


@dataclass
class NoiseConfig:
    gamma: float = 0.05
    seed: int = 1


@dataclass
class Stage1Config:
    lam: float = 40.38          # GPa
    mu: float = 26.92           # GPa
    l: float = 3.0              # mm
    rel_step: float = 1e-3
    tol_f: float = 1e-10
    tol_g: float = 1e-6
    max_iter: int = 100


@dataclass
class Stage2Config:
    phi: float = 0.1            # mm
    vf: float = 0.05
    rve_seed: int = 11
    tol_f: float = 1e-10
    tol_g: float = 1e-6
    max_iter: int = 50


@dataclass
class ExperimentConfig:
    beam: BeamConfig = field(default_factory=BeamConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    output: str = "out"

    def validate(self):
        b = self.beam
        positive = {
            "beam.length": b.length, "beam.depth": b.depth, "beam.nx": b.nx, "beam.ny": b.ny,
            "beam.load": b.load, "matrix.youngs_modulus": self.matrix.youngs_modulus,
            "matrix.pore_stiffness_ratio": self.matrix.pore_stiffness_ratio,
            "reference.phi": self.reference.phi, "reference.size_factor": self.reference.size_factor,
            "stage1.lambda": self.stage1.lam, "stage1.mu": self.stage1.mu, "stage1.l": self.stage1.l,
            "stage1.rel_step": self.stage1.rel_step, "stage1.max_iter": self.stage1.max_iter,
            "stage2.phi": self.stage2.phi, "stage2.vf": self.stage2.vf,
            "stage2.max_iter": self.stage2.max_iter,
        }
        for key, val in positive.items():
            if not val > 0:
                raise ConfigError(f"{key} must be positive, got {val}")
        if b.load_location not in LOAD_POLICIES:
            raise ConfigError(f"beam.load_location must be one of {LOAD_POLICIES}")
        if not -1 < self.matrix.poisson_ratio < 0.5:
            raise ConfigError("matrix.poisson_ratio must lie in (-1, 0.5)")
        if not 0 <= self.reference.vf < 0.5:
            raise ConfigError("reference.vf must lie in [0, 0.5)")
        if not 0 < self.stage2.vf < 0.5:
            raise ConfigError("stage2.vf must lie in (0, 0.5)")
        if not self.noise.gamma >= 0:
            raise ConfigError("noise.gamma must be non-negative")
        return self

    def as_dict(self):
        return asdict(self)


# INI key -> dataclass attribute where they differ
_RENAMES = {"lambda": "lam"}


def _coerce(section, name, value, typ):
    try:
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return str(value).strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {name}: cannot parse {value!r} as {typ.__name__}") from exc


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read an INI file into an :class:`ExperimentConfig`.

    Unknown sections or keys are rejected so that typos do not silently fall
    back to defaults.
    """
    cfg = ExperimentConfig()
    parser = ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    for section in parser.sections():
        if section == "output":
            for key, val in parser.items(section):
                if key != "directory":
                    raise ConfigError(f"unknown key [output] {key}")
                cfg.output = val.strip()
            continue
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        types = {f.name: f.type for f in fields(obj)}
        for key, val in parser.items(section):
            attr = _RENAMES.get(key, key)
            if attr not in types:
                raise ConfigError(f"unknown key [{section}] {key}")
            typ = {"int": int, "float": float, "str": str}.get(types[attr], types[attr])
            setattr(obj, attr, _coerce(section, key, val, typ))
    for dotted, val in (overrides or {}).items():
        section, attr = dotted.split(".")
        if section == "output":
            cfg.output = val
        else:
            setattr(getattr(cfg, section), attr, val)
    return cfg.validate()


def write_config(cfg: ExperimentConfig, path):
    parser = ConfigParser()
    for f in fields(cfg):
        if f.name == "output":
            parser["output"] = {"directory": cfg.output}
            continue
        obj = getattr(cfg, f.name)
        inv = {v: k for k, v in _RENAMES.items()}
        parser[f.name] = {inv.get(k, k): repr(v) if isinstance(v, float) else str(v)
                          for k, v in asdict(obj).items()}
    with open(path, "w") as fh:
        parser.write(fh)
