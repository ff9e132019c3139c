"""Scenario configuration files.

A scenario is a TOML file. Only the cloud paths are required; every other
value has a default tuned for tabletop grasping. Relative paths resolve
against the directory of the config file. Schema::

    [clouds]
    object = "object.ply"        # matched object cloud (required)
    scene = "scene.ply"          # object + table, used for collisions (required)
    scale = 1.0                  # file units -> meters, 0.001 for millimeters
    object_voxel = 0.005         # 0 disables downsampling
    surface_voxel = 0.005        # preshape inner surface downsampling

    [[preshapes]]                # one table per preshape (at least one)
    name = "open"
    surface = "surface.ply"      # inner contact surface
    full = "full.ply"            # complete gripper cloud for the SDF

    [sdf]
    voxel = 0.0025
    padding = 0.01               # optional, default four voxels
    epsilon = 0.05               # gap between stacked preshape grids
    cache_dir = "sdf_cache"      # optional

    [init]
    mode = "fibonacci"           # or "gaussian-mixture" or "explicit"
    n_total = 100
    n_top = 6
    n_groups = 4
    radius = 0.3
    facing = [1.0, 0.0, 0.0]     # camera-facing direction of the quarter sphere
    up = [0.0, 0.0, 1.0]
    means = []                   # gaussian-mixture: list of 7-vectors
    stddev = 0.01                # scalar or 7-vector
    count = 29                   # gaussian-mixture particles per preshape
    poses = "poses.txt"          # explicit: rows of x y z qw qx qy qz

    [optim]
    k_stein = 15
    k_max = 40
    learning_rate = 1.0
    convergence_threshold = 0.0002
    contact_weight = 1.0
    com_weight = 1.0
    contact_tolerance = 0.0
    annealing_cycles = 5
    annealing_exponent = 2.0
    prior_translation_std = 1.0
    prior_kappa = 0.0
    # optional: preconditioner (7 values), stein_step_size, bandwidth

    [run]
    seed = 0
    workers = 1

    [output]
    report = "report.json"
    trace = "trace.ndjson"       # optional
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

INIT_MODES = ("fibonacci", "gaussian-mixture", "explicit")


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


@dataclass
class CloudsSection:
    object: Path
    scene: Path
    scale: float = 1.0
    object_voxel: float = 0.005
    surface_voxel: float = 0.005


@dataclass
class PreshapeEntry:
    name: str
    surface: Path
    full: Path


@dataclass
class SdfSection:
    voxel: float = 0.0025
    padding: float | None = None
    epsilon: float = 0.05
    cache_dir: Path | None = None


@dataclass
class InitSection:
    mode: str = "fibonacci"
    n_total: int = 100
    n_top: int = 6
    n_groups: int = 4
    radius: float = 0.3
    facing: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    up: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    means: list = field(default_factory=list)
    stddev: float | list = 0.01
    count: int = 29
    poses: Path | None = None


@dataclass
class OptimSection:
    k_stein: int = 15
    k_max: int = 40
    learning_rate: float = 1.0
    convergence_threshold: float = 0.0002
    contact_weight: float = 1.0
    com_weight: float = 1.0
    contact_tolerance: float = 0.0
    annealing_cycles: int = 5
    annealing_exponent: float = 2.0
    prior_translation_std: float = 1.0
    prior_kappa: float = 0.0
    preconditioner: list | None = None
    stein_step_size: float | None = None
    bandwidth: float | None = None


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1


@dataclass
class OutputSection:
    report: Path | None = None
    trace: Path | None = None


@dataclass
class ScenarioConfig:
    clouds: CloudsSection
    preshapes: list
    sdf: SdfSection = field(default_factory=SdfSection)
    init: InitSection = field(default_factory=InitSection)
    optim: OptimSection = field(default_factory=OptimSection)
    run: RunSection = field(default_factory=RunSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: Path | None = None

    def to_dict(self) -> dict:
        """Fully resolved configuration with paths as strings."""
        def conv(obj):
            if isinstance(obj, Path):
                return str(obj)
            if isinstance(obj, list):
                return [conv(v) for v in obj]
            if isinstance(obj, dict):
                return {k: conv(v) for k, v in obj.items()}
            return obj

        d = dataclasses.asdict(self)
        d.pop("source")
        return conv(d)

    def digest(self) -> str:
        """sha256 of the canonical JSON of :meth:`to_dict`."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self) -> "ScenarioConfig":
        missing = [p for p in self._input_paths() if not p.is_file()]
        if missing:
            raise ConfigError("missing input file(s): " + ", ".join(str(p) for p in missing))
        c, s, i, o = self.clouds, self.sdf, self.init, self.optim
        checks = [
            (c.scale > 0, "clouds.scale must be positive"),
            (c.object_voxel >= 0 and c.surface_voxel >= 0, "downsampling voxels must be >= 0"),
            (len(self.preshapes) >= 1, "need at least one [[preshapes]] entry"),
            (len({p.name for p in self.preshapes}) == len(self.preshapes), "preshape names must be unique"),
            (s.voxel > 0, "sdf.voxel must be positive"),
            (s.padding is None or s.padding >= 0, "sdf.padding must be >= 0"),
            (s.epsilon > 0, "sdf.epsilon must be positive"),
            (i.mode in INIT_MODES, f"init.mode must be one of {', '.join(INIT_MODES)}"),
            (i.n_groups >= 1 and 0 <= i.n_top <= i.n_total, "need init.n_groups >= 1 and 0 <= n_top <= n_total"),
            (i.radius > 0, "init.radius must be positive"),
            (i.count >= 1, "init.count must be >= 1"),
            (i.mode != "gaussian-mixture" or len(i.means) > 0, "gaussian-mixture needs init.means"),
            (i.mode != "explicit" or i.poses is not None, "explicit mode needs init.poses"),
            (0 <= o.k_stein <= o.k_max and o.k_max >= 1, "need 0 <= optim.k_stein <= optim.k_max, k_max >= 1"),
            (o.learning_rate > 0, "optim.learning_rate must be positive"),
            (0 <= o.convergence_threshold < 1, "optim.convergence_threshold must be in [0, 1)"),
            (o.contact_weight >= 0 and o.com_weight >= 0, "cost weights must be >= 0"),
            (o.annealing_cycles >= 1 and o.annealing_exponent > 0, "invalid annealing parameters"),
            (o.prior_translation_std > 0 and o.prior_kappa >= 0, "invalid prior parameters"),
            (o.preconditioner is None or len(o.preconditioner) == 7, "optim.preconditioner needs 7 values"),
            (self.run.workers >= 1, "run.workers must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def _input_paths(self) -> list[Path]:
        paths = [self.clouds.object, self.clouds.scene]
        for p in self.preshapes:
            paths += [p.surface, p.full]
        if self.init.mode == "explicit" and self.init.poses is not None:
            paths.append(self.init.poses)
        return paths


_SECTIONS = {
    "sdf": (SdfSection, ("cache_dir",)),
    "init": (InitSection, ("poses",)),
    "optim": (OptimSection, ()),
    "run": (RunSection, ()),
    "output": (OutputSection, ("report", "trace")),
}


def _section(cls, raw: dict, name: str, path_keys, base: Path):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    values = dict(raw)
    for key in path_keys:
        if values.get(key) is not None:
            values[key] = (base / values[key]).resolve()
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(raw: dict, base_dir=".") -> ScenarioConfig:
    base = Path(base_dir)
    unknown = set(raw) - {"clouds", "preshapes", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if "clouds" not in raw:
        raise ConfigError("missing [clouds] section")
    clouds = _section(CloudsSection, raw["clouds"], "clouds", ("object", "scene"), base)
    entries = raw.get("preshapes", [])
    if not isinstance(entries, list):
        raise ConfigError("preshapes must be an array of tables ([[preshapes]])")
    preshapes = [_section(PreshapeEntry, e, f"preshapes[{i}]", ("surface", "full"), base)
                 for i, e in enumerate(entries)]
    sections = {k: _section(cls, raw.get(k, {}), k, keys, base) for k, (cls, keys) in _SECTIONS.items()}
    return ScenarioConfig(clouds, preshapes, **sections)


def load_config(path, validate: bool = True) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(raw, path.parent.resolve())
    cfg.source = path.resolve()
    return cfg.validate() if validate else cfg
