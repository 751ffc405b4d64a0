"""Run configuration: parsing, defaults, validation and object construction."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adapt import AdaptConfig
from .mesh import EAST, NORTH, SOUTH, WEST, QuadMesh, new_uniform
from .problem import (DomainMean, L2ErrorRep, PointValueRegularized, ProblemSpec,
                      SubdomainMean, constant_problem, example1, example2, manufactured)

SIDE_NAMES = {"west": WEST, "east": EAST, "south": SOUTH, "north": NORTH}
PROBLEMS = ("example1", "example2", "manufactured", "custom")
GOAL_TYPES = ("l2", "mean", "point", "box")
MODES = ("adaptive", "global")


class ConfigError(ValueError):
    """Malformed or out-of-range configuration; the message names the key."""


@dataclass
class ProblemConfig:
    name: str = "example1"
    epsilon: float = 1e-6
    degree: int = 1
    b: list = field(default_factory=lambda: [1.0, 1.0])
    alpha: float = 1.0
    f: float = 0.0
    dirichlet: float = 0.0
    neumann_sides: list = field(default_factory=list)


@dataclass
class GoalConfig:
    type: str = "l2"
    center: list = field(default_factory=lambda: [5.0 / 16.0, 3.0 / 8.0])
    radius: float = 0.05
    box: list = field(default_factory=lambda: [0.25, 0.75, 0.25, 0.75])


@dataclass
class DiscretizationConfig:
    p: int = 1
    s: int = 1
    delta0: float = 1.0
    initial_cells: int = 8
    quad_order: Optional[int] = None
    error_quad_order: Optional[int] = None


@dataclass
class AdaptivityConfig:
    mode: str = "adaptive"
    theta: float = 1.0
    tol: float = 1e-8
    max_iterations: int = 20
    coarsen_fraction: float = 0.02
    max_dofs: Optional[int] = None


@dataclass
class OutputConfig:
    directory: str = "output"
    vtu: bool = False
    dump_matrices: bool = False
    timing: bool = False


SECTIONS = {
    "problem": ProblemConfig,
    "goal": GoalConfig,
    "discretization": DiscretizationConfig,
    "adaptivity": AdaptivityConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    goal: GoalConfig = field(default_factory=GoalConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    adaptivity: AdaptivityConfig = field(default_factory=AdaptivityConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def adapt_config(self) -> AdaptConfig:
        d, a = self.discretization, self.adaptivity
        return AdaptConfig(
            theta=a.theta, coarsen_fraction=a.coarsen_fraction, tol=a.tol,
            max_iterations=a.max_iterations, p=d.p, s=d.s, delta0=d.delta0,
            max_dofs=a.max_dofs, quad_order=d.quad_order, error_quad_order=d.error_quad_order,
        )


def _coerce(section: str, key: str, default, value, annotation: str):
    name = f"{section}.{key}"
    if "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if value is None:
        if "Optional" in annotation:
            return None
        raise ConfigError(f"{name}: value required")
    if "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if "list" in annotation:
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def from_dict(data: dict, strict: bool = True):
    """Build a :class:`RunConfig`; returns ``(config, warnings)``.

    Unknown sections or keys raise :class:`ConfigError` when ``strict`` and
    are reported as warnings otherwise.
    """
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a table/object at top level")
    warnings = []

    def unknown(msg):
        if strict:
            raise ConfigError(msg)
        warnings.append(msg)

    parts = {}
    for section, cls in SECTIONS.items():
        raw = data.get(section, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"{section}: expected a table")
        obj = cls()
        known = {f.name: f for f in fields(cls)}
        for key, value in raw.items():
            if key not in known:
                unknown(f"unknown key {section}.{key}")
                continue
            f = known[key]
            setattr(obj, key, _coerce(section, key, getattr(obj, key), value, str(f.type)))
        parts[section] = obj
    for section in data:
        if section not in SECTIONS:
            unknown(f"unknown section {section}")
    cfg = RunConfig(**parts)
    validate(cfg)
    return cfg, warnings


def _check(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: RunConfig) -> None:
    pr, g, d, a = cfg.problem, cfg.goal, cfg.discretization, cfg.adaptivity
    _check(pr.name in PROBLEMS, "problem.name", f"must be one of {PROBLEMS}, got {pr.name!r}")
    _check(math.isfinite(pr.epsilon) and pr.epsilon > 0, "problem.epsilon",
           f"must be positive, got {pr.epsilon}")
    _check(1 <= pr.degree <= 4, "problem.degree", f"must lie in [1, 4], got {pr.degree}")
    _check(len(pr.b) == 2 and all(isinstance(v, (int, float)) for v in pr.b), "problem.b",
           "must be a pair of numbers")
    _check(pr.alpha >= 0, "problem.alpha", f"must be non-negative, got {pr.alpha}")
    for s in pr.neumann_sides:
        _check(s in SIDE_NAMES, "problem.neumann_sides", f"unknown side {s!r}")
    _check(len(pr.neumann_sides) < 4, "problem.neumann_sides", "at least one Dirichlet side needed")
    _check(g.type in GOAL_TYPES, "goal.type", f"must be one of {GOAL_TYPES}, got {g.type!r}")
    _check(len(g.center) == 2, "goal.center", "must be a point [x, y]")
    _check(g.radius > 0, "goal.radius", f"must be positive, got {g.radius}")
    _check(len(g.box) == 4 and g.box[0] < g.box[1] and g.box[2] < g.box[3], "goal.box",
           "must be [xmin, xmax, ymin, ymax] with xmin < xmax and ymin < ymax")
    if g.type == "l2":
        _check(pr.name != "custom", "goal.type",
               "the L2 error goal needs an exact solution; problem 'custom' has none")
    _check(1 <= d.p <= 4, "discretization.p", f"must lie in [1, 4], got {d.p}")
    _check(1 <= d.s <= 3, "discretization.s", f"must lie in [1, 3], got {d.s}")
    _check(d.delta0 > 0, "discretization.delta0", f"must be positive, got {d.delta0}")
    _check(d.initial_cells >= 1, "discretization.initial_cells",
           f"must be >= 1, got {d.initial_cells}")
    for key in ("quad_order", "error_quad_order"):
        v = getattr(d, key)
        _check(v is None or v >= 1, f"discretization.{key}", f"must be >= 1, got {v}")
    _check(a.mode in MODES, "adaptivity.mode", f"must be one of {MODES}, got {a.mode!r}")
    _check(math.isfinite(a.theta) and a.theta > 0, "adaptivity.theta",
           f"must be positive, got {a.theta}")
    _check(a.tol >= 0, "adaptivity.tol", f"must be non-negative, got {a.tol}")
    _check(a.max_iterations >= 1, "adaptivity.max_iterations",
           f"must be >= 1, got {a.max_iterations}")
    _check(0 <= a.coarsen_fraction < 1, "adaptivity.coarsen_fraction",
           f"must lie in [0, 1), got {a.coarsen_fraction}")
    _check(a.max_dofs is None or a.max_dofs >= 1, "adaptivity.max_dofs",
           f"must be >= 1, got {a.max_dofs}")


def parse_file(path) -> dict:
    """Read TOML, or JSON when the extension is ``.json``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def load_config(path, strict: bool = True):
    return from_dict(parse_file(path), strict=strict)


def with_overrides(cfg: RunConfig, output_dir=None, max_iterations=None,
                   full: bool = False) -> RunConfig:
    out = replace(cfg, output=replace(cfg.output), adaptivity=replace(cfg.adaptivity))
    if output_dir is not None:
        out.output.directory = str(output_dir)
    if max_iterations is not None:
        out.adaptivity.max_iterations = int(max_iterations)
    if full:
        out.adaptivity.max_dofs = None
    validate(out)
    return out


def build_problem(cfg: RunConfig) -> ProblemSpec:
    pr = cfg.problem
    if pr.name == "example1":
        return example1(pr.epsilon)
    if pr.name == "example2":
        return example2(pr.epsilon)
    if pr.name == "manufactured":
        return manufactured(pr.degree, pr.epsilon, tuple(pr.b), pr.alpha)
    return constant_problem(pr.epsilon, tuple(pr.b), pr.alpha, pr.f, pr.dirichlet,
                            tuple(SIDE_NAMES[s] for s in pr.neumann_sides))


def build_goal(cfg: RunConfig):
    g = cfg.goal
    if g.type == "l2":
        return L2ErrorRep()
    if g.type == "mean":
        return DomainMean()
    if g.type == "point":
        return PointValueRegularized(tuple(g.center), g.radius)
    return SubdomainMean(tuple(g.box))


def build_mesh(cfg: RunConfig, problem: ProblemSpec) -> QuadMesh:
    return new_uniform(problem.domain, cfg.discretization.initial_cells)


def format_config(cfg: RunConfig) -> str:
    """TOML-style rendering of the resolved configuration."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {'none' if value is None else json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
