"""Plain-text run configuration.

One ``key = value`` per line, ``#`` starts a comment.  Keys are either
top-level (``flow``, ``seed``) or ``block.key``.  Values are Python
literals (numbers, strings, bracketed lists, ``None``, ``True``); bare
words such as ``closed_u`` and the lowercase ``none``/``true``/``false``
are accepted too.  Matrices are bracketed lists of rows.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .discrete_ops import SystemMatrices
from .errors import ConfigError, MonoPHError
from .flows import PlantSpec, Variant, conserving_plant, custom_plant, linear_plant
from .monotone import BoxSet
from .ocp import CostSpec, OcpSpec
from .suites import SUITES
from .timegrid import GridFunction, Layout, TimeGrid

KEYS = {
    "flow": "closed_u",
    "seed": 0,
    "problem.A": None,
    "problem.B": None,
    "problem.x0": None,
    "problem.f": 0.0,
    "problem.t_f": 1.0,
    "problem.N": 200,
    "problem.alpha": 1.5,
    "problem.cost": "identity",
    "problem.C_out": None,
    "problem.box": None,
    "problem.box_lower": None,
    "problem.box_upper": None,
    "plant.kind": "conserving2d",
    "plant.R": None,
    "plant.B_p": None,
    "plant.callable": None,
    "plant.dim": None,
    "plant.x0": None,
    "integrator.method": "rk4",
    "integrator.dt_int": None,
    "integrator.T": 50.0,
    "integrator.record_every": 100,
    "integrator.stop_tol": None,
    "integrator.allow_unstable": False,
    "run.init": "zero",
    "run.init_radius": 5.0,
    "output.dir": "mono-ph-out",
    "verify.suites": ["structural", "monotonicity", "passivity", "integrator"],
    "debug.broken_adjoint": False,
}

_BARE = {"none": None, "true": True, "false": False}
_WORD = re.compile(r"^[A-Za-z_./~][\w./:\-]*$")


def parse_value(text: str, line=None):
    text = text.strip()
    if not text:
        raise ConfigError("missing value", line)
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if "#" in text:
        return parse_value(text.split("#", 1)[0], line)
    if text.lower() in _BARE:
        return _BARE[text.lower()]
    if _WORD.match(text):
        return text
    raise ConfigError(f"cannot parse value {text!r}", line)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)
    source: str = "<string>"

    def __getitem__(self, key):
        if key not in KEYS:
            raise KeyError(key)
        return self.values.get(key, KEYS[key])

    def line(self, key):
        return self.lines.get(key)

    def set(self, key, value, line=None):
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", line)
        self.values[key] = value
        self.lines[key] = line

    def override(self, assignment: str):
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {assignment!r}")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r} in override")
        self.set(key, parse_value(raw), None)

    def echo(self) -> dict:
        out = {}
        for key in KEYS:
            val = self[key]
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


def parse_config(text: str, source="<string>") -> RunConfig:
    cfg = RunConfig(source=source)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        key = key.strip()
        if key in cfg.lines:
            raise ConfigError(f"duplicate key {key!r} (first set on line {cfg.lines[key]})", lineno)
        cfg.set(key, parse_value(value, lineno), lineno)
    return cfg


def bundled_configs() -> dict:
    root = resources.files("monoph") / "configs"
    return {p.name[:-4]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".cfg")}


def resolve_config_path(name) -> Path:
    path = Path(name)
    if path.exists():
        return path
    known = bundled_configs()
    stem = path.name[:-4] if path.name.endswith(".cfg") else path.name
    if stem in known:
        return known[stem]
    raise ConfigError(f"no config file {name!r} and no bundled config of that name")


def load_config(path) -> RunConfig:
    path = resolve_config_path(path)
    return parse_config(path.read_text(), str(path))


# ---------------------------------------------------------------------------
# validation and assembly


def _matrix(cfg, key, required=True):
    val = cfg[key]
    if val is None:
        if required:
            raise ConfigError(f"{key} is required", cfg.line(key))
        return None
    try:
        arr = np.array(val, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be numeric: {exc}", cfg.line(key)) from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"{key} must be a list of rows", cfg.line(key))
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key} contains non-finite entries", cfg.line(key))
    return arr


def _vector(cfg, key, size=None, required=True):
    val = cfg[key]
    if val is None:
        if required:
            raise ConfigError(f"{key} is required", cfg.line(key))
        return None
    try:
        arr = np.atleast_1d(np.array(val, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be numeric: {exc}", cfg.line(key)) from None
    if arr.ndim != 1:
        raise ConfigError(f"{key} must be a flat list", cfg.line(key))
    if size is not None and arr.size != size:
        raise ConfigError(f"{key} has {arr.size} entries, expected {size}", cfg.line(key))
    return arr


def _scalar(cfg, key, kind=float, positive=False):
    val = cfg[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{key} must be a number, got {val!r}", cfg.line(key))
    if kind is int and int(val) != val:
        raise ConfigError(f"{key} must be an integer, got {val!r}", cfg.line(key))
    val = kind(val)
    if positive and not val > 0:
        raise ConfigError(f"{key} must be positive, got {val!r}", cfg.line(key))
    return val


def _wrap(key, cfg, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except MonoPHError as exc:
        raise ConfigError(f"{key}: {exc}", cfg.line(key)) from None


def build_spec(cfg: RunConfig) -> OcpSpec:
    A = _matrix(cfg, "problem.A")
    B = _matrix(cfg, "problem.B")
    if A.shape[0] != A.shape[1]:
        raise ConfigError(f"problem.A must be square, got {A.shape[0]}x{A.shape[1]}", cfg.line("problem.A"))
    if B.shape[0] != A.shape[0]:
        raise ConfigError(f"problem.B has {B.shape[0]} rows but problem.A is {A.shape[0]}x{A.shape[0]}", cfg.line("problem.B"))
    sysm = _wrap("problem.B", cfg, lambda: SystemMatrices(A, B))
    n, m = sysm.n, sysm.m
    N = _scalar(cfg, "problem.N", int)
    t_f = _scalar(cfg, "problem.t_f", float, positive=True)
    grid = _wrap("problem.N", cfg, lambda: TimeGrid(t_f, N))
    x0 = _vector(cfg, "problem.x0", n)

    f_raw = cfg["problem.f"]
    f_arr = np.array(f_raw, dtype=float)
    if f_arr.ndim == 0:
        f = GridFunction.constant(grid, Layout.INTERVALS, np.full(n, float(f_arr)))
    elif f_arr.ndim == 1 and f_arr.size == n:
        f = GridFunction.constant(grid, Layout.INTERVALS, f_arr)
    elif f_arr.ndim == 2 and f_arr.shape == (N, n):
        f = GridFunction(grid, Layout.INTERVALS, n, f_arr.ravel())
    else:
        raise ConfigError(f"problem.f must be a scalar, a length-{n} vector or an {N}x{n} array", cfg.line("problem.f"))

    alpha = _scalar(cfg, "problem.alpha", float, positive=True)
    kind = cfg["problem.cost"]
    if kind not in ("identity", "output"):
        raise ConfigError(f"problem.cost must be identity or output, got {kind!r}", cfg.line("problem.cost"))
    C_out = None
    if kind == "output":
        C_out = _matrix(cfg, "problem.C_out")
        if C_out.shape[1] != n:
            raise ConfigError(f"problem.C_out has {C_out.shape[1]} columns, state dim is {n}", cfg.line("problem.C_out"))
    cost = CostSpec(alpha, kind, C_out)

    box = None
    if cfg["problem.box"] is not None:
        if cfg["problem.box_lower"] is not None or cfg["problem.box_upper"] is not None:
            raise ConfigError("give either problem.box or problem.box_lower/box_upper", cfg.line("problem.box"))
        bound = _vector(cfg, "problem.box")
        if bound.size not in (1, m):
            raise ConfigError(f"problem.box needs 1 or {m} entries", cfg.line("problem.box"))
        box = _wrap("problem.box", cfg, lambda: BoxSet.symmetric(bound, m))
    elif cfg["problem.box_lower"] is not None or cfg["problem.box_upper"] is not None:
        lo = _vector(cfg, "problem.box_lower", m)
        hi = _vector(cfg, "problem.box_upper", m)
        box = _wrap("problem.box_upper", cfg, lambda: BoxSet(lo, hi))
    if box is not None and not box.zero_interior:
        key = "problem.box" if cfg["problem.box"] is not None else "problem.box_lower"
        raise ConfigError("0 must lie strictly inside the control box", cfg.line(key))

    return OcpSpec(sysm, grid, x0, cost, f, box, bool(cfg["debug.broken_adjoint"]))


def build_plant(cfg: RunConfig, spec: OcpSpec) -> PlantSpec:
    kind = cfg["plant.kind"]
    if kind == "conserving2d":
        plant = conserving_plant()
    elif kind == "linear":
        R = _matrix(cfg, "plant.R")
        Bp = _matrix(cfg, "plant.B_p")
        if Bp.shape[0] != R.shape[0]:
            raise ConfigError(f"plant.B_p has {Bp.shape[0]} rows, plant.R is {R.shape[0]}x{R.shape[1]}", cfg.line("plant.B_p"))
        plant = _wrap("plant.R", cfg, lambda: linear_plant(R, Bp))
    elif kind == "custom":
        target = cfg["plant.callable"]
        if not isinstance(target, str):
            raise ConfigError("plant.callable must name module:callable", cfg.line("plant.callable"))
        dim = _scalar(cfg, "plant.dim", int, positive=True)
        Bp = _matrix(cfg, "plant.B_p")
        try:
            plant = custom_plant(target, Bp, dim)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load plant.callable: {exc}", cfg.line("plant.callable")) from None
        except MonoPHError as exc:
            raise ConfigError(f"plant.callable: {exc}", cfg.line("plant.callable")) from None
    else:
        raise ConfigError(f"plant.kind must be conserving2d, linear or custom, got {kind!r}", cfg.line("plant.kind"))
    if plant.m != spec.m:
        raise ConfigError(f"plant input dim {plant.m} differs from control dim {spec.m}", cfg.line("plant.B_p") or cfg.line("plant.kind"))
    return plant


def build_plant_x0(cfg: RunConfig, plant: PlantSpec) -> np.ndarray:
    x = _vector(cfg, "plant.x0", plant.dim, required=False)
    return np.zeros(plant.dim) if x is None else x


def validate(cfg: RunConfig):
    """Build and cross-check everything the config describes."""
    try:
        variant = Variant(cfg["flow"])
    except ValueError:
        raise ConfigError(f"flow must be one of {[v.value for v in Variant]}, got {cfg['flow']!r}", cfg.line("flow")) from None
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}", cfg.line("seed"))
    spec = build_spec(cfg)
    plant = build_plant(cfg, spec)
    x_p0 = build_plant_x0(cfg, plant)
    if variant.constrained and spec.box is None:
        raise ConfigError(f"flow {variant.value} needs a control box", cfg.line("flow"))
    if variant is Variant.CLOSED_C and not spec.box.is_symmetric:
        raise ConfigError("closed_c needs a symmetric box (lower = -upper)", cfg.line("problem.box_lower") or cfg.line("flow"))
    if cfg["integrator.method"] not in ("rk4", "implicit_euler"):
        raise ConfigError("integrator.method must be rk4 or implicit_euler", cfg.line("integrator.method"))
    _scalar(cfg, "integrator.T", float, positive=True)
    _scalar(cfg, "integrator.record_every", int, positive=True)
    if cfg["integrator.dt_int"] is not None:
        _scalar(cfg, "integrator.dt_int", float, positive=True)
    if cfg["integrator.stop_tol"] is not None:
        _scalar(cfg, "integrator.stop_tol", float)
    if cfg["run.init"] not in ("zero", "random"):
        raise ConfigError("run.init must be zero or random", cfg.line("run.init"))
    _scalar(cfg, "run.init_radius", float)
    suites = cfg["verify.suites"]
    if isinstance(suites, str):
        suites = [suites]
    bad = [s for s in suites if s not in SUITES]
    if bad:
        raise ConfigError(f"unknown suites {bad}; available: {list(SUITES)}", cfg.line("verify.suites"))
    return variant, spec, plant, x_p0
