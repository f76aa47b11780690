"""TOML scenario configuration: parsing, validation, presets and emission."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from asinv.inversion import ASIConfig
from asinv.medium import (BackgroundPiece, Disk, Inclusion, Medium, Polygon, rectangle_polygon,
                          regular_polygon, star_polygon)
from asinv.mesh import SIDES, Rectangle, as_rectangle
from asinv.spectral import WeightSpec


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key, ``line`` the TOML line if known."""

    def __init__(self, field: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {message}")
        self.field = field
        self.line = line


DEFAULTS: dict[str, Any] = {
    "scenario": {"name": "custom", "seed": None},
    "domain": {"bounds": [0.0, 1.0, 0.0, 1.0]},
    "mesh": {"nx": 64, "ny": 64, "refine": 0},
    "medium": {"preset": "five_inclusion"},
    "weight": {"form": "power", "q": 2.0, "eps": 1e-8},
    "forward": {
        "frequencies": [3.0, 6.0, 9.0],
        "sources": "perimeter",
        "source_width": 0.0,  # 0 selects two cell widths
        "source_amplitude": 1.0,
        "observe": list(SIDES),
        "sound_hard": [],
    },
    "observations": {"noise": 0.0, "refine": 1, "directory": ""},
    "inversion": {
        "eps_psi": 0.005, "rho0": 0.8, "rho1": 1.2, "eps_nu": 0.005, "eps_tol": 0.005,
        "J1": 100, "gtol": 1e-6, "bfgs_max_iter": 200, "bfgs_initial_step": 0.1,
        "max_iterations": 30, "max_iter_per_frequency": 0,
        "eig_operand": "subtracted", "warm_start": "projection", "initial": 0.0,
    },
    "decomposition": {"n_eigs": 0, "refinements": 2, "delta": 0.0, "region": [],
                      "extra_eigs": 1},
}

PRESETS: dict[str, dict[str, Any]] = {
    "five_inclusion": {
        "scenario": {"name": "five_inclusion", "seed": 2024},
        "domain": {"bounds": [0.0, 1.0, 0.0, 1.0]},
        "mesh": {"nx": 128, "ny": 128, "refine": 0},
        "medium": {"preset": "five_inclusion"},
        "forward": {"frequencies": [3.0, 6.0, 9.0]},
        "observations": {"noise": 0.1, "refine": 1},
        "inversion": {"bfgs_max_iter": 40, "max_iterations": 8, "max_iter_per_frequency": 1},
    },
    "layered": {
        "scenario": {"name": "layered", "seed": 0},
        "domain": {"bounds": [0.0, 1.5, 0.0, 1.0]},
        "mesh": {"nx": 144, "ny": 96, "refine": 0},
        "medium": {"preset": "layered"},
        "decomposition": {"n_eigs": 8, "refinements": 2},
    },
    "constant": {
        "scenario": {"name": "constant", "seed": 0},
        "domain": {"bounds": [0.0, 1.0, 0.0, 1.0]},
        "mesh": {"nx": 64, "ny": 64, "refine": 0},
        "medium": {"preset": "constant"},
        "decomposition": {"n_eigs": 6, "refinements": 1},
    },
    "star3": {
        "scenario": {"name": "star3", "seed": 0},
        "domain": {"bounds": [0.0, 1.0, 0.0, 1.0]},
        "mesh": {"nx": 48, "ny": 48, "refine": 0},
        "medium": {"preset": "star3"},
        "decomposition": {"n_eigs": 3, "refinements": 3},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "medium":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(eq=False)
class ScenarioConfig:
    """A validated scenario; ``data`` is the normalized nested dictionary."""

    data: dict

    # -- construction -----------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict, source: str | None = None) -> "ScenarioConfig":
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            name = sorted(unknown)[0]
            raise ConfigError(name, "unknown section", _line_of(source, name))
        for sec, vals in raw.items():
            if not isinstance(vals, dict):
                raise ConfigError(sec, "must be a table", _line_of(source, sec))
            if sec != "medium":
                bad = set(vals) - set(DEFAULTS[sec])
                if bad:
                    key = sorted(bad)[0]
                    raise ConfigError(f"{sec}.{key}", "unknown key", _line_of(source, f"{sec}.{key}"))
        data = _merge(DEFAULTS, raw)
        cfg = cls(data)
        try:
            cfg.validate()
        except ConfigError as exc:
            if exc.line is None and source is not None:
                raise ConfigError(exc.field, str(exc).split(": ", 1)[-1],
                                  _line_of(source, exc.field)) from None
            raise
        return cfg

    @classmethod
    def preset(cls, name: str) -> "ScenarioConfig":
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_dict(PRESETS[name])

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            line = getattr(exc, "lineno", None)
            raise ConfigError("toml", str(exc), line) from None
        return cls.from_dict(raw, source=text)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.loads(Path(path).read_text())

    def dumps(self) -> str:
        return tomli_w.dumps(_strip_none(self.data))

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, ScenarioConfig) and _strip_none(self.data) == _strip_none(other.data)

    # -- accessors --------------------------------------------------------
    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def seed(self) -> int | None:
        return self.data["scenario"]["seed"]

    def with_overrides(self, **sections) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(_merge(_strip_none(self.data), sections))

    @property
    def domain(self) -> Rectangle:
        return as_rectangle(self.data["domain"]["bounds"])

    def weight(self) -> WeightSpec:
        w = self.data["weight"]
        return WeightSpec(w["form"], float(w["q"]), float(w["eps"]))

    def asi(self) -> ASIConfig:
        d = dict(self.data["inversion"])
        d.pop("initial")
        per = d.pop("max_iter_per_frequency")
        return ASIConfig(max_iter_per_frequency=per or None, weight=self.weight(), **d)

    def medium(self):
        return build_medium(self.data["medium"], self.domain)

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        d = self.data
        _check_number(d, "domain.bounds", list, length=4)
        b = d["domain"]["bounds"]
        if not (b[1] > b[0] and b[3] > b[2]):
            raise ConfigError("domain.bounds", "need xmin < xmax and ymin < ymax")
        for key in ("nx", "ny"):
            _check_int(d, f"mesh.{key}", lo=1)
        _check_int(d, "mesh.refine", lo=0)
        w = d["weight"]
        if w["form"] not in ("power", "max"):
            raise ConfigError("weight.form", "must be 'power' or 'max'")
        _check_pos(d, "weight.eps")
        if w["form"] == "power" and not _num(w["q"]) >= 1:
            raise ConfigError("weight.q", "must be >= 1")
        f = d["forward"]
        fr = f["frequencies"]
        if not isinstance(fr, list) or not fr or not all(_num(x) > 0 for x in fr):
            raise ConfigError("forward.frequencies", "need a nonempty list of positive values")
        if any(fr[i + 1] <= fr[i] for i in range(len(fr) - 1)):
            raise ConfigError("forward.frequencies", "must be strictly increasing")
        if not (f["sources"] == "perimeter" or (isinstance(f["sources"], list) and all(
                isinstance(s, list) and len(s) == 2 for s in f["sources"]))):
            raise ConfigError("forward.sources", "'perimeter' or a list of [x, y] centers")
        if not _num(f["source_width"]) >= 0:
            raise ConfigError("forward.source_width", "must be >= 0")
        for key in ("observe", "sound_hard"):
            tags = f[key]
            if not isinstance(tags, list) or set(tags) - set(SIDES):
                raise ConfigError(f"forward.{key}", f"tags must be among {list(SIDES)}")
        if not f["observe"]:
            raise ConfigError("forward.observe", "must not be empty")
        o = d["observations"]
        if not _num(o["noise"]) >= 0:
            raise ConfigError("observations.noise", "must be >= 0")
        _check_int(d, "observations.refine", lo=0)
        if o["noise"] > 0 and d["scenario"]["seed"] is None:
            raise ConfigError("scenario.seed", "a seed is required when observations.noise > 0")
        if d["scenario"]["seed"] is not None:
            _check_int(d, "scenario.seed", lo=0)
        inv = d["inversion"]
        for key in ("eps_psi", "eps_nu", "eps_tol", "gtol", "bfgs_initial_step"):
            _check_pos(d, f"inversion.{key}")
        for key in ("J1", "bfgs_max_iter", "max_iterations"):
            _check_int(d, f"inversion.{key}", lo=1)
        _check_int(d, "inversion.max_iter_per_frequency", lo=0)
        if not 0 <= _num(inv["rho0"]) <= 1:
            raise ConfigError("inversion.rho0", "must lie in [0, 1]")
        if not _num(inv["rho1"]) >= 1:
            raise ConfigError("inversion.rho1", "must be >= 1")
        if inv["eig_operand"] not in ("subtracted", "medium"):
            raise ConfigError("inversion.eig_operand", "must be 'subtracted' or 'medium'")
        if inv["warm_start"] not in ("projection", "filtered"):
            raise ConfigError("inversion.warm_start", "must be 'projection' or 'filtered'")
        if not _num(inv["initial"]) >= 0:
            raise ConfigError("inversion.initial", "must be >= 0 (0 uses the boundary mean)")
        dec = d["decomposition"]
        _check_int(d, "decomposition.n_eigs", lo=0)
        _check_int(d, "decomposition.refinements", lo=0)
        _check_int(d, "decomposition.extra_eigs", lo=0)
        if not _num(dec["delta"]) >= 0:
            raise ConfigError("decomposition.delta", "must be >= 0 (0 selects 2h)")
        if dec["region"] and (not isinstance(dec["region"], list) or len(dec["region"]) != 4):
            raise ConfigError("decomposition.region", "need [xmin, xmax, ymin, ymax]")
        try:
            self.medium()
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError("medium", str(exc)) from None

    def mesh_h(self) -> float:
        b = self.domain
        m = self.data["mesh"]
        scale = 2 ** m["refine"]
        return max(b.width / (m["nx"] * scale), b.height / (m["ny"] * scale))


def _line_of(source: str | None, dotted: str) -> int | None:
    """Line of ``section.key`` (or of ``[section]``) in the TOML text, if present."""
    if source is None:
        return None
    parts = dotted.split(".")
    section = parts[0].split("[")[0]
    key = parts[-1].split("[")[0] if len(parts) > 1 else None
    current, header = None, None
    for i, line in enumerate(source.splitlines(), start=1):
        s = line.strip()
        if s.startswith("["):
            current = s.strip("[]").split(".")[0].strip()
            if current == section and header is None:
                header = i
            continue
        if key is not None and current == section and s.split("=")[0].strip() == key:
            return i
    return header


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, list):
        return [_strip_none(v) for v in d]
    return d


def _num(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return float("nan")
    return float(v)


def _get(d, dotted):
    sec, key = dotted.split(".")
    return d[sec][key]


def _check_pos(d, dotted):
    if not _num(_get(d, dotted)) > 0:
        raise ConfigError(dotted, "must be a positive number")


def _check_int(d, dotted, lo=None):
    v = _get(d, dotted)
    if isinstance(v, bool) or not isinstance(v, int) or (lo is not None and v < lo):
        raise ConfigError(dotted, f"must be an integer >= {lo}")


def _check_number(d, dotted, kind, length=None):
    v = _get(d, dotted)
    if not isinstance(v, kind) or (length is not None and len(v) != length) or not all(
            np.isfinite(_num(x)) for x in v):
        raise ConfigError(dotted, f"need a list of {length} numbers")


# ---------------------------------------------------------------------------
# media

class RasterMedium:
    """Medium given by nodal samples on a regular grid (bilinear interpolation)."""

    def __init__(self, domain, values: np.ndarray):
        from scipy.interpolate import RegularGridInterpolator

        self.domain = as_rectangle(domain)
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or min(values.shape) < 2:
            raise ValueError("raster needs at least a 2 x 2 grid")
        if not np.all(values > 0):
            raise ValueError("raster values must be positive")
        ny, nx = values.shape
        xs = np.linspace(self.domain.xmin, self.domain.xmax, nx)
        ys = np.linspace(self.domain.ymin, self.domain.ymax, ny)
        self.values = values
        self._interp = RegularGridInterpolator((ys, xs), values)
        self.inclusions = ()

    @property
    def n_inclusions(self) -> int:
        return 0

    def evaluate(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        x = np.clip(p[:, 0], self.domain.xmin, self.domain.xmax)
        y = np.clip(p[:, 1], self.domain.ymin, self.domain.ymax)
        return self._interp(np.column_stack([y, x]))

    background_values = evaluate
    __call__ = evaluate


def _shape(spec: dict, where: str):
    kind = spec.get("type")
    try:
        if kind == "disk":
            return Disk(tuple(spec["center"]), float(spec["radius"]))
        if kind == "rect":
            return rectangle_polygon(*spec["bounds"])
        if kind == "polygon":
            return Polygon(np.asarray(spec["vertices"], dtype=float))
        if kind == "star":
            return star_polygon(spec["center"], spec["r_outer"], spec["r_inner"],
                                int(spec.get("points", 5)))
        if kind == "regular":
            return regular_polygon(spec["center"], spec["radius"], int(spec["sides"]),
                                   float(spec.get("rotation", 0.0)))
    except KeyError as exc:
        raise ConfigError(f"{where}.{exc.args[0]}", "missing") from None
    raise ConfigError(f"{where}.type", f"unknown shape type {kind!r}")


def build_medium(spec: dict, domain: Rectangle):
    from asinv.scenarios import MEDIA

    keys = set(spec)
    if "preset" in keys:
        if keys - {"preset"}:
            raise ConfigError("medium", "preset cannot be combined with explicit pieces")
        name = spec["preset"]
        if name not in MEDIA:
            raise ConfigError("medium.preset", f"unknown medium {name!r}; choose from {sorted(MEDIA)}")
        med = MEDIA[name]()
        if tuple(med.domain) != tuple(domain):
            raise ConfigError("domain.bounds", f"medium {name!r} lives on {tuple(med.domain)}")
        return med
    if "raster" in keys:
        path = Path(spec["raster"])
        if not path.exists():
            raise ConfigError("medium.raster", f"file {path} not found")
        return RasterMedium(domain, np.loadtxt(path, delimiter=",", ndmin=2))
    bg = spec.get("background")
    if not bg:
        raise ConfigError("medium.background", "need a preset, a raster or background pieces")
    pieces = []
    for i, p in enumerate(bg):
        where = f"medium.background[{i}]"
        if "value" not in p:
            raise ConfigError(f"{where}.value", "missing")
        region = _shape(dict(p, type=p.get("type", "rect")), where)
        pieces.append(BackgroundPiece(float(p["value"]), region))
    incs = []
    for i, p in enumerate(spec.get("inclusions", [])):
        where = f"medium.inclusions[{i}]"
        if "value" not in p:
            raise ConfigError(f"{where}.value", "missing")
        incs.append(Inclusion(float(p["value"]), _shape(p, where)))
    return Medium(domain, pieces, incs)
