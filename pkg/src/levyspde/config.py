"""Experiment configuration: schema, validation and builders.

A config is a YAML (or JSON) mapping with these blocks::

    version: 1
    grid:   {d: 1, L: 6.283185307179586, M: 32}
    time:   {T: 1.0, steps: 64, theta: 1.0}
    noise:
      channels:
        - {type: atoms, atoms: [[0.5, 2.0], [-0.5, 2.0]], beta: 0.3, drift: 0.0}
        - {type: density, rate: 3.0, distribution: normal, params: {scale: 0.2}}
        - {type: stable, alpha: 1.5, scale: 1.0, lower: 0.1, upper: .inf}
      K_noise: 3          # optional, keep only the first K_noise channels
      N0: 0               # heavy channels (0-based 0 .. N0-1) for localized runs
      truncation: .inf    # jump level n for localized runs
    coefficients:
      a: [[1.0]]
      bbar: [0.0]
      b: [0.0]
      c: 0.0
      sigma: [[0.0, 0.0, 0.0]]
      mu: [0.0, 0.0, 0.0]
    data:
      u0: {type: modes, modes: [{k: [1], amplitude: 1.0, kind: cos}]}
      f: null
      g: [null, null, {type: constant, value: 1.0}]
    run: {replicas: 4, seed: 0, out: out, mode: linear, jobs: 2, dump_fields: false}
    nonlinear: {alpha: 1.5, beta: 0.5, channel: 0, eps: 0.5}
    checks: {delta: 0.5, K: 5.0}
    converge: {ladder: [16, 32, 64], reference_steps: 1024}

Coefficient entries are numbers or mappings: ``{field: <field spec>,
scale: s, shift: c}`` for a spatial profile, or ``{noise_adapted: name,
params: {...}}`` for a registered noise-adapted functional.  Field specs
are ``{type: zero}``, ``{type: constant, value}``, ``{type: modes, modes:
[...]}``, ``{type: random_smooth, seed, n_modes, decay}`` or ``{type: file,
path, format: csv | raw}``.

Raw drifts are absorbed: large jumps are compensated and the deterministic
drift moves into the coefficients and forcing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .coefficients import (NOISE_ADAPTED, Affine, CoefficientSet, Constant, NoiseAdapted, Spatial,
                           absorb_drift)
from .exceptions import ConfigError
from .field import Field, TorusGrid, read_field_csv, read_field_raw
from .levy_noise import (JUMP_DISTRIBUTIONS, DensityCompoundPoisson, FiniteAtoms, LevyTriplet, NoiseFamily,
                         TimeGrid, TruncatedStableLike, absorb_large_jump_drift)

CONFIG_VERSION = 1
MODES = ("linear", "picard", "localized")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "grid": {"d": 1, "L": 2 * math.pi, "M": 32},
    "time": {"T": 1.0, "steps": 64, "theta": 1.0},
    "noise": {"channels": [], "K_noise": None, "N0": 0, "truncation": math.inf},
    "coefficients": {},
    "data": {"u0": None, "f": None, "g": None},
    "run": {"replicas": 1, "seed": 0, "out": "out", "mode": "linear", "jobs": None, "dump_fields": False},
    "nonlinear": {"alpha": 1.5, "beta": 0.5, "channel": 0, "eps": 0.5},
    "checks": {"delta": 0.5, "K": 5.0},
    "converge": {"ladder": [16, 32, 64], "reference_steps": None},
}


def _fail(where, msg):
    raise ConfigError(f"{where}: {msg}")


def _number(x, where, positive=False, integer=False, allow_inf=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        _fail(where, f"expected a number, got {x!r}")
    if integer and (not float(x).is_integer() or math.isinf(x)):
        _fail(where, f"expected an integer, got {x!r}")
    if math.isnan(x) or (math.isinf(x) and not allow_inf):
        _fail(where, f"expected a finite number, got {x!r}")
    if positive and not x > 0:
        _fail(where, f"must be positive, got {x!r}")
    return int(x) if integer else float(x)


def _merge(defaults, given, where):
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        _fail(where, "expected a mapping")
    unknown = set(given) - set(defaults)
    if unknown and defaults:
        _fail(where, f"unknown keys {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _check_field_spec(spec, where):
    if spec is None:
        return None
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return {"type": "constant", "value": _number(spec, where)}
    if not isinstance(spec, dict) or "type" not in spec:
        _fail(where, "field spec needs a 'type'")
    kind = spec["type"]
    out = dict(spec)
    if kind == "zero":
        pass
    elif kind == "constant":
        out["value"] = _number(spec.get("value"), f"{where}.value")
    elif kind == "modes":
        modes = spec.get("modes")
        if not isinstance(modes, list) or not modes:
            _fail(f"{where}.modes", "expected a non-empty list")
        norm = []
        for i, m in enumerate(modes):
            w = f"{where}.modes[{i}]"
            if not isinstance(m, dict) or "k" not in m:
                _fail(w, "mode needs wave numbers 'k'")
            k = m["k"] if isinstance(m["k"], list) else [m["k"]]
            kind_m = m.get("kind", "cos")
            if kind_m not in ("cos", "sin"):
                _fail(f"{w}.kind", "must be cos or sin")
            norm.append({"k": [_number(x, f"{w}.k", integer=True) for x in k],
                         "amplitude": _number(m.get("amplitude", 1.0), f"{w}.amplitude"), "kind": kind_m})
        out["modes"] = norm
    elif kind == "random_smooth":
        out["seed"] = _number(spec.get("seed", 0), f"{where}.seed", integer=True)
        out["n_modes"] = _number(spec.get("n_modes", 4), f"{where}.n_modes", integer=True, positive=True)
        out["decay"] = _number(spec.get("decay", 1.0), f"{where}.decay")
        out["scale"] = _number(spec.get("scale", 1.0), f"{where}.scale")
    elif kind == "file":
        if not isinstance(spec.get("path"), str):
            _fail(f"{where}.path", "expected a file path")
        out["format"] = spec.get("format", "csv")
        if out["format"] not in ("csv", "raw"):
            _fail(f"{where}.format", "must be csv or raw")
    else:
        _fail(f"{where}.type", f"unknown field type {kind!r}")
    return out


def _check_channel(ch, where):
    if not isinstance(ch, dict) or "type" not in ch:
        _fail(where, "channel needs a 'type'")
    kind = ch["type"]
    out = {"type": kind, "beta": _number(ch.get("beta", 0.0), f"{where}.beta"),
           "drift": _number(ch.get("drift", 0.0), f"{where}.drift")}
    if out["beta"] < 0:
        _fail(f"{where}.beta", "must be >= 0")
    if kind == "atoms":
        atoms = ch.get("atoms", [])
        if not isinstance(atoms, list):
            _fail(f"{where}.atoms", "expected a list of [z, rate] pairs")
        pairs = []
        for i, a in enumerate(atoms):
            if not isinstance(a, (list, tuple)) or len(a) != 2:
                _fail(f"{where}.atoms[{i}]", "expected [z, rate]")
            z = _number(a[0], f"{where}.atoms[{i}][0]")
            rate = _number(a[1], f"{where}.atoms[{i}][1]", positive=True)
            if z == 0:
                _fail(f"{where}.atoms[{i}][0]", "jump size must be nonzero")
            pairs.append([z, rate])
        out["atoms"] = pairs
    elif kind == "density":
        out["rate"] = _number(ch.get("rate"), f"{where}.rate", positive=True)
        dist = ch.get("distribution", "normal")
        if dist not in JUMP_DISTRIBUTIONS:
            _fail(f"{where}.distribution", f"unknown distribution {dist!r}")
        out["distribution"] = dist
        params = ch.get("params", {}) or {}
        if not isinstance(params, dict):
            _fail(f"{where}.params", "expected a mapping")
        out["params"] = {k: _number(v, f"{where}.params.{k}") for k, v in params.items()}
    elif kind == "stable":
        out["alpha"] = _number(ch.get("alpha"), f"{where}.alpha", positive=True)
        out["scale"] = _number(ch.get("scale", 1.0), f"{where}.scale", positive=True)
        out["lower"] = _number(ch.get("lower", 0.1), f"{where}.lower", positive=True)
        out["upper"] = _number(ch.get("upper", math.inf), f"{where}.upper", positive=True, allow_inf=True)
    else:
        _fail(f"{where}.type", f"unknown channel type {kind!r}")
    return out


def _check_coefficient(x, where):
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return _number(x, where)
    if isinstance(x, dict) and "field" in x:
        return {"field": _check_field_spec(x["field"], f"{where}.field"),
                "scale": _number(x.get("scale", 1.0), f"{where}.scale"),
                "shift": _number(x.get("shift", 0.0), f"{where}.shift")}
    if isinstance(x, dict) and "noise_adapted" in x:
        name = x["noise_adapted"]
        if name not in NOISE_ADAPTED:
            _fail(f"{where}.noise_adapted", f"unknown built-in {name!r}")
        params = x.get("params", {}) or {}
        return {"noise_adapted": name, "params": {k: _number(v, f"{where}.params.{k}") for k, v in params.items()}}
    _fail(where, f"expected a number or a coefficient mapping, got {x!r}")


def _check_vector(x, n, where, default=0.0):
    if x is None:
        return [default] * n
    if not isinstance(x, list) or len(x) != n:
        _fail(where, f"expected a list of length {n}")
    return [_check_coefficient(v, f"{where}[{i}]") for i, v in enumerate(x)]


def _check_matrix(x, rows, cols, where, default):
    if x is None:
        return [[default(i, j) for j in range(cols)] for i in range(rows)]
    if not isinstance(x, list) or len(x) != rows:
        _fail(where, f"expected {rows} rows")
    out = []
    for i, row in enumerate(x):
        if not isinstance(row, list) or len(row) != cols:
            _fail(f"{where}[{i}]", f"expected {cols} columns")
        out.append([_check_coefficient(v, f"{where}[{i}][{j}]") for j, v in enumerate(row)])
    return out


def resolve(raw):
    """Validate a raw config mapping and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a mapping at top level")
    if "config" in raw and "config_sha256" in raw:
        raw = raw["config"]  # a run manifest
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        _fail("config", f"unknown blocks {sorted(unknown)}")
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        _fail("version", f"unsupported config version {version!r}")
    cfg = {"version": CONFIG_VERSION}

    grid = _merge(DEFAULTS["grid"], raw.get("grid"), "grid")
    cfg["grid"] = {"d": _number(grid["d"], "grid.d", integer=True), "L": _number(grid["L"], "grid.L", positive=True),
                   "M": _number(grid["M"], "grid.M", integer=True, positive=True)}
    try:
        TorusGrid(**cfg["grid"])
    except ValueError as exc:
        _fail("grid", str(exc))

    tm = _merge(DEFAULTS["time"], raw.get("time"), "time")
    cfg["time"] = {"T": _number(tm["T"], "time.T", positive=True),
                   "steps": _number(tm["steps"], "time.steps", integer=True, positive=True),
                   "theta": _number(tm["theta"], "time.theta")}
    if not 0 <= cfg["time"]["theta"] <= 1:
        _fail("time.theta", "must lie in [0, 1]")

    nz = _merge(DEFAULTS["noise"], raw.get("noise"), "noise")
    if not isinstance(nz["channels"], list):
        _fail("noise.channels", "expected a list")
    channels = [_check_channel(c, f"noise.channels[{i}]") for i, c in enumerate(nz["channels"])]
    K_noise = nz["K_noise"]
    if K_noise is not None:
        K_noise = _number(K_noise, "noise.K_noise", integer=True)
        if not 0 <= K_noise <= len(channels):
            _fail("noise.K_noise", f"must lie in [0, {len(channels)}]")
        channels = channels[:K_noise]
    K = len(channels)
    N0 = _number(nz["N0"], "noise.N0", integer=True)
    if not 0 <= N0 <= K:
        _fail("noise.N0", f"must lie in [0, {K}]")
    cfg["noise"] = {"channels": channels, "K_noise": K, "N0": N0,
                    "truncation": _number(nz["truncation"], "noise.truncation", positive=True, allow_inf=True)}

    d = cfg["grid"]["d"]
    co = raw.get("coefficients") or {}
    if not isinstance(co, dict):
        _fail("coefficients", "expected a mapping")
    unknown = set(co) - {"a", "bbar", "b", "c", "sigma", "mu"}
    if unknown:
        _fail("coefficients", f"unknown keys {sorted(unknown)}")
    cfg["coefficients"] = {
        "a": _check_matrix(co.get("a"), d, d, "coefficients.a", lambda i, j: 1.0 if i == j else 0.0),
        "bbar": _check_vector(co.get("bbar"), d, "coefficients.bbar"),
        "b": _check_vector(co.get("b"), d, "coefficients.b"),
        "c": _check_coefficient(co.get("c", 0.0), "coefficients.c"),
        "sigma": _check_matrix(co.get("sigma"), d, K, "coefficients.sigma", lambda i, j: 0.0),
        "mu": _check_vector(co.get("mu"), K, "coefficients.mu"),
    }

    da = _merge(DEFAULTS["data"], raw.get("data"), "data")
    g = da["g"]
    if g is not None:
        if not isinstance(g, list) or len(g) != K:
            _fail("data.g", f"expected one entry per channel ({K})")
        g = [_check_field_spec(x, f"data.g[{i}]") for i, x in enumerate(g)]
    cfg["data"] = {"u0": _check_field_spec(da["u0"], "data.u0"), "f": _check_field_spec(da["f"], "data.f"), "g": g}

    rn = _merge(DEFAULTS["run"], raw.get("run"), "run")
    if rn["mode"] not in MODES:
        _fail("run.mode", f"must be one of {MODES}")
    cfg["run"] = {"replicas": _number(rn["replicas"], "run.replicas", integer=True, positive=True),
                  "seed": _number(rn["seed"], "run.seed", integer=True),
                  "out": str(rn["out"]), "mode": rn["mode"],
                  "jobs": None if rn["jobs"] is None else _number(rn["jobs"], "run.jobs", integer=True, positive=True),
                  "dump_fields": bool(rn["dump_fields"])}
    if cfg["run"]["seed"] < 0 or cfg["run"]["seed"] >= 2 ** 64:
        _fail("run.seed", "must be an unsigned 64-bit integer")

    nl = _merge(DEFAULTS["nonlinear"], raw.get("nonlinear"), "nonlinear")
    cfg["nonlinear"] = {"alpha": _number(nl["alpha"], "nonlinear.alpha", positive=True),
                        "beta": _number(nl["beta"], "nonlinear.beta", positive=True),
                        "channel": _number(nl["channel"], "nonlinear.channel", integer=True),
                        "eps": _number(nl["eps"], "nonlinear.eps", positive=True)}
    if cfg["run"]["mode"] == "picard" and not 0 <= cfg["nonlinear"]["channel"] < max(K, 1):
        _fail("nonlinear.channel", "no such noise channel")

    ch = _merge(DEFAULTS["checks"], raw.get("checks"), "checks")
    cfg["checks"] = {"delta": _number(ch["delta"], "checks.delta", positive=True),
                     "K": _number(ch["K"], "checks.K", positive=True)}

    cv = _merge(DEFAULTS["converge"], raw.get("converge"), "converge")
    if not isinstance(cv["ladder"], list):
        _fail("converge.ladder", "expected a list of step counts")
    ref = cv["reference_steps"]
    cfg["converge"] = {"ladder": [_number(x, "converge.ladder", integer=True, positive=True) for x in cv["ladder"]],
                       "reference_steps": None if ref is None else _number(ref, "converge.reference_steps",
                                                                           integer=True, positive=True)}
    return cfg


# ---------------------------------------------------------------------------
# text form


def _yaml_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return obj
    if isinstance(obj, dict):
        return {k: _yaml_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_yaml_safe(v) for v in obj]
    return obj


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _from_json_safe(obj):
    if obj in ("inf", "-inf"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _from_json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_json_safe(v) for v in obj]
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    resolved: dict
    base_dir: Path = Path(".")

    @classmethod
    def from_text(cls, text, base_dir="."):
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: not valid YAML ({exc})") from None
        return cls(resolve(_from_json_safe(raw)), Path(base_dir))

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        return cls.from_text(path.read_text(), path.parent)

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        return cls(resolve(copy.deepcopy(raw)), Path(base_dir))

    def dump(self):
        return yaml.safe_dump(_yaml_safe(self.resolved), sort_keys=True)

    def json_ready(self):
        return _json_safe(self.resolved)

    def canonical_json(self):
        return json.dumps(self.json_ready(), sort_keys=True, separators=(",", ":"))

    @property
    def sha256(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_overrides(self, **run):
        raw = copy.deepcopy(self.resolved)
        raw["run"].update({k: v for k, v in run.items() if v is not None})
        return ExperimentConfig(resolve(raw), self.base_dir)

    def with_time(self, T=None, steps=None):
        raw = copy.deepcopy(self.resolved)
        if T is not None:
            raw["time"]["T"] = T
        if steps is not None:
            raw["time"]["steps"] = steps
        return ExperimentConfig(resolve(raw), self.base_dir)

    # builders

    def grid(self):
        return TorusGrid(**self.resolved["grid"])

    def time_grid(self):
        t = self.resolved["time"]
        return TimeGrid(t["T"], t["steps"])

    def raw_triplets(self):
        return [_build_triplet(c) for c in self.resolved["noise"]["channels"]]

    def noise(self):
        """Martingale drivers and the deterministic drift of every channel."""
        absorbed = [absorb_large_jump_drift(t) for t in self.raw_triplets()]
        return NoiseFamily([a.triplet for a in absorbed]), [a.drift for a in absorbed]

    def field(self, spec, grid):
        return build_field(spec, grid, self.base_dir)

    def coefficients(self, grid):
        """Coefficient set with the channel drifts already absorbed."""
        co = self.resolved["coefficients"]

        def build(x):
            if isinstance(x, dict) and "field" in x:
                return Affine(Spatial(self.field(x["field"], grid)), x["scale"], x["shift"])
            if isinstance(x, dict):
                return NoiseAdapted(x["noise_adapted"], dict(x["params"]))
            return Constant(x)

        base = CoefficientSet(
            a=[[build(x) for x in row] for row in co["a"]],
            bbar=[build(x) for x in co["bbar"]],
            b=[build(x) for x in co["b"]],
            c=build(co["c"]),
            sigma=[[build(x) for x in row] for row in co["sigma"]],
            mu=[build(x) for x in co["mu"]],
        )
        _, drifts = self.noise()
        return absorb_drift(base, drifts)

    def data(self, grid):
        """``(u0, f, g)`` with the drift forcing ``sum_k drift_k g^k`` folded into ``f``."""
        da = self.resolved["data"]
        u0 = self.field(da["u0"], grid)
        f = self.field(da["f"], grid)
        K = len(self.resolved["noise"]["channels"])
        g = None if da["g"] is None else [self.field(x, grid) for x in da["g"]]
        _, drifts = self.noise()
        if g is not None and any(drifts):
            extra = sum((dk * gk.values for dk, gk in zip(drifts, g) if gk is not None and dk),
                        np.zeros(grid.shape))
            f = Field(grid, extra) if f is None else f + extra
        if g is not None and len(g) != K:
            raise ConfigError("data.g: one entry per channel required")
        return u0, f, g


def _build_triplet(c):
    if c["type"] == "atoms":
        measure = FiniteAtoms(tuple((z, r) for z, r in c["atoms"]))
    elif c["type"] == "density":
        measure = DensityCompoundPoisson(c["rate"], c["distribution"], dict(c["params"]))
    else:
        measure = TruncatedStableLike(c["alpha"], c["scale"], c["lower"], c["upper"])
    return LevyTriplet(measure, c["beta"], c["drift"])


def build_field(spec, grid, base_dir="."):
    """Field from a validated field spec (``None`` stays ``None``)."""
    if spec is None:
        return None
    kind = spec["type"]
    if kind == "zero":
        return Field.zeros(grid)
    if kind == "constant":
        return Field.constant(grid, spec["value"])
    if kind == "modes":
        total = Field.zeros(grid)
        for m in spec["modes"]:
            k = list(m["k"]) + [0] * (grid.d - len(m["k"]))
            total = total + Field.mode(grid, k[:grid.d], m["amplitude"], m["kind"])
        return total
    if kind == "random_smooth":
        rng = np.random.default_rng(spec["seed"])
        return Field.random_smooth(grid, rng, spec["n_modes"], spec["decay"]) * spec["scale"]
    path = Path(base_dir) / spec["path"]
    if spec.get("format", "csv") == "raw":
        with open(path, "rb") as fh:
            f = read_field_raw(fh)
    else:
        with open(path) as fh:
            f = read_field_csv(fh)
    if f.grid != grid:
        raise ConfigError(f"{spec['path']}: field grid {f.grid} does not match config grid {grid}")
    return f


def load_config(path_or_text):
    p = Path(path_or_text) if not isinstance(path_or_text, Path) else path_or_text
    try:
        is_file = p.is_file()
    except OSError:
        is_file = False
    return ExperimentConfig.from_file(p) if is_file else ExperimentConfig.from_text(str(path_or_text))
