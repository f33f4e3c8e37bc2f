"""Scenario configuration: a versioned, diff-able JSON document.

A scenario names the model (dimension, drift operator, noise covariance,
nonlinearity preset), the run scales (grids, step sizes, particle and
sample counts, seed, tolerance overrides), and the verification suites to
execute.  Parsing normalises the document, so parse -> serialise -> parse
is a fixed point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .drifts import drift_from_spec
from .errors import ConfigError
from .model import GalerkinModel, build_model

SCHEMA = "semilab-scenario/1"

MAX_DIM = 64
MAX_PARTICLES = 10_000_000
MAX_SAMPLES = 100_000_000

A_PRESETS = ("zero", "neg-identity", "stable-node", "rotation-damped")
Q_PRESETS = ("zero", "isotropic", "diag-decay")


def _block_diag_fill(d: int, block: np.ndarray, tail: float) -> np.ndarray:
    out = np.zeros((d, d))
    k = 0
    while k + 2 <= d:
        out[k:k + 2, k:k + 2] = block
        k += 2
    if k < d:
        out[k, k] = tail
    return out


def _a_preset(name: str, d: int, scale: float) -> np.ndarray:
    if name == "zero":
        return np.zeros((d, d))
    if name == "neg-identity":
        return -scale * np.eye(d)
    if name == "stable-node":
        block = scale * np.array([[-1.0, 0.5], [0.0, -0.8]])
        return _block_diag_fill(d, block, -0.9 * scale)
    if name == "rotation-damped":
        block = scale * np.array([[-0.5, 1.0], [-1.0, -0.5]])
        return _block_diag_fill(d, block, -0.5 * scale)
    raise ConfigError(f"unknown preset {name!r}; known: {A_PRESETS}", field="model.A")


def _q_preset(name: str, d: int, scale: float) -> np.ndarray:
    if name == "zero":
        return np.zeros((d, d))
    if name == "isotropic":
        return scale * np.eye(d)
    if name == "diag-decay":
        return scale * np.diag(1.0 / np.arange(1, d + 1))
    raise ConfigError(f"unknown preset {name!r}; known: {Q_PRESETS}", field="model.Q")


def _normalise_operator(raw, d: int, presets, builder, fieldname: str) -> dict | list:
    if isinstance(raw, str):
        raw = {"preset": raw, "scale": 1.0}
    if isinstance(raw, dict):
        name = raw.get("preset")
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; known: {presets}",
                              field=fieldname)
        scale = float(raw.get("scale", 1.0))
        if not math.isfinite(scale):
            raise ConfigError("scale must be finite", field=fieldname)
        builder(name, d, scale)  # validate now
        return {"preset": name, "scale": scale}
    entries = np.asarray(raw, dtype=float)
    if entries.shape != (d, d):
        raise ConfigError(f"matrix must be {d}x{d}, got {entries.shape}",
                          field=fieldname)
    if not np.all(np.isfinite(entries)):
        raise ConfigError("matrix has non-finite entries", field=fieldname)
    return entries.tolist()


def _materialise(spec, d: int, builder) -> np.ndarray:
    if isinstance(spec, dict):
        return builder(spec["preset"], d, spec["scale"])
    return np.asarray(spec, dtype=float)


@dataclass(frozen=True)
class RunSpec:
    seed: int = 20240601
    t_stop: float = 1.0
    t_num: int = 65
    dt: float = 1.0 / 64
    particles: int = 100_000
    samples: int = 100_000
    samples_per_particle: int = 64
    scale: float = 1.0
    threads: int | None = None
    tolerances: dict = field(default_factory=dict)

    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_stop, self.t_num)

    def scaled(self, count: int) -> int:
        """Apply the quick-run scale factor to a nominal instance count."""
        return max(2, int(round(count * self.scale)))


@dataclass(frozen=True)
class ScenarioConfig:
    model_spec: dict
    run: RunSpec
    suites: tuple
    evolve: dict = field(default_factory=dict)
    resolvent: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigError("document must be a JSON object")
        schema = doc.get("schema")
        if schema != SCHEMA:
            raise ConfigError(f"expected schema {SCHEMA!r}, got {schema!r}",
                              field="schema")
        model = dict(doc.get("model") or {})
        try:
            d = int(model.get("dim", 2))
        except (TypeError, ValueError):
            raise ConfigError("dim must be an integer", field="model.dim")
        if not 1 <= d <= MAX_DIM:
            raise ConfigError(f"dim must lie in [1, {MAX_DIM}]", field="model.dim")
        model["dim"] = d
        model["A"] = _normalise_operator(model.get("A", "stable-node"), d,
                                         A_PRESETS, _a_preset, "model.A")
        model["Q"] = _normalise_operator(model.get("Q", {"preset": "isotropic", "scale": 0.2}),
                                         d, Q_PRESETS, _q_preset, "model.Q")
        drift = model.get("drift", {"preset": "zero"})
        if isinstance(drift, str):
            drift = {"preset": drift}
        try:
            drift_from_spec(d, drift)
        except Exception as exc:
            raise ConfigError(str(exc), field="model.drift")
        model["drift"] = drift
        model.setdefault("growth_const", 1.0)
        if model["growth_const"] < 1.0:
            raise ConfigError("growth_const must be >= 1", field="model.growth_const")
        model.setdefault("growth_rate", None)

        run_doc = dict(doc.get("run") or {})
        run = _parse_run(run_doc)

        suites = doc.get("suites", ["all"])
        if isinstance(suites, str):
            suites = [suites]
        from .suites import SUITE_NAMES
        expanded = []
        for name in suites:
            if name == "all":
                expanded.extend(SUITE_NAMES)
            elif name in SUITE_NAMES:
                expanded.append(name)
            else:
                raise ConfigError(
                    f"unknown suite {name!r}; known: {list(SUITE_NAMES)}",
                    field="suites")
        seen = []
        for name in expanded:
            if name not in seen:
                seen.append(name)

        evolve = dict(doc.get("evolve") or {})
        if "x0" in evolve:
            x0 = np.asarray(evolve["x0"], dtype=float)
            if x0.shape != (d,) or not np.all(np.isfinite(x0)):
                raise ConfigError(f"x0 must be a finite vector of length {d}",
                                  field="evolve.x0")
            evolve["x0"] = x0.tolist()
        resolvent = dict(doc.get("resolvent") or {})
        if "lam" in resolvent:
            lams = [float(v) for v in np.atleast_1d(resolvent["lam"])]
            if not all(math.isfinite(v) and v > 0 for v in lams):
                raise ConfigError("lambda values must be positive",
                                  field="resolvent.lam")
            resolvent["lam"] = lams
        return cls(model, run, tuple(seen), evolve, resolvent)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column "
                              f"{exc.colno}: {exc.msg}")
        return cls.from_dict(doc)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    @classmethod
    def default(cls, suites=("all",)) -> "ScenarioConfig":
        return cls.from_dict({"schema": SCHEMA, "suites": list(suites)})

    # -- serialisation ------------------------------------------------

    def to_dict(self) -> dict:
        run = self.run
        return {
            "schema": SCHEMA,
            "model": dict(self.model_spec),
            "run": {
                "seed": run.seed,
                "t_grid": {"stop": run.t_stop, "num": run.t_num},
                "dt": run.dt,
                "particles": run.particles,
                "samples": run.samples,
                "samples_per_particle": run.samples_per_particle,
                "scale": run.scale,
                "threads": run.threads,
                "tolerances": dict(sorted(run.tolerances.items())),
            },
            "suites": list(self.suites),
            "evolve": dict(self.evolve),
            "resolvent": dict(self.resolvent),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def with_overrides(self, seed: int | None = None,
                       threads: int | None = None,
                       suites=None) -> "ScenarioConfig":
        run = self.run
        new_run = RunSpec(seed=seed if seed is not None else run.seed,
                          t_stop=run.t_stop, t_num=run.t_num, dt=run.dt,
                          particles=run.particles, samples=run.samples,
                          samples_per_particle=run.samples_per_particle,
                          scale=run.scale,
                          threads=threads if threads is not None else run.threads,
                          tolerances=run.tolerances)
        return ScenarioConfig(self.model_spec, new_run,
                              tuple(suites) if suites else self.suites,
                              self.evolve, self.resolvent)

    # -- materialisation ----------------------------------------------

    def build_model(self) -> GalerkinModel:
        d = self.model_spec["dim"]
        A = _materialise(self.model_spec["A"], d, _a_preset)
        Q = _materialise(self.model_spec["Q"], d, _q_preset)
        drift = drift_from_spec(d, self.model_spec["drift"])
        return build_model(A, Q, drift,
                           growth_const=self.model_spec.get("growth_const", 1.0),
                           growth_rate=self.model_spec.get("growth_rate"))


def _parse_run(doc: dict) -> RunSpec:
    defaults = RunSpec()
    seed = doc.get("seed", defaults.seed)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer", field="run.seed")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in 64 bits", field="run.seed")
    grid = doc.get("t_grid", {"stop": defaults.t_stop, "num": defaults.t_num})
    if isinstance(grid, dict):
        stop = float(grid.get("stop", defaults.t_stop))
        num = int(grid.get("num", defaults.t_num))
    else:
        arr = np.asarray(grid, dtype=float)
        if arr.size < 2 or arr[0] != 0.0 or np.any(np.diff(arr) <= 0):
            raise ConfigError("explicit grid must start at 0 and increase",
                              field="run.t_grid")
        stop, num = float(arr[-1]), int(arr.size)
        if not np.allclose(arr, np.linspace(0, stop, num)):
            raise ConfigError("explicit grids must be uniform; use stop/num",
                              field="run.t_grid")
    if stop <= 0 or num < 2:
        raise ConfigError("grid needs stop > 0 and num >= 2", field="run.t_grid")
    dt = float(doc.get("dt", defaults.dt))
    if not (math.isfinite(dt) and dt > 0):
        raise ConfigError("dt must be positive", field="run.dt")
    particles = int(doc.get("particles", defaults.particles))
    if not 1 <= particles <= MAX_PARTICLES:
        raise ConfigError(f"particles must lie in [1, {MAX_PARTICLES}]",
                          field="run.particles")
    samples = int(doc.get("samples", defaults.samples))
    if not 2 <= samples <= MAX_SAMPLES:
        raise ConfigError(f"samples must lie in [2, {MAX_SAMPLES}]",
                          field="run.samples")
    spp = int(doc.get("samples_per_particle", defaults.samples_per_particle))
    if spp < 1:
        raise ConfigError("samples_per_particle must be >= 1",
                          field="run.samples_per_particle")
    scale = float(doc.get("scale", 1.0))
    if not (math.isfinite(scale) and 0 < scale <= 1.0):
        raise ConfigError("scale must lie in (0, 1]", field="run.scale")
    threads = doc.get("threads", None)
    if threads is not None:
        threads = int(threads)
        if threads < 1:
            raise ConfigError("threads must be >= 1", field="run.threads")
    tolerances = doc.get("tolerances", {})
    if not isinstance(tolerances, dict):
        raise ConfigError("tolerances must map check names to numbers",
                          field="run.tolerances")
    tolerances = {str(k): float(v) for k, v in tolerances.items()}
    return RunSpec(seed=seed, t_stop=stop, t_num=num, dt=dt,
                   particles=particles, samples=samples,
                   samples_per_particle=spp, scale=scale, threads=threads,
                   tolerances=tolerances)
