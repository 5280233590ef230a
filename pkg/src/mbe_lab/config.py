"""Plain-text experiment configuration.

One ``section.key = value`` per line; ``#`` starts a comment. Lengths accept
multiples of pi (``2pi``, ``0.5*pi``). Lists are comma separated. Initial
trigonometric modes are ``;``-separated ``index : amplitude : phase`` triples,
where ``index`` is one integer per axis, and each triple contributes
``amplitude * sin(2 pi index . x / L + phase)``.

Example::

    grid.dim = 1
    grid.n = 64
    grid.length = 2pi
    model.alpha1 = 1
    model.alpha3 = 1
    solver.dt = 1e-3
    solver.t_end = 1
    init.kind = trig
    init.modes = 1 : 1.0 : 0
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .errors import ConfigError, ConfigTypeError, InvalidGrid, MissingRequired, OddGridSize, UnknownKey
from .nonlinearity import ModelParams
from .solver import Scheme, SolverConfig
from .spectral import Field, Grid, make_grid, random_field, read_snapshot
from .stochastic import PROFILES, NoiseSpec

_PI = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)?\s*\*?\s*pi\s*$")


def _float(text: str) -> float:
    m = _PI.match(text)
    if m:
        return float(m.group(1) or 1.0) * math.pi
    value = float(text)
    if not math.isfinite(value) and text.strip().lower() not in ("inf", "+inf"):
        raise ValueError(f"not a finite number: {text}")
    return value


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text}")
    return int(value)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text}")


def _str(text: str) -> str:
    return text.strip()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(_float(t) for t in text.split(",") if t.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {t!r}")
        return t
    return parse


def _modes(text: str) -> tuple[tuple[tuple[int, ...], float, float], ...]:
    out = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        parts = [p.strip() for p in chunk.split(":")]
        if len(parts) not in (2, 3):
            raise ValueError(f"mode {chunk.strip()!r} is not 'index : amplitude [: phase]'")
        index = tuple(_int(i) for i in parts[0].split())
        phase = _float(parts[2]) if len(parts) == 3 else 0.0
        out.append((index, _float(parts[1]), phase))
    if not out:
        raise ValueError("no modes given")
    return tuple(out)


# key -> (parser, default); a default of REQUIRED marks a mandatory key of its section
REQUIRED = object()

SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "grid.dim": (_int, REQUIRED),
    "grid.n": (_int, REQUIRED),
    "grid.length": (_float, REQUIRED),
    "model.alpha1": (_float, 0.0),
    "model.alpha2": (_float, 0.0),
    "model.alpha3": (_float, 0.0),
    "model.alpha4": (_float, 0.0),
    "solver.dt": (_float, REQUIRED),
    "solver.t_end": (_float, REQUIRED),
    "solver.scheme": (_choice(*(s.value for s in Scheme)), "ETDRK2"),
    "solver.blowup_threshold": (_float, 1e8),
    "solver.dealias": (_bool, True),
    "solver.record_every": (_int, 1),
    "solver.snapshot_times": (_floats, ()),
    "noise.profile": (_choice(*PROFILES), REQUIRED),
    "noise.param": (_float, REQUIRED),
    "noise.amplitude": (_float, 1.0),
    "noise.seed": (_int, 0),
    "noise.mean_mode": (_bool, False),
    "init.kind": (_choice("zero", "trig", "random", "snapshot"), "zero"),
    "init.modes": (_modes, None),
    "init.k_max": (_float, None),
    "init.slope": (_float, 0.0),
    "init.rms": (_float, 1.0),
    "init.seed": (_int, 0),
    "init.path": (_str, None),
    "probes": (_names, None),
    "ensemble.n_samples": (_int, 64),
    "picard.horizon": (_float, 0.0625),
    "picard.n_time_nodes": (_int, 8),
    "picard.tol": (_float, 1e-10),
    "picard.max_iter": (_int, 200),
    "picard.halvings": (_int, 1),
    "decay.tolerance": (_float, 0.02),
    "decay.t_min": (_float, 1e-2),
    "decay.t_max": (_float, 1.0),
    "decay.samples": (_int, 9),
    "coarsening.t_min": (_float, None),
    "coarsening.t_max": (_float, 1e-2),
    "output.dir": (_str, "runs"),
    "output.run_id": (_str, "run"),
}

SECTIONS_WITH_REQUIRED = ("grid", "solver", "noise")


@dataclass(frozen=True)
class InitialCondition:
    kind: str = "zero"
    modes: tuple = ()
    k_max: float | None = None
    slope: float = 0.0
    rms: float = 1.0
    seed: int = 0
    path: str | None = None

    def build(self, grid: Grid) -> Field:
        if self.kind == "zero":
            return Field.zeros(grid)
        if self.kind == "snapshot":
            u = read_snapshot(self.path)
            if u.grid != grid:
                raise ConfigError(f"snapshot grid {u.grid} differs from configured {grid}", key="init.path")
            return u
        if self.kind == "random":
            return random_field(grid, np.random.default_rng(self.seed), self.k_max, self.slope, self.rms)
        values = np.zeros(grid.shape)
        for index, amp, phase in self.modes:
            if len(index) != grid.dim:
                raise ConfigError(f"mode index {index} needs {grid.dim} components", key="init.modes")
            arg = sum(grid.k0 * m * x for m, x in zip(index, grid.coords))
            values = values + amp * np.sin(arg + phase)
        return Field(grid, real=values)


@dataclass
class ExperimentConfig:
    grid: Grid | None
    model: ModelParams
    solver: SolverConfig | None
    noise: NoiseSpec | None
    init: InitialCondition
    probes: tuple[str, ...] | None
    output_dir: Path
    run_id: str
    values: dict[str, Any] = field(default_factory=dict)

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override the noise seed (and the seed of a random initial field)."""
        text = render_config({**self.values, "noise.seed": seed, "init.seed": seed}
                             if self.noise is not None else {**self.values, "init.seed": seed})
        return parse_config(text, required_sections=())

    def to_text(self) -> str:
        return render_config(self.values)


def _format(value: Any, key: str) -> str:
    if key == "init.modes":
        return "; ".join(f"{' '.join(map(str, i))} : {a!r} : {p!r}" for i, a, p in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


def render_config(values: dict[str, Any]) -> str:
    """Canonical text of resolved values; ``parse_config`` round-trips it."""
    lines = []
    for key in SCHEMA:
        if key in values and values[key] is not None and values[key] != ():
            lines.append(f"{key} = {_format(values[key], key)}")
    return "\n".join(lines) + "\n"


def _read_pairs(source: str) -> Iterable[tuple[str, str, int]]:
    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        yield key.strip(), value.strip(), lineno


def parse_config(source: str, required_sections: Iterable[str] = ("grid", "solver")) -> ExperimentConfig:
    """Parse and validate a configuration document.

    Sections listed in ``required_sections`` must supply their required keys;
    a section that appears at all must be complete. Every error names the key
    and, where one exists, the line.
    """
    raw: dict[str, tuple[Any, int]] = {}
    for key, text, lineno in _read_pairs(source):
        if key not in SCHEMA:
            raise UnknownKey("unknown key", key=key, line=lineno)
        if key in raw:
            raise ConfigError("duplicate key", key=key, line=lineno)
        parser = SCHEMA[key][0]
        try:
            raw[key] = (parser(text), lineno)
        except (ValueError, TypeError) as exc:
            raise ConfigTypeError(str(exc), key=key, line=lineno) from None

    present = {k.split(".")[0] for k in raw}
    needed = set(required_sections) | (present & set(SECTIONS_WITH_REQUIRED))
    values: dict[str, Any] = {}
    for key, (_, default) in SCHEMA.items():
        section = key.split(".")[0]
        if key in raw:
            values[key] = raw[key][0]
        elif default is REQUIRED:
            if section in needed:
                raise MissingRequired("required key missing", key=key)
        else:
            values[key] = default

    def line(key):
        return raw[key][1] if key in raw else None

    def build(keys, fn):
        try:
            return fn()
        except OddGridSize as exc:
            raise OddGridSize(f"key 'grid.n', line {line('grid.n')}: {exc}") from None
        except (ValueError, InvalidGrid) as exc:
            bad = next((k for k in keys if k in raw), keys[0])
            raise ConfigTypeError(str(exc), key=bad, line=line(bad)) from None

    grid = None
    if "grid" in needed:
        grid = build(("grid.n", "grid.dim", "grid.length"),
                     lambda: make_grid(values["grid.dim"], values["grid.n"], values["grid.length"]))
    model = _build_model(values, raw)
    solver = None
    if "solver" in needed:
        skeys = [k for k in SCHEMA if k.startswith("solver.")]
        solver = build(skeys, lambda: SolverConfig(
            dt=values["solver.dt"], t_end=values["solver.t_end"], scheme=values["solver.scheme"],
            blowup_threshold=values["solver.blowup_threshold"], dealias=values["solver.dealias"],
            record_every=values["solver.record_every"], snapshot_times=values["solver.snapshot_times"]))
    noise = None
    if "noise" in needed:
        nkeys = [k for k in SCHEMA if k.startswith("noise.")]
        noise = build(nkeys, lambda: NoiseSpec(
            values["noise.profile"], values["noise.param"], values["noise.amplitude"],
            values["noise.seed"], values["noise.mean_mode"]))
        if grid is not None:
            noise.check_grid(grid)
    init = _build_init(values, raw)
    probes = values["probes"]
    if probes is not None:
        from .diagnostics import validate_probes
        try:
            validate_probes(probes)
        except ValueError as exc:
            raise ConfigTypeError(str(exc), key="probes", line=line("probes")) from None
    for key in ("ensemble.n_samples", "picard.n_time_nodes", "picard.max_iter", "decay.samples"):
        if values[key] < 1:
            raise ConfigTypeError("must be >= 1", key=key, line=line(key))
    # drop absent optional sections so the echoed config stays minimal
    values = {k: v for k, v in values.items()
              if k.split(".")[0] not in SECTIONS_WITH_REQUIRED or k.split(".")[0] in needed}
    return ExperimentConfig(grid, model, solver, noise, init, probes,
                            Path(values["output.dir"]), values["output.run_id"], values)


def _build_model(values, raw) -> ModelParams:
    for j in range(1, 5):
        key = f"model.alpha{j}"
        if not values[key] >= 0:
            raise ConfigTypeError(f"must be >= 0, got {values[key]}", key=key,
                                  line=raw[key][1] if key in raw else None)
    return ModelParams(*(values[f"model.alpha{j}"] for j in range(1, 5)))


def _build_init(values, raw) -> InitialCondition:
    kind = values["init.kind"]
    need = {"trig": "init.modes", "snapshot": "init.path"}.get(kind)
    if need and values[need] is None:
        raise MissingRequired(f"init.kind = {kind} needs this key", key=need)
    return InitialCondition(kind, values["init.modes"] or (), values["init.k_max"], values["init.slope"],
                            values["init.rms"], values["init.seed"], values["init.path"])


def load_config(path, required_sections: Iterable[str] = ("grid", "solver")) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), required_sections)
