"""Command-line front end: config files, run orchestration, output files.

One process runs one subcommand against one JSON configuration file:

    penningmd simulate    --config run.json [--out DIR] [--seed N] [--deterministic]
    penningmd equilibrium --config run.json ...
    penningmd modes       --config run.json ...
    penningmd cool-scan   --config run.json ...
    penningmd bench       --config run.json ...
    penningmd fmm-check   --config run.json ...

The configuration is a single JSON object with optional sections (trap,
ions, beams, integration, init, output, scan, bench, fmm_check); every
section is schema-validated, unknown keys are rejected with the offending
field path, defaults are filled in, and human units (MHz, micrometres,
nanoseconds, millikelvin) are converted to SI on load.  A SHA-256 hash of
the normalized configuration identifies the run: every output file embeds
it, together with the effective seed, the deterministic flag, and the
package version, as ``# key = value`` header lines (CSV) or top-level keys
(JSON).  ``--seed``/``--deterministic`` override the integration section
for the run without changing the configuration hash.

Exit codes: 0 on success, 2 for configuration errors (bad usage, schema
violations, missing referenced files), 3 for numerical failures during the
run, in which case a ``failure.json`` diagnostics file is written to the
output directory.

Float cells are written with ``repr`` (shortest exact representation), so
every CSV parses back to bit-identical values; with a fixed seed and
``deterministic`` set, re-running a command reproduces every output file
byte for byte.  Benchmark timing columns are the one exception: they are
wall-clock measurements.  The Coulomb thread count is taken from the
``PENNING_THREADS`` environment variable at import (default: all cores).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .constants import KB
from .cooltheory import CoolingTheoryParams, temperature_map
from .coulomb import ChargeSystem, direct_solve, fmm_solve
from .equilibrium import (cold_fluid_density, ellipsoid_ratios,
                          find_equilibrium, fit_ellipsoid_scale,
                          predicted_shape, wigner_seitz_radius)
from .integrator import Observer, StepConfig, run
from .lasers import standard_setup
from .model import IonState, TrapConfig, be9, energy_report, from_rotating_frame
from .modes import crystal_modes
from .thermal import (ThermalInitConfig, TrajectoryWindow, sample_velocities,
                      temperatures, thermal_state)

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "save_config",
    "write_table",
    "read_table",
    "main",
]


class ConfigError(Exception):
    """A configuration file or command line violates the schema."""


# ---------------------------------------------------------------------------
# value converters (raise ValueError with a message; _Section adds the path)

def _number(v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("expected a finite number")
    return x


def _positive(v: Any) -> float:
    x = _number(v)
    if x <= 0.0:
        raise ValueError(f"expected a positive number, got {v!r}")
    return x


def _nonnegative(v: Any) -> float:
    x = _number(v)
    if x < 0.0:
        raise ValueError(f"expected a non-negative number, got {v!r}")
    return x


def _integer(v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _positive_int(v: Any) -> int:
    x = _integer(v)
    if x <= 0:
        raise ValueError(f"expected a positive integer, got {v!r}")
    return x


def _nonnegative_int(v: Any) -> int:
    x = _integer(v)
    if x < 0:
        raise ValueError(f"expected a non-negative integer, got {v!r}")
    return x


def _seed_u64(v: Any) -> int:
    x = _integer(v)
    if not 0 <= x < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {v!r}")
    return x


def _boolean(v: Any) -> bool:
    if not isinstance(v, bool):
        raise ValueError(f"expected true or false, got {v!r}")
    return v


def _string(v: Any) -> str:
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _choice(*options: str) -> Callable[[Any], str]:
    def convert(v: Any) -> str:
        s = _string(v)
        if s not in options:
            raise ValueError(f"expected one of {list(options)}, got {v!r}")
        return s
    return convert


def _positive_or_inf(v: Any) -> float:
    """A positive number, or the string "inf" for an unbounded beam waist."""
    if v == "inf":
        return math.inf
    return _positive(v)


def _nullable(convert: Callable[[Any], Any]) -> Callable[[Any], Any]:
    def wrapped(v: Any) -> Any:
        return None if v is None else convert(v)
    return wrapped


def _list_of(convert: Callable[[Any], Any]) -> Callable[[Any], list]:
    def wrapped(v: Any) -> list:
        if not isinstance(v, list) or not v:
            raise ValueError(f"expected a non-empty list, got {v!r}")
        return [convert(item) for item in v]
    return wrapped


_MISSING = object()


class _Section:
    """One object node of the configuration tree with path-tagged access."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        self._data = data
        self._path = path
        self._taken: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self._data

    def child(self, key: str) -> "_Section":
        self._taken.add(key)
        return _Section(self._data.get(key, {}), self._where(key))

    def take(self, key: str, convert: Callable[[Any], Any],
             default: Any = _MISSING) -> Any:
        self._taken.add(key)
        if key not in self._data:
            if default is _MISSING:
                raise ConfigError(f"{self._where(key)}: required key is missing")
            return default
        try:
            return convert(self._data[key])
        except ValueError as exc:
            raise ConfigError(f"{self._where(key)}: {exc}") from None

    def finish(self) -> None:
        unknown = sorted(set(self._data) - self._taken)
        if unknown:
            raise ConfigError(
                f"{self._path or 'config'}: unknown key(s): {', '.join(unknown)}")

    def _where(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key


# ---------------------------------------------------------------------------
# configuration sections (SI values; the normalized dict keeps file units)

_SPECIES = {"be9": be9}

_MHZ = 2.0 * np.pi * 1e6   # MHz -> rad/s
_UM = 1e-6                 # micrometres -> m
_US = 1e-6                 # microseconds -> s
_NS = 1e-9                 # nanoseconds -> s
_MK = 1e-3                 # millikelvin -> K


@dataclass
class BeamsSpec:
    """Standard cooling geometry: one planar beam plus an axial pair."""

    s_perp: float
    detuning_perp: float          # rad/s, per detuning_reference
    offset: float                 # m
    w_y: float                    # m
    w_z: float                    # m (may be inf)
    s_par: float
    detuning_par: float | None    # rad/s; None = -linewidth/2
    detuning_reference: str       # "lab" | "corotating"


@dataclass
class InitSpec:
    kind: str                     # "equilibrium" | "thermal" | "uniform"
    equilibrium_file: Path | None
    temperature: float            # K
    metropolis_dx: float          # m
    metropolis_scans: int
    restarts: int


@dataclass
class OutputSpec:
    directory: str
    snapshot_stride: int          # 0 = initial/final states only
    diagnostic_stride: int
    window: float                 # s, temperature-averaging window


@dataclass
class ScanSpec:
    w_y_values: list[float]       # m
    detunings: list[float]        # rad/s, per beams.detuning_reference
    settle: float                 # s before measuring
    measure: float                # s of measurement

@dataclass
class BenchSpec:
    n_values: list[int]
    eps: float
    repeats: int
    direct_max_n: int


@dataclass
class FmmCheckSpec:
    n: int
    eps_values: list[float]


@dataclass
class RunConfig:
    """A validated configuration: SI-valued sections plus provenance."""

    trap: TrapConfig
    n_ions: int | None
    beams: BeamsSpec | None
    step: StepConfig
    n_steps: int
    init: InitSpec
    output: OutputSpec
    scan: ScanSpec | None
    bench: BenchSpec
    fmm_check: FmmCheckSpec
    normalized: dict
    config_hash: str
    base_dir: Path


def _parse_trap(sec: _Section) -> tuple[TrapConfig, dict]:
    species = sec.take("species", _choice(*_SPECIES), "be9")
    b_field = sec.take("b_field_T", _positive)
    f_z = sec.take("f_z_MHz", _positive)
    delta = sec.take("delta", _nonnegative, 0.0)
    f_rot = sec.take("f_rot_MHz", _positive)
    sec.finish()
    try:
        trap = TrapConfig.from_frequencies(_SPECIES[species](), b_field,
                                           f_z * 1e6, delta, f_rot * 1e6)
    except ValueError as exc:
        raise ConfigError(f"trap: {exc}") from None
    normalized = {"species": species, "b_field_T": b_field, "f_z_MHz": f_z,
                  "delta": delta, "f_rot_MHz": f_rot}
    return trap, normalized


def _parse_beams(sec: _Section) -> tuple[BeamsSpec, dict]:
    planar = sec.child("planar")
    s_perp = planar.take("s_perp", _nonnegative, 0.5)
    det_perp = planar.take("detuning_perp_MHz", _number)
    offset = planar.take("offset_um", _nonnegative, 5.0)
    w_y = planar.take("w_y_um", _positive_or_inf)
    w_z = planar.take("w_z_um", _positive_or_inf, math.inf)
    planar.finish()
    axial = sec.child("axial")
    s_par = axial.take("s_par", _nonnegative, 5e-3)
    det_par = axial.take("detuning_par_MHz", _nullable(_number), None)
    axial.finish()
    reference = sec.take("detuning_reference", _choice("lab", "corotating"), "lab")
    sec.finish()
    spec = BeamsSpec(
        s_perp=s_perp, detuning_perp=det_perp * _MHZ, offset=offset * _UM,
        w_y=w_y, w_z=w_z, s_par=s_par,
        detuning_par=None if det_par is None else det_par * _MHZ,
        detuning_reference=reference)
    normalized = {
        "planar": {"s_perp": s_perp, "detuning_perp_MHz": det_perp,
                   "offset_um": offset,
                   "w_y_um": "inf" if math.isinf(w_y) else w_y,
                   "w_z_um": "inf" if math.isinf(w_z) else w_z},
        "axial": {"s_par": s_par, "detuning_par_MHz": det_par},
        "detuning_reference": reference}
    return spec, normalized


def _parse_integration(sec: _Section) -> tuple[StepConfig, int, dict]:
    dt_ns = sec.take("dt_ns", _nullable(_positive), None)
    n_steps = sec.take("n_steps", _nonnegative_int, 0)
    eps = sec.take("eps", _positive, 1e-7)
    method = sec.take("method", _choice("auto", "direct", "fmm"), "auto")
    leaf_min = sec.take("leaf_min", _nullable(_positive_int), None)
    seed = sec.take("seed", _seed_u64, 0)
    deterministic = sec.take("deterministic", _boolean, True)
    sec.finish()
    step = StepConfig(dt=None if dt_ns is None else dt_ns * _NS, eps=eps,
                      method=method, leaf_min=leaf_min,
                      deterministic=deterministic, seed=seed)
    normalized = {"dt_ns": dt_ns, "n_steps": n_steps, "eps": eps,
                  "method": method, "leaf_min": leaf_min, "seed": seed,
                  "deterministic": deterministic}
    return step, n_steps, normalized


def _parse_init(sec: _Section, base_dir: Path) -> tuple[InitSpec, dict]:
    kind = sec.take("kind", _choice("equilibrium", "thermal", "uniform"),
                    "equilibrium")
    eq_file = sec.take("equilibrium_file", _nullable(_string), None)
    temperature = sec.take("temperature_mK", _positive, 10.0)
    dx = sec.take("metropolis_dx_um", _positive, 1.0)
    scans = sec.take("metropolis_scans", _positive_int, 2000)
    restarts = sec.take("restarts", _positive_int, 3)
    sec.finish()
    eq_path = None
    if eq_file is not None:
        eq_path = Path(eq_file)
        if not eq_path.is_absolute():
            eq_path = base_dir / eq_path
        if not eq_path.is_file():
            raise ConfigError(
                f"init.equilibrium_file: file not found: {eq_path}")
    spec = InitSpec(kind=kind, equilibrium_file=eq_path,
                    temperature=temperature * _MK, metropolis_dx=dx * _UM,
                    metropolis_scans=scans, restarts=restarts)
    normalized = {"kind": kind, "equilibrium_file": eq_file,
                  "temperature_mK": temperature, "metropolis_dx_um": dx,
                  "metropolis_scans": scans, "restarts": restarts}
    return spec, normalized


def _parse_output(sec: _Section) -> tuple[OutputSpec, dict]:
    directory = sec.take("directory", _string, "out")
    snap = sec.take("snapshot_stride", _nonnegative_int, 0)
    diag = sec.take("diagnostic_stride", _positive_int, 10)
    window = sec.take("window_us", _positive, 50.0)
    sec.finish()
    spec = OutputSpec(directory=directory, snapshot_stride=snap,
                      diagnostic_stride=diag, window=window * _US)
    normalized = {"directory": directory, "snapshot_stride": snap,
                  "diagnostic_stride": diag, "window_us": window}
    return spec, normalized


def _parse_scan(sec: _Section) -> tuple[ScanSpec, dict]:
    w_y = sec.take("w_y_um", _list_of(_positive))
    dets = sec.take("detuning_perp_MHz", _list_of(_number))
    settle = sec.take("settle_us", _nonnegative, 200.0)
    measure = sec.take("measure_us", _positive, 100.0)
    sec.finish()
    spec = ScanSpec(w_y_values=[w * _UM for w in w_y],
                    detunings=[d * _MHZ for d in dets],
                    settle=settle * _US, measure=measure * _US)
    normalized = {"w_y_um": w_y, "detuning_perp_MHz": dets,
                  "settle_us": settle, "measure_us": measure}
    return spec, normalized


def _parse_bench(sec: _Section) -> tuple[BenchSpec, dict]:
    n_values = sec.take("n_values", _list_of(_positive_int),
                        [256, 512, 1024, 2048, 4096, 8192, 16384, 32768])
    eps = sec.take("eps", _positive, 1e-3)
    repeats = sec.take("repeats", _positive_int, 3)
    direct_max = sec.take("direct_max_n", _positive_int, 16384)
    sec.finish()
    spec = BenchSpec(n_values=n_values, eps=eps, repeats=repeats,
                     direct_max_n=direct_max)
    normalized = {"n_values": n_values, "eps": eps, "repeats": repeats,
                  "direct_max_n": direct_max}
    return spec, normalized


def _parse_fmm_check(sec: _Section) -> tuple[FmmCheckSpec, dict]:
    n = sec.take("n", _positive_int, 10000)
    eps_values = sec.take("eps_values", _list_of(_positive),
                          [1e-3, 1e-5, 1e-7, 1e-9])
    sec.finish()
    spec = FmmCheckSpec(n=n, eps_values=eps_values)
    normalized = {"n": n, "eps_values": eps_values}
    return spec, normalized


def _config_hash(normalized: dict) -> str:
    import hashlib
    canon = json.dumps(normalized, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: Path | str) -> RunConfig:
    """Parse, validate, unit-convert, and hash a JSON configuration file.

    Relative paths referenced by the file (``init.equilibrium_file``)
    resolve against the file's own directory; every referenced file must
    exist.  Raises :class:`ConfigError` on any schema violation, naming
    the offending field path.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    root = _Section(data, "")
    trap, n_trap = _parse_trap(root.child("trap"))
    ions = root.child("ions")
    n_ions = ions.take("n", _nullable(_positive_int), None)
    ions.finish()
    beams, n_beams = (None, None)
    if root.has("beams"):
        beams, n_beams = _parse_beams(root.child("beams"))
    else:
        root.child("beams").finish()
    step, n_steps, n_integ = _parse_integration(root.child("integration"))
    init, n_init = _parse_init(root.child("init"), path.parent)
    output, n_output = _parse_output(root.child("output"))
    scan, n_scan = (None, None)
    if root.has("scan"):
        scan, n_scan = _parse_scan(root.child("scan"))
    else:
        root.child("scan").finish()
    bench, n_bench = _parse_bench(root.child("bench"))
    fmm_check, n_fmm = _parse_fmm_check(root.child("fmm_check"))
    root.finish()

    normalized = {"trap": n_trap, "ions": {"n": n_ions},
                  "beams": n_beams, "integration": n_integ, "init": n_init,
                  "output": n_output, "scan": n_scan, "bench": n_bench,
                  "fmm_check": n_fmm}
    return RunConfig(trap=trap, n_ions=n_ions, beams=beams, step=step,
                     n_steps=n_steps, init=init, output=output, scan=scan,
                     bench=bench, fmm_check=fmm_check, normalized=normalized,
                     config_hash=_config_hash(normalized),
                     base_dir=path.parent)


def save_config(rc: RunConfig, path: Path | str) -> None:
    """Write the normalized configuration; reloading reproduces the hash."""
    body = {k: v for k, v in rc.normalized.items() if v is not None}
    if body.get("ions") == {"n": None}:
        del body["ions"]
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# output files: provenance-stamped CSV tables and JSON documents

def _format_cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path: Path | str, meta: dict, names: Sequence[str],
                rows: Sequence[Sequence[Any]]) -> None:
    """Write a CSV table with ``# key = value`` provenance header lines.

    Floats are rendered with ``repr`` (shortest exact round trip), so
    :func:`read_table` recovers bit-identical values.
    """
    lines = [f"# {k} = {_format_cell(v)}" for k, v in meta.items()]
    lines.append(",".join(names))
    for row in rows:
        if len(row) != len(names):
            raise ValueError(f"row has {len(row)} cells, expected {len(names)}")
        lines.append(",".join(_format_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path: Path | str) -> tuple[dict, list[str], list[list[str]]]:
    """Read a table written by :func:`write_table`.

    Returns ``(meta, column_names, rows)`` with all cells as strings;
    ``float(cell)`` recovers numeric values exactly.
    """
    meta: dict[str, str] = {}
    names: list[str] | None = None
    rows: list[list[str]] = []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
        elif names is None:
            names = line.split(",")
        else:
            rows.append(line.split(","))
    if names is None:
        raise ValueError(f"{path}: no column header line")
    return meta, names, rows


def _meta(rc: RunConfig, command: str, **extra: Any) -> dict:
    m = {"command": command, "version": __version__,
         "config_hash": rc.config_hash, "seed": rc.step.seed,
         "deterministic": rc.step.deterministic}
    m.update(extra)
    return m


def _write_json(path: Path, document: dict) -> None:
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


def _write_run_json(out_dir: Path, rc: RunConfig, command: str,
                    outputs: Sequence[str], **extra: Any) -> None:
    doc = _meta(rc, command, outputs=sorted(outputs), **extra)
    doc["config"] = rc.normalized
    _write_json(out_dir / "run.json", doc)


_STATE_COLUMNS = ("ion", "x_m", "y_m", "z_m", "vx_mps", "vy_mps", "vz_mps")


def _write_state(path: Path, rc: RunConfig, command: str,
                 state: IonState) -> None:
    rows = [(i, *state.positions[i], *state.velocities[i])
            for i in range(state.n_ions)]
    write_table(path, _meta(rc, command, t_s=state.t, frame=state.frame,
                            n_ions=state.n_ions), _STATE_COLUMNS, rows)


def _write_positions(path: Path, rc: RunConfig, command: str,
                     positions: np.ndarray, **extra: Any) -> None:
    rows = [(i, *positions[i]) for i in range(len(positions))]
    write_table(path, _meta(rc, command, n_ions=len(positions),
                            frame="rotating", **extra),
                ("ion", "x_m", "y_m", "z_m"), rows)


def _load_positions(path: Path) -> np.ndarray:
    """Rotating-frame positions from an equilibrium or snapshot CSV."""
    _, names, rows = read_table(path)
    try:
        cols = [names.index(c) for c in ("x_m", "y_m", "z_m")]
    except ValueError:
        raise ConfigError(
            f"{path}: expected x_m, y_m, z_m columns") from None
    return np.array([[float(row[c]) for c in cols] for row in rows])


# ---------------------------------------------------------------------------
# shared run machinery

def _build_beams(rc: RunConfig, detuning_perp: float | None = None,
                 w_y: float | None = None) -> list:
    """The configured three-beam cooling setup, with optional overrides."""
    b = rc.beams
    if b is None:
        raise ConfigError("this command needs a beams section")
    return standard_setup(
        rc.trap.species,
        b.detuning_perp if detuning_perp is None else detuning_perp,
        b.w_y if w_y is None else w_y, b.w_z, d=b.offset, s_perp0=b.s_perp,
        s_par0=b.s_par, delta_par=b.detuning_par,
        detuning_reference=b.detuning_reference, omega_r=rc.trap.omega_r)


def _lab_detuning(detuning: float, rc: RunConfig) -> float:
    """Lab-frame planar detuning for the configured detuning reference."""
    if rc.beams is not None and rc.beams.detuning_reference == "corotating":
        k = rc.trap.species.k_photon
        return detuning + k * rc.trap.omega_r * rc.beams.offset
    return detuning


def _equilibrium_positions(rc: RunConfig) -> np.ndarray:
    """Rotating-frame equilibrium: from the configured file, or minimized."""
    if rc.init.equilibrium_file is not None:
        positions = _load_positions(rc.init.equilibrium_file)
        if rc.n_ions is not None and rc.n_ions != len(positions):
            raise ConfigError(
                f"ions.n = {rc.n_ions} does not match the "
                f"{len(positions)}-ion equilibrium file")
        return positions
    if rc.n_ions is None:
        raise ConfigError(
            "ions.n is required when no equilibrium file is given")
    rng = np.random.Generator(np.random.Philox(rc.step.seed))
    report = find_equilibrium(rc.n_ions, rc.trap, restarts=rc.init.restarts,
                              rng=rng)
    if not report.converged:
        raise RuntimeError(
            f"equilibrium search did not converge for n = {rc.n_ions} "
            f"(residual force {report.grad_norm:.3g} N)")
    return report.positions


def _uniform_sphere(n: int, cfg: TrapConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """n positions uniform in the sphere the cold fluid would fill."""
    radius = wigner_seitz_radius(cfg) * n ** (1.0 / 3.0)
    points = np.empty((0, 3))
    while len(points) < n:
        draw = rng.uniform(-1.0, 1.0, size=(2 * n + 16, 3))
        draw = draw[np.sum(draw**2, axis=1) <= 1.0]
        points = np.concatenate([points, draw])
    return radius * points[:n]


def _initial_state(rc: RunConfig) -> tuple[IonState, np.ndarray | None]:
    """Lab-frame starting state and the rotating-frame reference positions.

    kind="equilibrium" starts cold at the equilibrium; kind="thermal"
    draws velocities and Metropolis-displaced positions at the configured
    temperature; kind="uniform" fills the cold-fluid sphere uniformly and
    draws thermal velocities (no equilibrium reference, so the
    potential-energy temperature is not reported).
    """
    init = rc.init
    if init.kind == "uniform":
        if rc.n_ions is None:
            raise ConfigError("ions.n is required for init.kind = 'uniform'")
        rng = np.random.Generator(np.random.Philox(rc.step.seed))
        positions = _uniform_sphere(rc.n_ions, rc.trap, rng)
        velocities = sample_velocities(rc.n_ions, init.temperature,
                                       rc.trap.species.mass, rng)
        state = from_rotating_frame(
            IonState(positions, velocities, t=0.0, frame="rotating"), rc.trap)
        return state, None
    reference = _equilibrium_positions(rc)
    if init.kind == "equilibrium":
        state = from_rotating_frame(
            IonState(reference.copy(), np.zeros_like(reference), t=0.0,
                     frame="rotating"), rc.trap)
        return state, reference
    thermal_cfg = ThermalInitConfig(
        temperature=init.temperature, dx=init.metropolis_dx,
        scans=init.metropolis_scans, seed=rc.step.seed)
    return thermal_state(reference, rc.trap, thermal_cfg), reference


_DIAG_COLUMNS = ("t_s", "T_ax_mK", "T_perp_mK", "T_pe_mK", "E_total_J")


def _diagnostic_rows(states: Sequence[IonState], rc: RunConfig,
                     reference: np.ndarray | None) -> list[tuple]:
    """One temperature/energy row per averaging window of snapshots."""
    times = np.array([s.t for s in states])
    index = np.floor((times - times[0]) / rc.output.window + 1e-9).astype(int)
    rows = []
    ref = reference
    for w in np.unique(index):
        group = [s for s, i in zip(states, index) if i == w]
        window = TrajectoryWindow.from_states(group, rc.trap)
        if ref is not None:
            rep = temperatures(window, rc.trap, ref)
            ref = rep.reference  # carry forward any re-minimized reference
            t_ax, t_perp, t_pe = rep.t_ax, rep.t_perp, rep.t_pe
        else:
            m, n = rc.trap.species.mass, window.n_ions
            v = window.velocities
            t_ax = m * float(np.mean(np.sum(v[:, :, 2]**2, axis=1))) / (n * KB)
            t_perp = m * float(np.mean(np.sum(
                v[:, :, 0]**2 + v[:, :, 1]**2, axis=1))) / (2 * n * KB)
            t_pe = math.nan
        energy = float(np.mean([energy_report(s, rc.trap).total
                                for s in group]))
        rows.append((group[-1].t, t_ax / _MK, t_perp / _MK, t_pe / _MK,
                     energy))
    return rows


# ---------------------------------------------------------------------------
# subcommands

def _cmd_simulate(rc: RunConfig, out_dir: Path) -> None:
    state0, reference = _initial_state(rc)
    dt = rc.step.resolve_dt(rc.trap)
    beams = _build_beams(rc) if rc.beams is not None else ()
    observers = [Observer("diag", lambda s, c: s, rc.output.diagnostic_stride)]
    if rc.output.snapshot_stride > 0:
        observers.append(
            Observer("snap", lambda s, c: s, rc.output.snapshot_stride))
    final, series = run(state0, rc.trap, rc.step, beams, rc.n_steps,
                        observers)

    outputs = ["snapshot_00000000.csv", "diagnostics.csv"]
    _write_state(out_dir / "snapshot_00000000.csv", rc, "simulate", state0)
    if rc.output.snapshot_stride > 0:
        for s in series["snap"]["values"]:
            step_index = int(round((s.t - state0.t) / dt))
            if step_index == 0:
                continue
            name = f"snapshot_{step_index:08d}.csv"
            _write_state(out_dir / name, rc, "simulate", s)
            outputs.append(name)
    if rc.n_steps > 0:
        _write_state(out_dir / "final_state.csv", rc, "simulate", final)
        outputs.append("final_state.csv")
    rows = _diagnostic_rows(series["diag"]["values"], rc, reference)
    write_table(out_dir / "diagnostics.csv",
                _meta(rc, "simulate", n_ions=state0.n_ions, dt_s=dt,
                      n_steps=rc.n_steps, window_s=rc.output.window),
                _DIAG_COLUMNS, rows)
    _write_run_json(out_dir, rc, "simulate", outputs,
                    n_ions=state0.n_ions, dt_s=dt, n_steps=rc.n_steps)


def _cmd_equilibrium(rc: RunConfig, out_dir: Path) -> None:
    if rc.n_ions is None:
        raise ConfigError("ions.n is required for the equilibrium command")
    rng = np.random.Generator(np.random.Philox(rc.step.seed))
    report = find_equilibrium(rc.n_ions, rc.trap, restarts=rc.init.restarts,
                              rng=rng)
    if not report.converged:
        raise RuntimeError(
            f"equilibrium search did not converge for n = {rc.n_ions} "
            f"(residual force {report.grad_norm:.3g} N)")
    _write_positions(out_dir / "equilibrium.csv", rc, "equilibrium",
                     report.positions, energy_J=report.energy,
                     grad_norm_N=report.grad_norm,
                     iterations=report.iterations)

    predicted = predicted_shape(rc.trap, rc.n_ions)
    fitted = fit_ellipsoid_scale(report.positions, ellipsoid_ratios(rc.trap),
                                 rc.trap)
    pred = predicted.semi_axes_xyz
    fit = fitted.semi_axes_xyz
    shape = _meta(rc, "equilibrium", n_ions=rc.n_ions)
    shape.update({
        "predicted_semi_axes_m": {"x": pred[0], "y": pred[1], "z": pred[2]},
        "fitted_semi_axes_m": {"x": fit[0], "y": fit[1], "z": fit[2]},
        "relative_error": {a: (fit[i] - pred[i]) / pred[i]
                           for i, a in enumerate("xyz")},
        "cold_fluid_density_m3": cold_fluid_density(rc.trap),
        "energy_J": report.energy,
        "grad_norm_N": report.grad_norm,
    })
    _write_json(out_dir / "shape.json", shape)
    _write_run_json(out_dir, rc, "equilibrium",
                    ["equilibrium.csv", "shape.json"], n_ions=rc.n_ions)


def _cmd_modes(rc: RunConfig, out_dir: Path) -> None:
    positions = _equilibrium_positions(rc)
    spectrum = crystal_modes(positions, rc.trap)
    rows = [(i, spectrum.frequencies[i] / _MHZ, spectrum.ratios[i],
             spectrum.axial_fractions[i], spectrum.branches[i])
            for i in range(spectrum.n_modes)]
    write_table(out_dir / "modes.csv",
                _meta(rc, "modes", n_ions=spectrum.n_ions,
                      n_modes=spectrum.n_modes,
                      zero_modes=len(spectrum.zero_modes),
                      branch_resolved=bool(spectrum.branch_resolved)),
                ("mode", "f_MHz", "energy_ratio", "axial_fraction", "branch"),
                rows)
    _write_run_json(out_dir, rc, "modes", ["modes.csv"],
                    n_ions=spectrum.n_ions)


def _cmd_cool_scan(rc: RunConfig, out_dir: Path) -> None:
    if rc.scan is None:
        raise ConfigError("the cool-scan command needs a scan section")
    if rc.beams is None:
        raise ConfigError("the cool-scan command needs a beams section")
    scan, beams_spec = rc.scan, rc.beams
    reference = _equilibrium_positions(rc)
    n = len(reference)

    # semi-analytic side: equilibrium perpendicular temperature per cell
    params = CoolingTheoryParams.for_crystal(
        rc.trap, n, s_perp=beams_spec.s_perp,
        detuning_perp=_lab_detuning(scan.detunings[0], rc),
        offset=beams_spec.offset, w_y=scan.w_y_values[0], w_z=beams_spec.w_z,
        s_par=beams_spec.s_par)
    lab_detunings = [_lab_detuning(d, rc) for d in scan.detunings]
    theory = temperature_map(scan.w_y_values, lab_detunings, params)
    theory_rows = []
    for i, w_y in enumerate(scan.w_y_values):
        for j, det in enumerate(scan.detunings):
            theory_rows.append((w_y / _UM, det / _MHZ, theory[i, j] / _MK))
    write_table(out_dir / "theory.csv",
                _meta(rc, "cool-scan", n_ions=n, source="energy-balance"),
                ("w_y_um", "detuning_perp_MHz", "T_perp_mK"), theory_rows)

    # molecular-dynamics side: settle, then measure in two half windows
    thermal_cfg = ThermalInitConfig(
        temperature=rc.init.temperature, dx=rc.init.metropolis_dx,
        scans=rc.init.metropolis_scans, seed=rc.step.seed)
    state0 = thermal_state(reference, rc.trap, thermal_cfg)
    dt = rc.step.resolve_dt(rc.trap)
    settle_steps = int(round(scan.settle / dt))
    measure_steps = max(1, int(round(scan.measure / dt)))
    stride = rc.output.diagnostic_stride
    md_rows = []
    for i, w_y in enumerate(scan.w_y_values):
        for j, det in enumerate(scan.detunings):
            beams = _build_beams(rc, detuning_perp=det, w_y=w_y)
            cell_step = dataclasses.replace(
                rc.step, seed=rc.step.seed + 1 + i * len(scan.detunings) + j)
            _, series = run(state0.copy(), rc.trap, cell_step, beams,
                            settle_steps + measure_steps,
                            [Observer("diag", lambda s, c: s, stride)])
            states = series["diag"]["values"]
            t_cut = state0.t + (settle_steps - 0.5) * dt
            measured = [s for s in states if s.t >= t_cut]
            if len(measured) < 4:
                raise ConfigError(
                    "scan.measure_us spans fewer than four diagnostic "
                    "samples; lengthen it or lower output.diagnostic_stride")
            half = len(measured) // 2
            first = temperatures(
                TrajectoryWindow.from_states(measured[:half], rc.trap),
                rc.trap, reference)
            second = temperatures(
                TrajectoryWindow.from_states(measured[half:], rc.trap),
                rc.trap, first.reference)
            drift = (first.t_perp - second.t_perp) / second.t_perp
            md_rows.append((w_y / _UM, det / _MHZ, second.t_ax / _MK,
                            second.t_perp / _MK, second.t_pe / _MK, drift))
    write_table(out_dir / "md.csv",
                _meta(rc, "cool-scan", n_ions=n, dt_s=dt,
                      settle_steps=settle_steps,
                      measure_steps=measure_steps),
                ("w_y_um", "detuning_perp_MHz", "T_ax_mK", "T_perp_mK",
                 "T_pe_mK", "t_perp_drift"), md_rows)
    _write_run_json(out_dir, rc, "cool-scan", ["theory.csv", "md.csv"],
                    n_ions=n)


def _time_solve(fn: Callable[[], Any], repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def _cmd_bench(rc: RunConfig, out_dir: Path) -> None:
    bench = rc.bench
    rng = np.random.Generator(np.random.Philox(rc.step.seed))
    charge = rc.trap.species.charge
    warm = ChargeSystem(_uniform_sphere(min(bench.n_values), rc.trap, rng),
                        charge)
    direct_solve(warm)  # compile the kernels outside the timed region
    fmm_solve(warm, eps=bench.eps, leaf_min=rc.step.leaf_min)
    rows = []
    for n in sorted(bench.n_values):
        system = ChargeSystem(_uniform_sphere(n, rc.trap, rng), charge)
        t_fmm = _time_solve(
            lambda: fmm_solve(system, eps=bench.eps,
                              leaf_min=rc.step.leaf_min), bench.repeats)
        t_direct = (_time_solve(lambda: direct_solve(system), bench.repeats)
                    if n <= bench.direct_max_n else math.nan)
        rows.append((n, t_direct, t_fmm))
    write_table(out_dir / "bench.csv",
                _meta(rc, "bench", eps=bench.eps, repeats=bench.repeats),
                ("n", "t_direct_s", "t_fmm_s"), rows)
    _write_run_json(out_dir, rc, "bench", ["bench.csv"])


def _cmd_fmm_check(rc: RunConfig, out_dir: Path) -> None:
    check = rc.fmm_check
    rng = np.random.Generator(np.random.Philox(rc.step.seed))
    system = ChargeSystem(_uniform_sphere(check.n, rc.trap, rng),
                          rc.trap.species.charge)
    ref = direct_solve(system)
    norm = float(np.linalg.norm(ref.phi))
    rows = []
    for eps in check.eps_values:
        res = fmm_solve(system, eps=eps, leaf_min=rc.step.leaf_min)
        error = float(np.linalg.norm(res.phi - ref.phi)) / norm
        rows.append((eps, error))
    write_table(out_dir / "fmm_check.csv",
                _meta(rc, "fmm-check", n=check.n),
                ("eps", "error_pot"), rows)
    _write_run_json(out_dir, rc, "fmm-check", ["fmm_check.csv"], n=check.n)


_COMMANDS: dict[str, tuple[Callable[[RunConfig, Path], None], str]] = {
    "simulate": (_cmd_simulate,
                 "integrate the configured crystal and write diagnostics"),
    "equilibrium": (_cmd_equilibrium,
                    "minimize the crystal and compare with the cold-fluid "
                    "ellipsoid"),
    "modes": (_cmd_modes, "normal-mode spectrum of the equilibrium crystal"),
    "cool-scan": (_cmd_cool_scan,
                  "grid of cooling runs next to the energy-balance "
                  "temperature map"),
    "bench": (_cmd_bench, "time the direct and fast multipole solvers"),
    "fmm-check": (_cmd_fmm_check,
                  "fast-multipole potential error against direct summation"),
}


def _seed_argument(text: str) -> int:
    try:
        return _seed_u64(int(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="penningmd",
        description="Molecular dynamics of rotating ion crystals in a "
                    "Penning trap.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for name, (fn, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH",
                       help="JSON configuration file")
        p.add_argument("--out", default=None, metavar="DIR",
                       help="output directory (default: output.directory)")
        p.add_argument("--seed", type=_seed_argument, default=None,
                       help="override integration.seed")
        p.add_argument("--deterministic", action="store_true",
                       help="force a reproducible random stream")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)

    try:
        rc = load_config(args.config)
    except ConfigError as exc:
        print(f"penningmd: config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        rc.step = dataclasses.replace(rc.step, seed=args.seed)
    if args.deterministic:
        rc.step = dataclasses.replace(rc.step, deterministic=True)
    out_dir = Path(args.out) if args.out is not None else Path(
        rc.output.directory)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        args.fn(rc, out_dir)
    except ConfigError as exc:
        print(f"penningmd: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        _write_json(out_dir / "failure.json",
                    {"command": args.command, "error": type(exc).__name__,
                     "message": str(exc), "config_hash": rc.config_hash,
                     "seed": rc.step.seed})
        print(f"penningmd: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
