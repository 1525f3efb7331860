"""Simulation backends and grid sweeps: vectorized closed-form surrogates for
the built-in topologies, a template-driven external SPICE runner, and the
exhaustive parameter-grid dataset builder.
"""
from __future__ import annotations

import logging
import math
import os
import re
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .types import CircuitTopology, Dataset, Provenance

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """A backend failed to produce metrics for a parameter point."""


class TemplateError(ValueError):
    """Netlist template placeholders don't match the topology's parameters."""


class MeasurementParseError(ValueError):
    """Simulator output could not be parsed into the expected measurements."""


# --- SPICE value rendering ---------------------------------------------------

# First character of the unit string decides the SPICE magnitude suffix ("mV"
# renders millivolts, "µm" microns, ...); bare units like Ω, V, Hz, dB get none.
_SI_PREFIX = {"f": "f", "p": "p", "n": "n", "u": "u", "µ": "u",
              "m": "m", "k": "k", "M": "Meg", "G": "G", "T": "T"}
_BARE_UNITS = {"", "Ω", "ohm", "Ohm", "V", "A", "W", "F", "H", "Hz", "dB", "%", "s"}


def format_spice_value(value: float, unit: str) -> str:
    v = float(value)
    num = str(int(v)) if v.is_integer() else repr(v)
    if unit in _BARE_UNITS or not unit or unit[0] not in _SI_PREFIX:
        return num
    return num + _SI_PREFIX[unit[0]]


def emit_netlist(template: str, topology: CircuitTopology, x) -> str:
    """Substitute every ${name} placeholder with the unit-suffixed value."""
    found = set(re.findall(r"\$\{(\w+)\}", template))
    want = set(topology.parameter_names)
    missing = sorted(want - found)
    extra = sorted(found - want)
    if missing or extra:
        raise TemplateError(
            f"netlist template mismatch for {topology.id}: "
            f"missing placeholders {missing}, unknown placeholders {extra}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (topology.n_params,):
        raise ValueError(f"expected {topology.n_params} parameter values, got shape {x.shape}")
    out = template
    for spec, v in zip(topology.parameters, x):
        out = out.replace("${" + spec.name + "}", format_spice_value(v, spec.unit))
    return out


_MEAS_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*=\s*(\S+)\s*$")


def parse_measurements(text: str, measurement_map: dict) -> dict:
    """Collect `<name> = <value>` lines into {metric_name: value} via the map.

    Unmapped lines are ignored; a repeated measurement keeps the last value and
    logs a warning; a mapped measurement with an unparseable value is an error
    naming the line.
    """
    values: dict[str, float] = {}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        mobj = _MEAS_RE.match(line)
        if not mobj:
            continue
        name, raw = mobj.groups()
        if name not in measurement_map:
            continue
        try:
            val = float(raw)
        except ValueError as exc:
            raise MeasurementParseError(
                f"line {lineno}: cannot parse value {raw!r} for measurement {name!r}") from exc
        if name in seen:
            log.warning("measurement %s repeated at line %d (first at line %d); keeping the last value",
                        name, lineno, seen[name])
        seen[name] = lineno
        values[measurement_map[name]] = val
    return values


# --- closed-form surrogates --------------------------------------------------

_CS_DEFAULTS = {"g0_s_per_um": 1e-3, "c0_f": 1e-14, "c1_f_per_um": 2e-14,
                "vdd_v": 1.2, "j0_a_per_um": 1.5e-4}


def cs_surrogate(x, constants: dict | None = None):
    """Common-source closed form: x[..., 0] = W in µm, x[..., 1] = R_D in Ω.

    Returns (gain_db, bandwidth_hz, power_w), vectorized over leading axes.
    """
    c = {**_CS_DEFAULTS, **(constants or {})}
    x = np.asarray(x, dtype=np.float64)
    w = x[..., 0]
    rd = x[..., 1]
    gain_db = 20.0 * np.log10(c["g0_s_per_um"] * w * rd)
    bandwidth_hz = 1.0 / (2.0 * np.pi * rd * (c["c0_f"] + c["c1_f_per_um"] * w))
    power_w = c["vdd_v"] * c["j0_a_per_um"] * w
    return gain_db, bandwidth_hz, power_w


def _run_cs(topology: CircuitTopology, xs: np.ndarray) -> np.ndarray:
    gain, bw, power = cs_surrogate(xs, topology.backend.get("constants"))
    cols = {"gain": gain, "bandwidth": bw, "power": power}
    try:
        return np.column_stack([cols[m.name] for m in topology.metrics])
    except KeyError as exc:
        raise ValueError(f"cs surrogate defines metrics {sorted(cols)}, "
                         f"config asks for {topology.metric_names}") from exc


def _run_blend(topology: CircuitTopology, xs: np.ndarray) -> np.ndarray:
    """Generic calibrated surrogate: per metric, a monotone blend of normalized
    axis coordinates mapped onto a configured [lo, hi] span (linearly or
    geometrically), with sign(weight) fixing the per-axis direction."""
    spec = topology.backend["metrics"]
    lo_p, hi_p = topology.param_bounds()
    span_p = hi_p - lo_p
    cols = []
    for m in topology.metrics:
        cfg = spec[m.name]
        weights = cfg["weights"]
        num = np.zeros(len(xs), dtype=np.float64)
        den = 0.0
        for j, p in enumerate(topology.parameters):
            w = float(weights.get(p.name, 0.0))
            if w == 0.0:
                continue
            c = (xs[:, j] - lo_p[j]) / span_p[j]
            num += abs(w) * (c if w > 0 else 1.0 - c)
            den += abs(w)
        if den == 0.0:
            raise ValueError(f"blend surrogate metric {m.name} has no nonzero weights")
        t = num / den
        s = t ** float(cfg.get("shape", 1.0))
        lo, hi = float(cfg["lo"]), float(cfg["hi"])
        if cfg.get("scale", "linear") == "geometric":
            y = np.exp((1.0 - s) * math.log(lo) + s * math.log(hi))
        else:
            y = (1.0 - s) * lo + s * hi
        cols.append(y)
    return np.column_stack(cols)


_TWIN_DEFAULTS = {"center": 0.75, "half_width": 0.5, "drive_origin": 0.25,
                  "gain_base": 1.0, "gain_ridge": 8.0, "gain_drive": 2.0,
                  "drift_base": 0.5, "drift_drive": 3.0, "drift_ridge": 1.0}


def _run_twin_ridge(topology: CircuitTopology, xs: np.ndarray) -> np.ndarray:
    c = {**_TWIN_DEFAULTS, **topology.backend.get("constants", {})}
    a = xs[:, 0]
    b = xs[:, 1]
    rho = ((a - c["center"]) / c["half_width"]) ** 2
    cq = b - c["drive_origin"]
    cols = {"peak_gain": c["gain_base"] + c["gain_ridge"] * rho + c["gain_drive"] * cq,
            "drift": c["drift_base"] + c["drift_drive"] * cq + c["drift_ridge"] * rho}
    return np.column_stack([cols[m.name] for m in topology.metrics])


_SURROGATES = {"cs": _run_cs, "blend": _run_blend, "twin_ridge": _run_twin_ridge}


# --- single-point / batch simulation ----------------------------------------

def _check_batch(topology: CircuitTopology, xs, clamp: bool) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != topology.n_params:
        raise ValueError(f"expected shape (n, {topology.n_params}) parameter batch, got {xs.shape}")
    if not np.isfinite(xs).all():
        raise ValueError("non-finite parameter values")
    if clamp:
        return topology.clamp(xs)
    for j, spec in enumerate(topology.parameters):
        col = xs[:, j]
        if len(col) and not (spec.contains(col.min()) and spec.contains(col.max())):
            raise ValueError(f"parameter {spec.name} outside [{spec.start}, {spec.end}]; "
                             f"pass clamp=True to project onto the box")
    return xs


def _spice_once(topology: CircuitTopology, x: np.ndarray) -> np.ndarray:
    be = topology.backend
    netlist_path = be.get("netlist", "")
    if not os.path.isabs(netlist_path):
        netlist_path = os.path.join(topology.base_dir, netlist_path)
    try:
        with open(netlist_path, encoding="utf-8") as fh:
            template = fh.read()
    except OSError as exc:
        raise SimulationError(f"cannot read netlist template {netlist_path}: {exc}") from exc
    rendered = emit_netlist(template, topology, x)
    analysis = be.get("analysis") or []
    if analysis:
        lines = rendered.rstrip().splitlines()
        tail = ""
        if lines and lines[-1].strip().lower() == ".end":
            lines = lines[:-1]
        rendered = "\n".join(lines) + "\n.control\n" + "\n".join(analysis) + "\n.endc\n.end\n" + tail
    exe = be.get("executable", "ngspice")
    with tempfile.TemporaryDirectory(prefix="circuitsmith-") as tmp:
        cir = os.path.join(tmp, "point.cir")
        with open(cir, "w", encoding="utf-8") as fh:
            fh.write(rendered)
        try:
            proc = subprocess.run([exe, "-b", cir], capture_output=True, text=True,
                                  timeout=float(be.get("timeout_s", 120)))
        except FileNotFoundError as exc:
            raise SimulationError(f"spice executable not found: {exe}") from exc
        except subprocess.TimeoutExpired as exc:
            raise SimulationError(f"spice timed out after {be.get('timeout_s', 120)}s") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout).strip().splitlines()[-3:]
        raise SimulationError(f"spice exited {proc.returncode}: {' | '.join(tail)}")
    vals = parse_measurements(proc.stdout + "\n" + proc.stderr, be.get("measurements", {}))
    missing = [m.name for m in topology.metrics if m.name not in vals]
    if missing:
        raise MeasurementParseError(f"spice output missing measurements for metrics: {missing}")
    return np.array([vals[m.name] for m in topology.metrics], dtype=np.float64)


def simulate_batch(topology: CircuitTopology, xs, clamp: bool = False) -> np.ndarray:
    """Metrics for a batch of parameter vectors; raises on any failed point."""
    xs = _check_batch(topology, xs, clamp)
    kind = topology.backend["kind"]
    if kind == "surrogate":
        model = topology.backend.get("model")
        fn = _SURROGATES.get(model)
        if fn is None:
            raise ValueError(f"unknown surrogate model {model!r}; known: {sorted(_SURROGATES)}")
        return fn(topology, xs)
    return np.stack([_spice_once(topology, row) for row in xs]) if len(xs) else \
        np.empty((0, topology.n_metrics))


def simulate(topology: CircuitTopology, x, clamp: bool = False) -> np.ndarray:
    """Metrics for a single parameter vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (topology.n_params,):
        raise ValueError(f"expected {topology.n_params} parameter values, got shape {x.shape}")
    return simulate_batch(topology, x[None, :], clamp=clamp)[0]


def simulate_predictions(topology: CircuitTopology, xs, clamp: bool = True):
    """Batch simulation that tolerates per-point failures.

    Returns (ys, failed_rows): failed rows are NaN in ys and listed by index.
    """
    xs = _check_batch(topology, xs, clamp)
    if topology.backend["kind"] == "surrogate":
        return simulate_batch(topology, xs), []
    ys = np.full((len(xs), topology.n_metrics), np.nan)
    failed = []
    for i, row in enumerate(xs):
        try:
            ys[i] = _spice_once(topology, row)
        except (SimulationError, MeasurementParseError) as exc:
            log.warning("simulation of predicted point %d failed: %s", i, exc)
            failed.append(i)
    return ys, failed


# --- grid sweep ---------------------------------------------------------------

def build_grid(topology: CircuitTopology) -> np.ndarray:
    """All grid points in row-major order, last parameter varying fastest."""
    axes = [p.grid_values() for p in topology.parameters]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def simulate_grid(topology: CircuitTopology, threads: int = 1) -> Dataset:
    """Simulate the whole grid into a dataset; failed points are dropped and
    their grid indices recorded under metadata["skipped_indices"]."""
    if threads < 1:
        raise ValueError("threads must be >= 1")
    xs = build_grid(topology)
    n = len(xs)
    kind = topology.backend["kind"]
    if kind == "surrogate":
        if threads == 1:
            ys = simulate_batch(topology, xs)
        else:
            chunks = np.array_split(np.arange(n), threads * 4)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda idx: simulate_batch(topology, xs[idx]), chunks))
            ys = np.concatenate(parts, axis=0)
        kept = np.arange(n, dtype=np.int64)
        skipped: list[int] = []
    else:
        results: list[np.ndarray | None] = [None] * n

        def work(i: int) -> None:
            try:
                results[i] = _spice_once(topology, xs[i])
            except (SimulationError, MeasurementParseError) as exc:
                log.warning("grid point %d failed, dropping it: %s", i, exc)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(n)))
        kept = np.array([i for i, r in enumerate(results) if r is not None], dtype=np.int64)
        skipped = [i for i, r in enumerate(results) if r is None]
        ys = np.stack([results[i] for i in kept]) if len(kept) else \
            np.empty((0, topology.n_metrics))
        xs = xs[kept]
    return Dataset(topology.id, Provenance.D0, xs, ys, source_indices=kept,
                   metadata={"backend": kind, "skipped_indices": skipped})
