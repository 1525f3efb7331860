"""Core domain types: parameter and metric specifications, circuit topologies,
(parameter, metric) datasets, and the threshold / lexicographic / Pareto order
predicates everything else is built on.

Conventions: metric values live in the strictly positive orthant; each metric
carries a direction (+1 higher-is-better, -1 lower-is-better) and a priority
rank (1 = most important); comparisons always happen on direction-signed
values so "better" is uniformly "greater".
"""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator, Sequence

import numpy as np

# Absolute slack on the (end-start)/step ratio: absorbs binary-fraction error
# on decimal steps without ever overcounting (ratios here are < 1e3).
GRID_TOL = 1e-9


class Provenance(str, enum.Enum):
    """How a dataset was produced."""

    D0 = "d0"                    # exhaustive grid simulation
    DEPS = "deps"                # one perturbed query per grid point
    DSTAR_ZERO = "dstar-0"       # lex-best feasible target per exact query
    DSTAR_EPS = "dstar-eps"      # lex-best feasible target per perturbed query
    DM_EPS = "dm-eps"            # m perturbation replicates, concatenated
    DBAR_M_EPS = "dbar-m-eps"    # top-m lex-best feasible targets per perturbed query

    @property
    def perturbed(self) -> bool:
        return self in (Provenance.DEPS, Provenance.DSTAR_EPS,
                        Provenance.DM_EPS, Provenance.DBAR_M_EPS)

    @property
    def multi(self) -> bool:
        return self in (Provenance.DM_EPS, Provenance.DBAR_M_EPS)


@dataclass(frozen=True)
class ParameterSpec:
    """One sizing knob: an inclusive arithmetic grid [start, start+step, ..., end]."""

    name: str
    unit: str
    start: float
    step: float
    end: float

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("parameter name must be non-empty")
        for label, v in (("start", self.start), ("step", self.step), ("end", self.end)):
            if not math.isfinite(v):
                raise ValueError(f"parameter {self.name}: {label} must be finite")
        if self.step <= 0:
            raise ValueError(f"parameter {self.name}: step must be > 0")
        if self.end < self.start:
            raise ValueError(f"parameter {self.name}: end must be >= start")

    def grid_count(self) -> int:
        return int(math.floor((self.end - self.start) / self.step + GRID_TOL)) + 1

    def grid_values(self) -> np.ndarray:
        # start + i*step, never accumulated addition
        return self.start + np.arange(self.grid_count(), dtype=np.float64) * self.step

    def contains(self, value: float) -> bool:
        tol = GRID_TOL * max(1.0, abs(self.start), abs(self.end), self.step)
        return (self.start - tol) <= value <= (self.end + tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "unit": self.unit,
                "start": self.start, "step": self.step, "end": self.end}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSpec":
        return cls(name=d["name"], unit=d["unit"],
                   start=float(d["start"]), step=float(d["step"]), end=float(d["end"]))


@dataclass(frozen=True)
class MetricSpec:
    """One performance metric: direction +1 maximizes, -1 minimizes; priority 1 is
    the most important rank in lexicographic comparisons."""

    name: str
    unit: str
    direction: int
    priority: int

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("metric name must be non-empty")
        if self.direction not in (1, -1):
            raise ValueError(f"metric {self.name}: direction must be +1 or -1")
        if self.priority < 1:
            raise ValueError(f"metric {self.name}: priority must be >= 1")

    def to_dict(self) -> dict:
        return {"name": self.name, "unit": self.unit,
                "direction": self.direction, "priority": self.priority}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSpec":
        return cls(name=d["name"], unit=d["unit"],
                   direction=int(d["direction"]), priority=int(d["priority"]))


def _check_priorities(metrics: Sequence[MetricSpec]) -> None:
    if sorted(m.priority for m in metrics) != list(range(1, len(metrics) + 1)):
        names = {m.name: m.priority for m in metrics}
        raise ValueError(f"metric priorities must be a permutation of 1..k, got {names}")


def priority_indices(metrics: Sequence[MetricSpec]) -> list[int]:
    """Metric indices sorted most-important-first."""
    _check_priorities(metrics)
    return sorted(range(len(metrics)), key=lambda i: metrics[i].priority)


def directions(metrics: Sequence[MetricSpec]) -> np.ndarray:
    return np.array([m.direction for m in metrics], dtype=np.float64)


@dataclass
class CircuitTopology:
    """A circuit family: its sizing grid, its metrics, and how to simulate it."""

    id: str
    parameters: list[ParameterSpec]
    metrics: list[MetricSpec]
    backend: dict
    tradeoffs: dict = field(default_factory=dict)
    notes: str = ""
    base_dir: str = ""  # directory of the config file, for relative backend paths

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("topology id must be non-empty")
        if not self.parameters or not self.metrics:
            raise ValueError(f"topology {self.id}: needs at least one parameter and one metric")
        pnames = [p.name for p in self.parameters]
        if len(set(pnames)) != len(pnames):
            raise ValueError(f"topology {self.id}: duplicate parameter names")
        mnames = [m.name for m in self.metrics]
        if len(set(mnames)) != len(mnames):
            raise ValueError(f"topology {self.id}: duplicate metric names")
        _check_priorities(self.metrics)
        if self.backend.get("kind") not in ("surrogate", "spice"):
            raise ValueError(f"topology {self.id}: backend kind must be 'surrogate' or 'spice'")

    @property
    def n_params(self) -> int:
        return len(self.parameters)

    @property
    def n_metrics(self) -> int:
        return len(self.metrics)

    @property
    def parameter_names(self) -> list[str]:
        return [p.name for p in self.parameters]

    @property
    def metric_names(self) -> list[str]:
        return [m.name for m in self.metrics]

    def grid_size(self) -> int:
        return math.prod(p.grid_count() for p in self.parameters)

    def directions(self) -> np.ndarray:
        return directions(self.metrics)

    def priority_order(self) -> list[int]:
        return priority_indices(self.metrics)

    def param_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([p.start for p in self.parameters], dtype=np.float64)
        hi = np.array([p.end for p in self.parameters], dtype=np.float64)
        return lo, hi

    def clamp(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.param_bounds()
        return np.clip(np.asarray(x, dtype=np.float64), lo, hi)

    def with_priorities(self, names_in_rank_order: Sequence[str]) -> "CircuitTopology":
        """Same topology with metric priorities reassigned (rank 1 first)."""
        if sorted(names_in_rank_order) != sorted(self.metric_names):
            raise ValueError(
                f"priority order {list(names_in_rank_order)} is not a permutation "
                f"of metrics {self.metric_names}")
        rank = {name: i + 1 for i, name in enumerate(names_in_rank_order)}
        new_metrics = [MetricSpec(m.name, m.unit, m.direction, rank[m.name])
                       for m in self.metrics]
        return CircuitTopology(self.id, list(self.parameters), new_metrics,
                               dict(self.backend), dict(self.tradeoffs),
                               self.notes, self.base_dir)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parameters": [p.to_dict() for p in self.parameters],
            "metrics": [m.to_dict() for m in self.metrics],
            "backend": self.backend,
            "tradeoffs": self.tradeoffs,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = "") -> "CircuitTopology":
        return cls(
            id=d["id"],
            parameters=[ParameterSpec.from_dict(p) for p in d["parameters"]],
            metrics=[MetricSpec.from_dict(m) for m in d["metrics"]],
            backend=dict(d["backend"]),
            tradeoffs=dict(d.get("tradeoffs", {})),
            notes=d.get("notes", ""),
            base_dir=base_dir,
        )


ENV_CONFIG_DIR = "CIRCUITS_CONFIG_DIR"


def _builtin_config_root():
    return resources.files(__package__) / "configs"


def builtin_topologies() -> list[str]:
    root = _builtin_config_root()
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_topology(name: str, config_dir: str | None = None) -> CircuitTopology:
    """Load a topology config by id or by explicit path.

    Id lookup order: config_dir argument, then $CIRCUITS_CONFIG_DIR, then the
    built-in configs shipped with the package.
    """
    if name.endswith(".json") or os.path.sep in name:
        if not os.path.exists(name):
            raise ValueError(f"topology config not found: {name}")
        with open(name, encoding="utf-8") as fh:
            return CircuitTopology.from_dict(json.load(fh),
                                             base_dir=os.path.dirname(os.path.abspath(name)))
    search = [d for d in (config_dir, os.environ.get(ENV_CONFIG_DIR)) if d]
    for d in search:
        cand = os.path.join(d, name + ".json")
        if os.path.exists(cand):
            with open(cand, encoding="utf-8") as fh:
                return CircuitTopology.from_dict(json.load(fh), base_dir=os.path.abspath(d))
    builtin = _builtin_config_root() / (name + ".json")
    if builtin.is_file():
        return CircuitTopology.from_dict(json.loads(builtin.read_text(encoding="utf-8")))
    known = builtin_topologies()
    raise ValueError(f"unknown circuit {name!r}; known ids: {', '.join(known)}")


# ---------------------------------------------------------------------------
# Order predicates on metric vectors
# ---------------------------------------------------------------------------

def _metric_array(y, metrics: Sequence[MetricSpec]) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.shape != (len(metrics),):
        raise ValueError(f"expected {len(metrics)} metric values, got shape {arr.shape}")
    return arr


def meets_threshold(y_new, y_ref, metrics: Sequence[MetricSpec]) -> bool:
    """True iff y_new is at least as good as y_ref on every metric (direction-signed)."""
    a = _metric_array(y_new, metrics)
    b = _metric_array(y_ref, metrics)
    lam = directions(metrics)
    return bool(np.all(lam * a >= lam * b))


def lex_better(y_a, y_b, metrics: Sequence[MetricSpec]) -> bool:
    """Strict lexicographic order over priority-ranked, direction-signed metrics."""
    a = _metric_array(y_a, metrics)
    b = _metric_array(y_b, metrics)
    for i in priority_indices(metrics):
        sa = metrics[i].direction * a[i]
        sb = metrics[i].direction * b[i]
        if sa > sb:
            return True
        if sa < sb:
            return False
    return False


def dominates(y_a, y_b, metrics: Sequence[MetricSpec]) -> bool:
    """Pareto dominance: weakly better everywhere, strictly better somewhere."""
    a = _metric_array(y_a, metrics)
    b = _metric_array(y_b, metrics)
    return meets_threshold(a, b, metrics) and not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignPoint:
    """One (parameter vector, metric vector) pair plus the grid index it traces to."""

    x: np.ndarray
    y: np.ndarray
    source_index: int


class Dataset:
    """Ordered, column-array-backed collection of design points.

    `source_indices[i]` traces row i's parameter vector back to the grid
    dataset it originated from (-1 when untraceable). Metadata consistency is
    enforced: epsilon/seed present iff the provenance is a perturbed variant,
    m present iff it is a multi-sample variant.
    """

    def __init__(self, topology_id: str, provenance: Provenance | str,
                 xs, ys, source_indices=None, metadata: dict | None = None,
                 validate: bool = True):
        self.topology_id = str(topology_id)
        self.provenance = Provenance(provenance)
        self.xs = np.ascontiguousarray(xs, dtype=np.float64)
        self.ys = np.ascontiguousarray(ys, dtype=np.float64)
        if self.xs.ndim != 2 or self.ys.ndim != 2:
            raise ValueError("xs and ys must be 2-D arrays")
        if len(self.xs) != len(self.ys):
            raise ValueError(f"xs has {len(self.xs)} rows but ys has {len(self.ys)}")
        if source_indices is None:
            source_indices = np.arange(len(self.xs), dtype=np.int64)
        self.source_indices = np.ascontiguousarray(source_indices, dtype=np.int64)
        if self.source_indices.shape != (len(self.xs),):
            raise ValueError("source_indices length must match the number of rows")
        self.metadata = dict(metadata or {})
        if validate:
            self._check()

    def _check(self) -> None:
        if len(self.xs) and not np.isfinite(self.xs).all():
            raise ValueError("non-finite parameter values")
        if len(self.ys):
            if not np.isfinite(self.ys).all():
                raise ValueError("non-finite metric values")
            if self.ys.min() <= 0:
                raise ValueError("metric values must be strictly positive")
        wants = {"epsilon": self.provenance.perturbed,
                 "seed": self.provenance.perturbed,
                 "m": self.provenance.multi}
        for key, needed in wants.items():
            if needed and key not in self.metadata:
                raise ValueError(f"{self.provenance.value} dataset requires metadata[{key!r}]")
            if not needed and key in self.metadata:
                raise ValueError(f"{self.provenance.value} dataset must not carry metadata[{key!r}]")

    def __len__(self) -> int:
        return len(self.xs)

    def __getitem__(self, i: int) -> DesignPoint:
        return DesignPoint(self.xs[i], self.ys[i], int(self.source_indices[i]))

    def __iter__(self) -> Iterator[DesignPoint]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices) -> "Dataset":
        """Row subset; keeps provenance, metadata and original source indices."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.topology_id, self.provenance,
                       self.xs[idx], self.ys[idx], self.source_indices[idx],
                       metadata=dict(self.metadata), validate=False)

    def validate_against(self, topology: CircuitTopology) -> None:
        if self.topology_id != topology.id:
            raise ValueError(f"dataset is for {self.topology_id!r}, not {topology.id!r}")
        if self.xs.shape[1] != topology.n_params:
            raise ValueError(f"dataset has {self.xs.shape[1]} parameter columns, "
                             f"topology {topology.id} has {topology.n_params}")
        if self.ys.shape[1] != topology.n_metrics:
            raise ValueError(f"dataset has {self.ys.shape[1]} metric columns, "
                             f"topology {topology.id} has {topology.n_metrics}")
        for j, spec in enumerate(topology.parameters):
            col = self.xs[:, j]
            if len(col) and not (spec.contains(col.min()) and spec.contains(col.max())):
                raise ValueError(f"parameter {spec.name} has values outside "
                                 f"[{spec.start}, {spec.end}]")
