"""Analytical latency model for a multi-chunk convolution accelerator.

A design fixes one network-on-chip style, a PE budget, one loop mapping per
convolution layer and an assignment of layers onto 10 pipeline stages
(sub-accelerators). Each stage runs its layers sequentially; stages overlap
across input frames, so throughput is set by the slowest stage while the
start-up latency of a single frame is the sequential sum over all layers.

Per layer the model walks the usual six-dimensional loop nest (output
channels M, input channels C, output rows E, output columns F, kernel rows
R, kernel columns S) at two levels: DRAM -> global buffer tiles and global
buffer -> PE-array tiles. Compute cycles assume one MAC per PE per cycle
over the spatially unrolled tile; data-movement cycles follow a revisit
rule (a tensor is refetched once per iteration of any loop, outer to its
innermost non-trivial dependent loop, and held otherwise) and perfect
double buffering takes the maximum of compute, DRAM and buffer phases.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

DIMS = ("M", "C", "E", "F", "R", "S")

OUTPUT_PARALLEL = "output_parallel"
KERNEL_PARALLEL = "kernel_parallel"
KERNEL_OUTPUT_PARALLEL = "kernel_output_parallel"
NOC_KINDS = (OUTPUT_PARALLEL, KERNEL_PARALLEL, KERNEL_OUTPUT_PARALLEL)

# which loop dimensions may run spatially across the PE array
_SPATIAL = {
    OUTPUT_PARALLEL: frozenset({"M", "E", "F"}),
    KERNEL_PARALLEL: frozenset({"M", "C"}),
    KERNEL_OUTPUT_PARALLEL: frozenset({"M", "R", "F"}),
}

# which loop dimensions index each operand tensor
_DEPS = {
    "W": frozenset({"M", "C", "R", "S"}),
    "I": frozenset({"C", "E", "F", "R", "S"}),
    "O": frozenset({"M", "E", "F"}),
}

N_SUB_ACCELERATORS = 10


def spatial_dims(noc: str) -> frozenset:
    """Loop dimensions the given interconnect style can unroll spatially."""
    if noc not in _SPATIAL:
        raise ValueError(f"unknown NoC kind {noc!r}")
    return _SPATIAL[noc]


@dataclass(frozen=True)
class ConvDims:
    """Loop bounds of one convolution: out/in channels, output map, kernel."""

    m: int
    c: int
    e: int
    f: int
    r: int
    s: int
    u: int = 1
    depthwise: bool = False

    @property
    def macs(self) -> int:
        return self.m * self.c * self.e * self.f * self.r * self.s

    def sizes(self) -> dict:
        return {"M": self.m, "C": self.c, "E": self.e,
                "F": self.f, "R": self.r, "S": self.s}


@dataclass(frozen=True)
class Platform:
    """Deployment budgets; defaults are mid-size-FPGA-class stand-ins."""

    freq_hz: float = 200e6
    dram_bw: float = 16.0          # words per cycle
    gb_bw: float = 64.0            # words per cycle
    gb_capacity: int = 512 * 1024  # words per sub-accelerator buffer
    rf_capacity: int = 256         # words per PE (bookkeeping; see module doc)
    pe_limit: int = 900
    bytes_per_word: int = 2

    def __post_init__(self):
        for name in ("freq_hz", "dram_bw", "gb_bw", "gb_capacity",
                     "rf_capacity", "pe_limit", "bytes_per_word"):
            if getattr(self, name) <= 0:
                raise ValueError(f"platform field {name} must be positive")


DEFAULT_PLATFORM = Platform()


@dataclass
class Mapping:
    """Loop orders (outermost first) and per-dimension tile sizes."""

    loop_order_dram: tuple
    loop_order_gb: tuple
    tile_gb: dict
    tile_pe: dict

    def __post_init__(self):
        self.loop_order_dram = tuple(self.loop_order_dram)
        self.loop_order_gb = tuple(self.loop_order_gb)
        for order in (self.loop_order_dram, self.loop_order_gb):
            if sorted(order) != sorted(DIMS):
                raise ValueError(f"loop order {order} is not a permutation of {DIMS}")

    def to_dict(self) -> dict:
        return {
            "loop_order_dram": list(self.loop_order_dram),
            "loop_order_gb": list(self.loop_order_gb),
            "tile_gb": dict(self.tile_gb),
            "tile_pe": dict(self.tile_pe),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Mapping":
        return cls(loop_order_dram=tuple(payload["loop_order_dram"]),
                   loop_order_gb=tuple(payload["loop_order_gb"]),
                   tile_gb=dict(payload["tile_gb"]),
                   tile_pe=dict(payload["tile_pe"]))


def full_mapping(dims: ConvDims) -> Mapping:
    """Whole-layer tiles on a single PE; the trivial reference point."""
    sizes = dims.sizes()
    return Mapping(loop_order_dram=DIMS, loop_order_gb=DIMS,
                   tile_gb=dict(sizes), tile_pe={d: 1 for d in DIMS})


@dataclass
class AcceleratorDesign:
    """One concrete accelerator: interconnect, PE budget, mappings, stages."""

    noc: str
    max_pes: int
    mappings: list
    assignment: list

    def __post_init__(self):
        if self.noc not in NOC_KINDS:
            raise ValueError(f"unknown NoC kind {self.noc!r}")
        if len(self.mappings) != len(self.assignment):
            raise ValueError("one mapping and one stage id required per layer")
        for a in self.assignment:
            if not 0 <= a < N_SUB_ACCELERATORS:
                raise ValueError(f"stage id {a} outside [0, {N_SUB_ACCELERATORS})")

    def save(self, path: str) -> None:
        payload = {
            "noc": self.noc,
            "max_pes": self.max_pes,
            "assignment": [int(a) for a in self.assignment],
            "mappings": [m.to_dict() for m in self.mappings],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "AcceleratorDesign":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(noc=payload["noc"], max_pes=payload["max_pes"],
                   mappings=[Mapping.from_dict(m) for m in payload["mappings"]],
                   assignment=list(payload["assignment"]))


# ---------------------------------------------------------------------------
# Tiling menus
# ---------------------------------------------------------------------------

def divisors(n: int) -> list:
    return [d for d in range(1, n + 1) if n % d == 0]


def enumerate_tilings(dim: int) -> list:
    """All (tile_pe, tile_gb) pairs with tile_pe | tile_gb | dim."""
    if dim < 1:
        raise ValueError("dimension must be at least 1")
    return [(pe, gb) for gb in divisors(dim) for pe in divisors(gb)]


# ---------------------------------------------------------------------------
# Per-layer cost
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    compute_cycles: float
    dram_cycles: float
    gb_cycles: float
    total_cycles: float
    feasible: bool
    violations: list = field(default_factory=list)


def _tile_words(tensor: str, tile: dict, u: int) -> int:
    if tensor == "W":
        return tile["M"] * tile["C"] * tile["R"] * tile["S"]
    if tensor == "I":
        rows = (tile["E"] - 1) * u + tile["R"]
        cols = (tile["F"] - 1) * u + tile["S"]
        return tile["C"] * rows * cols
    return tile["M"] * tile["E"] * tile["F"]


def _fetch_count(order: tuple, trips: dict, deps: frozenset) -> int:
    """Times a tensor's tile set is pulled through a memory level.

    The tile is refetched once per iteration of every loop outer to (and
    including) its innermost non-trivial dependent loop; loops further in
    reuse the resident tile. Trivial (single-trip) loops never force
    refetches.
    """
    dep_positions = [i for i, d in enumerate(order) if d in deps and trips[d] > 1]
    if not dep_positions:
        return 1
    innermost = max(dep_positions)
    count = 1
    for i in range(innermost + 1):
        if trips[order[i]] > 1:
            count *= trips[order[i]]
    return count


def _level_words(order: tuple, trips: dict, tile: dict, u: int) -> int:
    return sum(_tile_words(t, tile, u) * _fetch_count(order, trips, _DEPS[t])
               for t in ("W", "I", "O"))


def check_mapping(dims: ConvDims, mapping: Mapping, noc: str, max_pes: int,
                  platform: Platform) -> list:
    """Structural and capacity violations of a mapping (empty when clean)."""
    sizes = dims.sizes()
    violations = []
    for d in DIMS:
        pe, gb = mapping.tile_pe[d], mapping.tile_gb[d]
        if pe < 1 or gb < 1 or gb % pe or sizes[d] % gb:
            violations.append(f"factorization:{d}")
        if pe > 1 and d not in spatial_dims(noc):
            violations.append(f"spatial_dim:{d}")
    pe_used = int(np.prod([mapping.tile_pe[d] for d in DIMS]))
    if pe_used > max_pes:
        violations.append(f"pe_count:{pe_used}>{max_pes}")
    buffer_words = (_tile_words("W", mapping.tile_gb, dims.u)
                    + _tile_words("I", mapping.tile_gb, dims.u)
                    + 2 * _tile_words("O", mapping.tile_gb, dims.u))
    if buffer_words > platform.gb_capacity:
        violations.append(f"gb_capacity:{buffer_words}>{platform.gb_capacity}")
    return violations


def estimate_layer(dims: ConvDims, mapping: Mapping, noc: str, max_pes: int,
                   platform: Platform) -> LayerCost:
    """Cycle estimate of one layer under one mapping.

    Compute assumes one MAC per PE per cycle over ceil-rounded tiles; DRAM
    and buffer phases move tile footprints times their revisit counts, and
    the three phases overlap perfectly (ping-pong buffering), so the layer
    costs their maximum.
    """
    violations = check_mapping(dims, mapping, noc, max_pes, platform)
    sizes = dims.sizes()

    trips_dram = {d: -(-sizes[d] // mapping.tile_gb[d]) for d in DIMS}
    trips_gb = {d: -(-mapping.tile_gb[d] // mapping.tile_pe[d]) for d in DIMS}
    compute = float(np.prod([trips_dram[d] for d in DIMS])
                    * np.prod([trips_gb[d] for d in DIMS]))

    dram_words = _level_words(mapping.loop_order_dram, trips_dram,
                              mapping.tile_gb, dims.u)
    per_tile_words = _level_words(mapping.loop_order_gb, trips_gb,
                                  mapping.tile_pe, dims.u)
    gb_words = per_tile_words * int(np.prod([trips_dram[d] for d in DIMS]))

    dram_cycles = dram_words / platform.dram_bw
    gb_cycles = gb_words / platform.gb_bw
    total = max(compute, dram_cycles, gb_cycles)
    return LayerCost(compute_cycles=compute, dram_cycles=dram_cycles,
                     gb_cycles=gb_cycles, total_cycles=total,
                     feasible=not violations, violations=violations)


# ---------------------------------------------------------------------------
# Whole-network report
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    layer_costs: list
    stage_cycles: list
    fps: float
    startup_s: float
    feasible: bool
    violations: list = field(default_factory=list)
    assignment: list = field(default_factory=list)

    @property
    def startup_ms(self) -> float:
        return self.startup_s * 1e3

    def write_csv(self, path: str, conv_dims=None) -> None:
        """One row per layer plus a summary row."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "macs", "stage", "compute_cycles",
                             "dram_cycles", "gb_cycles", "total_cycles",
                             "feasible", "violations"])
            for i, cost in enumerate(self.layer_costs):
                macs = conv_dims[i].macs if conv_dims else ""
                stage = self.assignment[i] if self.assignment else -1
                writer.writerow([i, macs, stage,
                                 repr(cost.compute_cycles), repr(cost.dram_cycles),
                                 repr(cost.gb_cycles), repr(cost.total_cycles),
                                 int(cost.feasible), ";".join(cost.violations)])
            writer.writerow(["summary", "", "", "", "", "",
                             repr(sum(c.total_cycles for c in self.layer_costs)),
                             int(self.feasible),
                             f"fps={self.fps!r};startup_ms={self.startup_ms!r}"])


def estimate_network(conv_dims: list, design: AcceleratorDesign,
                     platform: Platform = DEFAULT_PLATFORM) -> CostReport:
    """Pipeline report: per-layer costs, stage cycles, FPS, start-up latency.

    Stage cycles are the per-stage sums of layer cycles; steady-state FPS is
    freq over the slowest stage and the start-up latency is the strictly
    sequential single-frame walk over every layer.
    """
    if len(conv_dims) != len(design.mappings):
        raise ValueError(f"{len(conv_dims)} layers but {len(design.mappings)} mappings")
    if not conv_dims:
        raise ValueError("cannot cost an empty layer list")
    layer_costs = []
    violations = []
    for i, (dims, mapping) in enumerate(zip(conv_dims, design.mappings)):
        cost = estimate_layer(dims, mapping, design.noc, design.max_pes, platform)
        layer_costs.append(cost)
        violations += [f"layer{i}:{v}" for v in cost.violations]
    stage_cycles = [0.0] * N_SUB_ACCELERATORS
    for cost, stage in zip(layer_costs, design.assignment):
        stage_cycles[stage] += cost.total_cycles
    slowest = max(stage_cycles)
    return CostReport(
        layer_costs=layer_costs,
        stage_cycles=stage_cycles,
        fps=platform.freq_hz / slowest,
        startup_s=sum(c.total_cycles for c in layer_costs) / platform.freq_hz,
        feasible=not violations,
        violations=violations,
        assignment=list(design.assignment),
    )


def objective_cycles(report: CostReport, objective: str) -> float:
    """Scalar search cost: slowest-stage cycles (fps) or their sum (startup)."""
    if objective == "fps":
        return max(report.stage_cycles)
    if objective == "startup":
        return sum(c.total_cycles for c in report.layer_costs)
    raise ValueError(f"unknown objective {objective!r} (use 'fps' or 'startup')")
