"""Layered RLGC grid model of a power distribution network.

The stack is a chip grid optionally sitting on a package grid. Each grid
cell is one electrical node with a shunt G + jwC to ground; orthogonally
adjacent cells of the same layer are joined by a series R + jwL branch.
Chip nodes connect to their nearest package node (centered alignment)
through a via branch; a zero via inductance is an ideal short and the two
nodes are merged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ContractViolation, NumericFailure

TWO_PI = 2.0 * np.pi

# Residual bound for declaring a nodal solve failed.
SOLVE_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class UnitCellParams:
    resistance_ohm: float
    inductance_henry: float
    conductance_siemens: float
    capacitance_farad: float
    width_meter: float

    def __post_init__(self):
        for name in ("resistance_ohm", "inductance_henry", "conductance_siemens",
                     "capacitance_farad", "width_meter"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if self.resistance_ohm == 0 and self.inductance_henry == 0:
            raise ContractViolation("degenerate series branch: R and L both zero")


# Per-cell electrical parameters of the verification stack.
CHIP_CELL = UnitCellParams(
    resistance_ohm=0.26,
    inductance_henry=22e-12,
    conductance_siemens=1.2e-3,
    capacitance_farad=0.77e-12,
    width_meter=300e-6,
)
PACKAGE_CELL = UnitCellParams(
    resistance_ohm=0.093,
    inductance_henry=0.25e-9,
    conductance_siemens=5.4e-6,
    capacitance_farad=0.045e-12,
    width_meter=0.5e-3,
)


@dataclass(frozen=True)
class GridSpec:
    n_rows: int
    n_cols: int
    cell: UnitCellParams

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ContractViolation("grid dimensions must be positive")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols


@dataclass(frozen=True)
class StackSpec:
    chip: GridSpec
    package: GridSpec | None = None
    via_inductance_henry: float = 0.0

    def __post_init__(self):
        if self.via_inductance_henry < 0:
            raise ContractViolation("via inductance must be >= 0")
        if self.package is not None:
            chip_w = self.chip.n_cols * self.chip.cell.width_meter
            chip_h = self.chip.n_rows * self.chip.cell.width_meter
            pkg_w = self.package.n_cols * self.package.cell.width_meter
            pkg_h = self.package.n_rows * self.package.cell.width_meter
            if pkg_w < chip_w or pkg_h < chip_h:
                raise ContractViolation("package extent must cover the chip")


@dataclass(frozen=True)
class DecapModel:
    """Series-RLC decap attached from a port node to ground."""
    r_ohm: float = 0.01
    l_henry: float = 1e-12
    c_farad: float = 1e-9

    def __post_init__(self):
        if self.r_ohm < 0 or self.l_henry < 0:
            raise ContractViolation("decap R and L must be >= 0")
        if self.c_farad <= 0:
            raise ContractViolation("decap C must be > 0")


@dataclass(frozen=True)
class FreqGrid:
    points_hz: tuple

    def __post_init__(self):
        pts = np.asarray(self.points_hz, dtype=np.float64)
        if pts.ndim != 1 or len(pts) < 1:
            raise ContractViolation("frequency grid must be a 1-D list")
        if np.any(pts <= 0) or np.any(np.diff(pts) <= 0):
            raise ContractViolation("frequencies must be positive and strictly increasing")

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.points_hz, dtype=np.float64)

    def __len__(self):
        return len(self.points_hz)


def make_freq_grid(n: int, f_min_hz: float, f_max_hz: float) -> FreqGrid:
    """n equally spaced frequencies including both endpoints."""
    if n < 2:
        raise ContractViolation("need at least 2 frequency points")
    if f_min_hz <= 0 or f_max_hz <= f_min_hz:
        raise ContractViolation("need 0 < f_min < f_max")
    return FreqGrid(tuple(np.linspace(f_min_hz, f_max_hz, n)))


def default_freq_grid() -> FreqGrid:
    """201 points linear from 200 MHz to 20 GHz."""
    return make_freq_grid(201, 2.0e8, 2.0e10)


def decap_impedance(d: DecapModel, f_hz) -> complex:
    """Series-RLC impedance r + jwL + 1/(jwC)."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f <= 0):
        raise ContractViolation("frequency must be positive")
    w = TWO_PI * f
    z = d.r_ohm + 1j * (w * d.l_henry - 1.0 / (w * d.c_farad))
    return complex(z) if np.isscalar(f_hz) else z


def _cell_centers(grid: GridSpec, offset_x: float, offset_y: float):
    """Physical center coordinates of every cell, row-major order."""
    w = grid.cell.width_meter
    cols = (np.arange(grid.n_cols) + 0.5) * w + offset_x
    rows = (np.arange(grid.n_rows) + 0.5) * w + offset_y
    xs = np.tile(cols, grid.n_rows)
    ys = np.repeat(rows, grid.n_cols)
    return xs, ys


def chip_to_package_map(spec: StackSpec) -> np.ndarray:
    """Nearest package node for each chip node, chip centered on package.

    Ties break toward the lower package index (deterministic).
    """
    if spec.package is None:
        raise ContractViolation("stack has no package layer")
    chip, pkg = spec.chip, spec.package
    pkg_w = pkg.n_cols * pkg.cell.width_meter
    pkg_h = pkg.n_rows * pkg.cell.width_meter
    chip_w = chip.n_cols * chip.cell.width_meter
    chip_h = chip.n_rows * chip.cell.width_meter
    cx, cy = _cell_centers(chip, (pkg_w - chip_w) / 2.0, (pkg_h - chip_h) / 2.0)
    px, py = _cell_centers(pkg, 0.0, 0.0)
    d2 = (cx[:, None] - px[None, :]) ** 2 + (cy[:, None] - py[None, :]) ** 2
    return np.argmin(d2, axis=1)


class StackTopology:
    """Frequency-independent structure of the nodal admittance matrix.

    Built once per stack; admittance values are stamped per frequency.
    Zero-inductance vias merge chip and package nodes.
    """

    def __init__(self, spec: StackSpec):
        self.spec = spec
        chip = spec.chip
        n_chip = chip.n_cells
        n_pkg = spec.package.n_cells if spec.package is not None else 0
        n_raw = n_chip + n_pkg

        parent = np.arange(n_raw)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        via_branches = []
        if spec.package is not None:
            pkg_of = chip_to_package_map(spec)
            if spec.via_inductance_henry == 0.0:
                for i in range(n_chip):
                    a, b = find(i), find(n_chip + pkg_of[i])
                    if a != b:
                        parent[max(a, b)] = min(a, b)
            else:
                via_branches = [(i, n_chip + int(pkg_of[i])) for i in range(n_chip)]

        reps = np.array([find(i) for i in range(n_raw)])
        uniq, node_of = np.unique(reps, return_inverse=True)
        self.n_nodes = len(uniq)
        self.chip_port_nodes = node_of[:n_chip].copy()

        def grid_branches(grid, base):
            out = []
            for r in range(grid.n_rows):
                for c in range(grid.n_cols):
                    i = base + r * grid.n_cols + c
                    if c + 1 < grid.n_cols:
                        out.append((i, i + 1))
                    if r + 1 < grid.n_rows:
                        out.append((i, i + grid.n_cols))
            return out

        # Series branches: (node_a, node_b, R, L); parallel duplicates may
        # appear after merges and simply stamp twice.
        branches = []
        for a, b in grid_branches(chip, 0):
            branches.append((node_of[a], node_of[b],
                             chip.cell.resistance_ohm, chip.cell.inductance_henry))
        if spec.package is not None:
            for a, b in grid_branches(spec.package, n_chip):
                branches.append((node_of[a], node_of[b],
                                 spec.package.cell.resistance_ohm,
                                 spec.package.cell.inductance_henry))
            for a, b in via_branches:
                branches.append((node_of[a], node_of[b],
                                 0.0, spec.via_inductance_henry))
        branches = [(a, b, r, l) for (a, b, r, l) in branches if a != b]

        self._br_a = np.array([b[0] for b in branches], dtype=np.int64)
        self._br_b = np.array([b[1] for b in branches], dtype=np.int64)
        self._br_r = np.array([b[2] for b in branches], dtype=np.float64)
        self._br_l = np.array([b[3] for b in branches], dtype=np.float64)

        # Shunt G and C accumulated per merged node.
        self._sh_g = np.zeros(self.n_nodes)
        self._sh_c = np.zeros(self.n_nodes)
        np.add.at(self._sh_g, node_of[:n_chip], chip.cell.conductance_siemens)
        np.add.at(self._sh_c, node_of[:n_chip], chip.cell.capacitance_farad)
        if spec.package is not None:
            np.add.at(self._sh_g, node_of[n_chip:], spec.package.cell.conductance_siemens)
            np.add.at(self._sh_c, node_of[n_chip:], spec.package.cell.capacitance_farad)

        a, b = self._br_a, self._br_b
        nodes = np.arange(self.n_nodes)
        self._rows = np.concatenate([a, b, a, b, nodes])
        self._cols = np.concatenate([a, b, b, a, nodes])

    def admittance(self, f_hz: float) -> sp.csc_matrix:
        if f_hz <= 0:
            raise ContractViolation("frequency must be positive")
        w = TWO_PI * f_hz
        y_br = 1.0 / (self._br_r + 1j * w * self._br_l)
        y_sh = self._sh_g + 1j * w * self._sh_c
        vals = np.concatenate([y_br, y_br, -y_br, -y_br, y_sh])
        y = sp.coo_matrix((vals, (self._rows, self._cols)),
                          shape=(self.n_nodes, self.n_nodes))
        return y.tocsc()


def assemble_admittance(spec: StackSpec, f_hz: float) -> sp.csc_matrix:
    """Nodal admittance matrix of the stack at one frequency."""
    return StackTopology(spec).admittance(f_hz)


@dataclass(frozen=True)
class FrequencySweepZ:
    """Port impedance matrices over a frequency grid.

    ports are chip cell indices; z has shape (n_freq, n_ports, n_ports).
    """
    ports: tuple
    grid: FreqGrid
    z: np.ndarray = field(repr=False)

    def port_index(self, port: int) -> int:
        try:
            return self.ports.index(port)
        except ValueError:
            raise ContractViolation(f"port {port} not in sweep") from None


def solve_z_ports(spec: StackSpec, ports, grid: FreqGrid,
                  topology: StackTopology | None = None) -> FrequencySweepZ:
    """Z[i][j](f) = voltage at port i for unit current injected at port j."""
    ports = tuple(int(p) for p in ports)
    if len(set(ports)) != len(ports):
        raise ContractViolation("ports must be distinct")
    topo = topology if topology is not None else StackTopology(spec)
    if any(p < 0 or p >= spec.chip.n_cells for p in ports):
        raise ContractViolation("ports must be chip cell indices")
    nodes = topo.chip_port_nodes[list(ports)]
    n, npts = topo.n_nodes, len(ports)
    freqs = grid.points
    z = np.empty((len(freqs), npts, npts), dtype=np.complex128)
    rhs = np.zeros((n, npts), dtype=np.complex128)
    rhs[nodes, np.arange(npts)] = 1.0
    for k, f in enumerate(freqs):
        y = topo.admittance(f)
        try:
            lu = splu(y)
            v = lu.solve(rhs)
        except RuntimeError as exc:
            raise NumericFailure(f"singular system at {f:g} Hz", k) from exc
        resid = np.linalg.norm(y @ v - rhs, axis=0)
        if not np.all(np.isfinite(v)) or np.max(resid) > SOLVE_RESIDUAL_TOL:
            raise NumericFailure(f"nodal solve failed at {f:g} Hz", k)
        z[k] = v[nodes, :]
    return FrequencySweepZ(ports, grid, z)


def attach_decaps(z_bare: FrequencySweepZ, probe: int, decap_ports,
                  d: DecapModel) -> np.ndarray:
    """|Z| at the probe after terminating decap ports with the decap model.

    Schur reduction per frequency: Z' = Zpp - Zpc (Zcc + diag(z_d))^-1 Zcp.
    decap_ports are sorted ascending internally, so the result is
    bit-identical under input permutation.
    """
    decap_ports = [int(p) for p in decap_ports]
    if len(set(decap_ports)) != len(decap_ports):
        raise ContractViolation("decap ports must be distinct")
    if probe in decap_ports:
        raise ContractViolation("probe may not carry a decap")
    pi = z_bare.port_index(probe)
    if not decap_ports:
        return np.abs(z_bare.z[:, pi, pi])
    ci = [z_bare.port_index(p) for p in sorted(decap_ports)]
    zpp = z_bare.z[:, pi, pi]
    zpc = z_bare.z[:, pi, ci]
    zcp = z_bare.z[:, ci, pi]
    zcc = z_bare.z[np.ix_(np.arange(len(z_bare.grid)), ci, ci)]
    zd = decap_impedance(d, z_bare.grid.points)
    k = len(ci)
    a = zcc + zd[:, None, None] * np.eye(k)[None, :, :]
    b = zcp[:, :, None]
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("singular decap termination solve") from exc
    resid = np.linalg.norm(a @ x - b, axis=(1, 2)) / np.linalg.norm(b, axis=(1, 2))
    bad = np.flatnonzero(~np.isfinite(resid) | (resid > 1e-6))
    if bad.size:
        raise NumericFailure("ill-conditioned decap termination solve",
                             int(bad[0]))
    z_probe = zpp - (zpc[:, None, :] @ x)[:, 0, 0]
    return np.abs(z_probe)


def objective(z_init: np.ndarray, z_final: np.ndarray, grid: FreqGrid) -> float:
    """Impedance-suppression score: sum over f of (zi - zf) * 1GHz/f."""
    z_init = np.asarray(z_init, dtype=np.float64)
    z_final = np.asarray(z_final, dtype=np.float64)
    if z_init.shape != (len(grid),) or z_final.shape != (len(grid),):
        raise ContractViolation("profile length must match the frequency grid")
    return float(np.sum((z_init - z_final) * (1e9 / grid.points)))


def write_profile_csv(path, grid: FreqGrid, profile: np.ndarray) -> None:
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape != (len(grid),):
        raise ContractViolation("profile length must match the frequency grid")
    with open(path, "w", newline="") as fh:
        fh.write("frequency_hz,z_ohm\n")
        for f, z in zip(grid.points, profile):
            fh.write(f"{f!r},{z!r}\n")


# --- simulator configuration file -----------------------------------------

_CELL_SCHEMA = {
    "type": "object",
    "properties": {
        "rows": {"type": "integer", "minimum": 1},
        "cols": {"type": "integer", "minimum": 1},
        "R": {"type": "number", "minimum": 0},
        "L": {"type": "number", "minimum": 0},
        "G": {"type": "number", "minimum": 0},
        "C": {"type": "number", "minimum": 0},
        "W": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["rows", "cols", "R", "L", "G", "C", "W"],
    "additionalProperties": False,
}

SIM_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "chip": _CELL_SCHEMA,
        "package": _CELL_SCHEMA,
        "via_l": {"type": "number", "minimum": 0},
        "decap": {
            "type": "object",
            "properties": {
                "r": {"type": "number", "minimum": 0},
                "l": {"type": "number", "minimum": 0},
                "c": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["r", "l", "c"],
            "additionalProperties": False,
        },
        "freq": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 2},
                "fmin": {"type": "number", "exclusiveMinimum": 0},
                "fmax": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["n", "fmin", "fmax"],
            "additionalProperties": False,
        },
    },
    "required": ["chip", "via_l", "decap", "freq"],
    "additionalProperties": False,
}


def _grid_to_dict(g: GridSpec) -> dict:
    return {"rows": g.n_rows, "cols": g.n_cols,
            "R": g.cell.resistance_ohm, "L": g.cell.inductance_henry,
            "G": g.cell.conductance_siemens, "C": g.cell.capacitance_farad,
            "W": g.cell.width_meter}


def _grid_from_dict(d: dict) -> GridSpec:
    cell = UnitCellParams(d["R"], d["L"], d["G"], d["C"], d["W"])
    return GridSpec(d["rows"], d["cols"], cell)


@dataclass(frozen=True)
class SimConfig:
    """Everything the simulator needs: stack, decap model, frequency grid."""
    stack: StackSpec
    decap: DecapModel
    grid: FreqGrid

    def to_dict(self) -> dict:
        out = {"chip": _grid_to_dict(self.stack.chip),
               "via_l": self.stack.via_inductance_henry,
               "decap": {"r": self.decap.r_ohm, "l": self.decap.l_henry,
                         "c": self.decap.c_farad},
               "freq": {"n": len(self.grid),
                        "fmin": float(self.grid.points[0]),
                        "fmax": float(self.grid.points[-1])}}
        if self.stack.package is not None:
            out["package"] = _grid_to_dict(self.stack.package)
        return out

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        import jsonschema
        try:
            jsonschema.validate(d, SIM_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ContractViolation(f"bad simulator config: {exc.message}") from exc
        stack = StackSpec(
            chip=_grid_from_dict(d["chip"]),
            package=_grid_from_dict(d["package"]) if "package" in d else None,
            via_inductance_henry=d["via_l"],
        )
        decap = DecapModel(d["decap"]["r"], d["decap"]["l"], d["decap"]["c"])
        grid = make_freq_grid(d["freq"]["n"], d["freq"]["fmin"], d["freq"]["fmax"])
        return SimConfig(stack, decap, grid)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "SimConfig":
        with open(path) as fh:
            return SimConfig.from_dict(json.load(fh))


def paper_scale_config() -> SimConfig:
    """10x10 chip on a 40x40 package, default decap, 201-point sweep."""
    stack = StackSpec(chip=GridSpec(10, 10, CHIP_CELL),
                      package=GridSpec(40, 40, PACKAGE_CELL))
    return SimConfig(stack, DecapModel(), default_freq_grid())


def chip_only_config(n_rows: int, n_cols: int,
                     grid: FreqGrid | None = None) -> SimConfig:
    """Single-layer chip stack; the fast desk-scale configuration."""
    stack = StackSpec(chip=GridSpec(n_rows, n_cols, CHIP_CELL))
    return SimConfig(stack, DecapModel(), grid or default_freq_grid())
