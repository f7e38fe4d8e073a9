"""Contextual-MDP wrapper: problems, features, masking, rollout, scoring.

Port condition codes: 0 = decap allowed, 1 = keep-out, 2 = probing port.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import pdn
from .errors import ContractViolation

ALLOWED, KEEPOUT, PROBE = 0, 1, 2

PROBLEM_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Problem:
    n_rows: int
    n_cols: int
    probe: int
    keepout: frozenset

    def __post_init__(self):
        n = self.n_rows * self.n_cols
        if not (0 <= self.probe < n):
            raise ContractViolation("probe out of range")
        if any(not (0 <= k < n) for k in self.keepout):
            raise ContractViolation("keep-out index out of range")
        if self.probe in self.keepout:
            raise ContractViolation("probe may not be in the keep-out set")

    @property
    def n_ports(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def allowed_ports(self) -> tuple:
        blocked = self.keepout | {self.probe}
        return tuple(p for p in range(self.n_ports) if p not in blocked)

    def to_dict(self) -> dict:
        return {"rows": self.n_rows, "cols": self.n_cols,
                "probe": self.probe, "keepout": sorted(self.keepout)}

    @staticmethod
    def from_dict(d: dict) -> "Problem":
        return Problem(d["rows"], d["cols"], d["probe"], frozenset(d["keepout"]))

    def canonical_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


Placement = tuple  # ordered distinct feasible port indices


@dataclass(frozen=True)
class State:
    problem: Problem
    chosen: tuple = ()

    def __post_init__(self):
        blocked = self.problem.keepout | {self.problem.probe}
        if len(set(self.chosen)) != len(self.chosen):
            raise ContractViolation("duplicate action in state")
        if any(a in blocked for a in self.chosen):
            raise ContractViolation("chosen action on probe or keep-out port")


def gen_problem(rng, n_rows: int, n_cols: int, keepout_max: int) -> Problem:
    """One random problem: uniform probe, 0..keepout_max keep-outs.

    rng is an integer seed or a numpy Generator (PCG64 for seeds, which is
    platform-stable).
    """
    n = n_rows * n_cols
    if keepout_max >= n - 1:
        raise ContractViolation("keepout_max too large for the board")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    probe = int(rng.integers(n))
    n_keep = int(rng.integers(keepout_max + 1))
    others = np.array([p for p in range(n) if p != probe])
    keepout = rng.choice(others, size=n_keep, replace=False)
    return Problem(n_rows, n_cols, probe, frozenset(int(k) for k in keepout))


def gen_problem_set(seed, count: int, n_rows: int, n_cols: int,
                    keepout_max: int, exclude_hashes=()) -> list:
    """count distinct problems, disjoint from exclude_hashes by rejection."""
    rng = np.random.Generator(np.random.PCG64(seed))
    seen = set(exclude_hashes)
    out = []
    while len(out) < count:
        p = gen_problem(rng, n_rows, n_cols, keepout_max)
        h = p.canonical_hash()
        if h in seen:
            continue
        seen.add(h)
        out.append(p)
    return out


def feasible_actions(state: State) -> set:
    blocked = state.problem.keepout | {state.problem.probe} | set(state.chosen)
    return {p for p in range(state.problem.n_ports) if p not in blocked}


def step(state: State, action: int) -> State:
    if action not in feasible_actions(state):
        raise ContractViolation(f"infeasible action {action}")
    return State(state.problem, state.chosen + (action,))


def validate_placement(problem: Problem, placement) -> tuple:
    """Check the trajectory is feasible step by step; return it as a tuple."""
    s = State(problem)
    for a in placement:
        s = step(s, int(a))
    return s.chosen


def encode_features(problem: Problem) -> np.ndarray:
    """(n_ports, 5) array: x_norm, y_norm, condition one-hot(3)."""
    n = problem.n_ports
    feats = np.zeros((n, 5))
    rows, cols = problem.n_rows, problem.n_cols
    idx = np.arange(n)
    r, c = idx // cols, idx % cols
    feats[:, 0] = c / (cols - 1) if cols > 1 else 0.0
    feats[:, 1] = r / (rows - 1) if rows > 1 else 0.0
    cond = np.full(n, ALLOWED)
    cond[list(problem.keepout)] = KEEPOUT
    cond[problem.probe] = PROBE
    feats[idx, 2 + cond] = 1.0
    return feats


class Evaluator:
    """Scores placements against the simulator, caching the bare sweep.

    The bare port-impedance sweep depends only on the stack, so one sweep
    per board size serves every problem and placement. Each evaluate()
    performs one Schur termination per frequency and counts as one
    simulator call.
    """

    def __init__(self, config: pdn.SimConfig):
        self.config = config
        self._sweep: pdn.FrequencySweepZ | None = None
        self.count = 0

    def _bare_sweep(self) -> pdn.FrequencySweepZ:
        if self._sweep is None:
            stack = self.config.stack
            ports = range(stack.chip.n_cells)
            self._sweep = pdn.solve_z_ports(stack, ports, self.config.grid)
        return self._sweep

    def bare_profile(self, problem: Problem) -> np.ndarray:
        sweep = self._bare_sweep()
        i = sweep.port_index(problem.probe)
        return np.abs(sweep.z[:, i, i])

    def final_profile(self, problem: Problem, placement) -> np.ndarray:
        return pdn.attach_decaps(self._bare_sweep(), problem.probe,
                                 list(placement), self.config.decap)

    def evaluate(self, problem: Problem, placement) -> float:
        """Objective J for one placement; exactly permutation-invariant."""
        if problem.n_rows != self.config.stack.chip.n_rows or \
           problem.n_cols != self.config.stack.chip.n_cols:
            raise ContractViolation("problem board does not match the stack")
        placement = validate_placement(problem, placement)
        z_init = self.bare_profile(problem)
        z_final = self.final_profile(problem, placement)
        self.count += 1
        return pdn.objective(z_init, z_final, self.config.grid)


def write_problem_file(path, problems) -> None:
    doc = {"schema_version": PROBLEM_SCHEMA_VERSION,
           "problems": [p.to_dict() for p in problems]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_problem_file(path) -> list:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != PROBLEM_SCHEMA_VERSION:
        raise ContractViolation("unsupported problem file schema version")
    return [Problem.from_dict(d) for d in doc["problems"]]
