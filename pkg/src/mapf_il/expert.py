"""Collision-free expert path generation.

Low level: space-time A* with vertex/edge constraints, in plain (optimal)
and focal (bounded-suboptimal, conflict-avoiding) flavors. High level:
optimal CBS and focal ECBS honoring a suboptimality factor w. A
brute-force joint-state search is included as a test oracle.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gridworld import (
    ACTION_DELTAS,
    Conflict,
    GridMap,
    Position,
    Scenario,
)


class SearchFailure(RuntimeError):
    """No solution found within the horizon / node budget."""


class SolutionFormatError(ValueError):
    """Structurally invalid solution (wrong endpoints, bad adjacency, ...)."""


@dataclass(frozen=True)
class Constraint:
    """Vertex constraint when prev is None, else edge constraint prev->cell at t."""

    agent: int
    time: int
    cell: Position
    prev: Optional[Position] = None


Path = list  # list[Position], time-indexed, cells[0] = start, cells[-1] = goal


@dataclass
class Solution:
    paths: list  # one Path per agent
    sum_of_costs: int
    makespan: int

    @classmethod
    def from_paths(cls, paths: Sequence[Path]) -> "Solution":
        paths = [list(p) for p in paths]
        costs = [len(p) - 1 for p in paths]
        return cls(paths=paths, sum_of_costs=sum(costs), makespan=max(costs) if costs else 0)


def path_at(path: Path, t: int) -> Position:
    """Position at time t with stay-at-target padding."""
    return path[t] if t < len(path) else path[-1]


def bfs_distance(gmap: GridMap, goal: Position) -> np.ndarray:
    """True single-agent distance-to-goal map; -1 where unreachable."""
    dist = np.full((gmap.height, gmap.width), -1, dtype=np.int32)
    if not gmap.is_free(goal):
        return dist
    dist[goal] = 0
    queue = deque([goal])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ACTION_DELTAS[1:]:
            nxt = (r + dr, c + dc)
            if gmap.is_free(nxt) and dist[nxt] < 0:
                dist[nxt] = dist[r, c] + 1
                queue.append(nxt)
    return dist


class ConflictTable:
    """Occupancy index over other agents' paths (goal-parked after arrival)."""

    def __init__(self, paths: Sequence[Path]):
        self.vertex: dict[tuple[Position, int], int] = {}
        self.edge: set[tuple[Position, Position, int]] = set()
        self.parked: list[tuple[Position, int]] = []  # (goal cell, arrival time)
        self.max_t = 0
        for path in paths:
            self.max_t = max(self.max_t, len(path) - 1)
            for t, cell in enumerate(path):
                key = (cell, t)
                self.vertex[key] = self.vertex.get(key, 0) + 1
                if t > 0:
                    self.edge.add((path[t - 1], cell, t))
            self.parked.append((path[-1], len(path) - 1))

    def count(self, prev: Position, cell: Position, t: int) -> int:
        """Conflicts a move prev->cell arriving at time t would create."""
        n = self.vertex.get((cell, t), 0)
        for goal, arrival in self.parked:
            if goal == cell and t > arrival:
                n += 1
        if (cell, prev, t) in self.edge:
            n += 1
        return n


def _constraint_sets(constraints: Sequence[Constraint], agent: int):
    vset: set[tuple[Position, int]] = set()
    eset: set[tuple[Position, Position, int]] = set()
    for con in constraints:
        if con.agent != agent:
            continue
        if con.prev is None:
            vset.add((con.cell, con.time))
        else:
            eset.add((con.prev, con.cell, con.time))
    return vset, eset


def _search(
    gmap: GridMap,
    start: Position,
    goal: Position,
    vset: set,
    eset: set,
    horizon: int,
    w: float = 1.0,
    conflict_table: Optional[ConflictTable] = None,
    heuristic: Optional[np.ndarray] = None,
) -> tuple[Optional[Path], int]:
    """Focal space-time A*; returns (path, f-min lower bound).

    With w=1 and no conflict table this is plain A* with the D7
    tie-breaking (smaller h, later g, then action/insertion order).
    """
    if heuristic is None:
        heuristic = bfs_distance(gmap, goal)
    h0 = int(heuristic[start])
    if h0 < 0:
        return None, 0
    goal_block = max((t for (cell, t) in vset if cell == goal), default=-1)

    counter = itertools.count()
    # node: (pos, t, nconf, parent)
    root = (start, 0, 0, None)
    # openf tracks f over all alive nodes (lazy deletion) for the f-min bound;
    # cand holds nodes not yet promoted to focal; focal orders by conflicts.
    seq0 = next(counter)
    openf = [(h0, seq0)]
    cand = [(h0, h0, 0, seq0, root)]
    focal: list = []
    alive: dict[int, bool] = {seq0: True}
    closed: set[tuple[Position, int]] = set()
    fmin = h0

    while openf:
        while openf and not alive.get(openf[0][1], False):
            heapq.heappop(openf)
        if not openf:
            break
        fmin = max(fmin, openf[0][0])
        bound = w * fmin + 1e-9
        while cand and cand[0][0] <= bound:
            f, h, neg_g, seq, node = heapq.heappop(cand)
            if alive.get(seq, False):
                heapq.heappush(focal, (node[2], f, h, neg_g, seq, node))
        while focal and not alive.get(focal[0][4], False):
            heapq.heappop(focal)
        if not focal:
            # numerical safety: promote the f-min candidate directly
            if not cand:
                break
            f, h, neg_g, seq, node = heapq.heappop(cand)
            if not alive.get(seq, False):
                continue
            heapq.heappush(focal, (node[2], f, h, neg_g, seq, node))
            continue
        _, f, h, neg_g, seq, node = heapq.heappop(focal)
        alive[seq] = False
        pos, t, nconf, _parent = node
        if (pos, t) in closed:
            continue
        closed.add((pos, t))
        if pos == goal and t > goal_block:
            cells = []
            cur = node
            while cur is not None:
                cells.append(cur[0])
                cur = cur[3]
            cells.reverse()
            return cells, fmin
        if t >= horizon:
            continue
        nt = t + 1
        for dr, dc in ACTION_DELTAS:
            nxt = (pos[0] + dr, pos[1] + dc)
            if not gmap.is_free(nxt):
                continue
            if (nxt, nt) in closed or (nxt, nt) in vset or (pos, nxt, nt) in eset:
                continue
            nh = int(heuristic[nxt])
            if nh < 0 or nt + nh > horizon:
                continue
            add = conflict_table.count(pos, nxt, nt) if conflict_table else 0
            child = (nxt, nt, nconf + add, node)
            cseq = next(counter)
            alive[cseq] = True
            nf = nt + nh
            heapq.heappush(openf, (nf, cseq))
            heapq.heappush(cand, (nf, nh, -nt, cseq, child))
    return None, fmin


def spacetime_astar(
    gmap: GridMap,
    start: Position,
    goal: Position,
    constraints: Sequence[Constraint] = (),
    horizon: Optional[int] = None,
    agent: int = 0,
) -> Path:
    """Minimal-completion-time constrained single-agent path."""
    if not gmap.is_free(start) or not gmap.is_free(goal):
        raise ValueError("start and goal must be free in-bounds cells")
    if horizon is None:
        horizon = default_horizon(gmap)
    vset, eset = _constraint_sets(constraints, agent)
    path, _ = _search(gmap, start, goal, vset, eset, horizon)
    if path is None:
        raise SearchFailure(f"no path {start}->{goal} within horizon {horizon}")
    return path


def default_horizon(gmap: GridMap) -> int:
    return 4 * (gmap.width + gmap.height)


def find_first_conflict(paths: Sequence[Path]) -> Optional[Conflict]:
    """Earliest conflict, lowest agent pair, under goal padding."""
    makespan = max(len(p) - 1 for p in paths)
    n = len(paths)
    for t in range(1, makespan + 1):
        for i in range(n):
            for j in range(i + 1, n):
                pi, pj = path_at(paths[i], t), path_at(paths[j], t)
                if pi == pj:
                    return Conflict("vertex", (i, j), (pi,), t)
                if pi == path_at(paths[j], t - 1) and pj == path_at(paths[i], t - 1):
                    return Conflict("swap", (i, j), (path_at(paths[i], t - 1), pi), t)
    return None


def count_conflicts(paths: Sequence[Path]) -> int:
    makespan = max(len(p) - 1 for p in paths)
    n = len(paths)
    total = 0
    for t in range(1, makespan + 1):
        for i in range(n):
            for j in range(i + 1, n):
                pi, pj = path_at(paths[i], t), path_at(paths[j], t)
                if pi == pj:
                    total += 1
                elif pi == path_at(paths[j], t - 1) and pj == path_at(paths[i], t - 1):
                    total += 1
    return total


def _branch_constraints(conflict: Conflict) -> list[Constraint]:
    if conflict.kind == "vertex":
        i, j = conflict.agents
        cell = conflict.cells[0]
        return [Constraint(i, conflict.time, cell), Constraint(j, conflict.time, cell)]
    i, j = conflict.agents
    ci, cj = conflict.cells  # positions of i and j before the swap
    return [
        Constraint(i, conflict.time, cj, prev=ci),
        Constraint(j, conflict.time, ci, prev=cj),
    ]


def cbs_solve(gmap: GridMap, scenario: Scenario, horizon: Optional[int] = None) -> Solution:
    """Optimal sum-of-costs CBS (best-first on cost, D7 tie-breaking)."""
    if horizon is None:
        horizon = default_horizon(gmap)
    heuristics = [bfs_distance(gmap, goal) for goal in scenario.goals()]
    paths = []
    for i, (start, goal) in enumerate(scenario.pairs):
        p, _ = _search(gmap, start, goal, set(), set(), horizon, heuristic=heuristics[i])
        if p is None:
            raise SearchFailure(f"agent {i}: no unconstrained path within horizon")
        paths.append(p)
    counter = itertools.count()
    root_cost = sum(len(p) - 1 for p in paths)
    open_heap = [(root_cost, count_conflicts(paths), next(counter), [], paths)]
    while open_heap:
        cost, _nconf, _, constraints, paths = heapq.heappop(open_heap)
        conflict = find_first_conflict(paths)
        if conflict is None:
            return Solution.from_paths(paths)
        for con in _branch_constraints(conflict):
            child_cons = constraints + [con]
            vset, eset = _constraint_sets(child_cons, con.agent)
            start, goal = scenario.pairs[con.agent]
            new_path, _ = _search(
                gmap, start, goal, vset, eset, horizon, heuristic=heuristics[con.agent]
            )
            if new_path is None:
                continue
            child_paths = list(paths)
            child_paths[con.agent] = new_path
            child_cost = sum(len(p) - 1 for p in child_paths)
            heapq.heappush(
                open_heap,
                (child_cost, count_conflicts(child_paths), next(counter), child_cons, child_paths),
            )
    raise SearchFailure("CBS exhausted its constraint tree (horizon too small?)")


def ecbs_solve(
    gmap: GridMap, scenario: Scenario, w: float = 1.2, horizon: Optional[int] = None
) -> Solution:
    """Focal-search ECBS: sum_of_costs <= w * optimal."""
    if w < 1.0:
        raise ValueError(f"suboptimality factor must be >= 1, got {w}")
    if horizon is None:
        horizon = default_horizon(gmap)
    heuristics = [bfs_distance(gmap, goal) for goal in scenario.goals()]
    n = scenario.n_agents

    def replan(agent: int, constraints: list, others: list) -> tuple[Optional[Path], int]:
        vset, eset = _constraint_sets(constraints, agent)
        table = ConflictTable([p for k, p in enumerate(others) if k != agent and p])
        start, goal = scenario.pairs[agent]
        return _search(
            gmap, start, goal, vset, eset, horizon,
            w=w, conflict_table=table, heuristic=heuristics[agent],
        )

    paths: list = [None] * n
    fmins = [0] * n
    for i in range(n):
        paths[i], fmins[i] = replan(i, [], paths[:i] + [[] for _ in range(n - i)])
        if paths[i] is None:
            raise SearchFailure(f"agent {i}: no unconstrained path within horizon")

    counter = itertools.count()
    # node tuple: (lb, cost, nconf, constraints, paths, fmins)
    root = (sum(fmins), sum(len(p) - 1 for p in paths), count_conflicts(paths), [], paths, fmins)
    seq0 = next(counter)
    openf = [(root[0], seq0)]
    cand = [(root[0], seq0, root)]
    focal: list = []
    alive = {seq0: True}
    lb_min = root[0]
    while openf:
        while openf and not alive.get(openf[0][1], False):
            heapq.heappop(openf)
        if not openf:
            break
        lb_min = max(lb_min, openf[0][0])
        bound = w * lb_min + 1e-9
        while cand and (cand[0][2][1] <= bound):
            lb, seq, node = heapq.heappop(cand)
            if alive.get(seq, False):
                heapq.heappush(focal, (node[2], node[1], seq, node))
        while focal and not alive.get(focal[0][2], False):
            heapq.heappop(focal)
        if not focal:
            if not cand:
                break
            lb, seq, node = heapq.heappop(cand)
            if not alive.get(seq, False):
                continue
            heapq.heappush(focal, (node[2], node[1], seq, node))
            continue
        _, _, seq, node = heapq.heappop(focal)
        alive[seq] = False
        lb, cost, nconf, constraints, paths, fmins = node
        conflict = find_first_conflict(paths)
        if conflict is None:
            return Solution.from_paths(paths)
        for con in _branch_constraints(conflict):
            child_cons = constraints + [con]
            new_path, new_fmin = replan(con.agent, child_cons, paths)
            if new_path is None:
                continue
            child_paths = list(paths)
            child_paths[con.agent] = new_path
            child_fmins = list(fmins)
            child_fmins[con.agent] = new_fmin
            child = (
                sum(child_fmins),
                sum(len(p) - 1 for p in child_paths),
                count_conflicts(child_paths),
                child_cons,
                child_paths,
                child_fmins,
            )
            cseq = next(counter)
            alive[cseq] = True
            heapq.heappush(openf, (child[0], cseq))
            heapq.heappush(cand, (child[0], cseq, child))
    raise SearchFailure("ECBS exhausted its constraint tree (horizon too small?)")


# ---------------------------------------------------------------------------
# Brute-force oracle (testing only)
# ---------------------------------------------------------------------------

ORACLE_MAX_AGENTS = 3
ORACLE_MAX_DIM = 8


def joint_state_oracle(
    gmap: GridMap, scenario: Scenario, horizon: Optional[int] = None
) -> int:
    """Provably optimal sum-of-costs via exhaustive joint-state search.

    Stays at goal are charged retroactively when an agent leaves its goal,
    so g at an all-at-goal state equals the completion-time sum exactly.
    """
    n = scenario.n_agents
    if n > ORACLE_MAX_AGENTS or gmap.height > ORACLE_MAX_DIM or gmap.width > ORACLE_MAX_DIM:
        raise ValueError(
            f"oracle guard: at most {ORACLE_MAX_AGENTS} agents on a "
            f"{ORACLE_MAX_DIM}x{ORACLE_MAX_DIM} map"
        )
    if horizon is None:
        horizon = default_horizon(gmap)
    goals = tuple(scenario.goals())
    dists = [bfs_distance(gmap, g) for g in goals]
    start = tuple(scenario.starts())
    for i, s in enumerate(start):
        if dists[i][s] < 0:
            raise SearchFailure(f"agent {i}: goal unreachable")

    def hval(positions) -> int:
        return sum(int(dists[i][p]) for i, p in enumerate(positions))

    counter = itertools.count()
    start_state = (start, (0,) * n, 0)  # positions, pending goal-waits, elapsed time
    best: dict = {(start, (0,) * n): 0}
    heap = [(hval(start), next(counter), 0, start_state)]
    moves_cache: dict[Position, list[Position]] = {}

    def moves(pos: Position) -> list[Position]:
        if pos not in moves_cache:
            out = [pos]
            for dr, dc in ACTION_DELTAS[1:]:
                nxt = (pos[0] + dr, pos[1] + dc)
                if gmap.is_free(nxt):
                    out.append(nxt)
            moves_cache[pos] = out
        return moves_cache[pos]

    while heap:
        f, _, g, (positions, waits, t) = heapq.heappop(heap)
        if best.get((positions, waits), g + 1) < g:
            continue
        if positions == goals:
            return g
        if t >= horizon:
            continue
        options = [moves(p) for p in positions]
        for targets in itertools.product(*options):
            if len(set(targets)) < n:
                continue
            swap = any(
                targets[i] == positions[j] and targets[j] == positions[i]
                for i in range(n)
                for j in range(i + 1, n)
            )
            if swap:
                continue
            ng = g
            nwaits = list(waits)
            for i in range(n):
                stays_at_goal = positions[i] == goals[i] and targets[i] == goals[i]
                if stays_at_goal:
                    nwaits[i] += 1
                elif positions[i] == goals[i]:
                    ng += nwaits[i] + 1
                    nwaits[i] = 0
                else:
                    ng += 1
            key = (targets, tuple(nwaits))
            if best.get(key, ng + 1) <= ng:
                continue
            best[key] = ng
            heapq.heappush(
                heap, (ng + hval(targets), next(counter), ng, (targets, tuple(nwaits), t + 1))
            )
    raise SearchFailure(f"no joint solution within horizon {horizon}")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_solution(gmap: GridMap, scenario: Scenario, solution: Solution) -> list[Conflict]:
    """Empty iff the goal-padded solution is conflict-free and well-formed."""
    paths = solution.paths
    if len(paths) != scenario.n_agents:
        raise SolutionFormatError(
            f"{len(paths)} paths for {scenario.n_agents} agents"
        )
    conflicts: list[Conflict] = []
    for i, path in enumerate(paths):
        start, goal = scenario.pairs[i]
        if not path or path[0] != start or path[-1] != goal:
            raise SolutionFormatError(f"agent {i}: endpoints do not match the scenario")
        for t, cell in enumerate(path):
            if not gmap.in_bounds(cell):
                conflicts.append(Conflict("out_of_bound", (i,), (cell,), t))
            elif gmap.obstacles[cell]:
                conflicts.append(Conflict("obstacle", (i,), (cell,), t))
            if t > 0:
                dr = abs(cell[0] - path[t - 1][0])
                dc = abs(cell[1] - path[t - 1][1])
                if dr + dc > 1:
                    raise SolutionFormatError(
                        f"agent {i}: non-adjacent move {path[t - 1]}->{cell} at t={t}"
                    )
    makespan = max(len(p) - 1 for p in paths)
    n = len(paths)
    for t in range(0, makespan + 1):
        for i in range(n):
            for j in range(i + 1, n):
                pi, pj = path_at(paths[i], t), path_at(paths[j], t)
                if pi == pj:
                    conflicts.append(Conflict("vertex", (i, j), (pi,), t))
                elif t > 0 and pi == path_at(paths[j], t - 1) and pj == path_at(paths[i], t - 1):
                    conflicts.append(
                        Conflict("swap", (i, j), (path_at(paths[i], t - 1), pi), t)
                    )
    return conflicts
