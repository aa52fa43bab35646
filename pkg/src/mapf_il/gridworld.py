"""Deterministic grid-world MAPF environment.

Maps, scenarios, state transitions, conflict checking, and per-agent
observation encoding. Coordinates are (row, col) with row 0 at the top.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

Position = tuple[int, int]  # (row, col)

FOV = 9
FREE_GLYPH = "."
OBSTACLE_GLYPHS = ("@", "T")


class Action(IntEnum):
    STAY = 0
    UP = 1
    DOWN = 2
    LEFT = 3
    RIGHT = 4


# row/col deltas indexed by Action
ACTION_DELTAS: tuple[tuple[int, int], ...] = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))

DELTA_TO_ACTION = {d: Action(i) for i, d in enumerate(ACTION_DELTAS)}


class MapFormatError(ValueError):
    """Raised when a .map or .scen stream violates the expected grammar."""


class ScenarioError(RuntimeError):
    """Raised when scenario generation cannot satisfy its invariants."""


class ConflictError(RuntimeError):
    """Raised when step() is handed a conflicting joint action."""


class GridMap:
    """Immutable rectangular obstacle grid."""

    def __init__(self, obstacles: np.ndarray):
        obstacles = np.asarray(obstacles, dtype=bool)
        if obstacles.ndim != 2 or obstacles.shape[0] < 1 or obstacles.shape[1] < 1:
            raise ValueError(f"obstacle grid must be 2-D and non-empty, got shape {obstacles.shape}")
        self._obstacles = obstacles.copy()
        self._obstacles.flags.writeable = False
        self._padded_cache: dict[int, np.ndarray] = {}

    @property
    def height(self) -> int:
        return self._obstacles.shape[0]

    @property
    def width(self) -> int:
        return self._obstacles.shape[1]

    @property
    def obstacles(self) -> np.ndarray:
        return self._obstacles

    def in_bounds(self, pos: Position) -> bool:
        r, c = pos
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, pos: Position) -> bool:
        return self.in_bounds(pos) and not self._obstacles[pos]

    def free_cells(self) -> list[Position]:
        rows, cols = np.nonzero(~self._obstacles)
        return [(int(r), int(c)) for r, c in zip(rows, cols)]

    def padded_obstacles(self, margin: int) -> np.ndarray:
        """Obstacle grid padded with `margin` rings of obstacles (cached)."""
        if margin not in self._padded_cache:
            padded = np.pad(
                self._obstacles.astype(np.float32), margin, constant_values=1.0
            )
            padded.flags.writeable = False
            self._padded_cache[margin] = padded
        return self._padded_cache[margin]

    def __eq__(self, other) -> bool:
        return isinstance(other, GridMap) and np.array_equal(self._obstacles, other._obstacles)

    def __repr__(self) -> str:
        return f"GridMap({self.height}x{self.width}, {int(self._obstacles.sum())} obstacles)"


@dataclass(frozen=True)
class Scenario:
    """Ordered (start, goal) pairs, one per agent."""

    pairs: tuple[tuple[Position, Position], ...]

    @property
    def n_agents(self) -> int:
        return len(self.pairs)

    def starts(self) -> list[Position]:
        return [p[0] for p in self.pairs]

    def goals(self) -> list[Position]:
        return [p[1] for p in self.pairs]


@dataclass
class AgentState:
    position: Position
    goal: Position
    done: bool
    history: deque  # most recent previously-visited cells, maxlen = H

    @property
    def at_goal(self) -> bool:
        return self.position == self.goal


@dataclass
class WorldState:
    time: int
    agents: list[AgentState]

    @classmethod
    def from_scenario(cls, scenario: Scenario, history_size: int = 0) -> "WorldState":
        agents = [
            AgentState(
                position=start,
                goal=goal,
                done=(start == goal),
                history=deque(maxlen=max(history_size, 0)),
            )
            for start, goal in scenario.pairs
        ]
        return cls(time=0, agents=agents)


@dataclass(frozen=True)
class Conflict:
    kind: str  # "vertex" | "swap" | "obstacle" | "out_of_bound"
    agents: tuple[int, ...]
    cells: tuple[Position, ...]
    time: int


def apply_action(pos: Position, action: int) -> Position:
    """Candidate cell after `action`; may lie out of bounds."""
    dr, dc = ACTION_DELTAS[action]
    return (pos[0] + dr, pos[1] + dc)


def check_conflicts(
    state: WorldState, gmap: GridMap, proposed: Sequence[int]
) -> list[Conflict]:
    """All vertex / swap / obstacle / out-of-bound conflicts of a joint action."""
    n = len(state.agents)
    if len(proposed) != n:
        raise ValueError(f"expected {n} actions, got {len(proposed)}")
    t = state.time + 1
    targets = [apply_action(a.position, act) for a, act in zip(state.agents, proposed)]
    conflicts: list[Conflict] = []
    for i, tgt in enumerate(targets):
        if not gmap.in_bounds(tgt):
            conflicts.append(Conflict("out_of_bound", (i,), (tgt,), t))
        elif gmap.obstacles[tgt]:
            conflicts.append(Conflict("obstacle", (i,), (tgt,), t))
    for i in range(n):
        for j in range(i + 1, n):
            if targets[i] == targets[j]:
                conflicts.append(Conflict("vertex", (i, j), (targets[i],), t))
            elif (
                targets[i] == state.agents[j].position
                and targets[j] == state.agents[i].position
            ):
                conflicts.append(
                    Conflict("swap", (i, j), (state.agents[i].position, state.agents[j].position), t)
                )
    return conflicts


def step(state: WorldState, gmap: GridMap, proposed: Sequence[int]) -> WorldState:
    """Apply a conflict-free joint action in place; returns the same state."""
    conflicts = check_conflicts(state, gmap, proposed)
    if conflicts:
        raise ConflictError(f"joint action has {len(conflicts)} conflicts: {conflicts[:3]}")
    for agent, act in zip(state.agents, proposed):
        prev = agent.position
        agent.position = apply_action(prev, act)
        if agent.history.maxlen:
            agent.history.append(prev)
        agent.done = agent.position == agent.goal
    state.time += 1
    return state


# ---------------------------------------------------------------------------
# MovingAI .map / .scen interchange
# ---------------------------------------------------------------------------


def parse_map(text: str) -> GridMap:
    """Parse a MovingAI .map stream ('.' free, '@'/'T' obstacle)."""
    lines = text.splitlines()
    if len(lines) < 4:
        raise MapFormatError("map header incomplete (need 4 header lines)")
    if lines[0].strip() != "type octile":
        raise MapFormatError(f"line 1: expected 'type octile', got {lines[0]!r}")
    try:
        height = int(lines[1].split()[1])
        width = int(lines[2].split()[1])
    except (IndexError, ValueError) as exc:
        raise MapFormatError(f"lines 2-3: malformed height/width header: {exc}") from exc
    if lines[1].split()[0] != "height" or lines[2].split()[0] != "width":
        raise MapFormatError("lines 2-3: expected 'height <H>' then 'width <W>'")
    if height < 1 or width < 1:
        raise MapFormatError(f"line 2-3: dimensions must be >= 1, got {height}x{width}")
    if lines[3].strip() != "map":
        raise MapFormatError(f"line 4: expected 'map', got {lines[3]!r}")
    body = lines[4 : 4 + height]
    if len(body) < height:
        raise MapFormatError(f"line {4 + len(body) + 1}: expected {height} map rows, got {len(body)}")
    obstacles = np.zeros((height, width), dtype=bool)
    for r, row in enumerate(body):
        if len(row) != width:
            raise MapFormatError(f"line {5 + r}: row length {len(row)} != width {width}")
        for c, glyph in enumerate(row):
            if glyph in OBSTACLE_GLYPHS:
                obstacles[r, c] = True
            elif glyph != FREE_GLYPH:
                raise MapFormatError(f"line {5 + r}: unknown glyph {glyph!r} at column {c}")
    return GridMap(obstacles)


def emit_map(gmap: GridMap) -> str:
    """Inverse of parse_map on its image ('@' for obstacles)."""
    rows = [
        "".join("@" if gmap.obstacles[r, c] else FREE_GLYPH for c in range(gmap.width))
        for r in range(gmap.height)
    ]
    return "\n".join(
        ["type octile", f"height {gmap.height}", f"width {gmap.width}", "map"] + rows
    ) + "\n"


def parse_scen(text: str) -> Scenario:
    """Parse a MovingAI .scen stream (column-before-row field order)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("version"):
        raise MapFormatError("line 1: expected 'version' header")
    pairs = []
    for ix, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 9:
            raise MapFormatError(f"line {ix}: expected 9 tab-separated fields, got {len(fields)}")
        try:
            sc, sr, gc, gr = (int(fields[k]) for k in (4, 5, 6, 7))
        except ValueError as exc:
            raise MapFormatError(f"line {ix}: non-integer coordinate: {exc}") from exc
        pairs.append(((sr, sc), (gr, gc)))
    return Scenario(tuple(pairs))


def emit_scen(scenario: Scenario, gmap: GridMap, map_name: str) -> str:
    lines = ["version 1"]
    for (sr, sc), (gr, gc) in scenario.pairs:
        lines.append(
            "\t".join(
                str(v)
                for v in (0, map_name, gmap.width, gmap.height, sc, sr, gc, gr, 0)
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Random instance generation
# ---------------------------------------------------------------------------


def generate_random_map(width: int, height: int, density: float, seed: int) -> GridMap:
    """Random map with exactly round(density*W*H) obstacles, seeded."""
    if not 0.0 <= density < 1.0:
        raise ValueError(f"density must lie in [0,1), got {density}")
    n_cells = width * height
    n_obstacles = int(round(density * n_cells))
    rng = np.random.default_rng(seed)
    picked = rng.choice(n_cells, size=n_obstacles, replace=False)
    obstacles = np.zeros(n_cells, dtype=bool)
    obstacles[picked] = True
    return GridMap(obstacles.reshape(height, width))


def connected_components(gmap: GridMap) -> np.ndarray:
    """4-connected component label per cell; 0 on obstacles."""
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, _ = ndimage.label(~gmap.obstacles, structure=structure)
    return labels


def generate_scenario(
    gmap: GridMap, n_agents: int, seed: int, max_retries: int = 100
) -> Scenario:
    """Sample start/goal pairs within shared connected components.

    Starts are distinct, goals are distinct, and every pair is connected.
    """
    free = gmap.free_cells()
    if len(free) < 2 * n_agents:
        raise ScenarioError(
            f"need at least {2 * n_agents} free cells for {n_agents} agents, map has {len(free)}"
        )
    labels = connected_components(gmap)
    rng = np.random.default_rng(seed)
    used_starts: set[Position] = set()
    used_goals: set[Position] = set()
    pairs = []
    for _ in range(n_agents):
        for attempt in range(max_retries):
            start_pool = [c for c in free if c not in used_starts]
            start = start_pool[int(rng.integers(len(start_pool)))]
            comp = labels[start]
            goal_pool = [
                c for c in free if c not in used_goals and c != start and labels[c] == comp
            ]
            if not goal_pool:
                continue
            goal = goal_pool[int(rng.integers(len(goal_pool)))]
            used_starts.add(start)
            used_goals.add(goal)
            pairs.append((start, goal))
            break
        else:
            raise ScenarioError(
                f"could not place agent {len(pairs)} after {max_retries} retries"
            )
    return Scenario(tuple(pairs))


# ---------------------------------------------------------------------------
# Observation encoding
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    channels: np.ndarray  # (4, FOV, FOV) float32, entries in {0,1}
    goal_vector: np.ndarray  # (3,) float32


def encode_observation(
    state: WorldState,
    gmap: GridMap,
    agent: int,
    tcao: bool,
    project_goal: bool = True,
) -> Observation:
    """Egocentric 4-channel FOV tensor plus goal direction/distance vector.

    Channel 0: static obstacles and out-of-map padding (plus completed
    agents when `tcao`). Channel 1: other active agents. Channel 2: own
    goal (projected onto the FOV boundary when off-screen and
    `project_goal`). Channel 3: goals of other agents visible in the FOV.
    """
    if not 0 <= agent < len(state.agents):
        raise IndexError(f"agent index {agent} out of range")
    half = FOV // 2
    me = state.agents[agent]
    r, c = me.position
    channels = np.zeros((4, FOV, FOV), dtype=np.float32)
    channels[0] = gmap.padded_obstacles(half)[r : r + FOV, c : c + FOV]
    for j, other in enumerate(state.agents):
        if j == agent:
            continue
        orow, ocol = other.position
        dr, dc = orow - r + half, ocol - c + half
        visible = 0 <= dr < FOV and 0 <= dc < FOV
        if visible:
            if tcao and other.done:
                channels[0, dr, dc] = 1.0
            else:
                channels[1, dr, dc] = 1.0
                grow, gcol = other.goal
                gdr, gdc = grow - r + half, gcol - c + half
                if 0 <= gdr < FOV and 0 <= gdc < FOV:
                    channels[3, gdr, gdc] = 1.0
    gr, gc = me.goal
    gdr, gdc = gr - r + half, gc - c + half
    if 0 <= gdr < FOV and 0 <= gdc < FOV:
        channels[2, gdr, gdc] = 1.0
    elif project_goal:
        channels[2, min(max(gdr, 0), FOV - 1), min(max(gdc, 0), FOV - 1)] = 1.0

    dr_goal, dc_goal = gr - r, gc - c
    if dr_goal == 0 and dc_goal == 0:
        goal_vec = np.zeros(3, dtype=np.float32)
    else:
        norm = float(np.hypot(dr_goal, dc_goal))
        d_max = float(gmap.width + gmap.height)
        goal_vec = np.array(
            [dr_goal / norm, dc_goal / norm, min(norm, d_max) / d_max], dtype=np.float32
        )
    return Observation(channels=channels, goal_vector=goal_vec)
