"""Policy-to-joint-action decoding with the four inference techniques.

Pre-sampling: static legality masks plus a ban on recently visited cells
and optional treatment of completed agents as obstacles. Post-sampling:
recursive recovery of vertex/swap conflicts until the joint action is
provably conflict-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import gridworld as gw
from . import policy as pol


@dataclass
class DecoderConfig:
    tau: float = 2.0
    history: int = 5
    tcao: bool = True
    history_enabled: bool = True
    seed: int = 0
    mode: str = "sample"  # "sample" | "greedy"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.history < 0:
            raise ValueError(f"history size must be >= 0, got {self.history}")
        if self.mode not in ("sample", "greedy"):
            raise ValueError(f"mode must be 'sample' or 'greedy', got {self.mode!r}")


@dataclass
class EpisodeResult:
    reached: list  # per-agent bool
    completion_times: list  # per-agent int or None
    steps: int
    success: float  # fraction of agents that reached their goal
    trace: Optional[list] = None  # joint action per step when recorded


def legality_mask(
    state: gw.WorldState, gmap: gw.GridMap, agent: int, tcao: bool = False
) -> np.ndarray:
    """Allowed <=> target in bounds, not an obstacle, and (tcao) not a parked agent."""
    blocked: set = set()
    if tcao:
        blocked = {
            a.position for j, a in enumerate(state.agents) if j != agent and a.done
        }
    pos = state.agents[agent].position
    mask = np.zeros(pol.N_ACTIONS, dtype=bool)
    mask[gw.Action.STAY] = True
    for action in range(1, pol.N_ACTIONS):
        tgt = gw.apply_action(pos, action)
        mask[action] = gmap.is_free(tgt) and tgt not in blocked
    return mask


def history_mask(agent_state: gw.AgentState, h: int) -> np.ndarray:
    """Allowed <=> target not among the last h visited cells; Stay always allowed."""
    mask = np.ones(pol.N_ACTIONS, dtype=bool)
    if h <= 0 or not agent_state.history:
        return mask
    recent = set(list(agent_state.history)[-h:])
    pos = agent_state.position
    for action in range(1, pol.N_ACTIONS):
        if gw.apply_action(pos, action) in recent:
            mask[action] = False
    return mask


def propose_action(
    dist: np.ndarray,
    legal: np.ndarray,
    hist: np.ndarray,
    mode: str,
    rng: np.random.Generator,
) -> int:
    """Mask, renormalize, then sample or argmax.

    If legality+history zero out all mass, the history mask is dropped
    (legality is a hard constraint); Stay is the final fallback.
    """
    probs = np.where(legal & hist, dist, 0.0)
    total = probs.sum()
    if total <= 0.0:
        probs = np.where(legal, dist, 0.0)
        total = probs.sum()
        if total <= 0.0:
            return int(gw.Action.STAY)
    probs = probs / total
    if mode == "greedy":
        return int(np.argmax(probs))
    return int(rng.choice(pol.N_ACTIONS, p=probs))


def resolve_conflicts(
    state: gw.WorldState, gmap: gw.GridMap, proposed: Sequence[int]
) -> list[int]:
    """Revert agents to Stay until the joint action has no vertex/swap conflicts.

    Swaps revert both agents; movers into an occupied-by-stayer cell
    revert; among movers racing for a free cell the lowest index wins.
    Each pass only grows the reverted set, so this terminates.
    """
    actions = [int(a) for a in proposed]
    n = len(actions)
    while True:
        targets = [gw.apply_action(a.position, act) for a, act in zip(state.agents, actions)]
        changed = False
        for i in range(n):
            for j in range(i + 1, n):
                if (
                    targets[i] == state.agents[j].position
                    and targets[j] == state.agents[i].position
                    and targets[i] != targets[j]
                ):
                    if actions[i] != gw.Action.STAY:
                        actions[i] = int(gw.Action.STAY)
                        changed = True
                    if actions[j] != gw.Action.STAY:
                        actions[j] = int(gw.Action.STAY)
                        changed = True
        if changed:
            continue
        by_target: dict = {}
        for i, tgt in enumerate(targets):
            by_target.setdefault(tgt, []).append(i)
        for tgt, members in by_target.items():
            if len(members) < 2:
                continue
            stayers = [i for i in members if actions[i] == gw.Action.STAY]
            keeper = stayers[0] if stayers else members[0]
            for i in members:
                if i != keeper and actions[i] != gw.Action.STAY:
                    actions[i] = int(gw.Action.STAY)
                    changed = True
        if not changed:
            return actions


def decode_step(
    state: gw.WorldState,
    gmap: gw.GridMap,
    weights: pol.Weights,
    config: DecoderConfig,
    rng: np.random.Generator,
) -> tuple[list[int], gw.WorldState]:
    """One conflict-free joint step driven by the policy."""
    n = len(state.agents)
    active = [i for i, a in enumerate(state.agents) if not a.done]
    actions = [int(gw.Action.STAY)] * n
    if active:
        obs = np.empty((len(active), 4, gw.FOV, gw.FOV), dtype=np.float32)
        goal = np.empty((len(active), 3), dtype=np.float32)
        for k, i in enumerate(active):
            o = gw.encode_observation(state, gmap, i, tcao=config.tcao)
            obs[k] = o.channels
            goal[k] = o.goal_vector
        logits = pol.forward_batch(weights, obs, goal)
        dists = pol.softmax_with_temperature(logits, config.tau)
        for k, i in enumerate(active):
            legal = legality_mask(state, gmap, i, tcao=config.tcao)
            hist = (
                history_mask(state.agents[i], config.history)
                if config.history_enabled
                else np.ones(pol.N_ACTIONS, dtype=bool)
            )
            actions[i] = propose_action(dists[k], legal, hist, config.mode, rng)
    actions = resolve_conflicts(state, gmap, actions)
    gw.step(state, gmap, actions)
    return actions, state


def run_episode(
    gmap: gw.GridMap,
    scenario: gw.Scenario,
    weights: pol.Weights,
    config: DecoderConfig,
    max_steps: int,
    record_trace: bool = False,
) -> EpisodeResult:
    """Decode until all agents are done or max_steps elapse."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = np.random.default_rng(config.seed)
    state = gw.WorldState.from_scenario(scenario, history_size=config.history)
    n = scenario.n_agents
    completion: list = [0 if a.done else None for a in state.agents]
    trace: list = [] if record_trace else None
    for _ in range(max_steps):
        if all(a.done for a in state.agents):
            break
        actions, state = decode_step(state, gmap, weights, config, rng)
        if record_trace:
            trace.append(actions)
        for i, agent in enumerate(state.agents):
            if agent.done and completion[i] is None:
                completion[i] = state.time
    reached = [a.done for a in state.agents]
    return EpisodeResult(
        reached=reached,
        completion_times=completion,
        steps=state.time,
        success=sum(reached) / n,
        trace=trace,
    )


def default_max_steps(map_size: int) -> int:
    """Evaluation step budget: 256 up to 40x40, 386 for larger maps."""
    return 256 if map_size <= 40 else 386
