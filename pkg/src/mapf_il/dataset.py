"""Supervised (observation, expert-action) pairs from expert solutions.

Replays each solution in the environment, emitting one sample per agent
per decision point before that agent's completion, plus corpus
materialization and the jsonl / path-file interchange formats.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import expert as ex
from . import gridworld as gw


class SampleFormatError(ValueError):
    """Raised on malformed sample or path files."""


@dataclass
class Sample:
    observation: gw.Observation
    expert_action: int


@dataclass
class CorpusConfig:
    map_sizes: tuple = (40, 80)
    maps_per_size: int = 100
    density: float = 0.3
    agent_counts: tuple = (4, 8, 16, 32, 64)
    suboptimality: float = 1.2
    seed: int = 0
    max_instance_retries: int = 10

    def to_dict(self) -> dict:
        return {
            "map_sizes": list(self.map_sizes),
            "maps_per_size": self.maps_per_size,
            "density": self.density,
            "agent_counts": list(self.agent_counts),
            "suboptimality": self.suboptimality,
            "seed": self.seed,
            "max_instance_retries": self.max_instance_retries,
        }


def derive_seed(master: int, *key: int) -> int:
    """Stable per-instance seed derived from the master seed."""
    return int(np.random.SeedSequence((master,) + tuple(key)).generate_state(1)[0])


def actions_from_path(path: Sequence[gw.Position]) -> list[int]:
    """Inverse of apply_action along consecutive path cells."""
    actions = []
    for t in range(len(path) - 1):
        delta = (path[t + 1][0] - path[t][0], path[t + 1][1] - path[t][1])
        if delta not in gw.DELTA_TO_ACTION:
            raise SampleFormatError(
                f"non-adjacent cells {path[t]}->{path[t + 1]} at step {t}"
            )
        actions.append(int(gw.DELTA_TO_ACTION[delta]))
    return actions


def build_samples(
    gmap: gw.GridMap,
    scenario: gw.Scenario,
    solution: ex.Solution,
    tcao: bool = True,
) -> list[Sample]:
    """One sample per (agent, time) decision point before the agent completes."""
    conflicts = ex.validate_solution(gmap, scenario, solution)
    if conflicts:
        raise ValueError(f"solution has {len(conflicts)} conflicts; refusing to replay")
    per_agent_actions = [actions_from_path(p) for p in solution.paths]
    completion = [len(p) - 1 for p in solution.paths]
    makespan = solution.makespan
    state = gw.WorldState.from_scenario(scenario)
    samples: list[Sample] = []
    for t in range(makespan):
        joint = []
        for i, acts in enumerate(per_agent_actions):
            action = acts[t] if t < len(acts) else int(gw.Action.STAY)
            joint.append(action)
            if t < completion[i]:
                samples.append(
                    Sample(gw.encode_observation(state, gmap, i, tcao=tcao), action)
                )
        try:
            gw.step(state, gmap, joint)
        except gw.ConflictError as exc:
            raise ValueError(f"corrupt solution: replay conflict at t={t + 1}: {exc}") from exc
    return samples


# ---------------------------------------------------------------------------
# Sample file format (.jsonl)
# ---------------------------------------------------------------------------


def write_samples(samples: Iterable[Sample], sink) -> None:
    """One compact JSON object per line: obs (324 floats), goal_vec, action."""
    own = isinstance(sink, (str, os.PathLike))
    fh = open(sink, "w") if own else sink
    try:
        for s in samples:
            rec = {
                "obs": [float(v) for v in s.observation.channels.ravel()],
                "goal_vec": [float(v) for v in s.observation.goal_vector],
                "action": int(s.expert_action),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    finally:
        if own:
            fh.close()


def read_samples(source) -> list[Sample]:
    own = isinstance(source, (str, os.PathLike))
    fh = open(source) if own else source
    samples = []
    try:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                obs = np.asarray(rec["obs"], dtype=np.float32)
                goal = np.asarray(rec["goal_vec"], dtype=np.float32)
                action = int(rec["action"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SampleFormatError(f"line {ln}: {exc}") from exc
            if obs.size != 4 * gw.FOV * gw.FOV or goal.size != 3 or not 0 <= action <= 4:
                raise SampleFormatError(f"line {ln}: wrong field sizes")
            samples.append(
                Sample(
                    gw.Observation(obs.reshape(4, gw.FOV, gw.FOV), goal),
                    action,
                )
            )
    finally:
        if own:
            fh.close()
    return samples


# ---------------------------------------------------------------------------
# External expert path interchange
# ---------------------------------------------------------------------------


def export_paths(solution: ex.Solution, sink) -> None:
    """Line k: `agent k: (r0,c0)->(r1,c1)->...` with 0-based row,col."""
    own = isinstance(sink, (str, os.PathLike))
    fh = open(sink, "w") if own else sink
    try:
        for k, path in enumerate(solution.paths):
            cells = "->".join(f"({r},{c})" for r, c in path)
            fh.write(f"agent {k}: {cells}\n")
    finally:
        if own:
            fh.close()


def import_external_paths(
    source, gmap: gw.GridMap, scenario: gw.Scenario
) -> ex.Solution:
    """Parse and validate an externally produced expert path file."""
    own = isinstance(source, (str, os.PathLike))
    fh = open(source) if own else source
    paths = []
    try:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                header, cells_text = line.split(":", 1)
                k = int(header.split()[1])
                cells = []
                for token in cells_text.strip().split("->"):
                    r, c = token.strip().lstrip("(").rstrip(")").split(",")
                    cells.append((int(r), int(c)))
            except (ValueError, IndexError) as exc:
                raise SampleFormatError(f"line {ln}: malformed path line: {exc}") from exc
            if k != len(paths):
                raise SampleFormatError(f"line {ln}: expected agent {len(paths)}, got {k}")
            paths.append(cells)
    finally:
        if own:
            fh.close()
    if len(paths) != scenario.n_agents:
        raise SampleFormatError(
            f"{len(paths)} paths for {scenario.n_agents} scenario agents"
        )
    solution = ex.Solution.from_paths(paths)
    try:
        conflicts = ex.validate_solution(gmap, scenario, solution)
    except ex.SolutionFormatError as exc:
        raise SampleFormatError(str(exc)) from exc
    if conflicts:
        raise SampleFormatError(
            f"imported paths have {len(conflicts)} conflicts: {conflicts[:3]}"
        )
    return solution


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def generate_corpus(config: CorpusConfig, out_dir, log=None) -> dict:
    """Materialize maps, scenarios, expert paths, and sample files.

    Pure function of the config: reruns with the same master seed are
    byte-identical. Failed instances are resampled with a fresh scenario
    seed (bounded retries) and noted in the manifest.
    """
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"config": config.to_dict(), "instances": []}
    for si, size in enumerate(config.map_sizes):
        for mi in range(config.maps_per_size):
            map_seed = derive_seed(config.seed, 0, si, mi)
            gmap = gw.generate_random_map(size, size, config.density, map_seed)
            map_name = f"{size}x{size}_m{mi:03d}"
            with open(os.path.join(out_dir, f"{map_name}.map"), "w") as fh:
                fh.write(gw.emit_map(gmap))
            for ci, n_agents in enumerate(config.agent_counts):
                inst = _generate_instance(
                    config, out_dir, gmap, map_name, si, mi, ci, n_agents, log
                )
                inst["map_seed"] = map_seed
                manifest["instances"].append(inst)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def _generate_instance(config, out_dir, gmap, map_name, si, mi, ci, n_agents, log):
    inst_name = f"{map_name}_a{n_agents:03d}"
    record = {"name": inst_name, "map": f"{map_name}.map", "n_agents": n_agents}
    for attempt in range(config.max_instance_retries):
        scen_seed = derive_seed(config.seed, 1, si, mi, ci, attempt)
        try:
            scenario = gw.generate_scenario(gmap, n_agents, scen_seed)
            solution = ex.ecbs_solve(gmap, scenario, w=config.suboptimality)
        except (gw.ScenarioError, ex.SearchFailure) as exc:
            if log:
                log(f"{inst_name}: attempt {attempt} failed ({exc}); resampling")
            continue
        samples = build_samples(gmap, scenario, solution, tcao=True)
        with open(os.path.join(out_dir, f"{inst_name}.scen"), "w") as fh:
            fh.write(gw.emit_scen(scenario, gmap, f"{map_name}.map"))
        export_paths(solution, os.path.join(out_dir, f"{inst_name}.paths.txt"))
        write_samples(samples, os.path.join(out_dir, f"{inst_name}.jsonl"))
        record.update(
            {
                "scenario_seed": scen_seed,
                "attempt": attempt,
                "sum_of_costs": solution.sum_of_costs,
                "makespan": solution.makespan,
                "n_samples": len(samples),
                "scen": f"{inst_name}.scen",
                "paths": f"{inst_name}.paths.txt",
                "samples": f"{inst_name}.jsonl",
            }
        )
        return record
    record["failed"] = True
    return record


def load_corpus_samples(corpus_dir) -> list[Sample]:
    """All samples referenced by a corpus manifest, in manifest order."""
    with open(os.path.join(str(corpus_dir), "manifest.json")) as fh:
        manifest = json.load(fh)
    samples: list[Sample] = []
    for inst in manifest["instances"]:
        if inst.get("failed"):
            continue
        samples.extend(read_samples(os.path.join(str(corpus_dir), inst["samples"])))
    return samples
