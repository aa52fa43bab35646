"""Evaluation harness and CLI.

Generates evaluation instances, runs the decoder variants (full,
no_history, no_tcao, baseline), aggregates pooled success rates, and
emits deterministic CSV. Subcommands cover the whole pipeline from map
generation to the conflict audit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataset as ds
from . import decoder as dec
from . import expert as ex
from . import gridworld as gw
from . import policy as pol

VARIANTS = ("full", "no_history", "no_tcao", "baseline")


@dataclass
class SuiteConfig:
    map_size: int = 40
    density: float = 0.3
    agent_counts: tuple = (8, 16, 32)
    n_maps: int = 20
    max_steps: int = 0  # 0 -> default budget for the map size
    variants: tuple = VARIANTS
    seed: int = 0
    tau: float = 2.0
    history: int = 5
    mode: str = "sample"

    def __post_init__(self):
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown decoder variants: {sorted(unknown)}")

    def resolved_max_steps(self) -> int:
        return self.max_steps or dec.default_max_steps(self.map_size)


@dataclass
class SuiteResult:
    rows: list  # per-episode dicts: variant, map_size, n_agents, map_seed, success_rate
    aggregates: dict  # (variant, n_agents) -> pooled mean success rate


def variant_config(variant: str, suite: SuiteConfig, seed: int) -> dec.DecoderConfig:
    return dec.DecoderConfig(
        tau=suite.tau,
        history=suite.history,
        tcao=variant in ("full", "no_history"),
        history_enabled=variant in ("full", "no_tcao"),
        seed=seed,
        mode=suite.mode,
    )


def success_rate(results) -> float:
    """Pooled agents-reached ratio over a nonempty list of EpisodeResults."""
    results = list(results)
    if not results:
        raise ValueError("success_rate of an empty result list")
    total = sum(len(r.reached) for r in results)
    reached = sum(sum(r.reached) for r in results)
    return reached / total


def run_suite(suite: SuiteConfig, weights: pol.Weights, csv_path=None) -> SuiteResult:
    """Evaluate every variant x agent count x map; optionally write CSV."""
    max_steps = suite.resolved_max_steps()
    rows = []
    episodes: dict = {}
    for mi in range(suite.n_maps):
        map_seed = ds.derive_seed(suite.seed, 10, mi)
        gmap = gw.generate_random_map(suite.map_size, suite.map_size, suite.density, map_seed)
        for n_agents in suite.agent_counts:
            scen_seed = ds.derive_seed(suite.seed, 11, mi, n_agents)
            scenario = gw.generate_scenario(gmap, n_agents, scen_seed)
            for vi, variant in enumerate(suite.variants):
                ep_seed = ds.derive_seed(suite.seed, 12, mi, n_agents, vi)
                config = variant_config(variant, suite, ep_seed)
                result = dec.run_episode(gmap, scenario, weights, config, max_steps)
                rows.append(
                    {
                        "variant": variant,
                        "map_size": suite.map_size,
                        "n_agents": n_agents,
                        "map_seed": map_seed,
                        "success_rate": result.success,
                    }
                )
                episodes.setdefault((variant, n_agents), []).append(result)
    aggregates = {key: success_rate(eps) for key, eps in episodes.items()}
    if csv_path is not None:
        write_csv(rows, csv_path)
    return SuiteResult(rows=rows, aggregates=aggregates)


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["variant", "map_size", "n_agents", "map_seed", "success_rate"]
        )
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["success_rate"] = repr(float(row["success_rate"]))
            writer.writerow(out)


def audit_episode(
    gmap: gw.GridMap,
    scenario: gw.Scenario,
    weights: pol.Weights,
    config: dec.DecoderConfig,
    max_steps: int,
) -> tuple[dec.EpisodeResult, int]:
    """Run an episode, then independently replay its trace counting conflicts."""
    result = dec.run_episode(gmap, scenario, weights, config, max_steps, record_trace=True)
    state = gw.WorldState.from_scenario(scenario)
    n_conflicts = 0
    for actions in result.trace:
        n_conflicts += len(gw.check_conflicts(state, gmap, actions))
        for agent, act in zip(state.agents, actions):
            agent.position = gw.apply_action(agent.position, act)
        state.time += 1
    return result, n_conflicts


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=".")
    p.add_argument("--config", type=str, default=None, help="JSON config file")


def _load_json_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapf-il", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-maps", help="generate random .map files")
    _add_common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--size", type=int, default=40)
    p.add_argument("--density", type=float, default=0.3)

    p = sub.add_parser("gen-scenarios", help="generate .scen files for a map")
    _add_common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("solve-expert", help="solve a map+scen with bounded-suboptimal search")
    _add_common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--scen", required=True)
    p.add_argument("--subopt", type=float, default=1.2)

    p = sub.add_parser("build-dataset", help="materialize a training corpus")
    _add_common(p)
    p.add_argument("--sizes", type=str, default="40,80")
    p.add_argument("--maps-per-size", type=int, default=100)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--agents", type=str, default="4,8,16,32,64")
    p.add_argument("--subopt", type=float, default=1.2)

    p = sub.add_parser("train", help="behavioral cloning on a corpus or jsonl file")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="corpus directory or .jsonl file")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--epochs", type=int, default=35)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--weights-out", type=str, default="weights.json")

    for name in ("evaluate", "ablate"):
        p = sub.add_parser(
            name,
            help="run evaluation episodes"
            + (" for all four decoder variants" if name == "ablate" else ""),
        )
        _add_common(p)
        p.add_argument("--weights", required=True)
        p.add_argument("--maps", type=int, default=20)
        p.add_argument("--size", type=int, default=40)
        p.add_argument("--density", type=float, default=0.3)
        p.add_argument("--agents", type=str, default="32")
        p.add_argument("--tau", type=float, default=2.0)
        p.add_argument("--history", type=int, default=5)
        p.add_argument("--max-steps", type=int, default=0)
        p.add_argument("--greedy", action="store_true")
        if name == "evaluate":
            p.add_argument("--no-history", action="store_true")
            p.add_argument("--no-tcao", action="store_true")
        p.add_argument("--csv", type=str, default=None)

    p = sub.add_parser("audit", help="replay episodes and assert zero conflicts")
    _add_common(p)
    p.add_argument("--weights", type=str, default=None, help="default: random init")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--size", type=int, default=40)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--agents", type=int, default=32)
    return parser


def _parse_int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (
        ValueError,
        RuntimeError,
        OSError,
        ds.SampleFormatError,
        pol.WeightsFormatError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gen-maps":
        os.makedirs(args.out, exist_ok=True)
        for i in range(args.count):
            gmap = gw.generate_random_map(
                args.size, args.size, args.density, ds.derive_seed(args.seed, 0, i)
            )
            path = os.path.join(args.out, f"{args.size}x{args.size}_m{i:03d}.map")
            with open(path, "w") as fh:
                fh.write(gw.emit_map(gmap))
            print(path)
        return 0

    if args.command == "gen-scenarios":
        with open(args.map) as fh:
            gmap = gw.parse_map(fh.read())
        os.makedirs(args.out, exist_ok=True)
        base = os.path.splitext(os.path.basename(args.map))[0]
        for i in range(args.count):
            scenario = gw.generate_scenario(
                gmap, args.agents, ds.derive_seed(args.seed, 1, i)
            )
            path = os.path.join(args.out, f"{base}_a{args.agents:03d}_s{i:02d}.scen")
            with open(path, "w") as fh:
                fh.write(gw.emit_scen(scenario, gmap, os.path.basename(args.map)))
            print(path)
        return 0

    if args.command == "solve-expert":
        with open(args.map) as fh:
            gmap = gw.parse_map(fh.read())
        with open(args.scen) as fh:
            scenario = gw.parse_scen(fh.read())
        solution = ex.ecbs_solve(gmap, scenario, w=args.subopt)
        os.makedirs(args.out, exist_ok=True)
        base = os.path.splitext(os.path.basename(args.scen))[0]
        path = os.path.join(args.out, f"{base}.paths.txt")
        ds.export_paths(solution, path)
        print(f"{path}: sum_of_costs={solution.sum_of_costs} makespan={solution.makespan}")
        return 0

    if args.command == "build-dataset":
        overrides = _load_json_config(args.config)
        config = ds.CorpusConfig(
            map_sizes=tuple(overrides.get("map_sizes", _parse_int_list(args.sizes))),
            maps_per_size=overrides.get("maps_per_size", args.maps_per_size),
            density=overrides.get("density", args.density),
            agent_counts=tuple(overrides.get("agent_counts", _parse_int_list(args.agents))),
            suboptimality=overrides.get("suboptimality", args.subopt),
            seed=overrides.get("seed", args.seed),
        )
        manifest = ds.generate_corpus(config, args.out, log=lambda m: print(m, file=sys.stderr))
        n_ok = sum(1 for inst in manifest["instances"] if not inst.get("failed"))
        print(f"{args.out}: {n_ok}/{len(manifest['instances'])} instances")
        return 0

    if args.command == "train":
        if os.path.isdir(args.dataset):
            samples = ds.load_corpus_samples(args.dataset)
        elif os.path.isfile(args.dataset):
            samples = ds.read_samples(args.dataset)
        else:
            raise FileNotFoundError(f"dataset not found: {args.dataset}")
        if not samples:
            raise ValueError(f"dataset {args.dataset} contains no samples")
        tc = pol.TrainConfig(
            lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
        )
        weights, losses = pol.train(samples, pol.PolicyConfig(), tc)
        pol.save_weights(weights, args.weights_out)
        print(f"{args.weights_out}: {len(samples)} samples, "
              f"loss {losses[0]:.5f} -> {losses[-1]:.5f}")
        return 0

    if args.command in ("evaluate", "ablate"):
        weights = pol.load_weights(args.weights)
        if args.command == "ablate":
            variants = VARIANTS
        else:
            no_h = getattr(args, "no_history", False)
            no_t = getattr(args, "no_tcao", False)
            variants = (
                "baseline" if no_h and no_t
                else "no_history" if no_h
                else "no_tcao" if no_t
                else "full",
            )
        suite = SuiteConfig(
            map_size=args.size,
            density=args.density,
            agent_counts=_parse_int_list(args.agents),
            n_maps=args.maps,
            max_steps=args.max_steps,
            variants=variants,
            seed=args.seed,
            tau=args.tau,
            history=args.history,
            mode="greedy" if args.greedy else "sample",
        )
        result = run_suite(suite, weights, csv_path=args.csv)
        for (variant, n_agents), rate in sorted(result.aggregates.items()):
            print(f"{variant}\tn={n_agents}\tsuccess_rate={rate:.4f}")
        return 0

    if args.command == "audit":
        if args.weights:
            weights = pol.load_weights(args.weights)
        else:
            weights = pol.init_policy(pol.PolicyConfig(), seed=args.seed)
        total_conflicts = 0
        for i in range(args.episodes):
            gmap = gw.generate_random_map(
                args.size, args.size, args.density, ds.derive_seed(args.seed, 20, i)
            )
            scenario = gw.generate_scenario(gmap, args.agents, ds.derive_seed(args.seed, 21, i))
            config = dec.DecoderConfig(seed=ds.derive_seed(args.seed, 22, i))
            result, n_conf = audit_episode(
                gmap, scenario, weights, config, dec.default_max_steps(args.size)
            )
            total_conflicts += n_conf
            print(f"episode {i}: steps={result.steps} success={result.success:.3f} conflicts={n_conf}")
        if total_conflicts:
            print(f"error: audit found {total_conflicts} conflicts", file=sys.stderr)
            return 1
        print("audit: zero conflicts")
        return 0

    raise ValueError(f"unhandled command {args.command!r}")


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
