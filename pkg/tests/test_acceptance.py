"""End-to-end acceptance gate.

Each test prints a single PASS/FAIL line for its criterion:

A1  optimal solver matches an exhaustive joint-state search
A2  bounded-suboptimal solver respects its cost bound
A3  decoder emits zero conflicts across many random-policy episodes
A4  training memorizes a small instance with the stock hyperparameters
A5  analytic gradients match central finite differences
A6  full decoder beats every ablated variant on a held-out suite
A7  every artifact-producing stage reruns byte-identically
A8  interchange formats survive round trips without loss
"""

import filecmp
import os

import numpy as np
import pytest

from mapf_il import bench
from mapf_il import dataset as ds
from mapf_il import decoder as dec
from mapf_il import expert as ex
from mapf_il import gridworld as gw
from mapf_il import policy as pol


def report(tag: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"\n{tag}: {status}" + (f" ({detail})" if detail else ""), flush=True)
    assert ok, f"{tag} {detail}"


def small_instances(count=100):
    """Seeded 6x6..8x8 instances with 3 agents; skips unsatisfiable draws."""
    out = []
    seed = 0
    while len(out) < count:
        rng = np.random.default_rng(seed)
        size = int(rng.integers(6, 9))
        gmap = gw.generate_random_map(size, size, 0.25, seed)
        try:
            scen = gw.generate_scenario(gmap, 3, seed)
        except gw.ScenarioError:
            seed += 1
            continue
        out.append((gmap, scen))
        seed += 1
    return out


@pytest.fixture(scope="module")
def solved_small():
    pairs = []
    for gmap, scen in small_instances(100):
        try:
            opt = ex.cbs_solve(gmap, scen)
        except ex.SearchFailure:
            continue
        pairs.append((gmap, scen, opt))
    return pairs


def test_a1_optimal_solver_cross_check(solved_small):
    checked = 0
    for gmap, scen, opt in solved_small:
        assert ex.validate_solution(gmap, scen, opt) == []
        oracle = ex.joint_state_oracle(gmap, scen)
        if opt.sum_of_costs != oracle:
            report("A1 optimal-solver-cross-check", False,
                   f"cost {opt.sum_of_costs} != oracle {oracle}")
        checked += 1
    report("A1 optimal-solver-cross-check", checked >= 90,
           f"{checked} instances matched the joint-state oracle")


def test_a2_suboptimality_bound(solved_small):
    checked = 0
    for gmap, scen, opt in solved_small:
        sub = ex.ecbs_solve(gmap, scen, w=1.2)
        assert ex.validate_solution(gmap, scen, sub) == []
        if sub.sum_of_costs > 1.2 * opt.sum_of_costs + 1e-9:
            report("A2 suboptimality-bound", False,
                   f"{sub.sum_of_costs} > 1.2 * {opt.sum_of_costs}")
        checked += 1
    report("A2 suboptimality-bound", checked >= 90,
           f"{checked} instances within 1.2x of optimal")


def test_a3_decoder_safety():
    weights = pol.init_policy(pol.PolicyConfig(), seed=0)
    counts = (4, 8, 16, 32, 64)
    total_conflicts = 0
    episodes = 0
    for i in range(200):
        n = counts[i % len(counts)]
        gmap = gw.generate_random_map(40, 40, 0.3, ds.derive_seed(3, 0, i))
        scen = gw.generate_scenario(gmap, n, ds.derive_seed(3, 1, i))
        cfg = dec.DecoderConfig(seed=ds.derive_seed(3, 2, i))
        _, n_conf = bench.audit_episode(gmap, scen, weights, cfg, max_steps=256)
        total_conflicts += n_conf
        episodes += 1
    report("A3 decoder-safety", episodes >= 200 and total_conflicts == 0,
           f"{episodes} episodes, {total_conflicts} conflicts")


def test_a4_memorization():
    gmap = gw.generate_random_map(12, 12, 0.2, 5)
    scen = gw.generate_scenario(gmap, 8, 5)
    sol = ex.ecbs_solve(gmap, scen, w=1.2)
    samples = ds.build_samples(gmap, scen, sol)
    weights, losses = pol.train(samples, pol.PolicyConfig(), pol.TrainConfig(seed=7))
    obs, goal, act = pol.samples_to_arrays(samples)
    acc = pol.greedy_accuracy(weights, obs, goal, act)
    ok = acc >= 0.95 and losses[-1] < losses[0]
    report("A4 memorization", ok,
           f"accuracy {acc:.3f}, loss {losses[0]:.4f} -> {losses[-1]:.4f}")


def test_a5_gradient_check():
    cfg = pol.PolicyConfig(conv=((4, 3), (4, 3)), pool_after=(), dense=(8,))
    rng = np.random.default_rng(0)
    weights = pol.init_policy(cfg, seed=0, dtype=np.float64)
    # biases off zero so no pre-activation sits exactly on a ReLU kink
    for name, value in weights.params.items():
        if name.endswith("_b"):
            weights.params[name] = rng.normal(0, 0.1, value.shape)
    obs = rng.random((4, 4, 9, 9))
    goal = rng.random((4, 3))
    act = rng.integers(0, 5, 4)
    _, grads = pol.backward(weights, obs, goal, act)
    eps = 1e-4
    names = sorted(weights.params)
    worst = 0.0
    for _ in range(20):
        name = names[rng.integers(len(names))]
        flat = weights.params[name].reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + eps
        lp, _ = pol.backward(weights, obs, goal, act)
        flat[i] = orig - eps
        lm, _ = pol.backward(weights, obs, goal, act)
        flat[i] = orig
        num = (lp - lm) / (2 * eps)
        ana = grads[name].reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    report("A5 gradient-check", worst < 1e-3, f"max relative error {worst:.2e}")


def test_a6_ablation_ordering(tmp_path):
    corpus = tmp_path / "corpus"
    cfg = ds.CorpusConfig(map_sizes=(40,), maps_per_size=10, density=0.3,
                          agent_counts=(8, 16, 32), suboptimality=1.2, seed=100)
    ds.generate_corpus(cfg, corpus)
    samples = ds.load_corpus_samples(corpus)
    tc = pol.TrainConfig(lr=1e-3, batch_size=32, epochs=20, decay_every=8, seed=0)
    weights, _ = pol.train(samples, pol.PolicyConfig(), tc)
    suite = bench.SuiteConfig(map_size=40, density=0.3, agent_counts=(32,),
                              n_maps=20, seed=200)
    result = bench.run_suite(suite, weights)
    rates = {v: result.aggregates[(v, 32)] for v in bench.VARIANTS}
    full = rates["full"]
    ok = all(full >= rates[v] for v in ("no_history", "no_tcao", "baseline"))
    detail = ", ".join(f"{v}={rates[v]:.3f}" for v in bench.VARIANTS)
    report("A6 ablation-ordering", ok, detail)


def test_a7_byte_identical_reruns(tmp_path):
    def produce(root):
        os.makedirs(root)
        gmap = gw.generate_random_map(10, 10, 0.2, 8)
        with open(os.path.join(root, "m.map"), "w") as fh:
            fh.write(gw.emit_map(gmap))
        scen = gw.generate_scenario(gmap, 4, 8)
        with open(os.path.join(root, "m.scen"), "w") as fh:
            fh.write(gw.emit_scen(scen, gmap, "m.map"))
        sol = ex.ecbs_solve(gmap, scen, w=1.2)
        ds.export_paths(sol, os.path.join(root, "m.paths.txt"))
        samples = ds.build_samples(gmap, scen, sol)
        ds.write_samples(samples, os.path.join(root, "m.jsonl"))
        cfg = pol.PolicyConfig(conv=((4, 3), (4, 3)), pool_after=(), dense=(8,))
        tc = pol.TrainConfig(lr=1e-3, batch_size=8, epochs=3, seed=1)
        weights, _ = pol.train(samples, cfg, tc)
        pol.save_weights(weights, os.path.join(root, "w.json"))
        suite = bench.SuiteConfig(map_size=10, density=0.2, agent_counts=(4,),
                                  n_maps=2, max_steps=30, seed=9)
        bench.run_suite(suite, weights, csv_path=os.path.join(root, "eval.csv"))

    r1, r2 = str(tmp_path / "run1"), str(tmp_path / "run2")
    produce(r1)
    produce(r2)
    names = sorted(os.listdir(r1))
    same, diff, err = filecmp.cmpfiles(r1, r2, names, shallow=False)
    report("A7 byte-identical-reruns", not diff and not err and len(same) == 6,
           f"{len(same)} artifacts identical across reruns")


def test_a8_format_round_trips():
    rng = np.random.default_rng(6)
    failures = 0
    for trial in range(25):
        gmap = gw.generate_random_map(int(rng.integers(4, 15)),
                                      int(rng.integers(4, 15)), 0.2, trial)
        if gw.parse_map(gw.emit_map(gmap)) != gmap:
            failures += 1
            continue
        try:
            scen = gw.generate_scenario(gmap, 3, trial)
        except gw.ScenarioError:
            continue
        if gw.parse_scen(gw.emit_scen(scen, gmap, "m.map")).pairs != scen.pairs:
            failures += 1
            continue
        try:
            sol = ex.ecbs_solve(gmap, scen, w=1.2)
        except ex.SearchFailure:
            continue
        import io
        buf = io.StringIO()
        ds.export_paths(sol, buf)
        back = ds.import_external_paths(io.StringIO(buf.getvalue()), gmap, scen)
        if back.paths != sol.paths:
            failures += 1
    report("A8 format-round-trips", failures == 0, f"{failures} mismatches in 25 trials")
