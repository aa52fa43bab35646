"""Environment mechanics: actions, conflicts, formats, observations."""

import numpy as np
import pytest

from mapf_il import gridworld as gw


def open_map(h, w):
    return gw.GridMap(np.zeros((h, w), dtype=bool))


def test_action_deltas():
    assert gw.apply_action((3, 3), gw.Action.STAY) == (3, 3)
    assert gw.apply_action((3, 3), gw.Action.UP) == (2, 3)
    assert gw.apply_action((3, 3), gw.Action.DOWN) == (4, 3)
    assert gw.apply_action((3, 3), gw.Action.LEFT) == (3, 2)
    assert gw.apply_action((3, 3), gw.Action.RIGHT) == (3, 4)


def test_vertex_conflict_detected():
    gmap = open_map(3, 3)
    scen = gw.Scenario(pairs=(((0, 0), (2, 2)), ((0, 2), (2, 0))))
    state = gw.WorldState.from_scenario(scen)
    # both agents try to enter (0,1)
    conflicts = gw.check_conflicts(state, gmap, [gw.Action.RIGHT, gw.Action.LEFT])
    assert len(conflicts) == 1
    assert conflicts[0].kind == "vertex"
    assert conflicts[0].agents == (0, 1)
    assert conflicts[0].cells == ((0, 1),)


def test_swap_conflict_detected():
    gmap = open_map(1, 2)
    scen = gw.Scenario(pairs=(((0, 0), (0, 1)), ((0, 1), (0, 0))))
    state = gw.WorldState.from_scenario(scen)
    conflicts = gw.check_conflicts(state, gmap, [gw.Action.RIGHT, gw.Action.LEFT])
    kinds = {c.kind for c in conflicts}
    assert kinds == {"swap"}


def test_obstacle_and_bounds_conflicts():
    obstacles = np.zeros((2, 2), dtype=bool)
    obstacles[0, 1] = True
    gmap = gw.GridMap(obstacles)
    scen = gw.Scenario(pairs=(((0, 0), (1, 1)),))
    state = gw.WorldState.from_scenario(scen)
    assert gw.check_conflicts(state, gmap, [gw.Action.RIGHT])[0].kind == "obstacle"
    assert gw.check_conflicts(state, gmap, [gw.Action.UP])[0].kind == "out_of_bound"
    assert gw.check_conflicts(state, gmap, [gw.Action.DOWN]) == []


def test_step_rejects_conflicting_joint_action():
    gmap = open_map(1, 3)
    scen = gw.Scenario(pairs=(((0, 0), (0, 2)), ((0, 2), (0, 0))))
    state = gw.WorldState.from_scenario(scen)
    with pytest.raises(gw.ConflictError):
        gw.step(state, gmap, [gw.Action.RIGHT, gw.Action.LEFT])


def test_step_updates_positions_done_and_history():
    gmap = open_map(2, 2)
    scen = gw.Scenario(pairs=(((0, 0), (0, 1)),))
    state = gw.WorldState.from_scenario(scen, history_size=3)
    gw.step(state, gmap, [gw.Action.RIGHT])
    a = state.agents[0]
    assert a.position == (0, 1) and a.done and state.time == 1
    assert list(a.history) == [(0, 0)]


def test_map_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(20):
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        gmap = gw.GridMap(rng.random((h, w)) < 0.4)
        assert gw.parse_map(gw.emit_map(gmap)) == gmap


def test_parse_map_accepts_t_glyph():
    gmap = gw.parse_map("type octile\nheight 1\nwidth 3\nmap\n.T@\n")
    assert not gmap.obstacles[0, 0]
    assert gmap.obstacles[0, 1] and gmap.obstacles[0, 2]


@pytest.mark.parametrize(
    "text",
    [
        "type quad\nheight 1\nwidth 1\nmap\n.\n",
        "type octile\nheight 2\nwidth 1\nmap\n.\n",
        "type octile\nheight 1\nwidth 2\nmap\n.\n",
        "type octile\nheight 1\nwidth 1\nmap\nx\n",
        "type octile\nheight 0\nwidth 1\nmap\n\n",
    ],
)
def test_parse_map_rejects_malformed(text):
    with pytest.raises(gw.MapFormatError):
        gw.parse_map(text)


def test_scen_round_trip_and_field_order():
    gmap = open_map(5, 7)
    scen = gw.Scenario(pairs=(((1, 2), (3, 4)), ((0, 6), (4, 0))))
    text = gw.emit_scen(scen, gmap, "m.map")
    # column precedes row on disk
    fields = text.splitlines()[1].split("\t")
    assert (int(fields[4]), int(fields[5])) == (2, 1)
    assert gw.parse_scen(text).pairs == scen.pairs


def test_parse_scen_rejects_wrong_field_count():
    with pytest.raises(gw.MapFormatError):
        gw.parse_scen("version 1\n0\tm.map\t5\t5\t1\t1\t2\n")


def test_random_map_obstacle_count_and_determinism():
    for density in (0.0, 0.1, 0.3):
        g1 = gw.generate_random_map(40, 40, density, seed=9)
        g2 = gw.generate_random_map(40, 40, density, seed=9)
        assert int(g1.obstacles.sum()) == round(density * 1600)
        assert g1 == g2
    assert gw.generate_random_map(40, 40, 0.3, seed=9) != gw.generate_random_map(
        40, 40, 0.3, seed=10
    )


def test_connected_components_splits_wall():
    obstacles = np.zeros((3, 3), dtype=bool)
    obstacles[:, 1] = True
    labels = gw.connected_components(gw.GridMap(obstacles))
    assert labels[0, 0] == labels[2, 0] != 0
    assert labels[0, 2] == labels[2, 2] != 0
    assert labels[0, 0] != labels[0, 2]
    assert labels[0, 1] == 0


def test_generate_scenario_invariants():
    rng = np.random.default_rng(0)
    for trial in range(25):
        gmap = gw.generate_random_map(12, 12, 0.3, seed=trial)
        try:
            scen = gw.generate_scenario(gmap, 6, seed=trial)
        except gw.ScenarioError:
            continue
        labels = gw.connected_components(gmap)
        starts, goals = scen.starts(), scen.goals()
        assert len(set(starts)) == 6 and len(set(goals)) == 6
        for (s, g) in scen.pairs:
            assert gmap.is_free(s) and gmap.is_free(g) and s != g
            assert labels[s] == labels[g]


def test_observation_shapes_and_padding():
    gmap = open_map(5, 5)
    scen = gw.Scenario(pairs=(((0, 0), (4, 4)),))
    state = gw.WorldState.from_scenario(scen)
    obs = gw.encode_observation(state, gmap, 0, tcao=False)
    assert obs.channels.shape == (4, 9, 9)
    assert obs.channels.dtype == np.float32
    # agent sits at FOV center (4,4); everything above/left of the map is padding
    assert obs.channels[0, :4, :].all() and obs.channels[0, :, :4].all()
    assert obs.channels[0, 4:, 4:].sum() == 0


def test_observation_goal_projection():
    gmap = open_map(20, 20)
    scen = gw.Scenario(pairs=(((10, 10), (10, 18)),))
    state = gw.WorldState.from_scenario(scen)
    obs = gw.encode_observation(state, gmap, 0, tcao=False, project_goal=True)
    # goal is 8 right of center: clipped onto the right FOV edge, same row
    assert obs.channels[2, 4, 8] == 1.0
    assert obs.channels[2].sum() == 1.0
    off = gw.encode_observation(state, gmap, 0, tcao=False, project_goal=False)
    assert off.channels[2].sum() == 0.0


def test_observation_other_agents_and_tcao():
    gmap = open_map(9, 9)
    scen = gw.Scenario(pairs=(((4, 4), (0, 0)), ((4, 6), (4, 6)), ((4, 2), (8, 8))))
    state = gw.WorldState.from_scenario(scen)
    assert state.agents[1].done
    obs = gw.encode_observation(state, gmap, 0, tcao=True)
    # agent 1 is done: appears as an obstacle, not as an agent
    assert obs.channels[0, 4, 6] == 1.0 and obs.channels[1, 4, 6] == 0.0
    # agent 2 is active and in view
    assert obs.channels[1, 4, 2] == 1.0
    obs2 = gw.encode_observation(state, gmap, 0, tcao=False)
    assert obs2.channels[1, 4, 6] == 1.0 and obs2.channels[0, 4, 6] == 0.0


def test_goal_vector_values():
    gmap = open_map(10, 10)
    scen = gw.Scenario(pairs=(((0, 0), (3, 4)), ((5, 5), (5, 5))))
    state = gw.WorldState.from_scenario(scen)
    v = gw.encode_observation(state, gmap, 0, tcao=False).goal_vector
    assert np.allclose(v[:2], [3 / 5, 4 / 5])
    assert np.isclose(v[2], 5 / 20)
    # at goal: all zeros
    assert gw.encode_observation(state, gmap, 1, tcao=False).goal_vector.sum() == 0
