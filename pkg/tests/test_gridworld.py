import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from ultra.errors import SceneError
from ultra.gridworld import (
    NEAR_SLOTS,
    Action,
    AgentState,
    Heading,
    Scene,
    SceneConfig,
    distances_to_set,
    env_step,
    generate_scene,
    observation_width,
    parse_scene,
    pose_distances,
    render_observation,
    render_scene,
    shortest_path_len,
    success_poses,
)

HAND = "#A...\n.....\n..#..\n.....\nB....\n"


@st.composite
def layouts(draw, max_side=5, n_classes=2):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    codes = draw(st.lists(st.sampled_from([0, 0, 0, 1] + [3 + c for c in range(n_classes)]),
                          min_size=h * w, max_size=h * w))
    cells = np.array(codes, dtype=np.int8).reshape(h, w)
    assume(np.any(cells == 0))
    return Scene(cells, n_classes)


# -- generation -----------------------------------------------------------------


def test_generation_is_deterministic():
    assert generate_scene(5) == generate_scene(5)


def test_zero_density_has_no_obstacles():
    scene = generate_scene(3, SceneConfig(obstacle_density=0.0))
    assert not np.any(scene.cells == 1)


def test_seed_7_scene_is_connected_with_four_objects():
    scene = generate_scene(7, SceneConfig(11, 11, 0.2, objects_per_class=1, n_classes=4))
    assert oracles.flood_connected(oracles.free_grid(scene.cells))
    assert int(np.sum(scene.cells >= 3)) == 4
    assert scene.classes_present() == [0, 1, 2, 3]


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_generated_scenes_are_connected_and_round_trip(seed):
    scene = generate_scene(seed, SceneConfig(9, 8, 0.25, 2, 3), scene_id="x")
    assert oracles.flood_connected(oracles.free_grid(scene.cells))
    text = render_scene(scene)
    again = parse_scene(text, 3, "x")
    assert again == scene and render_scene(again) == text


def test_unsatisfiable_config_raises():
    with pytest.raises(SceneError):
        generate_scene(0, SceneConfig(5, 5, 0.4, objects_per_class=5, n_classes=4), max_tries=5)


# -- text format ------------------------------------------------------------------


def test_parse_all_free():
    scene = parse_scene("..\n..")
    assert scene.cells.tolist() == [[0, 0], [0, 0]]


def test_parse_obstacle_and_object():
    scene = parse_scene("#A\n..")
    assert scene.cells[0, 0] == 1 and scene.cells[0, 1] == 3


@pytest.mark.parametrize("text, where", [
    ("..\n.x\n", "line 2, column 2"),
    ("...\n..\n", "line 2"),
    ("E.\n..\n", "line 1, column 1"),
])
def test_parse_errors_name_the_position(text, where):
    with pytest.raises(SceneError, match=where):
        parse_scene(text, n_classes=4)


def test_scene_is_immutable(open_room):
    with pytest.raises(ValueError):
        open_room.cells[0, 0] = 1


# -- dynamics ---------------------------------------------------------------------


def test_move_north_decreases_y(open_room):
    state, moved = env_step(open_room, AgentState(2, 2, Heading.NORTH), Action.MOVE_AHEAD)
    assert (state, moved) == (AgentState(2, 1, Heading.NORTH), True)


def test_blocked_move_keeps_pose():
    scene = parse_scene("...\n.#.\n...\n")
    start = AgentState(1, 2, Heading.NORTH)
    assert env_step(scene, start, Action.MOVE_AHEAD) == (start, False)
    edge = AgentState(0, 0, Heading.WEST)
    assert env_step(scene, edge, Action.MOVE_AHEAD) == (edge, False)


def test_rotation_group(open_room):
    s = AgentState(1, 1, Heading.NORTH)
    assert env_step(open_room, s, Action.ROTATE_LEFT)[0].heading == Heading.WEST
    for _ in range(4):
        s, _ = env_step(open_room, s, Action.ROTATE_LEFT)
    assert s == AgentState(1, 1, Heading.NORTH)


def test_fuzzed_action_sequences_stay_valid(small_scenes):
    # 3 scenes x 100 sequences x 350 actions > 10^5 steps
    rng = np.random.default_rng(0)
    for scene in small_scenes:
        free = scene.free_cells()
        for _ in range(100):
            s = AgentState(*free[rng.integers(len(free))], int(rng.integers(4)))
            for a in rng.integers(0, 4, size=350):
                s, _ = env_step(scene, s, int(a))
                assert scene.is_free(s.x, s.y) and 0 <= s.heading < 4


@given(layouts(), st.data())
@settings(max_examples=200)
def test_env_step_matches_oracle(scene, data):
    x, y = data.draw(st.sampled_from(scene.free_cells()))
    h = data.draw(st.integers(0, 3))
    a = data.draw(st.integers(0, 3))
    got, _ = env_step(scene, AgentState(x, y, h), a)
    assert tuple(got) == oracles.step(oracles.free_grid(scene.cells), x, y, h, a)


# -- observations -------------------------------------------------------------------


def test_hand_built_window_facing_north():
    scene = parse_scene(HAND, n_classes=2)
    expected_codes = [1, 3, 0, 0, 0,
                      0, 0, 0, 0, 0,
                      0, 0, 1, 0, 0,
                      0, 0, 0, 0, 0,
                      4, 0, 0, 0, 0]
    assert scene.window_codes[4, 2, Heading.NORTH].tolist() == expected_codes
    expected = np.zeros((25, 5))
    expected[np.arange(25), expected_codes] = 1.0
    assert np.array_equal(render_observation(scene, AgentState(2, 4, Heading.NORTH)), expected.ravel())


def test_hand_built_window_facing_east():
    scene = parse_scene(HAND, n_classes=2)
    expected_codes = [2, 0, 0, 0, 0,
                      2, 0, 0, 0, 0,
                      2, 0, 0, 1, 0,
                      2, 3, 0, 0, 0,
                      2, 1, 0, 0, 0]
    assert scene.window_codes[1, 0, Heading.EAST].tolist() == expected_codes


def test_corner_facing_out_sees_mostly_out_of_bounds(open_room):
    obs = render_observation(open_room, AgentState(0, 0, Heading.NORTH)).reshape(25, -1)
    assert obs[:, 2].sum() > 12


def test_translation_invariance_in_open_interior():
    scene = parse_scene("\n".join(["." * 12] * 12))
    a = render_observation(scene, AgentState(5, 6, Heading.EAST))
    b = render_observation(scene, AgentState(6, 7, Heading.EAST))
    assert np.array_equal(a, b)


@given(layouts(n_classes=3), st.data())
@settings(max_examples=150)
def test_observation_matches_oracle_and_is_one_hot(scene, data):
    x, y = data.draw(st.sampled_from(scene.free_cells()))
    h = data.draw(st.integers(0, 3))
    obs = render_observation(scene, AgentState(x, y, h))
    assert obs.shape == (observation_width(3),)
    assert np.array_equal(obs.reshape(25, 6).sum(axis=1), np.ones(25))
    assert np.array_equal(obs, oracles.one_hot_observation(scene.cells, x, y, h, 3))


def test_near_slots_are_the_manhattan_two_diamond():
    assert len(NEAR_SLOTS) == 8  # 4 beside, 3 one row ahead, 1 two rows ahead
    assert 22 not in NEAR_SLOTS


@given(layouts(n_classes=2), st.integers(0, 1))
@settings(max_examples=100)
def test_success_poses_match_oracle(scene, cls):
    mask = success_poses(scene, cls)
    for x, y in scene.free_cells():
        for h in range(4):
            assert mask[y, x, h] == oracles.done_succeeds(scene.cells, x, y, h, cls)


# -- shortest paths -------------------------------------------------------------------


def test_zero_distance_to_own_cell(open_room):
    assert shortest_path_len(open_room, AgentState(1, 1, 2), (1, 1)) == 0


def test_adjacent_cell_ahead_costs_one(open_room):
    assert shortest_path_len(open_room, AgentState(1, 1, Heading.EAST), (2, 1)) == 1


def test_open_3x3_corner_to_corner():
    scene = parse_scene("...\n...\n...\n")
    start = AgentState(0, 0, Heading.EAST)
    got = shortest_path_len(scene, start, (2, 2))
    assert got == oracles.dfs_shortest(oracles.free_grid(scene.cells), tuple(start), (2, 2)) == 5


def test_unreachable_and_blocked_targets():
    scene = parse_scene(".#.\n.#.\n.#.\n")
    assert shortest_path_len(scene, AgentState(0, 0, 0), (2, 0)) is None
    assert shortest_path_len(scene, AgentState(0, 0, 0), (1, 0)) is None


def test_every_3x3_layout_matches_exhaustive_search():
    for bits in itertools.product((0, 1), repeat=9):
        cells = np.array(bits, dtype=np.int8).reshape(3, 3)
        if not np.any(cells == 0):
            continue
        scene = Scene(cells, 1)
        free = oracles.free_grid(cells)
        cells_free = scene.free_cells()
        for (sx, sy), goal in itertools.product(cells_free, cells_free):
            start = AgentState(sx, sy, (sx + 2 * sy) % 4)
            assert shortest_path_len(scene, start, goal) == oracles.dfs_shortest(free, tuple(start), goal)


@given(layouts(), st.data())
@settings(max_examples=120)
def test_shortest_path_matches_dijkstra(scene, data):
    free_cells = scene.free_cells()
    sx, sy = data.draw(st.sampled_from(free_cells))
    goal = data.draw(st.sampled_from(free_cells))
    h = data.draw(st.integers(0, 3))
    free = oracles.free_grid(scene.cells)
    expected = 0 if (sx, sy) == goal else oracles.dijkstra_shortest(free, (sx, sy, h), goal)
    assert shortest_path_len(scene, AgentState(sx, sy, h), goal) == expected


@given(st.integers(0, 500), st.data())
@settings(max_examples=40)
def test_pose_distance_triangle_inequality(seed, data):
    scene = generate_scene(seed, SceneConfig(6, 6, 0.2, 1, 2))
    poses = scene.free_poses()
    a, b, c = (data.draw(st.sampled_from(poses)) for _ in range(3))
    d = lambda p, q: pose_distances(scene, p)[q.y, q.x, q.heading]  # noqa: E731
    assert d(a, c) <= d(a, b) + d(b, c)


@given(layouts(), st.data())
@settings(max_examples=80)
def test_distances_to_set_is_min_over_forward_searches(scene, data):
    targets = np.zeros((scene.height, scene.width, 4), dtype=bool)
    for _ in range(data.draw(st.integers(1, 3))):
        x, y = data.draw(st.sampled_from(scene.free_cells()))
        targets[y, x, data.draw(st.integers(0, 3))] = True
    dist = distances_to_set(scene, targets)
    for pose in scene.free_poses():
        fwd = pose_distances(scene, pose)[targets]
        fwd = fwd[fwd >= 0]
        assert dist[pose.y, pose.x, pose.heading] == (fwd.min() if fwd.size else -1)
