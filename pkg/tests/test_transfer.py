import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ultra import autodiff as ad
from ultra.gridworld import AgentState, parse_scene
from ultra.policies import HierarchyConfig, init_master, init_subpolicies
from ultra.rl import A2CConfig
from ultra.seeding import derive_seed
from ultra.transfer import (
    EpisodeRecord,
    HierarchicalAgent,
    MetricsReport,
    RandomAgent,
    TransferConfig,
    build_roster,
    evaluate,
    make_semantic_task,
    optimal_length,
    roster_hash,
    sample_semantic_task,
    spl,
    train_transfer_master,
)

HIER = HierarchyConfig(K=3, N=3, hidden=(8,))
FIXED_5x5 = "..#..\n.....\n.#..A\n.....\nB..#.\n"


def rec(success, optimal, path):
    return EpisodeRecord("s", 0, AgentState(0, 0, 0), success, optimal, path, 0.0)


# -- SPL and reports ---------------------------------------------------------------------


def test_all_failures_score_zero():
    report = MetricsReport.from_records("m", [rec(False, 4, 9), rec(False, 6, 2)])
    assert (report.success_all, report.spl_all) == (0.0, 0.0)


def test_one_success_one_failure():
    report = MetricsReport.from_records("m", [rec(True, 4, 4), rec(False, 3, 10)])
    assert abs(report.success_all - 50.0) <= 1e-12 and abs(report.spl_all - 50.0) <= 1e-12


def test_detour_halves_spl():
    assert abs(100 * spl([rec(True, 4, 8)]) - 50.0) <= 1e-12


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 30), st.integers(0, 100)), min_size=1, max_size=40))
def test_spl_never_exceeds_success(items):
    report = MetricsReport.from_records("m", [rec(*i) for i in items])
    assert report.spl_all <= report.success_all
    assert report.spl_L5 <= report.success_L5
    assert report.episodes_L5 <= report.episodes_all
    assert report.episodes_L5 == sum(1 for _, opt, _ in items if opt >= 5)


def test_report_rows_shape():
    rows = MetricsReport.from_records("m", [rec(True, 6, 6)]).rows()
    assert [r["split"] for r in rows] == ["all", "L>=5"]
    assert set(rows[0]) == {"method", "split", "success", "spl", "episodes"}


# -- tasks ----------------------------------------------------------------------------------


def test_optimal_length_matches_oracle():
    scene = parse_scene(FIXED_5x5, n_classes=2)
    free = oracles.free_grid(scene.cells)
    for cls in (0, 1):
        goals = [(x, y, h) for x, y in scene.free_cells() for h in range(4)
                 if oracles.done_succeeds(scene.cells, x, y, h, cls)]
        for start in scene.free_poses():
            best = None
            for gx, gy, gh in goals:
                # one breadth-first search per goal pose, no multi-source shortcut
                d = _pose_distance(free, tuple(start), (gx, gy, gh))
                if d is not None and (best is None or d < best):
                    best = d
            assert optimal_length(scene, cls, start) == best


def _pose_distance(free, start, goal):
    frontier, seen, d = [start], {start}, 0
    while frontier:
        if goal in frontier:
            return d
        nxt = []
        for pose in frontier:
            for a in (0, 1, 2):
                n = oracles.step(free, *pose, a)
                if n not in seen:
                    seen.add(n)
                    nxt.append(n)
        frontier, d = nxt, d + 1
    return None


def test_sampled_start_is_not_already_successful(small_scenes):
    rng = np.random.default_rng(0)
    for scene in small_scenes:
        for _ in range(20):
            task = sample_semantic_task(scene, rng)
            assert not task.done_succeeds(task.start)
            assert optimal_length(scene, task.target_class, task.start) >= 1
            assert task.embed.tolist() == np.eye(scene.n_classes)[task.target_class].tolist()


def test_unreachable_episode_is_excluded(caplog):
    scene = parse_scene(".#...\n.#..A\n", n_classes=1, scene_id="split")
    good = make_semantic_task(scene, 0, AgentState(2, 0, 1))
    bad = make_semantic_task(scene, 0, AgentState(0, 0, 1))
    roster = [(scene, bad), (scene, good)]
    with caplog.at_level(logging.WARNING, logger="ultra.transfer"):
        report = evaluate(RandomAgent(), [], 0, 0, roster=roster)
    assert report.episodes_all == 1
    assert "unreachable" in caplog.text


# -- random baseline against the exact chance rate ----------------------------------------------


def test_random_agent_matches_exact_chance_rate():
    scene = parse_scene(FIXED_5x5, n_classes=2, scene_id="fixed")
    roster = build_roster([scene], 1000, 7)
    cache = {}
    for _, t in roster:
        key = (tuple(t.start), t.target_class)
        if key not in cache:
            cache[key] = oracles.random_agent_success(scene.cells, *key, 100)
    exact = 100 * np.mean([cache[(tuple(t.start), t.target_class)] for _, t in roster])
    report = evaluate(RandomAgent(), [scene], 1000, 7, t_max=100, method="random")
    assert abs(report.success_all - exact) <= 5.0


def test_random_agent_episode_accounting(open_room):
    task = make_semantic_task(open_room, 0, AgentState(0, 0, 1))
    rng = np.random.default_rng(3)
    for _ in range(50):
        success, path, reward = RandomAgent().run(open_room, task, 20, rng)
        assert 0 <= path <= 20
        assert reward == pytest.approx(-0.01 * min(path + 1, 20) + (5.0 if success else 0.0))


# -- rosters and evaluation ---------------------------------------------------------------------


def test_roster_is_seeded_and_shared(small_scenes):
    a = build_roster(small_scenes, 5, 11)
    b = build_roster(small_scenes, 5, 11)
    assert roster_hash(a) == roster_hash(b)
    assert roster_hash(a) != roster_hash(build_roster(small_scenes, 5, 12))
    ow = small_scenes[0].obs_width
    agents = [RandomAgent(), HierarchicalAgent(init_master(HIER, ow, 2, 0), init_subpolicies(HIER, ow, 0), HIER)]
    keys = [[(r.scene_id, r.target_class, r.start) for r in evaluate(ag, small_scenes, 5, 11).records]
            for ag in agents]
    assert keys[0] == keys[1]


def test_evaluation_has_no_side_effects(small_scenes):
    ow = small_scenes[0].obs_width
    master = init_master(HIER, ow, 2, 1)
    subs = init_subpolicies(HIER, ow, 1)
    hashes = [ad.store_hash(s) for s in [master, *subs]]
    agent = HierarchicalAgent(master, subs, HIER)
    a = evaluate(agent, small_scenes, 4, 3)
    b = evaluate(agent, small_scenes, 4, 3)
    assert a.rows() == b.rows() and a.records == b.records
    assert [ad.store_hash(s) for s in [master, *subs]] == hashes


def test_greedy_agent_is_deterministic_regardless_of_rng(small_scenes):
    ow = small_scenes[0].obs_width
    agent = HierarchicalAgent(init_master(HIER, ow, 2, 4), init_subpolicies(HIER, ow, 4), HIER, sub_greedy=True)
    task = sample_semantic_task(small_scenes[0], np.random.default_rng(0))
    runs = {agent.run(small_scenes[0], task, 30, np.random.default_rng(i)) for i in range(5)}
    assert len(runs) == 1


# -- transfer training -------------------------------------------------------------------------------


def _train(scenes, episodes, finetune=False, seed=0, curve_every=5):
    ow = scenes[0].obs_width
    theta = init_subpolicies(HIER, ow, 9)
    cfg = TransferConfig(episodes=episodes, t_max=15, curve_every=curve_every, curve_tasks=3, batch=4)
    return theta, train_transfer_master(theta, scenes, HIER, A2CConfig(lr=0.05), cfg, seed,
                                        curve_scenes=scenes, finetune_subs=finetune)


def test_zero_episodes_leave_master_at_init(small_scenes):
    _, result = _train(small_scenes, 0)
    expected = init_master(HIER, small_scenes[0].obs_width, 2, derive_seed(0, "transfer-master"))
    assert ad.stores_equal(result.master, expected) and result.curve == []


def test_frozen_skills_are_never_written(small_scenes):
    theta, result = _train(small_scenes, 12)
    before = [ad.store_hash(s) for s in init_subpolicies(HIER, small_scenes[0].obs_width, 9)]
    assert [ad.store_hash(s) for s in theta] == before
    assert result.theta is theta


def test_finetuning_moves_skills_on_a_copy(small_scenes):
    theta, result = _train(small_scenes, 12, finetune=True)
    before = [ad.store_hash(s) for s in init_subpolicies(HIER, small_scenes[0].obs_width, 9)]
    assert [ad.store_hash(s) for s in theta] == before
    assert [ad.store_hash(s) for s in result.theta] != before


def test_curve_has_one_row_per_interval(small_scenes):
    _, result = _train(small_scenes, 12, curve_every=4)
    assert [row["episode"] for row in result.curve] == [4, 8, 12]
    assert all(0 <= row["success"] <= 100 for row in result.curve)


def test_transfer_is_deterministic(small_scenes):
    _, a = _train(small_scenes, 8, finetune=True, seed=3)
    _, b = _train(small_scenes, 8, finetune=True, seed=3)
    assert ad.store_hash(a.master) == ad.store_hash(b.master)
    assert a.curve == b.curve
