import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egomap.env import (BACKWARD, FORWARD, KINDS, NOOP, TURN_LEFT, Billboard, EnvPool, EpisodeFinished,
                        GenerationParams, ScenarioConfig, ScenarioSet, Simulator, bfs_distances, cast_rays,
                        generate, load_replay, noisy_delta, render_batch, replay_record, resimulate,
                        save_replay)
from egomap.env.scenario import world_to_cell
from egomap.env.simulator import _blocked
from egomap.geometry import CameraIntrinsics, ego_to_allocentric, unproject

INTR = CameraIntrinsics()


def render64(grid, block, pose, billboards=()):
    grid = np.asarray(grid, dtype=bool)
    walls = np.full(grid.shape + (3,), 0.5)
    return render_batch(grid[None], np.array([block]), walls[None], np.asarray(pose, float)[None],
                        [list(billboards)], INTR)[0]


def open_room(n=9):
    grid = np.ones((n, n), dtype=bool)
    grid[1:-1, 1:-1] = False
    return grid


# ---------------------------------------------------------------- generation

@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_same_bytes(kind):
    a, b = generate(17, kind), generate(17, kind)
    assert a.to_bytes() == b.to_bytes()
    assert generate(18, kind).to_bytes() != a.to_bytes()
    assert ScenarioConfig.from_dict(a.to_dict()).to_bytes() == a.to_bytes()


def test_standard_split_sizes_and_disjoint():
    scen = ScenarioSet.standard("find_return")
    assert len(scen.train_seeds) == 256 and len(scen.test_seeds) == 64
    assert not set(scen.train_seeds) & set(scen.test_seeds)
    again = ScenarioSet.from_json(scen.to_json())
    assert again == scen
    with pytest.raises(ValueError, match="overlap"):
        ScenarioSet("find_return", GenerationParams(), [1, 2], [2, 3])


@pytest.mark.parametrize("kind", KINDS)
def test_every_free_cell_reachable_and_items_distinct(kind):
    for seed in range(1000):
        cfg = generate(seed, kind)
        grid = cfg.grid_array()
        b = cfg.block_size
        spawn = world_to_cell(cfg.spawn[0], cfg.spawn[1], b)
        dist = bfs_distances(grid, spawn)
        assert np.all(dist[~grid] >= 0), seed
        cells = [world_to_cell(it.x, it.y, b) for it in cfg.items]
        assert len(set(cells + [spawn])) == len(cells) + 1, seed
        assert all(not grid[c] for c in cells)
        assert grid[0].all() and grid[-1].all() and grid[:, 0].all() and grid[:, -1].all()


def test_find_return_layout():
    cfg = generate(5, "find_return")
    b = cfg.block_size
    dist = bfs_distances(cfg.grid_array(), world_to_cell(cfg.spawn[0], cfg.spawn[1], b))
    red, green = cfg.items
    assert dist[world_to_cell(green.x, green.y, b)] == 1
    assert dist[world_to_cell(red.x, red.y, b)] >= cfg.params.min_goal_distance
    assert cfg.goal == (green.x, green.y)


def test_invalid_generation_parameters():
    with pytest.raises(ValueError, match="odd"):
        GenerationParams(size=8)
    with pytest.raises(ValueError, match="kind"):
        generate(0, "mountain")


# ---------------------------------------------------------------- dynamics and rewards

def test_noop_costs_the_step_penalty_and_keeps_pose():
    sim = Simulator(generate(3, "find_return"))
    pose = sim.pose.copy()
    reward, done, _ = sim.advance(NOOP)
    assert reward == pytest.approx(-0.0004) and not done
    np.testing.assert_array_equal(sim.pose, pose)
    np.testing.assert_array_equal(sim.last_true_delta, 0.0)


def test_turn_changes_heading_by_frame_skip_steps():
    sim = Simulator(generate(3, "find_return"))
    phi = sim.pose[2]
    sim.advance(TURN_LEFT)
    d = (sim.pose[2] - phi + math.pi) % (2 * math.pi) - math.pi
    assert d == pytest.approx(4 * math.radians(8.0))


def test_wall_collision_leaves_pose_unchanged():
    cfg = generate(0, "labyrinth")
    b = cfg.block_size
    grid = open_room()
    # one block from the east wall, facing it, already touching with the body radius
    x = 8 * b - 0.2 - 1e-6
    far_exit = replace(cfg.items[0], x=1.5 * b, y=1.5 * b)
    sim = Simulator(replace(cfg, grid=grid.tolist(), spawn=(x, 4.5 * b, 0.0), items=[far_exit]))
    pose = sim.pose.copy()
    sim.advance(FORWARD)
    np.testing.assert_array_equal(sim.pose, pose)
    sim.advance(BACKWARD)
    assert sim.pose[0] == pytest.approx(x - 4 * 0.35)


def test_final_ordered_item_pays_item_and_completion():
    cfg = generate(2, "ordered_k_item")
    sim = Simulator(cfg)
    last = max(cfg.items, key=lambda it: it.order)
    for idx, it in enumerate(cfg.items):
        if it is not last:
            sim.active[idx] = False
    sim.next_item = last.order
    sim.pose[:2] = (last.x, last.y)
    reward, done, info = sim.advance(NOOP)
    assert done and reward == pytest.approx(1.0 - 0.0004)


def test_out_of_order_item_is_ignored():
    cfg = generate(2, "ordered_k_item")
    sim = Simulator(cfg)
    second = next(it for it in cfg.items if it.order == 1)
    sim.pose[:2] = (second.x, second.y)
    reward, done, _ = sim.advance(NOOP)
    assert reward == pytest.approx(-0.0004) and not done and sim.next_item == 0


def test_find_return_two_phases():
    cfg = generate(4, "find_return")
    sim = Simulator(cfg)
    red = cfg.items[0]
    sim.pose[:2] = (red.x, red.y)
    r1, done, info = sim.advance(NOOP)
    assert r1 == pytest.approx(0.5 - 0.0004) and not done and info["phase"] == 1
    sim.pose[:2] = cfg.goal
    r2, done, _ = sim.advance(NOOP)
    assert r2 == pytest.approx(0.5 - 0.0004) and done


def test_stepping_a_finished_episode_raises():
    cfg = generate(0, "labyrinth", GenerationParams(t_max=2))
    sim = Simulator(cfg)
    sim.advance(NOOP)
    _, done, info = sim.advance(NOOP)
    assert done and info["timeout"]
    with pytest.raises(EpisodeFinished):
        sim.advance(NOOP)
    sim.reset()
    sim.advance(NOOP)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_rewards_stay_in_bounds(seed, actions):
    sim = Simulator(generate(seed, "find_return"))
    for a in actions:
        r, done, _ = sim.advance(a)
        assert -0.0004 - 1e-12 <= r <= 1.0
        assert not _blocked(sim.grid, sim.block, sim.pose[0], sim.pose[1], 0.2)
        if done:
            break


def test_pool_resets_finished_envs():
    params = GenerationParams(t_max=2)
    pool = EnvPool("labyrinth", [0, 1, 2], 2, params, rng=np.random.default_rng(0))
    obs = pool.reset()
    assert obs["new_episode"].all() and obs["rgbd"].shape == (2, 4, 64, 112)
    obs, r, d, infos = pool.step([NOOP, NOOP])
    assert not d.any()
    obs, r, d, infos = pool.step([NOOP, NOOP])
    assert d.all() and obs["new_episode"].all()
    np.testing.assert_array_equal(obs["reported_delta"], 0.0)
    assert pool.episodes_started == 4


# ---------------------------------------------------------------- noise

def test_noise_free_delta_is_exact():
    d = np.array([0.3, -0.1, 0.2])
    np.testing.assert_array_equal(noisy_delta(d, 0.0, np.random.default_rng(0)), d)
    with pytest.raises(ValueError):
        noisy_delta(d, -0.1, np.random.default_rng(0))


def test_noise_is_multiplicative_with_unit_mean():
    rng = np.random.default_rng(0)
    d = np.array([0.3, -0.1, 0.2])
    samples = np.stack([noisy_delta(d, 0.1, rng) for _ in range(20000)])
    ratio = samples / d
    np.testing.assert_allclose(ratio.mean(axis=0), 1.0, atol=0.01)
    np.testing.assert_allclose(ratio.std(axis=0), 0.1, atol=0.005)


def test_noise_reproducible_from_seed():
    cfg = generate(9, "find_return")
    a, b = Simulator(cfg, 0.1, noise_seed=3), Simulator(cfg, 0.1, noise_seed=3)
    for act in (FORWARD, TURN_LEFT, FORWARD):
        a.advance(act)
        b.advance(act)
        np.testing.assert_array_equal(a.last_reported_delta, b.last_reported_delta)


# ---------------------------------------------------------------- rendering

@pytest.mark.parametrize("d", [0.5, 1.3, 4.0, 6.2])
def test_depth_facing_a_wall_is_its_distance(d):
    grid = open_room()
    b = 14.0 / 9
    wall_x = 8 * b
    frame = render64(grid, b, (wall_x - d, 4.5 * b, 0.0))
    wall_d, *_ = cast_rays(grid[None], np.array([b]), np.array([[wall_x - d, 4.5 * b, 0.0]]), INTR)
    # columns whose ray reaches the east wall see it at the same perpendicular depth
    on_east = np.abs(wall_d[0] - d) < 1e-6
    assert on_east[INTR.width // 2 - 1] and on_east[INTR.width // 2]
    center_rows = frame[3, INTR.height // 2 - 1:INTR.height // 2 + 1]
    np.testing.assert_allclose(center_rows[:, INTR.width // 2 - 1:INTR.width // 2 + 1], d, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_depth_bounded_by_the_diagonal(seed):
    cfg = generate(seed, "labyrinth")
    sim = Simulator(cfg)
    depth = sim.render()[3]
    assert np.all(depth > 0) and np.all(depth <= cfg.params.extent * math.sqrt(2))


def test_item_footprint_shrinks_with_distance():
    grid = open_room(15)
    b = 1.0
    counts = []
    for dist in (1.5, 3.0, 6.0):
        bb = Billboard(2.0 + dist, 7.5, (1.0, 0.0, 0.0))
        frame = render64(grid, b, (2.0, 7.5, 0.0), [bb])
        counts.append(int(((frame[0] == 1.0) & (frame[1] == 0.0)).sum()))
    assert counts[0] > counts[1] > counts[2] > 0


def test_billboard_occluded_by_wall():
    grid = open_room(15)
    grid[7, 5] = True
    bb = Billboard(8.0, 7.5, (1.0, 0.0, 0.0))
    frame = render64(grid, 1.0, (2.0, 7.5, 0.0), [bb])
    center = frame[:, :, INTR.width // 2 - 2:INTR.width // 2 + 2]
    assert not ((center[0] == 1.0) & (center[1] == 0.0)).any()


def test_render_is_deterministic_and_float32_in_sim():
    sim = Simulator(generate(1, "find_return"))
    a, b = sim.render(), sim.render()
    assert a.dtype == np.float32 and a.shape == (4, 64, 112)
    np.testing.assert_array_equal(a, b)
    assert a[:3].min() >= 0 and a[:3].max() <= 1


def wall_pixel_points(cfg, pose):
    """World points of every wall pixel plus the (row, col) block each ray hit."""
    grid = cfg.grid_array()
    b = cfg.block_size
    frame = render64(grid, b, pose)
    wall_d, rows, cols, _ = cast_rays(grid[None], np.array([b]), np.asarray(pose, float)[None], INTR)
    depth = frame[3]
    is_wall = depth == wall_d[0][None, :]
    v, u = np.nonzero(is_wall)
    ego = unproject(u + 0.5, v + 0.5, depth[v, u], INTR)
    world = ego_to_allocentric(ego, pose)
    return world, rows[0][u], cols[0][u], b


def test_wall_pixels_unproject_onto_wall_faces():
    """100 scenes: each wall pixel lands on a face of the block its ray hit, within 1e-5 m."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for scene in range(100):
        cfg = generate(scene, "labyrinth")
        free = np.argwhere(~cfg.grid_array())
        i, j = free[rng.integers(len(free))]
        b = cfg.block_size
        pose = np.array([(j + rng.uniform(0.25, 0.75)) * b, (i + rng.uniform(0.25, 0.75)) * b,
                         rng.uniform(-math.pi, math.pi)])
        world, rows, cols, b = wall_pixel_points(cfg, pose)
        assert len(world) > 0
        x0, x1 = cols * b, (cols + 1) * b
        y0, y1 = rows * b, (rows + 1) * b
        # distance to the block outline: on one of its edges, within its span
        inside_x = np.clip(world[:, 0], x0, x1)
        inside_y = np.clip(world[:, 1], y0, y1)
        off_box = np.hypot(world[:, 0] - inside_x, world[:, 1] - inside_y)
        to_edge = np.minimum.reduce([np.abs(world[:, 0] - x0), np.abs(world[:, 0] - x1),
                                     np.abs(world[:, 1] - y0), np.abs(world[:, 1] - y1)])
        worst = max(worst, float(np.max(np.maximum(off_box, to_edge))))
        assert np.all(cfg.grid_array()[rows, cols])
    assert worst <= 1e-5, worst


# ---------------------------------------------------------------- replays

def test_replay_resimulates_exactly(tmp_path):
    cfg = generate(12, "find_return")
    rng = np.random.default_rng(1)
    actions = rng.integers(0, 5, 60).tolist()
    sim = Simulator(cfg, 0.1, noise_seed=4)
    trace = []
    for a in actions:
        r, done, _ = sim.advance(a)
        trace.append((sim.pose.copy(), r))
        if done:
            break
    path = tmp_path / "ep.json"
    save_replay(path, replay_record(cfg, actions, 0.1, 4))
    replayed = list(resimulate(load_replay(path), render=True))
    assert len(replayed) == len(trace)
    for (pose, r), (pose2, r2, _, frame) in zip(trace, replayed):
        np.testing.assert_array_equal(pose, pose2)
        assert r == r2 and frame.shape == (4, 64, 112)


def test_replay_version_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"version": 99}')
    with pytest.raises(ValueError, match="version"):
        load_replay(path)
