import math

import numpy as np
import pytest

from egomap import diffcore as dc
from egomap.agents import (ABLATION_TOGGLES, AGENT_KINDS, CONTEXT_SIZE, QUERY_UNITS, Agent, AgentConfig,
                           make_agent, quantize_heading, with_ablation)
from egomap.checks import end_to_end_check
from egomap.env import EnvPool

EXTENT = 14.0


def conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def dense(n_in, n_out):
    return n_in * n_out + n_out


PERCEPTION = conv_params(4, 16, 8) + conv_params(16, 32, 4) + conv_params(32, 16, 3)
GRU = 2 * (3 * 128 * 128) + 2 * 3 * 128
GLOBAL = 3 * conv_params(16, 16, 4) - conv_params(16, 16, 4) + conv_params(16, 16, 3) + dense(256, 256) + dense(256, 32)
EXPECTED_PARAMS = {
    "baseline": PERCEPTION + dense(644, 128) + GRU + dense(128, 5) + dense(128, 1),
    "egomap": PERCEPTION + GLOBAL + dense(672, 128) + GRU + dense(128, 17) + dense(146, 5) + dense(146, 1),
}
EXPECTED_PARAMS["neuralmap"] = EXPECTED_PARAMS["egomap"] + dense(128, 16)
# frozen regression values
FROZEN_PARAMS = {"baseline": 199_366, "egomap": 289_811, "neuralmap": 291_875}


@pytest.fixture(scope="module")
def pool_obs():
    pool = EnvPool("find_return", list(range(8)), 3, rng=np.random.default_rng(0))
    obs = pool.reset()
    return pool, obs


def run(agent, pool, obs, steps=1, state=None):
    state = state or agent.initial_state(obs["start_pose"], pool.anchors(), EXTENT)
    out = None
    for _ in range(steps):
        out, state = agent.forward(obs["rgbd"], obs["reported_delta"], state)
    return out, state


@pytest.mark.parametrize("kind", AGENT_KINDS)
def test_parameter_counts(kind):
    agent = make_agent(kind)
    assert agent.num_parameters() == EXPECTED_PARAMS[kind] == FROZEN_PARAMS[kind]


def test_architecture_sizes(pool_obs):
    pool, obs = pool_obs
    base, ego = make_agent("baseline"), make_agent("egomap")
    assert base.feature_size == 640 and base.recurrent_input == 644
    assert ego.recurrent_input == 672
    assert ego.params["query.w"].shape == (QUERY_UNITS, 128) and QUERY_UNITS == 17
    assert ego.head_input == 146 and CONTEXT_SIZE == 18
    assert ego.params["reduce.w"].shape == (128, 672)
    assert ego.params["gru.w_hh"].shape == (3 * 128, 128)
    out, state = run(ego, pool, obs)
    assert out.logits.shape == (3, 5) and out.value.shape == (3,)
    assert out.diagnostics["context"].shape == (3, 18)
    assert out.diagnostics["attention"].shape == (3, 24 * 24)
    assert state.hidden.shape == (3, 128)
    assert ego.reader(dc.Tensor(out.diagnostics["view"])).shape == (3, 32)
    out, _ = run(base, pool, obs)
    assert out.logits.shape == (3, 5) and out.value.shape == (3,)


def test_beta_starts_near_one(pool_obs):
    pool, obs = pool_obs
    out, _ = run(make_agent("egomap"), pool, obs)
    assert np.all(out.diagnostics["beta"] >= 1.0)
    assert np.all(out.diagnostics["beta"] < 1.1)


@pytest.mark.parametrize("kind", AGENT_KINDS)
def test_forward_is_deterministic_and_valid(kind, pool_obs):
    pool, obs = pool_obs
    agent = make_agent(kind)
    a, _ = run(agent, pool, obs, steps=2)
    b, _ = run(agent, pool, obs, steps=2)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)
    np.testing.assert_array_equal(a.value.data, b.value.data)
    assert np.all(np.isfinite(a.logits.data))
    probs = dc.softmax(a.logits).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_zero_observation_output_fixed_by_parameters():
    agent = make_agent("baseline")
    state = agent.initial_state(np.zeros((1, 3)))
    a, _ = agent.forward(np.zeros((1, 4, 64, 112)), np.zeros((1, 3)), state)
    other = make_agent("baseline", init_seed=1)
    b, _ = other.forward(np.zeros((1, 4, 64, 112)), np.zeros((1, 3)), other.initial_state(np.zeros((1, 3))))
    a2, _ = agent.forward(np.zeros((1, 4, 64, 112)), np.zeros((1, 3)), agent.initial_state(np.zeros((1, 3))))
    np.testing.assert_array_equal(a.logits.data, a2.logits.data)
    assert not np.array_equal(a.logits.data, b.logits.data)


def test_disabled_memory_leaves_only_recurrent_path(pool_obs):
    pool, obs = pool_obs
    agent = make_agent("egomap", write_enabled=False)
    out, state = run(agent, pool, obs, steps=2)
    assert np.all(state.map.features.data == 0) and state.map.occupancy.sum() == 0
    # depth only reaches the policy through the map once the CNN input is fixed
    moved = dict(obs)
    moved["start_pose"] = obs["start_pose"] + np.array([1.0, -0.5, 0.3])
    state2 = agent.initial_state(moved["start_pose"], pool.anchors(), EXTENT)
    out2, _ = agent.forward(obs["rgbd"], obs["reported_delta"], state2)
    out1, _ = agent.forward(obs["rgbd"], obs["reported_delta"],
                            agent.initial_state(obs["start_pose"], pool.anchors(), EXTENT))
    np.testing.assert_allclose(out1.logits.data, out2.logits.data, atol=1e-6)


def test_map_is_written_with_memory_enabled(pool_obs):
    pool, obs = pool_obs
    _, state = run(make_agent("egomap"), pool, obs)
    assert state.map.occupancy.sum() > 0


@pytest.mark.parametrize("toggle", ABLATION_TOGGLES)
def test_ablation_toggles_are_configuration_only(toggle, pool_obs):
    pool, obs = pool_obs
    config = with_ablation(AgentConfig(kind="egomap"), toggle)
    agent = Agent(config)
    out, _ = run(agent, pool, obs)
    assert out.logits.shape == (3, 5)
    if toggle == "no-query":
        assert "attention" not in out.diagnostics
    if toggle == "no-position":
        np.testing.assert_array_equal(out.diagnostics["context"][:, 16:], 0.0)
    if toggle == "no-temperature":
        np.testing.assert_array_equal(out.diagnostics["beta"], 1.0)
    if toggle == "metric=l1":
        assert config.metric == "l1"


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError, match="toggle"):
        with_ablation(AgentConfig(), "no-brain")
    with pytest.raises(ValueError, match="kind"):
        AgentConfig(kind="transformer")


def test_heading_quantization():
    assert quantize_heading(math.radians(50)) == pytest.approx(math.pi / 2)
    assert quantize_heading(math.radians(44)) == pytest.approx(0.0)
    assert abs(quantize_heading(math.radians(-170))) == pytest.approx(math.pi)
    assert quantize_heading(math.radians(-100)) == pytest.approx(-math.pi / 2)


def test_neuralmap_writes_one_cell_per_step(pool_obs):
    pool, obs = pool_obs
    agent = make_agent("neuralmap")
    state = agent.initial_state(obs["start_pose"], pool.anchors(), EXTENT)
    prev = state.map.occupancy.copy()
    for _ in range(3):
        _, state = agent.forward(obs["rgbd"], np.zeros((3, 3)), state)
        diff = state.map.occupancy - prev
        assert np.all(diff.reshape(3, -1).sum(axis=1) == 1)
        prev = state.map.occupancy.copy()


def test_neuralmap_same_cell_blends_with_alpha(pool_obs):
    pool, obs = pool_obs
    with dc.precision("high"):
        agent = make_agent("neuralmap")
        state = agent.initial_state(obs["start_pose"][:1], pool.anchors()[:1], EXTENT)
        rgbd = obs["rgbd"][:1].astype(np.float64)
        h0 = state.hidden.data.copy()
        _, s1 = agent.forward(rgbd, np.zeros((1, 3)), state)
        first = np.tanh(h0 @ agent.params["write_head.w"].data.T + agent.params["write_head.b"].data)[0]
        h1 = s1.hidden.data.copy()
        _, s2 = agent.forward(rgbd, np.zeros((1, 3)), s1)
        second = np.tanh(h1 @ agent.params["write_head.w"].data.T + agent.params["write_head.b"].data)[0]
    cell = np.flatnonzero(s2.map.occupancy[0])
    assert len(cell) == 1 and s2.map.occupancy[0].ravel()[cell[0]] == 2
    r, c = divmod(int(cell[0]), 24)
    np.testing.assert_allclose(s2.map.features.data[0, :, r, c], 0.9 * first + 0.1 * second, atol=1e-12)


def test_state_reset_zeroes_hidden_and_map(pool_obs):
    pool, obs = pool_obs
    agent = make_agent("egomap")
    _, state = run(agent, pool, obs, steps=2)
    mask = np.array([True, False, False])
    new = state.reset(mask, obs["start_pose"], pool.anchors())
    assert np.all(new.hidden.data[0] == 0) and np.any(new.hidden.data[1] != 0)
    assert new.map.occupancy[0].sum() == 0 and new.map.occupancy[1].sum() > 0
    np.testing.assert_array_equal(new.poses[0], obs["start_pose"][0])


@pytest.mark.parametrize("kind", AGENT_KINDS)
@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(kind, seed):
    res = end_to_end_check(kind, seed=seed)
    assert res.passed, res


def test_gradient_reaches_perception_through_the_map(pool_obs):
    """The attention context alone is enough to move the perception weights."""
    pool, obs = pool_obs
    agent = make_agent("egomap")
    state = agent.initial_state(obs["start_pose"], pool.anchors(), EXTENT)
    with dc.Tape() as tape:
        out, _ = agent.forward(obs["rgbd"], obs["reported_delta"], state)
    # seed only the context part of the head input through the policy weights on it
    ctx_w = agent.params["policy.w"].data[:, 128:]
    assert np.abs(ctx_w).sum() > 0
    tape.backward(out.logits, seed=np.ones_like(out.logits.data))
    assert np.abs(agent.params["perception.conv0.w"].grad).max() > 0
    assert np.abs(agent.params["query.w"].grad).max() > 0


def test_checkpoint_round_trip(tmp_path, pool_obs):
    pool, obs = pool_obs
    agent = make_agent("egomap", init_seed=3, metric="l1")
    path = agent.save(tmp_path / "ckpt.npz", extra={"frames": 10})
    loaded, meta = Agent.load(path)
    assert meta["frames"] == 10 and meta["config_hash"] == agent.config.digest()
    assert loaded.config == agent.config
    for k in agent.params:
        np.testing.assert_array_equal(loaded.params[k].data, agent.params[k].data)
    a, _ = run(agent, pool, obs)
    b, _ = run(loaded, pool, obs)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)


def test_checkpoint_mismatch_rejected(tmp_path):
    path = make_agent("baseline").save(tmp_path / "b.npz")
    arrays = dict(np.load(path))
    with pytest.raises(ValueError, match="mismatch"):
        make_agent("egomap").load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k != "__meta__"})
