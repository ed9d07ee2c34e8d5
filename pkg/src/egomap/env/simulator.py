"""First-person simulator: kinematics, rewards, ego-motion oracle, env pool."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, relative_delta, wrap_angle
from .render import Billboard, render_batch
from .scenario import ITEM_COLORS, GenerationParams, ScenarioConfig, generate, wall_colors

FORWARD, BACKWARD, TURN_LEFT, TURN_RIGHT, NOOP = range(5)
ACTIONS = ("forward", "backward", "turn_left", "turn_right", "noop")
NUM_ACTIONS = len(ACTIONS)
NOISE_SIGMAS = tuple(round(0.02 * i, 2) for i in range(11))
REPLAY_VERSION = 1


@dataclass(frozen=True)
class Kinematics:
    move_step: float = 0.35
    turn_step: float = math.radians(8.0)
    frame_skip: int = 4
    agent_radius: float = 0.2


@dataclass(frozen=True)
class RewardSpec:
    step_penalty: float = 0.0004
    item_reward: float = 0.5
    completion_bonus: float = 0.5
    exit_reward: float = 1.0
    pickup_radius: float = 0.6


@dataclass
class Observation:
    rgbd: np.ndarray  # (4, H, W): RGB in [0, 1], depth in meters
    true_delta: np.ndarray
    reported_delta: np.ndarray


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class EpisodeFinished(RuntimeError):
    pass


def noisy_delta(delta: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Scale each ego-motion component by an independent Normal(1, sigma) draw."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    delta = np.asarray(delta, dtype=np.float64)
    if sigma == 0:
        return delta.copy()
    return delta * rng.normal(1.0, sigma, size=delta.shape)


def _blocked(grid: np.ndarray, block: float, x: float, y: float, radius: float) -> bool:
    """Whether a disk of ``radius`` at (x, y) touches a solid block or leaves the grid."""
    n = grid.shape[0]
    i0, i1 = int(math.floor((y - radius) / block)), int(math.floor((y + radius) / block))
    j0, j1 = int(math.floor((x - radius) / block)), int(math.floor((x + radius) / block))
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            if i < 0 or j < 0 or i >= n or j >= n:
                return True
            if grid[i, j]:
                nx = min(max(x, j * block), (j + 1) * block)
                ny = min(max(y, i * block), (i + 1) * block)
                if (nx - x) ** 2 + (ny - y) ** 2 < radius * radius:
                    return True
    return False


class Simulator:
    """One episode at a time on one scenario configuration.

    Noise on the reported ego-motion is drawn from a generator seeded by
    (config seed, noise_seed), so a seed and an action list reproduce an
    episode exactly.
    """

    def __init__(self, config: ScenarioConfig, noise_sigma: float = 0.0, noise_seed: int = 0,
                 intr: CameraIntrinsics | None = None, kinematics: Kinematics | None = None,
                 rewards: RewardSpec | None = None):
        self.config = config
        self.intr = intr or CameraIntrinsics()
        self.kin = kinematics or Kinematics()
        self.rewards = rewards or RewardSpec()
        self.noise_sigma = noise_sigma
        self.noise_seed = noise_seed
        self.grid = config.grid_array()
        self.block = config.block_size
        self.walls = wall_colors(config)
        self.reset()

    # -------------------------------------------------------------- episode
    def reset(self) -> Observation:
        self.pose = np.array(self.config.spawn, dtype=np.float64)
        self.pose[2] = wrap_angle(self.pose[2])
        self.steps = 0
        self.done = False
        self.phase = 0  # find_return: 0 seeking red, 1 returning
        self.next_item = 0
        self.collected: list[int] = []
        self.active = [True] * len(self.config.items)
        self.total_reward = 0.0
        self.noise_rng = np.random.default_rng([self.config.seed, self.noise_seed])
        zero = np.zeros(3)
        return Observation(self.render(), zero, zero.copy())

    @property
    def anchor(self) -> np.ndarray:
        e = self.config.params.extent
        return np.array([e / 2, e / 2])

    def billboards(self) -> list[Billboard]:
        return [Billboard(it.x, it.y, ITEM_COLORS[it.color])
                for it, on in zip(self.config.items, self.active) if on]

    def render(self, pose: np.ndarray | None = None) -> np.ndarray:
        pose = self.pose if pose is None else np.asarray(pose, dtype=np.float64)
        return render_batch(self.grid[None], np.array([self.block]), self.walls[None], pose[None],
                            [self.billboards()], self.intr, dtype=np.float32)[0]

    # -------------------------------------------------------------- dynamics
    def _move(self, action: int) -> None:
        k = self.kin
        if action in (TURN_LEFT, TURN_RIGHT):
            sign = 1.0 if action == TURN_LEFT else -1.0
            self.pose[2] = wrap_angle(self.pose[2] + sign * k.turn_step)
        elif action in (FORWARD, BACKWARD):
            sign = 1.0 if action == FORWARD else -1.0
            nx = self.pose[0] + sign * k.move_step * math.cos(self.pose[2])
            ny = self.pose[1] + sign * k.move_step * math.sin(self.pose[2])
            if not _blocked(self.grid, self.block, nx, ny, k.agent_radius):
                self.pose[0], self.pose[1] = nx, ny
        elif action != NOOP:
            raise ValueError(f"unknown action {action}; expected 0..{NUM_ACTIONS - 1}")

    def _near(self, x: float, y: float, radius: float) -> bool:
        return (self.pose[0] - x) ** 2 + (self.pose[1] - y) ** 2 <= radius * radius

    def _events(self) -> float:
        """Reward for item contact at the current pose; may end the episode."""
        cfg, rw = self.config, self.rewards
        reward = 0.0
        if cfg.kind == "find_return":
            red = cfg.items[0]
            if self.phase == 0 and self._near(red.x, red.y, rw.pickup_radius):
                self.phase = 1
                self.active[0] = False
                self.collected.append(0)
                reward += rw.item_reward
            elif self.phase == 1 and self._near(cfg.goal[0], cfg.goal[1], self.block):
                reward += rw.completion_bonus
                self.done = True
        elif cfg.kind == "labyrinth":
            ex = cfg.items[0]
            if self._near(ex.x, ex.y, rw.pickup_radius):
                reward += rw.exit_reward
                self.done = True
        else:
            for idx, it in enumerate(cfg.items):
                # out-of-order contact is ignored: the item stays put
                if self.active[idx] and it.order == self.next_item and self._near(it.x, it.y, rw.pickup_radius):
                    self.active[idx] = False
                    self.collected.append(idx)
                    self.next_item += 1
                    reward += rw.item_reward
                    if self.next_item == len(cfg.items):
                        reward += rw.completion_bonus
                        self.done = True
                    break
        return reward

    def advance(self, action: int) -> tuple[float, bool, dict]:
        """Apply one action (over the frame skip) without rendering."""
        if self.done:
            raise EpisodeFinished("episode finished; call reset() before stepping")
        prev = self.pose.copy()
        reward = -self.rewards.step_penalty
        for _ in range(self.kin.frame_skip):
            self._move(int(action))
            reward += self._events()
            if self.done:
                break
        self.steps += 1
        timeout = False
        if not self.done and self.steps >= self.config.t_max:
            self.done = timeout = True
        self.total_reward += reward
        self.last_true_delta = relative_delta(prev, self.pose)
        self.last_reported_delta = noisy_delta(self.last_true_delta, self.noise_sigma, self.noise_rng)
        info = {"steps": self.steps, "phase": self.phase, "collected": list(self.collected),
                "timeout": timeout, "episode_return": self.total_reward}
        return reward, self.done, info

    def step(self, action: int) -> StepResult:
        reward, done, info = self.advance(action)
        obs = Observation(self.render(), self.last_true_delta, self.last_reported_delta)
        return StepResult(obs, reward, done, info)


class EnvPool:
    """N simulators stepped in lockstep with one batched render.

    Finished episodes are reset immediately on a new configuration drawn
    from ``seeds``; the returned observation is then the first frame of the
    new episode and ``new_episode`` flags it.
    """

    def __init__(self, kind: str, seeds: list[int], n_envs: int, params: GenerationParams | None = None,
                 noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
                 intr: CameraIntrinsics | None = None, kinematics: Kinematics | None = None,
                 rewards: RewardSpec | None = None, sequential: bool = False):
        self.kind = kind
        self.seeds = list(seeds)
        self.params = params or GenerationParams()
        self.noise_sigma = noise_sigma
        self.rng = rng or np.random.default_rng(0)
        self.intr = intr or CameraIntrinsics()
        self.kin = kinematics
        self.rewards = rewards
        self.sequential = sequential
        self._cursor = 0
        self._cache: dict[int, ScenarioConfig] = {}
        self.n_envs = n_envs
        self.episodes_started = 0
        self.sims = [self._new_sim() for _ in range(n_envs)]

    def config_for(self, seed: int) -> ScenarioConfig:
        if seed not in self._cache:
            self._cache[seed] = generate(seed, self.kind, self.params)
        return self._cache[seed]

    def _new_sim(self) -> Simulator:
        if self.sequential:
            seed = self.seeds[self._cursor % len(self.seeds)]
            self._cursor += 1
        else:
            seed = self.seeds[int(self.rng.integers(len(self.seeds)))]
        noise_seed = int(self.rng.integers(2**31)) if self.noise_sigma > 0 else 0
        self.episodes_started += 1
        return Simulator(self.config_for(seed), self.noise_sigma, noise_seed, self.intr, self.kin, self.rewards)

    def _render(self) -> np.ndarray:
        grids = np.stack([s.grid for s in self.sims])
        return render_batch(grids, np.array([s.block for s in self.sims]), np.stack([s.walls for s in self.sims]),
                            self.poses(), [s.billboards() for s in self.sims], self.intr, dtype=np.float32)

    def poses(self) -> np.ndarray:
        return np.stack([s.pose for s in self.sims])

    def anchors(self) -> np.ndarray:
        return np.stack([s.anchor for s in self.sims])

    def reset(self) -> dict:
        return {"rgbd": self._render(), "true_delta": np.zeros((self.n_envs, 3)),
                "reported_delta": np.zeros((self.n_envs, 3)), "new_episode": np.ones(self.n_envs, bool),
                "start_pose": self.poses()}

    def step(self, actions) -> tuple[dict, np.ndarray, np.ndarray, list[dict]]:
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, bool)
        true_d = np.zeros((self.n_envs, 3))
        rep_d = np.zeros((self.n_envs, 3))
        infos = []
        for e, a in enumerate(actions):
            r, d, info = self.sims[e].advance(int(a))
            rewards[e], dones[e] = r, d
            info["seed"] = self.sims[e].config.seed
            infos.append(info)
            if d:
                self.sims[e] = self._new_sim()
            else:
                true_d[e] = self.sims[e].last_true_delta
                rep_d[e] = self.sims[e].last_reported_delta
        obs = {"rgbd": self._render(), "true_delta": true_d, "reported_delta": rep_d,
               "new_episode": dones.copy(), "start_pose": self.poses()}
        return obs, rewards, dones, infos


# ------------------------------------------------------------------ replays

def replay_record(config: ScenarioConfig, actions: list[int], noise_sigma: float = 0.0, noise_seed: int = 0) -> dict:
    return {"version": REPLAY_VERSION, "kind": config.kind, "seed": config.seed,
            "params": config.params.__dict__, "noise_sigma": noise_sigma, "noise_seed": noise_seed,
            "actions": [int(a) for a in actions]}


def save_replay(path, record: dict) -> None:
    with open(path, "w") as fh:
        json.dump(record, fh)


def load_replay(path) -> dict:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("version") != REPLAY_VERSION:
        raise ValueError(f"unsupported replay version {record.get('version')}")
    return record


def resimulate(record: dict, render: bool = False):
    """Re-run a replay; yields (pose, reward, done, frame-or-None) per action."""
    config = generate(record["seed"], record["kind"], GenerationParams(**record["params"]))
    sim = Simulator(config, record.get("noise_sigma", 0.0), record.get("noise_seed", 0))
    for a in record["actions"]:
        reward, done, _ = sim.advance(a)
        yield sim.pose.copy(), reward, done, (sim.render() if render else None)
        if done:
            break
