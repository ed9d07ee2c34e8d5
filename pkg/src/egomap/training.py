"""Synchronous advantage actor-critic over a pool of simulators."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .agents import ABLATION_TOGGLES, Agent, AgentConfig, with_ablation
from .diffcore import Tape, Tensor
from .env import EnvPool, GenerationParams, ScenarioSet, Simulator, render_batch, replay_record, save_replay
from .env.simulator import NUM_ACTIONS, Kinematics

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("seed", "update", "frames", "train_return", "train_episodes", "test_return", "test_std",
                  "policy_loss", "value_loss", "entropy", "grad_norm", "beta_mean")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    scenario: str = "find_return"
    agent: str = "egomap"
    gamma: float = 0.99
    entropy_coef: float = 0.001
    lr: float = 7e-4
    n_envs: int = 16
    rollout: int = 128
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    blend_alpha: float = 0.9
    loss_reduction: str = "mean"
    normalize_advantages: bool = False
    # desk-scale budget; the full-scale runs used 1.2e9 frames
    total_frames: int = 5_000_000
    eval_every_frames: int = 1_000_000
    eval_episodes: int = 1
    eval_greedy: bool = False
    checkpoint_every: int = 100
    noise_sigma: float = 0.0
    ablations: list = field(default_factory=list)
    metric: str = "cosine"
    seed: int = 0
    precision: str = "fast"
    maze_size: int = 9
    extent: float = 14.0
    openness: float = 0.15
    min_goal_distance: int = 8
    k_items: int = 4
    t_max: int = 525
    n_train_configs: int = 256
    n_test_configs: int = 64

    def __post_init__(self):
        positive = ("gamma", "lr", "n_envs", "rollout", "total_frames", "rms_alpha", "rms_eps", "t_max",
                    "eval_episodes", "n_train_configs", "n_test_configs", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("entropy_coef", "value_coef", "max_grad_norm", "noise_sigma", "eval_every_frames"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")
        for t in self.ablations:
            if t not in ABLATION_TOGGLES:
                raise ValueError(f"unknown ablation toggle {t!r}; expected one of {ABLATION_TOGGLES}")
        if self.precision not in dc.PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(dc.PRECISIONS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)

    def generation_params(self) -> GenerationParams:
        return GenerationParams(size=self.maze_size, extent=self.extent, openness=self.openness,
                                min_goal_distance=self.min_goal_distance, k_items=self.k_items, t_max=self.t_max)

    def scenario_set(self) -> ScenarioSet:
        return ScenarioSet.standard(self.scenario, self.generation_params(), self.n_train_configs,
                                    self.n_test_configs)

    def agent_config(self) -> AgentConfig:
        cfg = AgentConfig(kind=self.agent, metric=self.metric, alpha=self.blend_alpha, init_seed=self.seed)
        for t in self.ablations:
            cfg = with_ablation(cfg, t)
        return cfg

    @property
    def frames_per_update(self) -> int:
        return self.n_envs * self.rollout * Kinematics().frame_skip


# ---------------------------------------------------------------- rollouts

@dataclass
class RolloutBatch:
    log_probs: list  # T tensors (N,)
    values: list  # T tensors (N,)
    entropies: list  # T tensors (N,)
    actions: np.ndarray  # (T, N)
    rewards: np.ndarray  # (T, N)
    dones: np.ndarray  # (T, N)
    bootstrap: np.ndarray  # (N,) value of the state after the last step
    betas: list = field(default_factory=list)
    finished: list = field(default_factory=list)  # (seed, return) of episodes ending in this batch

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def value_array(self) -> np.ndarray:
        return np.stack([v.data for v in self.values]).astype(np.float64)


def sample_actions(logits: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
    z = logits.astype(np.float64)
    if greedy:
        return z.argmax(axis=1)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(len(p))[:, None]
    return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), NUM_ACTIONS - 1)


class Runner:
    """Holds the pool, the latest observation and the agents' recurrent state between rollouts."""

    def __init__(self, agent: Agent, pool: EnvPool, rng: np.random.Generator):
        self.agent = agent
        self.pool = pool
        self.rng = rng
        self.obs = pool.reset()
        self.state = agent.initial_state(self.obs["start_pose"], pool.anchors(), pool.params.extent)
        self.episode_actions: list[list[int]] = [[] for _ in range(pool.n_envs)]
        self.best: tuple[float, dict] | None = None

    def collect(self, steps: int) -> RolloutBatch:
        """Run ``steps`` synchronous steps; call inside an active tape to train on them."""
        agent, pool = self.agent, self.pool
        # gradients never cross a rollout boundary
        state = self.state.detach()
        log_probs, values, ents, betas = [], [], [], []
        n = pool.n_envs
        actions = np.zeros((steps, n), dtype=np.int64)
        rewards = np.zeros((steps, n))
        dones = np.zeros((steps, n), dtype=bool)
        finished = []
        obs = self.obs
        for t in range(steps):
            out, state = agent.forward(obs["rgbd"], obs["reported_delta"], state)
            a = sample_actions(out.logits.data, self.rng)
            log_probs.append(dc.categorical_log_prob(out.logits, a))
            ents.append(dc.categorical_entropy(out.logits))
            values.append(out.value)
            if "beta" in out.diagnostics:
                betas.append(float(np.mean(out.diagnostics["beta"])))
            try:
                obs, r, d, infos = pool.step(a)
            except Exception as exc:  # surface which envs were running
                seeds = [s.config.seed for s in pool.sims]
                raise TrainingError(f"environment fault at rollout step {t} (seeds {seeds}): {exc}") from exc
            actions[t], rewards[t], dones[t] = a, r, d
            for e in range(n):
                self.episode_actions[e].append(int(a[e]))
                if d[e]:
                    finished.append((infos[e]["seed"], infos[e]["episode_return"]))
                    self._maybe_keep_replay(infos[e], self.episode_actions[e])
                    self.episode_actions[e] = []
            state = state.reset(d, obs["start_pose"], pool.anchors())
        with dc.no_tape():
            out, _ = agent.forward(obs["rgbd"], obs["reported_delta"], state)
        self.obs, self.state = obs, state
        return RolloutBatch(log_probs, values, ents, actions, rewards, dones,
                            out.value.data.astype(np.float64), betas, finished)

    def _maybe_keep_replay(self, info: dict, actions: list[int]) -> None:
        ret = info["episode_return"]
        if self.best is None or ret > self.best[0]:
            config = self.pool.config_for(info["seed"])
            self.best = (ret, replay_record(config, actions, self.pool.noise_sigma, 0))
            self.best[1]["episode_return"] = ret
            self.best[1]["noise_note"] = "noise seed not replayed; exact only for noise_sigma = 0"


def compute_returns(rewards: np.ndarray, dones: np.ndarray, values: np.ndarray, bootstrap: np.ndarray,
                    gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Discounted returns cut at terminals and bootstrapped at the tail; advantages R - V."""
    rewards = np.asarray(rewards, dtype=np.float64)
    t_len = rewards.shape[0]
    returns = np.zeros_like(rewards)
    running = np.asarray(bootstrap, dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        running = rewards[t] + gamma * running * (1.0 - dones[t])
        returns[t] = running
    return returns, returns - values


def a2c_loss(batch: RolloutBatch, returns: np.ndarray, config: TrainConfig,
             advantages: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Policy-gradient + value + entropy loss over a closed batch.

    Advantages enter as constants; by default they are ``returns - V``
    with V read off the batch.
    """
    adv = returns - batch.value_array() if advantages is None else np.asarray(advantages, dtype=np.float64)
    if config.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    logp = dc.stack(batch.log_probs)
    v = dc.stack(batch.values)
    ent = dc.stack(batch.entropies)
    reduce = dc.mean if config.loss_reduction == "mean" else dc.sum_
    dtype = logp.data.dtype
    policy_loss = dc.mul(reduce(dc.mul(logp, adv.astype(dtype))), -1.0)
    diff = dc.sub(v, returns.astype(dtype))
    value_loss = reduce(dc.mul(diff, diff))
    entropy = reduce(ent)
    loss = dc.add(dc.add(policy_loss, dc.mul(value_loss, config.value_coef)), dc.mul(entropy, -config.entropy_coef))
    stats = {"policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data),
             "entropy": float(np.mean(ent.data))}
    return loss, stats


class RMSProp:
    """sq <- a*sq + (1-a)*g^2;  p <- p - lr * g / (sqrt(sq) + eps)."""

    def __init__(self, params: dict[str, Tensor], lr: float, alpha: float = 0.99, eps: float = 1e-5):
        self.params = params
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.square = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            sq = self.square[k]
            sq *= self.alpha
            sq += (1 - self.alpha) * p.grad * p.grad
            p.data -= (self.lr * p.grad / (np.sqrt(sq) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.square.items()}


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()
                          if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def a2c_update(agent: Agent, optimizer: RMSProp, tape: Tape, batch: RolloutBatch, config: TrainConfig) -> dict:
    returns, _ = compute_returns(batch.rewards, batch.dones, batch.value_array(), batch.bootstrap, config.gamma)
    with tape:
        loss, stats = a2c_loss(batch, returns, config)
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite loss {float(loss.data)} ({stats})")
    for p in agent.params.values():
        p.grad = None
    tape.backward(loss)
    tape.release()
    stats["grad_norm"] = clip_grad_norm(agent.params, config.max_grad_norm)
    if not np.isfinite(stats["grad_norm"]):
        raise TrainingError(f"non-finite gradient norm ({stats})")
    optimizer.step()
    stats["loss"] = float(loss.data)
    return stats


# ---------------------------------------------------------------- evaluation

def run_episodes(configs, act: Callable, n_envs: int = 16, episodes: int = 1, noise_sigma: float = 0.0,
                 noise_seed: int = 0, on_reset: Callable | None = None) -> list[float]:
    """Play ``episodes`` episodes on every config with a batched policy.

    ``act(obs, new_episode)`` gets the batched observation dict and returns
    actions; ``on_reset(mask, obs)`` lets stateful policies clear rows.
    Finished slots idle until their whole batch is done.
    """
    jobs = [(c, k) for c in configs for k in range(episodes)]
    returns: list[float] = []
    for start in range(0, len(jobs), n_envs):
        chunk = jobs[start:start + n_envs]
        sims = [Simulator(c, noise_sigma, noise_seed + k) for c, k in chunk]
        done = np.zeros(len(sims), dtype=bool)
        intr = sims[0].intr
        deltas = np.zeros((len(sims), 3))
        new = np.ones(len(sims), dtype=bool)

        def observe():
            frames = render_batch(np.stack([s.grid for s in sims]), np.array([s.block for s in sims]),
                                  np.stack([s.walls for s in sims]), np.stack([s.pose for s in sims]),
                                  [s.billboards() for s in sims], intr, dtype=np.float32)
            return {"rgbd": frames, "reported_delta": deltas.copy(), "new_episode": new.copy(),
                    "start_pose": np.stack([s.pose for s in sims]),
                    "anchors": np.stack([s.anchor for s in sims])}

        obs = observe()
        if on_reset is not None:
            on_reset(new, obs)
        while not done.all():
            actions = act(obs, new)
            new[:] = False
            for e, s in enumerate(sims):
                if done[e]:
                    deltas[e] = 0.0
                    continue
                _, d, _ = s.advance(int(actions[e]))
                deltas[e] = s.last_reported_delta
                done[e] = d
            obs = observe()
        returns.extend(s.total_reward for s in sims)
    return returns


def evaluate(agent: Agent, configs, episodes: int = 1, greedy: bool = False, noise_sigma: float = 0.0,
             seed: int = 0, n_envs: int = 16) -> dict:
    """Mean and std of held-out returns. Parameters are only read."""
    rng = np.random.default_rng([seed, 99])
    holder: dict = {}

    def on_reset(mask, obs):
        holder["state"] = agent.initial_state(obs["start_pose"], obs["anchors"], configs[0].params.extent)

    def act(obs, new):
        out, holder["state"] = agent.forward(obs["rgbd"], obs["reported_delta"], holder["state"])
        return sample_actions(out.logits.data, rng, greedy)

    with dc.no_tape():
        rets = run_episodes(configs, act, n_envs, episodes, noise_sigma, seed, on_reset)
    return {"mean": float(np.mean(rets)), "std": float(np.std(rets)), "returns": rets}


def evaluate_random(configs, episodes: int = 1, seed: int = 0, n_envs: int = 16) -> dict:
    rng = np.random.default_rng(seed)
    rets = run_episodes(configs, lambda obs, new: rng.integers(0, NUM_ACTIONS, len(obs["rgbd"])),
                        n_envs, episodes)
    return {"mean": float(np.mean(rets)), "std": float(np.std(rets)), "returns": rets}


# ---------------------------------------------------------------- training loop

def _write_row(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})


def train(config: TrainConfig, run_dir: Path | None = None, max_updates: int | None = None,
          progress: Callable[[dict], None] | None = None) -> dict:
    """Train one agent; returns a summary with the final held-out evaluation.

    With ``run_dir`` set, rows are appended to ``metrics.csv`` there and
    checkpoints go to ``checkpoints/seed_<seed>/``.
    """
    with dc.precision(config.precision):
        return _train(config, run_dir, max_updates, progress)


def _train(config, run_dir, max_updates, progress):
    scen = config.scenario_set()
    rng = np.random.default_rng(config.seed)
    agent = Agent(config.agent_config())
    pool = EnvPool(config.scenario, scen.train_seeds, config.n_envs, scen.params, config.noise_sigma,
                   rng=np.random.default_rng([config.seed, 1]))
    runner = Runner(agent, pool, np.random.default_rng([config.seed, 2]))
    opt = RMSProp(agent.params, config.lr, config.rms_alpha, config.rms_eps)
    test_configs = scen.configs("test")
    updates = max(1, config.total_frames // config.frames_per_update)
    if max_updates is not None:
        updates = min(updates, max_updates)
    eval_every = max(1, config.eval_every_frames // config.frames_per_update) if config.eval_every_frames else 0
    metrics_path = ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints" / f"seed_{config.seed}"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "replays").mkdir(exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
    recent: list[float] = []
    history = []
    started = time.time()
    for u in range(1, updates + 1):
        with Tape() as tape:
            batch = runner.collect(config.rollout)
        try:
            stats = a2c_update(agent, opt, tape, batch, config)
        except TrainingError:
            if ckpt_dir is not None:
                agent.save(ckpt_dir / "crash.npz", {"update": u})
            raise
        recent.extend(r for _, r in batch.finished)
        recent = recent[-200:]
        row = {"seed": config.seed, "update": u, "frames": u * config.frames_per_update,
               "train_return": float(np.mean(recent)) if recent else float("nan"),
               "train_episodes": len(batch.finished),
               "beta_mean": float(np.mean(batch.betas)) if batch.betas else float("nan"), **stats}
        if eval_every and (u % eval_every == 0 or u == updates):
            ev = evaluate(agent, test_configs, config.eval_episodes, config.eval_greedy, config.noise_sigma,
                          seed=config.seed)
            row["test_return"], row["test_std"] = ev["mean"], ev["std"]
        history.append(row)
        if metrics_path is not None:
            _write_row(metrics_path, row)
        if ckpt_dir is not None and u % config.checkpoint_every == 0:
            agent.save(ckpt_dir / f"update_{u:06d}.npz", {"update": u, "frames": row["frames"]})
        if progress is not None:
            progress(row)
        if u % 20 == 0:
            log.info("update %d frames %d train %.3f entropy %.3f (%.1fs)", u, row["frames"],
                     row["train_return"], stats["entropy"], time.time() - started)
    final = evaluate(agent, test_configs, config.eval_episodes, config.eval_greedy, config.noise_sigma,
                     seed=config.seed)
    summary = {"updates": updates, "frames": updates * config.frames_per_update,
               "test_mean": final["mean"], "test_std": final["std"],
               "train_return": history[-1]["train_return"] if history else float("nan"),
               "seconds": time.time() - started, "config": asdict(config)}
    if run_dir is not None:
        agent.save(ckpt_dir / "final.npz", {"update": updates, "frames": summary["frames"]})
        if runner.best is not None:
            save_replay(run_dir / "replays" / f"seed_{config.seed}_best_train_episode.json", runner.best[1])
        (ckpt_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    summary["agent"] = agent
    summary["history"] = history
    return summary
