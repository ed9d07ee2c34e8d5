"""PNG figures: per-step map triptychs and the rotation degradation strip."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import diffcore as dc  # noqa: E402
from .agents import Agent  # noqa: E402
from .env import Simulator  # noqa: E402
from .memory import checkerboard, rotation_drift  # noqa: E402
from .training import sample_actions  # noqa: E402


@dataclass
class EpisodeTrace:
    frames: list = field(default_factory=list)  # (H, W, 3) RGB
    views: list = field(default_factory=list)  # (C + 2, S, S) egocentric views
    attention: list = field(default_factory=list)  # (S, S) or None
    context: list = field(default_factory=list)  # (C + 2,) or None
    rewards: list = field(default_factory=list)
    channels: int = 16

    def __len__(self) -> int:
        return len(self.frames)


def record_episode(agent: Agent, config, actions=None, max_steps: int = 200, seed: int = 0) -> EpisodeTrace:
    """Run one episode and keep what the figures need. ``actions`` replays a fixed sequence."""
    sim = Simulator(config)
    rng = np.random.default_rng(seed)
    trace = EpisodeTrace(channels=agent.config.map_channels)
    state = agent.initial_state(sim.pose[None], sim.anchor[None], config.params.extent)
    delta = np.zeros((1, 3))
    limit = len(actions) if actions is not None else max_steps
    with dc.no_tape():
        for t in range(min(limit, max_steps)):
            frame = sim.render()
            out, state = agent.forward(frame[None], delta, state)
            size = agent.config.map_size
            trace.frames.append(np.clip(frame[:3].transpose(1, 2, 0), 0, 1))
            trace.views.append(out.diagnostics["view"][0])
            att = out.diagnostics.get("attention")
            trace.attention.append(None if att is None else att[0].reshape(size, size))
            ctx = out.diagnostics.get("context")
            trace.context.append(None if ctx is None else ctx[0])
            a = actions[t] if actions is not None else int(sample_actions(out.logits.data, rng)[0])
            r, done, _ = sim.advance(a)
            trace.rewards.append(r)
            delta = sim.last_reported_delta[None]
            if done:
                break
    if not trace.frames:
        raise RuntimeError("episode produced no frames to draw")
    return trace


def pca_colors(views: list[np.ndarray], channels: int = 16) -> list[np.ndarray]:
    """Project every cell onto the top three singular directions of all occupied cells in the episode."""
    cells = np.concatenate([v[:channels].reshape(channels, -1).T for v in views])
    occupied = np.abs(cells).sum(axis=1) > 0
    if occupied.sum() < 3:
        return [np.zeros(v.shape[1:] + (3,)) for v in views]
    data = cells[occupied]
    mu = data.mean(axis=0)
    _, _, vt = np.linalg.svd(data - mu, full_matrices=False)
    proj = (data - mu) @ vt[:3].T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    scale = np.where(hi > lo, hi - lo, 1.0)
    out = []
    for v in views:
        flat = v[:channels].reshape(channels, -1).T
        rgb = np.clip(((flat - mu) @ vt[:3].T - lo) / scale, 0, 1)
        rgb[np.abs(flat).sum(axis=1) == 0] = 0.0
        out.append(rgb.reshape(v.shape[1], v.shape[2], 3))
    return out


def triptychs(trace: EpisodeTrace, out_dir: Path, steps=None) -> list[Path]:
    """RGB frame | PCA of the egocentric view | attention with the read position marker."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(trace)
    if not steps:
        steps = sorted(set(np.linspace(0, n - 1, min(4, n)).astype(int).tolist()))
    bad = [s for s in steps if not 0 <= s < n]
    if bad:
        raise ValueError(f"steps {bad} outside the recorded episode (0..{n - 1})")
    colors = pca_colors(trace.views, trace.channels)
    paths = []
    for s in steps:
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
        axes[0].imshow(trace.frames[s])
        axes[0].set_title(f"observation, step {s}")
        axes[1].imshow(colors[s], interpolation="nearest")
        axes[1].set_title("egocentric map (PCA)")
        att = trace.attention[s]
        if att is not None:
            size = att.shape[0]
            axes[2].imshow(att, cmap="magma", interpolation="bilinear")
            x, y = trace.context[s][-2:]
            # x runs -1..1 over columns, y runs 1..-1 over rows
            axes[2].plot((x + 1) / 2 * (size - 1), (1 - y) / 2 * (size - 1), "c+", ms=14, mew=2)
            axes[2].set_title("attention and read position")
        else:
            axes[2].set_title("no query read")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        path = out_dir / f"triptych_step{s:04d}.png"
        fig.savefig(path, dpi=90)
        plt.close(fig)
        paths.append(path)
    return paths


def degradation_strip(path: Path, step_deg: float = 2.0, steps: int = 180, shown: int = 7) -> Path:
    """Naive repeated resampling (top) versus reading an allocentric store (bottom)."""
    board = checkerboard(square=2)
    naive, allo = rotation_drift(board, np.radians(step_deg), steps)
    idx = np.linspace(0, steps, shown).astype(int)
    fig, axes = plt.subplots(2, shown, figsize=(1.6 * shown, 3.6))
    for col, k in enumerate(idx):
        for row, maps in enumerate((naive, allo)):
            ax = axes[row, col]
            ax.imshow(maps[k][0, 0], cmap="gray", vmin=-1, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(f"{k * step_deg:.0f}°", fontsize=9)
    axes[0, 0].set_ylabel("naive")
    axes[1, 0].set_ylabel("allocentric")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=90)
    plt.close(fig)
    return path
