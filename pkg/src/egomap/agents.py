"""Recurrent baseline, EgoMap and Neural-Map-style agents.

All agents share the perception stack and the GRU controller; they differ
in what is concatenated before the recurrent layer and what the policy
and value heads see. Everything is batched over environments.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .env.simulator import NUM_ACTIONS
from .geometry import PERCEPTION_LAYERS, CameraIntrinsics, integrate, wrap_angle
from .memory import (BLEND_ALPHA, MAP_CHANNELS, MAP_SIZE, METRICS, EgoMapState, GlobalRead, attention_read,
                     egocentric_view, init_uniform, map_cell_size, world_to_map_cells, write, write_cells)

AGENT_KINDS = ("baseline", "egomap", "neuralmap")
CHECKPOINT_VERSION = 1
PERCEPTION_FILTERS = (16, 32, 16)
HIDDEN = 128
QUERY_UNITS = MAP_CHANNELS + 1
CONTEXT_SIZE = MAP_CHANNELS + 2
# oneplus(-5) = 1.0067: the attention starts as a plain softmax
BETA_BIAS_INIT = -5.0


@dataclass
class AgentConfig:
    kind: str = "egomap"
    hidden: int = HIDDEN
    map_channels: int = MAP_CHANNELS
    map_size: int = MAP_SIZE
    global_read: bool = True
    query: bool = True
    temperature: bool = True
    position: bool = True
    metric: str = "cosine"
    alpha: float = BLEND_ALPHA
    write_enabled: bool = True
    depth_scale: float = 0.1  # depth channel is multiplied by this before the CNN
    init_seed: int = 0
    init: str = "fan_in_uniform"

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}; expected one of {AGENT_KINDS}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AgentState:
    hidden: Tensor  # (B, hidden)
    poses: np.ndarray  # (B, 3) integrated pose estimate
    map: EgoMapState | None = None

    def detach(self) -> "AgentState":
        return AgentState(self.hidden.detach(), self.poses.copy(), self.map.detach() if self.map else None)

    def reset(self, mask, start_poses, anchors=None) -> "AgentState":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return self
        keep = (~mask).astype(self.hidden.data.dtype)[:, None]
        poses = self.poses.copy()
        poses[mask] = np.asarray(start_poses, dtype=np.float64)[mask]
        m = self.map.reset(mask, anchors) if self.map is not None else None
        return AgentState(dc.mul(self.hidden, keep), poses, m)


@dataclass
class AgentOutput:
    logits: Tensor  # (B, 5)
    value: Tensor  # (B,)
    diagnostics: dict = field(default_factory=dict)


class Perception:
    """RGBD (B, 4, 64, 112) -> pre-activation features (B, 16, 4, 10)."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 4):
        self.params: dict[str, Tensor] = {}
        cin = in_channels
        for i, ((k, _), cout) in enumerate(zip(PERCEPTION_LAYERS, PERCEPTION_FILTERS)):
            self.params[f"conv{i}.w"] = init_uniform(rng, (cout, cin, k, k), cin * k * k)
            self.params[f"conv{i}.b"] = init_uniform(rng, (cout,), cin * k * k)
            cin = cout

    def __call__(self, x) -> Tensor:
        last = len(PERCEPTION_LAYERS) - 1
        for i, (_, s) in enumerate(PERCEPTION_LAYERS):
            x = dc.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=s)
            if i < last:
                x = dc.relu(x)
        return x


def _dense(rng, params, name, n_in, n_out):
    params[f"{name}.w"] = init_uniform(rng, (n_out, n_in), n_in)
    params[f"{name}.b"] = init_uniform(rng, (n_out,), n_in)


def quantize_heading(phi):
    """Nearest of the four axis headings."""
    return wrap_angle(np.round(np.asarray(phi) / (np.pi / 2)) * (np.pi / 2))


class Agent:
    """Shared wiring; ``kind`` selects what feeds the GRU and the heads."""

    def __init__(self, config: AgentConfig | None = None, intr: CameraIntrinsics | None = None):
        self.config = config = config or AgentConfig()
        self.intr = intr or CameraIntrinsics()
        rng = np.random.default_rng(config.init_seed)
        self.perception = Perception(rng)
        self.params: dict[str, Tensor] = {f"perception.{k}": v for k, v in self.perception.params.items()}
        feat = PERCEPTION_FILTERS[-1] * 4 * 10
        self.feature_size = feat
        h = config.hidden
        uses_map = config.kind != "baseline"
        if uses_map:
            self.reader = GlobalRead(rng, config.map_channels, config.map_size)
            self.params.update({f"global_read.{k}": v for k, v in self.reader.params.items()})
            self.recurrent_input = feat + GlobalRead.OUT
        else:
            self.reader = None
            self.recurrent_input = feat + 4
        _dense(rng, self.params, "reduce", self.recurrent_input, h)
        bound = 1.0 / np.sqrt(h)
        self.params["gru.w_ih"] = dc.parameter(rng.uniform(-bound, bound, (3 * h, h)))
        self.params["gru.w_hh"] = dc.parameter(rng.uniform(-bound, bound, (3 * h, h)))
        self.params["gru.b_ih"] = dc.parameter(rng.uniform(-bound, bound, 3 * h))
        self.params["gru.b_hh"] = dc.parameter(rng.uniform(-bound, bound, 3 * h))
        head_in = h
        if uses_map:
            _dense(rng, self.params, "query", h, config.map_channels + 1)
            self.params["query.b"].data[-1] = BETA_BIAS_INIT
            head_in = h + config.map_channels + 2
        if config.kind == "neuralmap":
            _dense(rng, self.params, "write_head", h, config.map_channels)
        self.head_input = head_in
        _dense(rng, self.params, "policy", head_in, NUM_ACTIONS)
        _dense(rng, self.params, "value", head_in, 1)
        for name, p in self.params.items():
            p.name = name

    # ------------------------------------------------------------ state
    @property
    def uses_map(self) -> bool:
        return self.config.kind != "baseline"

    def set_param(self, name: str, tensor: Tensor) -> None:
        """Replace one parameter everywhere it is referenced (used by gradient checks)."""
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = tensor
        prefix, _, local = name.partition(".")
        owner = {"perception": self.perception, "global_read": self.reader}.get(prefix)
        if owner is not None:
            owner.params[local] = tensor

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def initial_state(self, start_poses, anchors=None, extent: float | None = None) -> AgentState:
        start_poses = np.atleast_2d(np.asarray(start_poses, dtype=np.float64))
        b = start_poses.shape[0]
        hidden = Tensor(np.zeros((b, self.config.hidden)))
        m = None
        if self.uses_map:
            if anchors is None or extent is None:
                raise ValueError("map agents need the map anchors and the environment extent")
            m = EgoMapState.empty(anchors, map_cell_size(extent, self.config.map_size),
                                  self.config.map_channels, self.config.map_size)
        return AgentState(hidden, start_poses.copy(), m)

    # ------------------------------------------------------------ forward
    def _normalize(self, rgbd: np.ndarray) -> np.ndarray:
        x = np.array(rgbd, dtype=dc.get_dtype(), copy=True)
        x[:, 3] *= self.config.depth_scale
        return x

    def _heads(self, x) -> tuple[Tensor, Tensor]:
        p = self.params
        logits = dc.linear(x, p["policy.w"], p["policy.b"])
        value = dc.reshape(dc.linear(x, p["value.w"], p["value.b"]), (-1,))
        return logits, value

    def _recurrent(self, x, state: AgentState) -> Tensor:
        p = self.params
        x = dc.relu(dc.linear(x, p["reduce.w"], p["reduce.b"]))
        return dc.gru_cell(state.hidden, x, p["gru.w_ih"], p["gru.w_hh"], p["gru.b_ih"], p["gru.b_hh"])

    def forward(self, rgbd: np.ndarray, delta: np.ndarray, state: AgentState) -> tuple[AgentOutput, AgentState]:
        """One step for a batch. ``delta`` is the reported ego-motion since the previous frame."""
        rgbd = np.asarray(rgbd)
        delta = np.asarray(delta, dtype=np.float64)
        if rgbd.ndim != 4 or rgbd.shape[1] != 4:
            raise ValueError(f"expected (B, 4, H, W) RGBD input, got {rgbd.shape}")
        feats = self.perception(self._normalize(rgbd))
        b = feats.shape[0]
        visual = dc.reshape(dc.relu(feats), (b, -1))
        if self.config.kind == "baseline":
            motion = np.stack([delta[:, 0], delta[:, 1], np.sin(delta[:, 2]), np.cos(delta[:, 2])], axis=1)
            h = self._recurrent(dc.concat([visual, motion.astype(visual.data.dtype)], axis=1), state)
            logits, value = self._heads(h)
            return AgentOutput(logits, value, {"recurrent_input": self.recurrent_input}), \
                AgentState(h, integrate(state.poses, delta), None)
        return self._map_forward(rgbd, feats, visual, delta, state)

    def _map_forward(self, rgbd, feats, visual, delta, state: AgentState):
        cfg, p = self.config, self.params
        poses = integrate(state.poses, delta)
        m = state.map
        if cfg.write_enabled:
            if cfg.kind == "egomap":
                m = write(m, feats, rgbd[:, 3], poses, self.intr, cfg.alpha)
            else:
                vec = dc.tanh(dc.linear(state.hidden, p["write_head.w"], p["write_head.b"]))
                cells = world_to_map_cells(poses[:, None, :2], m)
                m = write_cells(m, dc.reshape(vec, (vec.shape[0], 1, -1)), cells, cfg.alpha)
        view_poses = poses if cfg.kind == "egomap" else self._discretize(poses, m)
        view = egocentric_view(m, view_poses, cfg.map_size)
        b = visual.shape[0]
        dtype = visual.data.dtype
        if cfg.global_read:
            summary = self.reader(view)
        else:
            summary = np.zeros((b, GlobalRead.OUT), dtype=dtype)
        h = self._recurrent(dc.concat([visual, summary], axis=1), state)
        diag = {"recurrent_input": self.recurrent_input}
        if cfg.query:
            qb = dc.linear(h, p["query.w"], p["query.b"])
            query = dc.slice_(qb, (slice(None), slice(0, cfg.map_channels)))
            beta_raw = dc.reshape(dc.slice_(qb, (slice(None), slice(cfg.map_channels, cfg.map_channels + 1))), (-1,))
            res = attention_read(view, query, beta_raw, cfg.metric, cfg.temperature, cfg.position, cfg.map_channels)
            context = res.context
            diag.update(attention=res.attention.data, context=res.context.data, beta=res.beta)
        else:
            context = np.zeros((b, cfg.map_channels + 2), dtype=dtype)
        logits, value = self._heads(dc.concat([h, context], axis=1))
        diag["view"] = view.data
        return AgentOutput(logits, value, diag), AgentState(h, poses, m)

    @staticmethod
    def _discretize(poses: np.ndarray, m: EgoMapState) -> np.ndarray:
        """Snap positions to map cell centers and headings to the four axes."""
        cs = m.cell_size
        rel = poses[:, :2] - m.anchor
        # cell centers sit at anchor + (k - (n-1)/2) * cs along both axes
        off = (m.size - 1) / 2
        snapped = (np.rint(rel / cs + off) - off) * cs + m.anchor
        return np.column_stack([snapped, quantize_heading(poses[:, 2])])

    # ------------------------------------------------------------ checkpoints
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"checkpoint tensor {k} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.params[k].data.dtype).copy()

    def save(self, path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config),
                "config_hash": self.config.digest(), **(extra or {})}
        arrays = {f"param/{k}": v for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        return path

    @classmethod
    def load(cls, path, intr: CameraIntrinsics | None = None) -> tuple["Agent", dict]:
        with np.load(path) as data:
            meta = json.loads(data["__meta__"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            config = AgentConfig(**meta["config"])
            if config.digest() != meta["config_hash"]:
                raise ValueError("checkpoint config hash does not match its config")
            agent = cls(config, intr)
            agent.load_state_dict({k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")})
        return agent, meta


def make_agent(kind: str, intr: CameraIntrinsics | None = None, **overrides) -> Agent:
    return Agent(AgentConfig(kind=kind, **overrides), intr)


def with_ablation(config: AgentConfig, toggle: str) -> AgentConfig:
    """Apply one named ablation toggle to an EgoMap config."""
    table = {
        "no-global-read": {"global_read": False},
        "no-query": {"query": False},
        "no-temperature": {"temperature": False},
        "no-position": {"position": False},
        "metric=l1": {"metric": "l1"},
    }
    if toggle not in table:
        raise ValueError(f"unknown ablation toggle {toggle!r}; expected one of {sorted(table)}")
    return replace(config, **table[toggle])


ABLATION_TOGGLES = ("no-global-read", "no-query", "no-temperature", "no-position", "metric=l1")
