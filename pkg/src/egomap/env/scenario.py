"""Procedural scenario generation and serialization.

Mazes live on a square block grid: ``grid[i, j]`` is 1 where the block
covering world x in [j*b, (j+1)*b) and y in [i*b, (i+1)*b) is solid. Rooms sit
on odd coordinates and are connected by a randomized depth-first carve;
``openness`` then knocks out extra walls between rooms to create loops.
"""
from __future__ import annotations

import colorsys
import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

KINDS = ("labyrinth", "ordered_k_item", "find_return")
SCHEMA_VERSION = 1
MAX_PLACEMENT_RETRIES = 20
TEST_SEED_OFFSET = 1_000_000

ITEM_COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.1), "exit": (1.0, 1.0, 1.0),
    "yellow": (0.95, 0.9, 0.1), "blue": (0.1, 0.3, 0.95), "magenta": (0.9, 0.1, 0.9),
    "cyan": (0.1, 0.9, 0.9), "orange": (1.0, 0.55, 0.0), "purple": (0.5, 0.1, 0.7),
}
ORDERED_COLORS = ("yellow", "blue", "magenta", "cyan", "orange", "purple")


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationParams:
    size: int = 9
    extent: float = 14.0
    openness: float = 0.15
    min_goal_distance: int = 8
    k_items: int = 4
    t_max: int = 525

    def __post_init__(self):
        if self.size < 5 or self.size % 2 == 0:
            raise ValueError(f"maze size must be odd and >= 5, got {self.size}")
        if not 0.0 <= self.openness <= 1.0:
            raise ValueError("openness must lie in [0, 1]")

    @property
    def block_size(self) -> float:
        return self.extent / self.size


@dataclass
class Item:
    kind: str
    color: str
    x: float
    y: float
    order: int = -1


@dataclass
class ScenarioConfig:
    kind: str
    seed: int
    generation_seed: int
    params: GenerationParams
    grid: list[list[int]]
    wall_hues: list[list[float]]
    items: list[Item]
    spawn: tuple[float, float, float]
    goal: tuple[float, float] | None = None
    retries: int = 0

    @property
    def t_max(self) -> int:
        return self.params.t_max

    @property
    def block_size(self) -> float:
        return self.params.block_size

    def grid_array(self) -> np.ndarray:
        return np.asarray(self.grid, dtype=bool)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = SCHEMA_VERSION
        return d

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d.pop("version", None)
        d["params"] = GenerationParams(**d["params"])
        d["items"] = [Item(**it) for it in d["items"]]
        d["spawn"] = tuple(d["spawn"])
        d["goal"] = tuple(d["goal"]) if d["goal"] is not None else None
        return cls(**d)


def carve_maze(size: int, openness: float, rng: np.random.Generator) -> np.ndarray:
    grid = np.ones((size, size), dtype=np.int8)
    rooms = size // 2
    visited = np.zeros((rooms, rooms), dtype=bool)
    start = (int(rng.integers(rooms)), int(rng.integers(rooms)))
    stack = [start]
    visited[start] = True
    grid[2 * start[0] + 1, 2 * start[1] + 1] = 0
    while stack:
        r, c = stack[-1]
        options = [(r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                   if 0 <= r + dr < rooms and 0 <= c + dc < rooms and not visited[r + dr, c + dc]]
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(len(options)))]
        visited[nr, nc] = True
        grid[r + nr + 1, c + nc + 1] = 0
        grid[2 * nr + 1, 2 * nc + 1] = 0
        stack.append((nr, nc))
    # walls separating two rooms: exactly one odd coordinate, strictly inside the border
    for i in range(1, size - 1):
        for j in range(1, size - 1):
            if grid[i, j] and (i % 2) != (j % 2) and rng.random() < openness:
                grid[i, j] = 0
    return grid


def free_cells(grid: np.ndarray) -> list[tuple[int, int]]:
    return [tuple(map(int, ij)) for ij in np.argwhere(np.asarray(grid) == 0)]


def bfs_distances(grid: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """4-connected flood fill from ``start``; -1 marks unreachable cells."""
    grid = np.asarray(grid)
    dist = np.full(grid.shape, -1, dtype=int)
    dist[start] = 0
    queue = deque([start])
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < grid.shape[0] and 0 <= nj < grid.shape[1] and not grid[ni, nj] and dist[ni, nj] < 0:
                dist[ni, nj] = dist[i, j] + 1
                queue.append((ni, nj))
    return dist


def cell_center(cell: tuple[int, int], block: float) -> tuple[float, float]:
    i, j = cell
    return ((j + 0.5) * block, (i + 0.5) * block)


def world_to_cell(x: float, y: float, block: float) -> tuple[int, int]:
    return int(np.floor(y / block)), int(np.floor(x / block))


def _place(kind: str, grid: np.ndarray, params: GenerationParams, rng: np.random.Generator):
    cells = free_cells(grid)
    b = params.block_size
    spawn_cell = cells[int(rng.integers(len(cells)))]
    dist = bfs_distances(grid, spawn_cell)
    heading = float(rng.uniform(-np.pi, np.pi))
    sx, sy = cell_center(spawn_cell, b)
    items: list[Item] = []
    goal = None
    if kind == "find_return":
        near = [c for c in cells if dist[c] == 1]
        far = [c for c in cells if dist[c] >= params.min_goal_distance]
        if not near or not far:
            raise PlacementError("no room for the totems")
        green = near[int(rng.integers(len(near)))]
        far = [c for c in far if c != green]
        if not far:
            raise PlacementError("no room for the red totem")
        red = far[int(rng.integers(len(far)))]
        items.append(Item("red_totem", "red", *cell_center(red, b)))
        items.append(Item("green_totem", "green", *cell_center(green, b)))
        goal = cell_center(green, b)
    elif kind == "labyrinth":
        far = [c for c in cells if dist[c] >= params.min_goal_distance]
        if not far:
            raise PlacementError("no cell far enough for the exit")
        exit_cell = far[int(rng.integers(len(far)))]
        items.append(Item("exit", "exit", *cell_center(exit_cell, b)))
        goal = cell_center(exit_cell, b)
    elif kind == "ordered_k_item":
        k = params.k_items
        if k > len(ORDERED_COLORS):
            raise ValueError(f"at most {len(ORDERED_COLORS)} ordered items supported")
        candidates = [c for c in cells if c != spawn_cell and dist[c] > 0]
        if len(candidates) < k:
            raise PlacementError("not enough free cells for the items")
        picks = rng.choice(len(candidates), size=k, replace=False)
        for order, p in enumerate(picks):
            items.append(Item("item", ORDERED_COLORS[order], *cell_center(candidates[int(p)], b), order=order))
    else:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    for it in items:
        if dist[world_to_cell(it.x, it.y, b)] < 0:
            raise PlacementError("item not reachable from spawn")
    return (sx, sy, heading), items, goal


def generate(seed: int, kind: str, params: GenerationParams | None = None) -> ScenarioConfig:
    """Deterministic scenario for ``seed``.

    When placement fails the maze is regenerated from a derived seed; the
    seed actually used is recorded as ``generation_seed``.
    """
    params = params or GenerationParams()
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    for retry in range(MAX_PLACEMENT_RETRIES):
        gen_seed = seed if retry == 0 else int(np.random.SeedSequence([seed, retry]).generate_state(1)[0])
        rng = np.random.default_rng(gen_seed)
        grid = carve_maze(params.size, params.openness, rng)
        try:
            spawn, items, goal = _place(kind, grid, params, rng)
        except PlacementError:
            continue
        hues = rng.random((params.size, params.size)).round(6)
        return ScenarioConfig(kind=kind, seed=seed, generation_seed=gen_seed, params=params,
                              grid=grid.tolist(), wall_hues=hues.tolist(), items=items,
                              spawn=spawn, goal=goal, retries=retry)
    raise PlacementError(f"placement failed for seed {seed} after {MAX_PLACEMENT_RETRIES} attempts")


def wall_colors(config: ScenarioConfig) -> np.ndarray:
    """Muted per-block RGB so items stay the most saturated things in view."""
    hues = np.asarray(config.wall_hues)
    out = np.empty(hues.shape + (3,))
    for idx, h in np.ndenumerate(hues):
        out[idx] = colorsys.hsv_to_rgb(h, 0.35, 0.65)
    return out


@dataclass
class ScenarioSet:
    kind: str
    params: GenerationParams
    train_seeds: list[int]
    test_seeds: list[int]
    version: int = SCHEMA_VERSION
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.train_seeds) & set(self.test_seeds)
        if overlap:
            raise ValueError(f"train/test seed sets overlap: {sorted(overlap)[:5]}")

    @classmethod
    def standard(cls, kind: str, params: GenerationParams | None = None, n_train: int = 256,
                 n_test: int = 64, base: int = 0) -> "ScenarioSet":
        return cls(kind, params or GenerationParams(), list(range(base, base + n_train)),
                   list(range(base + TEST_SEED_OFFSET, base + TEST_SEED_OFFSET + n_test)))

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSet":
        d = json.loads(text)
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario set version {d.get('version')}")
        d["params"] = GenerationParams(**d["params"])
        return cls(**d)

    def configs(self, split: str) -> list[ScenarioConfig]:
        seeds = self.train_seeds if split == "train" else self.test_seeds
        return [generate(s, self.kind, self.params) for s in seeds]
