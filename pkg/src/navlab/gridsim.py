"""Procedural gridworld environments, agent kinematics, raycast sensing,
and a geodesic-distance oracle.

Coordinates are (x, y) with x increasing east and y increasing south,
matching row-major array indexing as ``grid[y, x]``. Headings are the four
compass directions; Forward moves one cell, turns rotate 90 degrees.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

WORLD_FORMAT_VERSION = 1


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


NUM_ACTIONS = 4

# (dx, dy) per heading; y grows southward.
HEADING_VECS = {
    Heading.N: (0, -1),
    Heading.E: (1, 0),
    Heading.S: (0, 1),
    Heading.W: (-1, 0),
}

# Heading angle in radians, measured in the (x-east, y-south) frame.
HEADING_ANGLES = {
    Heading.N: -math.pi / 2,
    Heading.E: 0.0,
    Heading.S: math.pi / 2,
    Heading.W: math.pi,
}


class WorldGenError(Exception):
    """Raised when a world config cannot be satisfied after bounded retries."""


@dataclass(frozen=True)
class Pose:
    cell: tuple[int, int]
    heading: Heading


@dataclass
class WorldConfig:
    width: int = 32
    height: int = 32
    num_categories: int = 6
    obstacle_density: float = 0.12
    instances_per_category: int = 2
    max_instance_cells: int = 3
    max_retries: int = 50

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("world must be at least 8x8")
        if self.num_categories < 1:
            raise ValueError("need at least one category")


@dataclass
class SensorConfig:
    num_rays: int = 15
    fov_deg: float = 90.0
    max_range: float = 10.0


@dataclass
class World:
    width: int
    height: int
    occupancy: np.ndarray  # bool (H, W), True = obstacle
    semantic: np.ndarray   # int (H, W), 0 = background, 1..C = category
    goals: list[tuple[int, frozenset]]  # (category id, set of (x, y) cells)
    num_categories: int
    seed: int

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and not self.occupancy[y, x]

    def goal_cells(self, category: int) -> frozenset:
        cells = frozenset().union(*[c for cat, c in self.goals if cat == category]) \
            if any(cat == category for cat, _ in self.goals) else frozenset()
        return cells

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.where(~self.occupancy)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]

    def to_bytes(self) -> bytes:
        return world_to_json(self).encode("utf-8")


@dataclass
class Observation:
    depth: np.ndarray          # (num_rays,) f32 distance in cells
    hits: list                 # per-ray (category id, distance) or None
    pose: Pose
    max_range: float
    ray_cells: list = field(repr=False, default=None)
    blocked: list = field(repr=False, default=None)
    # ray_cells: per-ray ordered list of (cell, center_distance) the ray
    # traversed up to and including its terminating cell; blocked[i] says
    # whether ray i ended on an obstacle. Kept so the mapper does not have
    # to re-march rays.


def _connected_component(free: np.ndarray, start: tuple[int, int]) -> set:
    h, w = free.shape
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and (nx, ny) not in seen:
                seen.add((nx, ny))
                queue.append((nx, ny))
    return seen


def _largest_free_component(occupancy: np.ndarray) -> set:
    free = ~occupancy
    remaining = {(int(x), int(y)) for y, x in zip(*np.where(free))}
    best = set()
    while remaining:
        comp = _connected_component(free, next(iter(remaining)))
        remaining -= comp
        if len(comp) > len(best):
            best = comp
    return best


def generate_world(seed: int, cfg: WorldConfig | None = None) -> World:
    """Generate a bordered world with random obstacles and goal-object
    instances, deterministic in the seed. Raises WorldGenError if the config
    cannot be satisfied after bounded retries."""
    cfg = cfg or WorldConfig()
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt, 0x9E3779B9]))
        world = _try_generate(rng, seed, cfg)
        if world is not None:
            return world
    raise WorldGenError(
        f"could not generate a valid world for seed={seed} after {cfg.max_retries} tries"
    )


def _try_generate(rng, seed: int, cfg: WorldConfig) -> World | None:
    w, h = cfg.width, cfg.height
    occ = np.zeros((h, w), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True

    # Rectangular clutter up to the target interior density.
    target = int(cfg.obstacle_density * (w - 2) * (h - 2))
    placed = 0
    for _ in range(200):
        if placed >= target:
            break
        bw = int(rng.integers(1, 5))
        bh = int(rng.integers(1, 5))
        x = int(rng.integers(1, w - 1 - bw)) if w - 1 - bw > 1 else 1
        y = int(rng.integers(1, h - 1 - bh)) if h - 1 - bh > 1 else 1
        block = occ[y:y + bh, x:x + bw]
        placed += int((~block).sum())
        block[:] = True

    component = _largest_free_component(occ)
    if len(component) < (w - 2) * (h - 2) * 0.3:
        return None

    semantic = np.zeros((h, w), dtype=np.int16)
    goals = []
    available = sorted(component)
    for cat in range(1, cfg.num_categories + 1):
        cells = set()
        for _ in range(cfg.instances_per_category):
            free_bg = [c for c in available if semantic[c[1], c[0]] == 0]
            if not free_bg:
                return None
            cx, cy = free_bg[int(rng.integers(len(free_bg)))]
            size = int(rng.integers(1, cfg.max_instance_cells + 1))
            inst = [(cx, cy)]
            while len(inst) < size:
                bx, by = inst[int(rng.integers(len(inst)))]
                nx, ny = bx + int(rng.integers(-1, 2)), by + int(rng.integers(-1, 2))
                if (nx, ny) in component and semantic[ny, nx] == 0 and (nx, ny) not in inst:
                    inst.append((nx, ny))
                else:
                    break
            for (gx, gy) in inst:
                semantic[gy, gx] = cat
                cells.add((gx, gy))
        if not cells:
            return None
        goals.append((cat, frozenset(cells)))

    world = World(width=w, height=h, occupancy=occ, semantic=semantic,
                  goals=goals, num_categories=cfg.num_categories, seed=seed)
    # All goals live in the spawnable component, so reachability holds by
    # construction; verify anyway.
    for cat, cells in goals:
        if not all(c in component for c in cells):
            return None
    return world


def spawn_cells(world: World, min_goal_distance: float = 4.0,
                category: int | None = None) -> list[tuple[int, int]]:
    """Free cells a rollout may start from: inside the goal-connected
    component and not too close to the target category's goal cells."""
    component = _largest_free_component(world.occupancy)
    cats = [category] if category is not None else [c for c, _ in world.goals]
    out = []
    fields = {c: distance_field(world, world.goal_cells(c)) for c in cats}
    for (x, y) in sorted(component):
        if all(fields[c][y, x] >= min_goal_distance for c in cats):
            out.append((x, y))
    return out


def step(world: World, pose: Pose, action: Action) -> tuple[Pose, bool, bool]:
    """Apply one action. Returns (new pose, collided, stopped)."""
    if action == Action.STOP:
        return pose, False, True
    if action == Action.TURN_LEFT:
        return Pose(pose.cell, Heading((pose.heading - 1) % 4)), False, False
    if action == Action.TURN_RIGHT:
        return Pose(pose.cell, Heading((pose.heading + 1) % 4)), False, False
    dx, dy = HEADING_VECS[pose.heading]
    nx, ny = pose.cell[0] + dx, pose.cell[1] + dy
    if world.is_free(nx, ny):
        return Pose((nx, ny), pose.heading), False, False
    return pose, True, False


def _march_ray(world: World, x0: float, y0: float, dx: float, dy: float,
               max_range: float):
    """Amanatides-Woo grid traversal from (x0, y0) along (dx, dy).

    Yields (cell, center_distance) for every cell entered, in order, until
    an obstacle cell, the range limit, or the world edge."""
    cx, cy = int(x0), int(y0)
    step_x = 1 if dx > 0 else (-1 if dx < 0 else 0)
    step_y = 1 if dy > 0 else (-1 if dy < 0 else 0)
    t_max_x = ((cx + (step_x > 0)) - x0) / dx if dx != 0 else math.inf
    t_max_y = ((cy + (step_y > 0)) - y0) / dy if dy != 0 else math.inf
    t_delta_x = abs(1.0 / dx) if dx != 0 else math.inf
    t_delta_y = abs(1.0 / dy) if dy != 0 else math.inf
    while True:
        if t_max_x < t_max_y:
            t_max_x += t_delta_x
            cx += step_x
        else:
            t_max_y += t_delta_y
            cy += step_y
        if not world.in_bounds(cx, cy):
            return
        dist = math.hypot(cx + 0.5 - x0, cy + 0.5 - y0)
        if dist > max_range:
            return
        yield (cx, cy), dist
        if world.occupancy[cy, cx]:
            return


def observe(world: World, pose: Pose, sensor: SensorConfig | None = None) -> Observation:
    """Cast a fan of rays centered on the agent's heading.

    Per ray, depth is the center distance of the first obstacle cell (or
    max range), and the hit records the first cell with a semantic label."""
    sensor = sensor or SensorConfig()
    x0 = pose.cell[0] + 0.5
    y0 = pose.cell[1] + 0.5
    base = HEADING_ANGLES[pose.heading]
    half = math.radians(sensor.fov_deg) / 2.0
    angles = np.linspace(base - half, base + half, sensor.num_rays)
    depth = np.full(sensor.num_rays, sensor.max_range, dtype=np.float32)
    hits = [None] * sensor.num_rays
    ray_cells = []
    blocked = []
    for i, ang in enumerate(angles):
        dx, dy = math.cos(ang), math.sin(ang)
        cells = []
        hit_wall = False
        for (cx, cy), dist in _march_ray(world, x0, y0, dx, dy, sensor.max_range):
            cells.append(((cx, cy), dist))
            if hits[i] is None and world.semantic[cy, cx] > 0:
                hits[i] = (int(world.semantic[cy, cx]), dist)
            if world.occupancy[cy, cx]:
                depth[i] = dist
                hit_wall = True
                break
        ray_cells.append(cells)
        blocked.append(hit_wall)
    return Observation(depth=depth, hits=hits, pose=pose,
                       max_range=sensor.max_range, ray_cells=ray_cells,
                       blocked=blocked)


def distance_field(world: World, goal_cells) -> np.ndarray:
    """4-connected BFS distance (in cells) from the goal set over free
    cells. Unreachable or blocked cells get +inf."""
    dist = np.full((world.height, world.width), np.inf)
    queue = deque()
    for (x, y) in goal_cells:
        if world.is_free(x, y):
            dist[y, x] = 0.0
            queue.append((x, y))
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1.0
        for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nx, ny = x + dx, y + dy
            if world.is_free(nx, ny) and d < dist[ny, nx]:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


def geodesic_distance(world: World, from_cell: tuple[int, int], goal_cells) -> float:
    """Shortest 4-connected path length from from_cell to the nearest goal
    cell; +inf if unreachable."""
    if from_cell in set(goal_cells):
        return 0.0
    return float(distance_field(world, goal_cells)[from_cell[1], from_cell[0]])


# -- world file format --------------------------------------------------------

def world_to_json(world: World) -> str:
    doc = {
        "version": WORLD_FORMAT_VERSION,
        "seed": world.seed,
        "width": world.width,
        "height": world.height,
        "num_categories": world.num_categories,
        "occupancy": ["".join("1" if v else "0" for v in row) for row in world.occupancy],
        "semantic": [[int(v) for v in row] for row in world.semantic],
        "goals": [[cat, sorted([list(c) for c in cells])] for cat, cells in world.goals],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def world_from_json(text: str) -> World:
    doc = json.loads(text)
    if doc.get("version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world file version: {doc.get('version')!r}")
    h, w = doc["height"], doc["width"]
    occ = np.array([[c == "1" for c in row] for row in doc["occupancy"]], dtype=bool)
    sem = np.array(doc["semantic"], dtype=np.int16)
    if occ.shape != (h, w) or sem.shape != (h, w):
        raise ValueError("world file grid shape mismatch")
    goals = [(int(cat), frozenset(tuple(c) for c in cells)) for cat, cells in doc["goals"]]
    return World(width=w, height=h, occupancy=occ, semantic=sem, goals=goals,
                 num_categories=int(doc["num_categories"]), seed=int(doc["seed"]))


def save_world(world: World, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(world_to_json(world))
        f.write("\n")


def load_world(path) -> World:
    with open(path, encoding="utf-8") as f:
        return world_from_json(f.read())
