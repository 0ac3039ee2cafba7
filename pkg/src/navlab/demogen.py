"""Mixed-quality demonstration corpus: expert / frontier-explorer / noisy
rollouts, 4-step training chunks, and stop-action augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import mapper
from .gridsim import (Action, HEADING_VECS, Heading, Pose, SensorConfig,
                      World, distance_field, spawn_cells)

CHUNK_HORIZON = 4
STOP_SHARE_CAP = 0.25
TURN_SHARE_CAP = 0.45
DEFAULT_MIX = (2, 5, 3)  # expert : frontier : noisy
NOISY_EPSILON = 0.3
DEFAULT_BUDGET = 200
EXPLORE_WINDOW = 15  # egocentric window the reactive explorer looks at


class PolicyKind(Enum):
    EXPERT = "expert"
    FRONTIER = "frontier"
    NOISY = "noisy"


class Outcome(Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    TIMEOUT = "timeout"


@dataclass
class Episode:
    world: World
    goal_category: int
    source: PolicyKind
    seed: int
    poses: list          # length T+1
    observations: list   # length T (one per executed step, pre-action)
    actions: list        # length T
    map_snapshots: list  # length T, packed allocentric map bytes after update t
    distances: list      # length T+1, geodesic distance per pose
    outcome: Outcome

    def __len__(self):
        return len(self.actions)

    def snapshot(self, t: int) -> mapper.SemanticMap:
        m = mapper.map_from_bytes(self.map_snapshots[t], frame=mapper.Frame.ALLOCENTRIC)
        m.origin = (self.world.width // 2, self.world.height // 2)
        return m


@dataclass
class StepRecord:
    ego_map: mapper.SemanticMap
    frames: list            # 4 observations, earliest duplicated when t < 3
    goal: int
    actions: list           # 4 action ids, Stop-padded past episode end
    description: mapper.MapDescription
    source: PolicyKind
    t: int
    episode_seed: int
    d: float = float("inf")        # goal distance at this step
    d_final: float = float("inf")  # goal distance at episode end
    raw: float | None = None
    r: float | None = None
    rtg: float | None = None


def _turn_toward(current: Heading, desired: Heading) -> Action:
    delta = (int(desired) - int(current)) % 4
    if delta == 3:
        return Action.TURN_LEFT
    return Action.TURN_RIGHT  # delta 1 or 2


def _step_toward(world: World, pose: Pose, dist: np.ndarray) -> Action | None:
    """One action along a BFS descent of the distance field; None if the
    field offers no descent from here."""
    x, y = pose.cell
    d = dist[y, x]
    if not math.isfinite(d):
        return None
    if d == 0:
        return Action.STOP
    for heading in (Heading.N, Heading.E, Heading.S, Heading.W):
        dx, dy = HEADING_VECS[heading]
        nx, ny = x + dx, y + dy
        if world.in_bounds(nx, ny) and dist[ny, nx] == d - 1:
            if heading == pose.heading:
                return Action.FORWARD
            return _turn_toward(pose.heading, heading)
    return None




def scripted_action(ego: mapper.SemanticMap, goal_category: int) -> Action:
    """The demonstrator's decision function: a pure, memoryless function of
    exactly the egocentric map crop the learned policy receives.

    Stop on a goal cell; otherwise steer toward the target mass - the
    goal-category cells once any are in the crop, the unexplored area
    before that. Steering is greedy in the egocentric frame: walk forward
    while the cell ahead is not a known obstacle and target mass lies in
    the front half; when blocked or the target is beside/behind, turn
    toward the unblocked side holding more target mass. Every branch is a
    handful of half-plane mass comparisons, so the rule is easy for the
    policy network to reproduce, and it never Stops away from the goal."""
    ch = ego.channels
    r = ch.shape[1] // 2
    goal_ch = ch[2 + goal_category - 1]
    if goal_ch[r, r]:
        return Action.STOP
    homing = bool(goal_ch.any())
    target = goal_ch if homing else ~(ch[0] | ch[1])
    blocked = ch[1]
    left_mass = int(target[:, :r].sum())
    right_mass = int(target[:, r + 1:].sum())
    if not blocked[r - 1, r]:
        # exploration walks straight until a wall; homing also turns when
        # the goal has slipped out of the front half of the crop
        if not homing or target[:r, :].any():
            return Action.FORWARD
        return Action.TURN_LEFT if left_mass > right_mass else Action.TURN_RIGHT
    left_open = not blocked[r, r - 1]
    right_open = not blocked[r, r + 1]
    if left_open and not right_open:
        return Action.TURN_LEFT
    if not left_open:
        return Action.TURN_RIGHT  # forced, or boxed in (keep rotating right)
    if left_mass > right_mass:
        return Action.TURN_LEFT
    return Action.TURN_RIGHT


def scripted_plan(ego: mapper.SemanticMap, goal_category: int,
                  horizon: int = CHUNK_HORIZON) -> list:
    """The demonstrator's next `horizon` actions, planned by simulating its
    rule on the frozen crop: Forward shifts the window one row, turns rotate
    it, and a Stop ends the plan (padded with Stop). Identical to the
    executed actions except where a real step would have revealed map cells
    the current crop cannot know."""
    ch = ego.channels.copy()
    out = []
    for _ in range(horizon):
        a = scripted_action(mapper.SemanticMap(ch, ego.origin, ego.frame),
                            goal_category)
        out.append(int(a))
        if a is Action.STOP:
            break
        if a is Action.FORWARD:
            nxt = np.zeros_like(ch)
            nxt[:, 1:, :] = ch[:, :-1, :]
            ch = nxt
            r = ch.shape[1] // 2
            ch[1, r, r] = False
            ch[0, r, r] = True  # the agent now stands here
        else:
            k = -1 if a is Action.TURN_LEFT else 1
            ch = np.rot90(ch, k=k, axes=(1, 2)).copy()
    while len(out) < horizon:
        out.append(int(Action.STOP))
    return out


class _Navigator:
    """Shared episode machinery: map accumulation plus per-kind action
    selection. Deterministic in the episode seed.

    The frontier explorer conditions on the same egocentric crop the policy
    network sees, so every demonstrated action is exactly computable from
    the policy's own input (a realizable cloning target)."""

    def __init__(self, world: World, goal_category: int, kind: PolicyKind,
                 seed: int, sensor: SensorConfig):
        self.world = world
        self.goal = goal_category
        self.kind = kind
        self.sensor = sensor
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1]))
        self.goal_cells = world.goal_cells(goal_category)
        self.goal_field = distance_field(world, self.goal_cells)
        self.smap = mapper.new_map(world.num_categories, world.height, world.width)

    def choose(self, pose: Pose) -> Action:
        if self.kind is PolicyKind.EXPERT:
            act = _step_toward(self.world, pose, self.goal_field)
            return act if act is not None else Action.STOP
        act = self._frontier_action(pose)
        if self.kind is PolicyKind.NOISY and act != Action.STOP:
            if self.rng.random() < NOISY_EPSILON:
                # random non-stop action keeps noisy runs often-successful
                act = Action(int(self.rng.integers(0, 3)))
        return act

    def _frontier_action(self, pose: Pose) -> Action:
        ego = mapper.egocentric_view(self.smap, pose, window=EXPLORE_WINDOW)
        return scripted_action(ego, self.goal)


def run_policy_episode(world: World, goal_category: int, kind: PolicyKind,
                       seed: int, budget: int = DEFAULT_BUDGET,
                       sensor: SensorConfig | None = None,
                       start: Pose | None = None,
                       scramble: int = 0) -> Episode:
    """Roll one scripted episode; deterministic in (world, goal, kind, seed).

    scramble > 0 prepends an unrecorded random walk of up to that many
    steps: the map accumulates but no records are emitted, so the episode
    proper starts from a perturbed state. A policy cloned from such
    demonstrations sees recovery labels for states its own mistakes will
    put it in."""
    sensor = sensor or SensorConfig()
    if not world.goal_cells(goal_category):
        raise ValueError(f"goal category {goal_category} not present in world")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5BA40]))
    if start is None:
        cells = spawn_cells(world, category=goal_category)
        if not cells:
            cells = spawn_cells(world, min_goal_distance=1.0, category=goal_category)
        cell = cells[int(rng.integers(len(cells)))]
        start = Pose(cell, Heading(int(rng.integers(4))))

    nav = _Navigator(world, goal_category, kind, seed, sensor)
    from .gridsim import observe, step  # local import avoids cycle at module load

    if scramble > 0:
        for _ in range(int(rng.integers(0, scramble + 1))):
            obs = observe(world, start, sensor)
            mapper.update_map(nav.smap, obs, start)
            act = Action(int(rng.integers(0, 3)))
            start, _, _ = step(world, start, act)

    poses = [start]
    observations, actions, snapshots, distances = [], [], [], []
    pose = start
    distances.append(float(nav.goal_field[pose.cell[1], pose.cell[0]]))
    outcome = Outcome.TIMEOUT
    for _ in range(budget):
        obs = observe(world, pose, sensor)
        mapper.update_map(nav.smap, obs, pose)
        observations.append(obs)
        snapshots.append(mapper.map_to_bytes(nav.smap))
        act = nav.choose(pose)
        actions.append(act)
        pose, _, stopped = step(world, pose, act)
        poses.append(pose)
        distances.append(float(nav.goal_field[pose.cell[1], pose.cell[0]]))
        if stopped:
            d = distances[-1]
            outcome = Outcome.SUCCESS if d <= 1.0 else Outcome.FAILURE
            break
    return Episode(world=world, goal_category=goal_category, source=kind,
                   seed=seed, poses=poses, observations=observations,
                   actions=actions, map_snapshots=snapshots,
                   distances=distances, outcome=outcome)


def chunk_steps(ep: Episode, window: int = 15) -> list:
    """One StepRecord per executed step: padded 4-frame observation history,
    Stop-padded 4-action label, egocentric map, and a map description."""
    if len(ep) == 0:
        raise ValueError("cannot chunk an empty episode")
    records = []
    T = len(ep)
    for t in range(T):
        frames = [ep.observations[max(0, t - k)] for k in (3, 2, 1, 0)]
        labels = [int(ep.actions[t + k]) if t + k < T else int(Action.STOP)
                  for k in range(CHUNK_HORIZON)]
        snap = ep.snapshot(t)
        ego = mapper.egocentric_view(snap, ep.poses[t], window=window)
        recent = [int(a) for a in ep.actions[max(0, t - 8):t]]
        desc = mapper.describe_map(snap, ep.poses[t], recent)
        records.append(StepRecord(ego_map=ego, frames=frames,
                                  goal=ep.goal_category, actions=labels,
                                  description=desc, source=ep.source, t=t,
                                  episode_seed=ep.seed, d=ep.distances[t],
                                  d_final=ep.distances[-1]))
    return records


def stop_share(records) -> float:
    if not records:
        return 0.0
    n = sum(1 for r in records if int(Action.STOP) in r.actions)
    return n / len(records)


def augment_stops(records, factor: float, seed: int = 0) -> list:
    """Duplicate Stop-containing records until their corpus share reaches
    min(factor * original share, cap). Appended order is deterministic."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    stops = [r for r in records if int(Action.STOP) in r.actions]
    if not stops or factor == 1:
        return list(records)
    share = len(stops) / len(records)
    target = min(factor * share, STOP_SHARE_CAP)
    if target <= share:
        return list(records)
    extra = math.ceil((target * len(records) - len(stops)) / (1.0 - target))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA06]))
    order = rng.permutation(len(stops))
    out = list(records)
    for i in range(extra):
        out.append(stops[int(order[i % len(stops)])])
    return out


def turn_share(records) -> float:
    if not records:
        return 0.0
    turns = (int(Action.TURN_LEFT), int(Action.TURN_RIGHT))
    n = sum(1 for r in records if r.actions[0] in turns)
    return n / len(records)


def augment_turns(records, factor: float, seed: int = 0) -> list:
    """Duplicate records whose first action is a turn until their share
    reaches min(factor * original share, cap). Demonstrations are mostly
    straight runs, but the rare turn decisions are the ones that keep a
    cloned policy from pinning itself against walls."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    turns = (int(Action.TURN_LEFT), int(Action.TURN_RIGHT))
    picked = [r for r in records if r.actions[0] in turns]
    if not picked or factor == 1:
        return list(records)
    share = len(picked) / len(records)
    target = min(factor * share, TURN_SHARE_CAP)
    if target <= share:
        return list(records)
    extra = math.ceil((target * len(records) - len(picked)) / (1.0 - target))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA07]))
    order = rng.permutation(len(picked))
    out = list(records)
    for i in range(extra):
        out.append(picked[int(order[i % len(picked)])])
    return out


@dataclass
class CorpusSpec:
    mix: tuple = DEFAULT_MIX
    target_records: int = 10000
    budget: int = DEFAULT_BUDGET
    stop_factor: float = 6.0
    turn_factor: float = 4.0
    scramble: int = 25  # max unrecorded random-walk prefix (non-expert)
    window: int = 15


def mix_schedule(mix: tuple, n: int) -> list:
    """Deterministic interleaving of policy kinds matching the mix ratio."""
    kinds = [PolicyKind.EXPERT, PolicyKind.FRONTIER, PolicyKind.NOISY]
    pattern = [k for k, count in zip(kinds, mix) for _ in range(count)]
    return [pattern[i % len(pattern)] for i in range(n)]


def generate_corpus(worlds, seed: int, spec: CorpusSpec | None = None,
                    sensor: SensorConfig | None = None):
    """Collect episodes round-robin over worlds and goal categories until
    the record target is met. Returns (episodes, records)."""
    spec = spec or CorpusSpec()
    episodes, records = [], []
    i = 0
    kinds = mix_schedule(spec.mix, 10 * len(worlds) * max(1, spec.target_records // 40))
    while len(records) < spec.target_records:
        world = worlds[i % len(worlds)]
        cats = sorted({c for c, _ in world.goals})
        goal = cats[i % len(cats)]
        kind = kinds[i % len(kinds)]
        ep_seed = _episode_seed(seed, i)
        scramble = 0 if kind is PolicyKind.EXPERT else spec.scramble
        ep = run_policy_episode(world, goal, kind, ep_seed, budget=spec.budget,
                                sensor=sensor, scramble=scramble)
        episodes.append(ep)
        records.extend(chunk_steps(ep, window=spec.window))
        i += 1
    records = augment_turns(records, spec.turn_factor, seed=seed)
    records = augment_stops(records, spec.stop_factor, seed=seed)
    return episodes, records


def _episode_seed(global_seed: int, index: int) -> int:
    # stable per-episode substream, independent of worker layout
    return int(np.random.SeedSequence([global_seed, 0xEC0, index]).generate_state(1)[0])
