"""Policy rollouts in held-out worlds and SR/SPL computation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mapper, policy
from .gridsim import (Action, Heading, Pose, SensorConfig, World,
                      geodesic_distance, observe, spawn_cells, step)
from .nnet import ParamSet
from .policy import PolicyConfig

SUCCESS_RADIUS = 1.0
DEFAULT_BUDGET = 200


@dataclass
class EpisodeResult:
    success: bool
    shortest: float        # l_i, geodesic spawn-to-goal (cells)
    path_length: int       # p_i, Forward attempts executed (turns are free)
    steps: int
    stop_issued: bool
    category: int


@dataclass
class MetricsReport:
    n: int
    sr: float
    spl: float
    per_category: dict = field(default_factory=dict)  # cat -> (n, sr, spl)
    mean_steps: float = 0.0


class RandomPolicy:
    """Uniform-random action baseline, deterministic in its seed."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))

    def __call__(self, smap, frames, goal):
        return [int(self.rng.integers(4)) for _ in range(4)]


class CheckpointPolicy:
    def __init__(self, pset: ParamSet, cfg: PolicyConfig, mode: str = "greedy",
                 seed: int | None = None):
        self.pset = pset
        self.cfg = cfg
        self.mode = mode
        self.seed = seed

    def __call__(self, smap, frames, goal):
        logits, _ = policy.predict(smap, frames, goal, self.pset, self.cfg)
        return policy.select_actions(logits, mode=self.mode, seed=self.seed)


def rollout(world: World, goal_category: int, act_fn, pcfg: PolicyConfig,
            budget: int = DEFAULT_BUDGET, seed: int = 0,
            start: Pose | None = None,
            sensor: SensorConfig | None = None) -> EpisodeResult:
    """Run one episode: per planning step the policy emits a 4-action chunk
    that is executed sequentially; an early Stop ends the episode. Success
    requires Stop within the success radius of a goal cell."""
    sensor = sensor or SensorConfig(num_rays=pcfg.num_rays)
    goal_cells = world.goal_cells(goal_category)
    if not goal_cells:
        raise ValueError(f"goal category {goal_category} not in world")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    if start is None:
        cells = spawn_cells(world, category=goal_category)
        if not cells:
            raise ValueError("no valid spawn cells")
        cell = cells[int(rng.integers(len(cells)))]
        start = Pose(cell, Heading(int(rng.integers(4))))
    shortest = geodesic_distance(world, start.cell, goal_cells)

    smap = mapper.new_map(world.num_categories, world.height, world.width)
    pose = start
    obs = observe(world, pose, sensor)
    mapper.update_map(smap, obs, pose)
    frames = [obs]
    steps_used = 0
    forwards = 0
    stop_issued = False
    while steps_used < budget and not stop_issued:
        history = [frames[max(0, len(frames) - 1 - k)] for k in (3, 2, 1, 0)]
        ego = mapper.egocentric_view(smap, pose, window=pcfg.map_window)
        chunk = act_fn(ego, history, goal_category)
        for a in chunk:
            action = Action(a)
            steps_used += 1
            if action == Action.FORWARD:
                forwards += 1
            pose, _, stopped = step(world, pose, action)
            if stopped:
                stop_issued = True
                break
            if steps_used >= budget:
                break
            # keep frame history in lockstep with executed actions
            obs = observe(world, pose, sensor)
            mapper.update_map(smap, obs, pose)
            frames.append(obs)
    d = geodesic_distance(world, pose.cell, goal_cells)
    success = stop_issued and d <= SUCCESS_RADIUS
    return EpisodeResult(success=success, shortest=shortest,
                         path_length=forwards, steps=steps_used,
                         stop_issued=stop_issued, category=goal_category)


def compute_metrics(results) -> MetricsReport:
    """SR = mean success; SPL = mean over episodes of
    S_i * l_i / max(p_i, l_i)."""
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    n = len(results)
    sr = sum(1.0 for r in results if r.success) / n
    spl = sum((r.shortest / max(r.path_length, r.shortest)) if r.success else 0.0
              for r in results) / n
    per_cat = {}
    for cat in sorted({r.category for r in results}):
        sub = [r for r in results if r.category == cat]
        m = len(sub)
        c_sr = sum(1.0 for r in sub if r.success) / m
        c_spl = sum((r.shortest / max(r.path_length, r.shortest))
                    if r.success else 0.0 for r in sub) / m
        per_cat[cat] = (m, c_sr, c_spl)
    mean_steps = sum(r.steps for r in results) / n
    return MetricsReport(n=n, sr=sr, spl=spl, per_category=per_cat,
                         mean_steps=mean_steps)


def evaluate(worlds, goals_per_world: int, act_fn, pcfg: PolicyConfig,
             budget: int = DEFAULT_BUDGET, seed: int = 0) -> tuple:
    """Roll out over each world's first goals_per_world categories.
    Returns (results, MetricsReport)."""
    results = []
    for wi, world in enumerate(worlds):
        cats = sorted({c for c, _ in world.goals})[:goals_per_world]
        for gi, cat in enumerate(cats):
            ep_seed = int(np.random.SeedSequence([seed, wi, gi]).generate_state(1)[0])
            results.append(rollout(world, cat, act_fn, pcfg, budget=budget,
                                   seed=ep_seed))
    return results, compute_metrics(results)
