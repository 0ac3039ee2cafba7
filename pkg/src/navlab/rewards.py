"""Progress-reward labeling: per-episode z-scored four-step progress and
short-horizon discounted return-to-go targets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

PROGRESS_HORIZON = 4  # actions per progress measurement, matches the label chunk


class WeightKind(Enum):
    SOFTPLUS = "softplus"
    EXP = "exp"
    NONE = "none"


class RewardKind(Enum):
    RTG = "rtg"
    INSTANT = "instant"


@dataclass
class RewardConfig:
    gamma: float = 0.9
    window: int = 4
    sigma_floor: float = 1e-6
    weight_kind: WeightKind = WeightKind.SOFTPLUS
    reward_kind: RewardKind = RewardKind.RTG

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")


class UnlabelableEpisode(Exception):
    """Episode contains an infinite goal distance and cannot be labeled."""


def raw_progress(distances) -> np.ndarray:
    """Four-step goal-distance reduction per step: d[t] - d[t+4], with
    distances past the end clamped to the final value."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty distance sequence")
    if not np.all(np.isfinite(d)):
        raise UnlabelableEpisode("episode has unreachable-goal steps")
    idx = np.minimum(np.arange(d.size) + PROGRESS_HORIZON, d.size - 1)
    return d - d[idx]


def normalize_rewards(raw, cfg: RewardConfig | None = None) -> np.ndarray:
    """Per-episode z-score with population statistics; a near-constant
    episode falls back to sigma = 1 so rewards come out zero."""
    cfg = cfg or RewardConfig()
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty reward sequence")
    mu = x.mean()
    sigma = x.std()  # population std
    if sigma < cfg.sigma_floor:
        sigma = 1.0
    return (x - mu) / sigma


def return_to_go(rewards, cfg: RewardConfig | None = None) -> np.ndarray:
    """Discounted sum over a short forward window; rewards past the end of
    the episode count as zero."""
    cfg = cfg or RewardConfig()
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    for k in range(cfg.window):
        if k >= r.size:
            break
        out[: r.size - k] += (cfg.gamma ** k) * r[k:]
    return out


def label_episode(distances, cfg: RewardConfig | None = None):
    """Full labeling pass: raw progress, z-scored rewards, and RTG targets.
    Returns (raw, r, rtg) arrays of equal length."""
    cfg = cfg or RewardConfig()
    raw = raw_progress(distances)
    r = normalize_rewards(raw, cfg)
    rtg = return_to_go(r, cfg)
    return raw, r, rtg


def label_groups(entries, cfg: RewardConfig | None = None):
    """Label a corpus of step entries that carry (episode_seed, t, d,
    d_final). Entries from the same episode (including augmented
    duplicates) share one set of per-episode statistics.

    Returns one (raw, r, rtg) triple per entry, in input order."""
    cfg = cfg or RewardConfig()
    by_ep = {}
    for e in entries:
        by_ep.setdefault(_get(e, "episode_seed"), {})[_get(e, "t")] = e
    labels_by_ep = {}
    for ep_seed, steps in by_ep.items():
        ts = sorted(steps)
        if ts != list(range(len(ts))):
            raise ValueError(f"episode {ep_seed} has missing steps")
        d = [_get(steps[t], "d") for t in ts] + [_get(steps[ts[-1]], "d_final")]
        raw, r, rtg = label_episode(d, cfg)
        labels_by_ep[ep_seed] = (raw, r, rtg)
    out = []
    for e in entries:
        raw, r, rtg = labels_by_ep[_get(e, "episode_seed")]
        t = _get(e, "t")
        out.append((float(raw[t]), float(r[t]), float(rtg[t])))
    return out


def _get(entry, key):
    if isinstance(entry, dict):
        return entry[key]
    return getattr(entry, key)


def label_records(records, cfg: RewardConfig | None = None) -> None:
    """In-place labeling of StepRecord-like objects."""
    for rec, (raw, r, rtg) in zip(records, label_groups(records, cfg)):
        rec.raw, rec.r, rec.rtg = raw, r, rtg


def sample_weight(value: float, kind: WeightKind) -> float:
    """Per-sample behavior-cloning weight as a function of the (RTG or
    instant) reward label."""
    if kind is WeightKind.SOFTPLUS:
        return softplus(value)
    if kind is WeightKind.EXP:
        return math.exp(value)
    return 1.0


def softplus(x: float) -> float:
    # Branch to avoid overflow for large |x|.
    if x > 20.0:
        return x
    if x < -20.0:
        return math.exp(x)
    return math.log1p(math.exp(x))
