"""Multi-channel semantic map accumulation, egocentric views, rule-generated
map descriptions, and raster rendering.

Channel layout of a map with C categories (C+2 channels total):
channel 0 = explored navigable space, channel 1 = obstacles, channel 2+k-1
= semantic category k. Bits only accumulate; nothing is ever cleared.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .gridsim import Action, HEADING_ANGLES, Observation, Pose

MAP_MAGIC = b"MUVM"
MAP_FORMAT_VERSION = 1

DESCRIBE_RANGE = 10.0
# Free-space run-length buckets along each sector bisector.
BUCKET_LABELS = ("blocked", "near", "mid", "open")

SECTOR_NAMES = ("ahead", "ahead-right", "right", "behind-right",
                "behind", "behind-left", "left", "ahead-left")

ACTION_NAMES = {Action.FORWARD: "forward", Action.TURN_LEFT: "turn-left",
                Action.TURN_RIGHT: "turn-right", Action.STOP: "stop"}


class Frame(Enum):
    ALLOCENTRIC = "allocentric"
    EGOCENTRIC = "egocentric"


@dataclass
class SemanticMap:
    channels: np.ndarray  # bool (C+2, H, W)
    origin: tuple[int, int]
    frame: Frame

    @property
    def num_categories(self) -> int:
        return self.channels.shape[0] - 2

    @property
    def size(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]

    def copy(self) -> "SemanticMap":
        return SemanticMap(self.channels.copy(), self.origin, self.frame)


def new_map(num_categories: int, height: int, width: int) -> SemanticMap:
    channels = np.zeros((num_categories + 2, height, width), dtype=bool)
    return SemanticMap(channels, (width // 2, height // 2), Frame.ALLOCENTRIC)


@dataclass
class MapDescription:
    sectors: list  # 8 entries of (category id or None, bucket 0..3)
    recent_actions: list
    text: str


def update_map(smap: SemanticMap, obs: Observation, pose: Pose) -> SemanticMap:
    """Fold one observation into an allocentric map (in place).

    Cells a ray traverses before its terminator are marked explored-free;
    the terminating obstacle cell goes to the obstacle channel; the first
    semantic cell per ray goes to its category channel."""
    if smap.frame is not Frame.ALLOCENTRIC:
        raise ValueError("update_map requires an allocentric map")
    ch = smap.channels
    h, w = ch.shape[1], ch.shape[2]
    ax, ay = pose.cell
    if 0 <= ax < w and 0 <= ay < h:
        ch[0, ay, ax] = True
    for cells, hit, hit_wall in zip(obs.ray_cells, obs.hits, obs.blocked):
        for j, ((cx, cy), dist) in enumerate(cells):
            if not (0 <= cx < w and 0 <= cy < h):
                continue
            terminal_obstacle = hit_wall and j == len(cells) - 1
            if terminal_obstacle:
                ch[1, cy, cx] = True
            else:
                ch[0, cy, cx] = True
            if hit is not None and dist == hit[1]:
                ch[2 + hit[0] - 1, cy, cx] = True
    return smap


def egocentric_view(smap: SemanticMap, pose: Pose, window: int = 15) -> SemanticMap:
    """Crop a window around the agent and rotate so its heading points up.

    The window must be odd so the agent sits on the exact center cell;
    out-of-bounds cells are zero."""
    if smap.frame is not Frame.ALLOCENTRIC:
        raise ValueError("egocentric_view requires an allocentric map")
    if window % 2 != 1:
        raise ValueError("window size must be odd")
    k, h, w = smap.channels.shape
    r = window // 2
    ax, ay = pose.cell
    out = np.zeros((k, window, window), dtype=bool)
    sy0, sy1 = max(0, ay - r), min(h, ay + r + 1)
    sx0, sx1 = max(0, ax - r), min(w, ax + r + 1)
    dy0 = sy0 - (ay - r)
    dx0 = sx0 - (ax - r)
    out[:, dy0:dy0 + (sy1 - sy0), dx0:dx0 + (sx1 - sx0)] = smap.channels[:, sy0:sy1, sx0:sx1]
    out = np.rot90(out, k=int(pose.heading), axes=(1, 2)).copy()
    return SemanticMap(out, pose.cell, Frame.EGOCENTRIC)


def _sector_of(rel_angle: float) -> int:
    # 45-degree wedges, sector 0 centered on the heading, clockwise.
    return int(round(rel_angle / (math.pi / 4))) % 8


def _free_run(channels: np.ndarray, start: tuple[int, int], step: tuple[int, int],
              limit: int) -> int:
    h, w = channels.shape[1], channels.shape[2]
    x, y = start
    run = 0
    for k in range(1, limit + 1):
        cx, cy = x + k * step[0], y + k * step[1]
        if not (0 <= cx < w and 0 <= cy < h) or not channels[0, cy, cx]:
            break
        run += 1
    return run


def _bucket(run: int) -> int:
    if run == 0:
        return 0
    if run <= 2:
        return 1
    if run <= 5:
        return 2
    return 3


def describe_map(smap: SemanticMap, pose: Pose, recent_actions=()) -> MapDescription:
    """Summarize the map around the agent as 8 clockwise sectors starting
    from straight ahead: nearest semantic category within range, plus a
    free-space bucket from the contiguous explored-free run along the
    sector bisector."""
    if smap.frame is not Frame.ALLOCENTRIC:
        raise ValueError("describe_map requires an allocentric map")
    ch = smap.channels
    ncat = smap.num_categories
    ax, ay = pose.cell
    base = HEADING_ANGLES[pose.heading]

    nearest = [None] * 8  # per sector: (distance, category)
    sem_any = ch[2:].any(axis=0)
    for cy, cx in zip(*np.where(sem_any)):
        dx, dy = int(cx) - ax, int(cy) - ay
        dist = math.hypot(dx, dy)
        if dist == 0.0 or dist > DESCRIBE_RANGE:
            continue
        sector = _sector_of((math.atan2(dy, dx) - base) % (2 * math.pi))
        cats = [c + 1 for c in range(ncat) if ch[2 + c, cy, cx]]
        cat = min(cats)
        if nearest[sector] is None or (dist, cat) < nearest[sector]:
            nearest[sector] = (dist, cat)

    sectors = []
    for s in range(8):
        ang = base + s * (math.pi / 4)
        stepv = (int(round(math.cos(ang))), int(round(math.sin(ang))))
        run = _free_run(ch, (ax, ay), stepv, int(DESCRIBE_RANGE))
        cat = nearest[s][1] if nearest[s] is not None else None
        sectors.append((cat, _bucket(run)))

    recent = list(recent_actions)[-8:]
    return MapDescription(sectors=sectors, recent_actions=recent,
                          text=_render_text(sectors, recent))


def _render_text(sectors, recent) -> str:
    parts = []
    for name, (cat, bucket) in zip(SECTOR_NAMES, sectors):
        obj = f"object-{cat}" if cat is not None else "nothing"
        parts.append(f"{name}: {obj}, {BUCKET_LABELS[bucket]}")
    acts = ", ".join(ACTION_NAMES[Action(a)] for a in recent) if recent else "none"
    return "; ".join(parts) + f". recent actions: {acts}."


# -- binary map format --------------------------------------------------------

def map_to_bytes(smap: SemanticMap) -> bytes:
    k, h, w = smap.channels.shape
    if h != w:
        raise ValueError("map serialization requires a square map")
    header = MAP_MAGIC + struct.pack("<HHI", MAP_FORMAT_VERSION, k - 2, w)
    packed = np.packbits(smap.channels.reshape(k, -1), axis=1, bitorder="little")
    return header + packed.tobytes()


def map_from_bytes(data: bytes, frame: Frame = Frame.EGOCENTRIC,
                   origin: tuple[int, int] = (0, 0)) -> SemanticMap:
    if data[:4] != MAP_MAGIC:
        raise ValueError("bad map magic")
    version, c, m = struct.unpack("<HHI", data[4:12])
    if version != MAP_FORMAT_VERSION:
        raise ValueError(f"unsupported map format version {version}")
    k = c + 2
    row_bytes = (m * m + 7) // 8
    packed = np.frombuffer(data[12:12 + k * row_bytes], dtype=np.uint8).reshape(k, row_bytes)
    bits = np.unpackbits(packed, axis=1, count=m * m, bitorder="little")
    channels = bits.reshape(k, m, m).astype(bool)
    return SemanticMap(channels, origin, frame)


# -- rendering ----------------------------------------------------------------

DEFAULT_PALETTE = [
    (228, 26, 28), (55, 126, 184), (77, 175, 74), (152, 78, 163),
    (255, 127, 0), (255, 255, 51), (166, 86, 40), (247, 129, 191),
]

BACKGROUND_RGB = (204, 204, 204)
FREE_RGB = (255, 255, 255)
OBSTACLE_RGB = (0, 0, 0)
ARROW_RGB = (180, 0, 30)


def render_map(smap: SemanticMap, palette=None, scale: int = 8) -> np.ndarray:
    """Rasterize a map to an RGB uint8 array. Unexplored cells are gray,
    free white, obstacles black, categories colored; egocentric maps get an
    agent arrow at the center."""
    palette = palette or DEFAULT_PALETTE
    k, h, w = smap.channels.shape
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    img[smap.channels[0]] = FREE_RGB
    img[smap.channels[1]] = OBSTACLE_RGB
    for c in range(k - 2):
        img[smap.channels[2 + c]] = palette[c % len(palette)]
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    if smap.frame is Frame.EGOCENTRIC:
        _draw_arrow(img, h // 2, w // 2, scale)
    return img


def _draw_arrow(img: np.ndarray, cy: int, cx: int, scale: int) -> None:
    # Upward-pointing triangle filling the center cell.
    y0, x0 = cy * scale, cx * scale
    for r in range(scale):
        half = (r * scale) // (2 * scale) + r // 2
        lo = max(x0, x0 + scale // 2 - half)
        hi = min(x0 + scale, x0 + scale // 2 + half + 1)
        img[y0 + r, lo:hi] = ARROW_RGB
