import numpy as np
import pytest

from navlab import gridsim
from navlab.gridsim import World
from navlab.policy import PolicyConfig


def world_from_strings(rows, semantic=None, goals=None, num_categories=3,
                       seed=0):
    """Build a World from ascii rows: '#' obstacle, '.' free, digits 1-9
    place that semantic category (free cell)."""
    h, w = len(rows), len(rows[0])
    occ = np.zeros((h, w), dtype=bool)
    sem = np.zeros((h, w), dtype=np.int16)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                occ[y, x] = True
            elif ch.isdigit() and ch != "0":
                sem[y, x] = int(ch)
    if semantic is not None:
        for (x, y), cat in semantic.items():
            sem[y, x] = cat
    if goals is None:
        goals = []
        for cat in range(1, num_categories + 1):
            cells = frozenset((int(x), int(y)) for y, x in zip(*np.where(sem == cat)))
            if cells:
                goals.append((cat, cells))
    return World(width=w, height=h, occupancy=occ, semantic=sem, goals=goals,
                 num_categories=num_categories, seed=seed)


def empty_room(size=9, num_categories=3):
    """Bordered room with an empty interior."""
    rows = ["#" * size]
    rows += ["#" + "." * (size - 2) + "#" for _ in range(size - 2)]
    rows += ["#" * size]
    return world_from_strings(rows, num_categories=num_categories)


def open_field(size=12, num_categories=3):
    """No obstacles at all (not even a border)."""
    return world_from_strings(["." * size] * size, num_categories=num_categories)


@pytest.fixture
def small_pcfg():
    """Small policy for fast unit tests."""
    return PolicyConfig(num_categories=3, map_window=9, patch=3, num_rays=5,
                        d=8, d_v=8, n_queries=2, hidden=12)


@pytest.fixture
def rand_world():
    return gridsim.generate_world(7, gridsim.WorldConfig())
