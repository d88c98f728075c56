"""
Synthetic floorplan rasters and visibility-limited local grids.

Rooms are drawn on a 0.05 m raster from per-class shape families. Local
grids are cast from a place centre: each ray is stepped at half-cell
spacing, cells before the first wall are Free, the wall cell is Occupied and
everything behind it stays Unknown.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from toponets.errors import GridError, MapError
from toponets.place_model import RADIUS_M, CellState

logger = logging.getLogger(__name__)

RESOLUTION_M = 0.05
WALL_M = 0.1
MARGIN_M = 1.0
RAYS = 1440


@dataclass(frozen=True)
class RoomShape:
    """Geometry family of one fine-grained class (loaded from the catalogue)."""

    width: Tuple[float, float]
    length: Tuple[float, float]
    doors: int = 1
    door_width: Tuple[float, float] = (0.8, 1.0)
    open_ends: int = 0
    clutter: str = "none"

    @classmethod
    def from_dict(cls, data: dict) -> "RoomShape":
        return cls(width=tuple(data["width"]), length=tuple(data["length"]),
                   doors=int(data.get("doors", 1)), door_width=tuple(data.get("door_width", (0.8, 1.0))),
                   open_ends=int(data.get("open_ends", 0)), clutter=data.get("clutter", "none"))


@dataclass(frozen=True, eq=False)
class Floorplan:
    """Occupancy raster; cell ``(i, j)`` spans ``y in [i, i+1) * res``, ``x in [j, j+1) * res``."""

    walls: np.ndarray
    resolution: float = RESOLUTION_M

    @property
    def size_m(self) -> Tuple[float, float]:
        return self.walls.shape[1] * self.resolution, self.walls.shape[0] * self.resolution

    def occupied(self, x: float, y: float) -> bool:
        i, j = int(y // self.resolution), int(x // self.resolution)
        if not (0 <= i < self.walls.shape[0] and 0 <= j < self.walls.shape[1]):
            return True
        return bool(self.walls[i, j])


@dataclass(frozen=True)
class Room:
    plan: Floorplan
    # interior rectangle (x0, y0, x1, y1) in metres; the long axis is x
    interior: Tuple[float, float, float, float]


def _fill(walls: np.ndarray, res: float, x0: float, y0: float, x1: float, y1: float, value: bool = True):
    i0, i1 = int(round(y0 / res)), int(round(y1 / res))
    j0, j1 = int(round(x0 / res)), int(round(x1 / res))
    walls[max(i0, 0):max(i1, 0), max(j0, 0):max(j1, 0)] = value


def render_room(shape: RoomShape, rng: np.random.Generator, resolution: float = RESOLUTION_M) -> Room:
    width = rng.uniform(*shape.width)
    length = rng.uniform(*shape.length)
    if width > length:
        width, length = length, width
    total_x = length + 2 * (MARGIN_M + WALL_M)
    total_y = width + 2 * (MARGIN_M + WALL_M)
    walls = np.zeros((int(round(total_y / resolution)), int(round(total_x / resolution))), dtype=bool)
    x0, y0 = MARGIN_M + WALL_M, MARGIN_M + WALL_M
    x1, y1 = x0 + length, y0 + width
    res = resolution

    # wall ring
    _fill(walls, res, x0 - WALL_M, y0 - WALL_M, x1 + WALL_M, y0)
    _fill(walls, res, x0 - WALL_M, y1, x1 + WALL_M, y1 + WALL_M)
    _fill(walls, res, x0 - WALL_M, y0, x0, y1)
    _fill(walls, res, x1, y0, x1 + WALL_M, y1)

    # open ends remove the short walls
    if shape.open_ends >= 1:
        _fill(walls, res, x0 - WALL_M, y0, x0, y1, False)
    if shape.open_ends >= 2:
        _fill(walls, res, x1, y0, x1 + WALL_M, y1, False)

    for _ in range(shape.doors):
        door = rng.uniform(*shape.door_width)
        side = int(rng.integers(4))
        if side < 2:
            along = rng.uniform(x0, max(x0, x1 - door))
            y = y0 - WALL_M if side == 0 else y1
            _fill(walls, res, along, y, along + door, y + WALL_M, False)
        else:
            door = min(door, width)
            along = rng.uniform(y0, max(y0, y1 - door))
            x = x0 - WALL_M if side == 2 else x1
            _fill(walls, res, x, along, x + WALL_M, along + door, False)

    _add_clutter(walls, res, shape.clutter, (x0, y0, x1, y1), rng)
    return Room(Floorplan(walls, res), (x0, y0, x1, y1))


def _add_clutter(walls, res, kind, rect, rng):
    x0, y0, x1, y1 = rect
    w, l = y1 - y0, x1 - x0
    if kind == "none":
        return
    if kind == "table":
        _fill(walls, res, x0 + 0.3 * l, y0 + 0.35 * w, x1 - 0.3 * l, y1 - 0.35 * w)
    elif kind == "counters":
        _fill(walls, res, x0, y0, x1, y0 + 0.6)
        _fill(walls, res, x0, y0, x0 + 0.6, y1)
    elif kind == "stalls":
        x = x0 + 0.9
        while x < x1 - 0.3:
            _fill(walls, res, x, y1 - 1.2, x + 0.05, y1)
            x += 0.9
    elif kind == "benches":
        y = y0 + 1.0
        while y < y1 - 1.0:
            _fill(walls, res, x0 + 0.8, y, x1 - 0.8, y + 0.6)
            y += 1.8
    elif kind == "railing":
        _fill(walls, res, x0 + 0.2 * l, y0 + w / 2 - 0.05, x1 - 0.2 * l, y0 + w / 2 + 0.05)
    elif kind == "pillars":
        for _ in range(int(rng.integers(2, 5))):
            px, py = rng.uniform(x0 + 1.0, x1 - 1.0), rng.uniform(y0 + 1.0, y1 - 1.0)
            _fill(walls, res, px, py, px + 0.3, py + 0.3)
    else:
        raise MapError(f"unknown clutter kind {kind!r}")


def place_positions(room: Room, count: int, rng: np.random.Generator,
                    jitter: float = 0.15) -> List[Tuple[float, float]]:
    """``count`` free positions spread along the room's long axis."""
    x0, y0, x1, y1 = room.interior
    seg = (x1 - x0) / count
    positions = []
    for k in range(count):
        cx, cy = x0 + (k + 0.5) * seg, (y0 + y1) / 2
        chosen = None
        for lateral in (0.0, 0.3, -0.3):
            x = cx + rng.uniform(-jitter, jitter)
            y = cy + lateral * (y1 - y0) + rng.uniform(-jitter, jitter)
            if not room.plan.occupied(x, y):
                chosen = (x, y)
                break
        if chosen is None:
            chosen = _nearest_free(room.plan, cx, cy)
        positions.append(chosen)
    return positions


def _nearest_free(plan: Floorplan, x: float, y: float) -> Tuple[float, float]:
    free = np.argwhere(~plan.walls)
    if len(free) == 0:
        raise MapError("room raster has no free cell")
    centres = (free[:, ::-1] + 0.5) * plan.resolution
    best = int(np.argmin(np.hypot(centres[:, 0] - x, centres[:, 1] - y)))
    logger.debug("place at (%.2f, %.2f) hits clutter, moved to a free cell", x, y)
    return float(centres[best, 0]), float(centres[best, 1])


def cast_local_grid(plan: Floorplan, centre: Sequence[float], radius: float = RADIUS_M,
                    resolution: float = RESOLUTION_M, rays: int = RAYS) -> np.ndarray:
    """Square local grid of side ``2 * radius`` centred on ``centre``.

    Points off the floorplan end a ray without a hit.
    """
    if rays < 8 or resolution <= 0:
        raise GridError("need at least 8 rays and a positive resolution")
    n = int(round(2 * radius / resolution))
    local = np.full((n, n), CellState.UNKNOWN, dtype=np.int8)
    cx, cy = float(centre[0]), float(centre[1])
    angles = (np.arange(rays) + 0.5) * 2 * np.pi / rays
    t = np.arange(0.0, radius, resolution / 2)
    dx = t[None, :] * np.cos(angles)[:, None]
    dy = t[None, :] * np.sin(angles)[:, None]

    rows = np.floor((cy + dy) / plan.resolution).astype(np.int64)
    cols = np.floor((cx + dx) / plan.resolution).astype(np.int64)
    h, w = plan.walls.shape
    on_plan = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    wall = np.zeros_like(on_plan)
    wall[on_plan] = plan.walls[rows[on_plan], cols[on_plan]]
    stop = wall | ~on_plan
    first = np.where(stop.any(axis=1), np.argmax(stop, axis=1), len(t))

    lrow = np.floor(dy / resolution + n / 2).astype(np.int64)
    lcol = np.floor(dx / resolution + n / 2).astype(np.int64)
    in_local = (lrow >= 0) & (lrow < n) & (lcol >= 0) & (lcol < n)
    step = np.arange(len(t))[None, :]
    free = (step < first[:, None]) & in_local
    local[lrow[free], lcol[free]] = CellState.FREE
    hit_rays = np.flatnonzero(first < len(t))
    hit_steps = first[hit_rays]
    hits = wall[hit_rays, hit_steps] & in_local[hit_rays, hit_steps]
    local[lrow[hit_rays[hits], hit_steps[hits]], lcol[hit_rays[hits], hit_steps[hits]]] = CellState.OCCUPIED
    return local


def flip_noise(cells: np.ndarray, probability: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each cell, with ``probability``, by one of the other two states."""
    if not 0 <= probability < 0.5:
        raise GridError("flip probability must lie in [0, 0.5)")
    if probability == 0:
        return cells.copy()
    flip = rng.random(cells.shape) < probability
    shift = rng.integers(1, 3, size=cells.shape)
    out = cells.astype(np.int8).copy()
    out[flip] = (out[flip] + shift[flip]) % 3
    return out
