"""Partially observable 2-D grid navigation.

Coordinates: ``x`` grows East, ``y`` grows South; headings are ordered
North, East, South, West.  Cell codes double as observation channels:
``FREE=0``, ``OBSTACLE=1``, ``OUT_OF_BOUNDS=2`` (never stored in a scene),
and object class ``c`` is code ``3 + c``.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import SceneError

FREE = 0
OBSTACLE = 1
OUT_OF_BOUNDS = 2
OBJECT_BASE = 3

VIEW = 5
HALF = VIEW // 2

# (dx, dy) per heading
STEPS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Heading(enum.IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


class Action(enum.IntEnum):
    MOVE_AHEAD = 0
    ROTATE_LEFT = 1
    ROTATE_RIGHT = 2
    DONE = 3


# The generator's terminating action shares the ordinal of DONE.
STOP = 3


class AgentState(NamedTuple):
    x: int
    y: int
    heading: int


@dataclass(frozen=True)
class SceneConfig:
    width: int = 11
    height: int = 11
    obstacle_density: float = 0.2
    objects_per_class: int = 4
    n_classes: int = 4


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable grid.  ``cells[y, x]`` holds a cell code."""

    cells: np.ndarray
    n_classes: int
    id: str = ""

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        if cells.ndim != 2 or cells.size == 0:
            raise SceneError("scene grid must be a non-empty 2-D array")
        if not np.any(cells == FREE):
            raise SceneError("scene needs at least one free cell")
        if np.any(cells == OUT_OF_BOUNDS) or np.any(cells < 0):
            raise SceneError("invalid cell code in scene")
        if np.any(cells >= OBJECT_BASE + self.n_classes):
            raise SceneError(f"object class out of range for C={self.n_classes}")

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def obs_width(self) -> int:
        return observation_width(self.n_classes)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.n_classes == other.n_classes
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.id, self.n_classes, self.cells.tobytes()))

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.cells[y, x] == FREE

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.cells == FREE)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def free_poses(self) -> list[AgentState]:
        return [AgentState(x, y, h) for x, y in self.free_cells() for h in range(4)]

    def classes_present(self) -> list[int]:
        codes = np.unique(self.cells[self.cells >= OBJECT_BASE])
        return [int(c) - OBJECT_BASE for c in codes]

    @cached_property
    def window_codes(self) -> np.ndarray:
        """Cell codes of the egocentric window for every pose: (H, W, 4, 25)."""
        padded = np.full((self.height + 2 * (VIEW - 1), self.width + 2 * (VIEW - 1)), OUT_OF_BOUNDS, np.int8)
        pad = VIEW - 1
        padded[pad : pad + self.height, pad : pad + self.width] = self.cells
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        out = np.empty((self.height, self.width, 4, VIEW * VIEW), dtype=np.int8)
        for h in range(4):
            dx, dy = _window_offsets(h)
            out[:, :, h, :] = padded[ys[..., None] + dy + pad, xs[..., None] + dx + pad]
        out.setflags(write=False)
        return out

    @cached_property
    def observations(self) -> np.ndarray:
        """One-hot observation for every pose: (H, W, 4, 25 * (3 + C))."""
        eye = np.eye(OBJECT_BASE + self.n_classes)
        obs = eye[self.window_codes].reshape(self.height, self.width, 4, -1)
        obs.setflags(write=False)
        return obs


def observation_width(n_classes: int) -> int:
    return VIEW * VIEW * (OBJECT_BASE + n_classes)


def _window_offsets(heading: int) -> tuple[np.ndarray, np.ndarray]:
    """World (dx, dy) for window cells in row-major order.

    Row 0 is the farthest row ahead; the agent sits in the bottom-centre cell.
    """
    fx, fy = STEPS[heading]
    rx, ry = STEPS[(heading + 1) % 4]
    rows, cols = np.mgrid[0:VIEW, 0:VIEW]
    forward = (VIEW - 1 - rows).ravel()
    lateral = (cols - HALF).ravel()
    return forward * fx + lateral * rx, forward * fy + lateral * ry


# -- dynamics ----------------------------------------------------------------


def env_step(scene: Scene, state: AgentState, action: int) -> tuple[AgentState, bool]:
    """Apply one primitive action.  Returns the new state and whether it moved."""
    x, y, h = state
    if action == Action.MOVE_AHEAD:
        dx, dy = STEPS[h]
        nx, ny = x + dx, y + dy
        if scene.is_free(nx, ny):
            return AgentState(nx, ny, h), True
        return state, False
    if action == Action.ROTATE_LEFT:
        return AgentState(x, y, (h - 1) % 4), False
    if action == Action.ROTATE_RIGHT:
        return AgentState(x, y, (h + 1) % 4), False
    return state, False


def render_observation(scene: Scene, state: AgentState) -> np.ndarray:
    return scene.observations[state.y, state.x, state.heading]


# -- scene text format -------------------------------------------------------


def parse_scene(text: str, n_classes: int = 4, scene_id: str = "") -> Scene:
    """Parse ``.``/``#``/``A``-``Z`` rows into a :class:`Scene`."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SceneError("empty scene text")
    width = len(lines[0])
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if len(line) != width:
            raise SceneError(f"line {lineno}: ragged row (length {len(line)}, expected {width})")
        row = []
        for col, ch in enumerate(line, start=1):
            if ch == ".":
                row.append(FREE)
            elif ch == "#":
                row.append(OBSTACLE)
            elif "A" <= ch <= "Z":
                cls = ord(ch) - ord("A")
                if cls >= n_classes:
                    raise SceneError(f"line {lineno}, column {col}: class {ch!r} not < C={n_classes}")
                row.append(OBJECT_BASE + cls)
            else:
                raise SceneError(f"line {lineno}, column {col}: unknown character {ch!r}")
        rows.append(row)
    return Scene(np.array(rows, dtype=np.int8), n_classes, scene_id)


def render_scene(scene: Scene) -> str:
    chars = {FREE: ".", OBSTACLE: "#"}
    lines = []
    for row in scene.cells:
        lines.append("".join(chars.get(int(c)) or chr(ord("A") + int(c) - OBJECT_BASE) for c in row))
    return "\n".join(lines) + "\n"


# -- generation --------------------------------------------------------------


def _connected(free: np.ndarray) -> bool:
    ys, xs = np.nonzero(free)
    if len(xs) == 0:
        return False
    h, w = free.shape
    seen = np.zeros_like(free)
    queue = deque([(int(xs[0]), int(ys[0]))])
    seen[ys[0], xs[0]] = True
    count = 1
    while queue:
        x, y = queue.popleft()
        for dx, dy in STEPS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                count += 1
                queue.append((nx, ny))
    return count == len(xs)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig(), scene_id: str | None = None,
                   max_tries: int = 200) -> Scene:
    """Random connected scene; obstacles first, then objects next to free space."""
    if cfg.width < 5 or cfg.height < 5:
        raise SceneError("width and height must be at least 5")
    if not 0 <= cfg.obstacle_density <= 0.4:
        raise SceneError("obstacle_density must lie in [0, 0.4]")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_cells = cfg.width * cfg.height
    n_obstacles = int(round(cfg.obstacle_density * n_cells))
    n_objects = cfg.objects_per_class * cfg.n_classes
    for _ in range(max_tries):
        cells = np.zeros(n_cells, dtype=np.int8)
        cells[rng.permutation(n_cells)[:n_obstacles]] = OBSTACLE
        cells = cells.reshape(cfg.height, cfg.width)
        if not _connected(cells == FREE):
            continue
        if _place_objects(cells, cfg, rng, n_objects):
            return Scene(cells, cfg.n_classes, str(seed) if scene_id is None else scene_id)
    raise SceneError(f"could not generate a connected scene for seed {seed} in {max_tries} tries")


def _place_objects(cells: np.ndarray, cfg: SceneConfig, rng: np.random.Generator, n_objects: int) -> bool:
    labels = [c for c in range(cfg.n_classes) for _ in range(cfg.objects_per_class)]
    for cls in labels:
        ys, xs = np.nonzero(cells == FREE)
        placed = False
        for i in rng.permutation(len(xs)):
            x, y = int(xs[i]), int(ys[i])
            cells[y, x] = OBJECT_BASE + cls
            free = cells == FREE
            touches = any(
                0 <= x + dx < cfg.width and 0 <= y + dy < cfg.height and free[y + dy, x + dx]
                for dx, dy in STEPS
            )
            if touches and free.sum() >= 1 and _connected(free):
                placed = True
                break
            cells[y, x] = FREE
        if not placed:
            return False
    return True


# -- shortest paths ------------------------------------------------------------


def pose_distances(scene: Scene, start: AgentState) -> np.ndarray:
    """BFS distance from ``start`` to every pose, shape (H, W, 4); -1 if unreachable."""
    dist = np.full((scene.height, scene.width, 4), -1, dtype=np.int64)
    dist[start.y, start.x, start.heading] = 0
    queue = deque([start])
    while queue:
        s = queue.popleft()
        d = dist[s.y, s.x, s.heading] + 1
        for action in (Action.MOVE_AHEAD, Action.ROTATE_LEFT, Action.ROTATE_RIGHT):
            n, _ = env_step(scene, s, action)
            if dist[n.y, n.x, n.heading] < 0:
                dist[n.y, n.x, n.heading] = d
                queue.append(n)
    return dist


def shortest_path_len(scene: Scene, start: AgentState, to_pos: tuple[int, int]) -> int | None:
    """Fewest primitive actions (moves and rotations) to stand on ``to_pos``.

    Returns ``None`` when the cell cannot be reached.
    """
    x, y = to_pos
    if (start.x, start.y) == (x, y):
        return 0
    if not scene.is_free(x, y):
        return None
    d = pose_distances(scene, start)[y, x]
    reachable = d[d >= 0]
    return int(reachable.min()) if reachable.size else None


def distances_to_set(scene: Scene, targets: np.ndarray) -> np.ndarray:
    """Fewest actions from every pose into the pose set ``targets`` (H, W, 4 bool).

    Multi-source BFS on reversed edges; -1 marks poses that cannot reach it.
    """
    dist = np.full(targets.shape, -1, dtype=np.int64)
    queue: deque[AgentState] = deque()
    for y, x, h in zip(*np.nonzero(targets)):
        dist[y, x, h] = 0
        queue.append(AgentState(int(x), int(y), int(h)))
    while queue:
        s = queue.popleft()
        d = dist[s.y, s.x, s.heading] + 1
        preds = [AgentState(s.x, s.y, (s.heading + 1) % 4), AgentState(s.x, s.y, (s.heading - 1) % 4)]
        dx, dy = STEPS[s.heading]
        bx, by = s.x - dx, s.y - dy
        if scene.is_free(bx, by):
            preds.append(AgentState(bx, by, s.heading))
        for p in preds:
            if dist[p.y, p.x, p.heading] < 0:
                dist[p.y, p.x, p.heading] = d
                queue.append(p)
    return dist


# -- semantic success ------------------------------------------------------------

# Window slots (row-major) whose Manhattan distance to the agent is at most 2.
_rows, _cols = np.mgrid[0:VIEW, 0:VIEW]
NEAR_SLOTS = np.flatnonzero(((VIEW - 1 - _rows) + np.abs(_cols - HALF)).ravel() <= 2)
NEAR_SLOTS = NEAR_SLOTS[NEAR_SLOTS != VIEW * VIEW - 1 - HALF]  # the agent's own cell


def success_poses(scene: Scene, target_class: int) -> np.ndarray:
    """Free poses from which Done succeeds: target in view within Manhattan 2."""
    near = scene.window_codes[:, :, :, NEAR_SLOTS]
    hit = np.any(near == OBJECT_BASE + target_class, axis=-1)
    return hit & (scene.cells == FREE)[:, :, None]
