"""Constrained 2D navigation environments.

Two bundled worlds: ``nav2`` (open field with circular obstacles between the
start region and the goal) and ``maze`` (wall rectangles forming a corridor
with a risky shortcut). The agent is a point moving by velocity commands;
touching an obstacle, a wall, or the boundary is a safety violation that
costs 1 and terminates the episode. Collision detection is segment-based, so
an agent cannot tunnel through a thin wall in one step.

The reward is dense distance-to-goal shaping minus a per-step penalty, plus a
bonus for entering the goal region. Geometry and shaping constants live in
the shipped world JSON files and never change between runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import ValidationError

BUNDLED_WORLDS = ("nav2", "maze")


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle (x0, y0) .. (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValidationError(f"degenerate rectangle {self}")

    def contains(self, p: np.ndarray) -> bool:
        return bool(self.x0 <= p[0] <= self.x1 and self.y0 <= p[1] <= self.y1)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0])


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    reward: float
    cost: float
    terminal: str


@dataclass(frozen=True)
class NavWorld:
    name: str
    bounds: Rect
    obstacles: tuple[Circle, ...]
    walls: tuple[Rect, ...]
    goal_center: np.ndarray
    goal_radius: float
    start_rect: Rect
    max_speed: float
    noise_std: float
    d_min: float
    step_penalty: float
    goal_bonus: float

    def __post_init__(self):
        gc = np.asarray(self.goal_center, dtype=np.float64)
        gc.flags.writeable = False
        object.__setattr__(self, "goal_center", gc)
        if self.max_speed <= 0:
            raise ValidationError("max_speed must be positive")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if not self.bounds.contains(gc):
            raise ValidationError("goal center outside bounds")
        for corner in (
            (self.start_rect.x0, self.start_rect.y0),
            (self.start_rect.x1, self.start_rect.y1),
        ):
            if not self.bounds.contains(np.asarray(corner)):
                raise ValidationError("start region outside bounds")
        # goal and start regions must not touch any obstacle
        for region_pt, radius in ((gc, self.goal_radius), (self.start_rect.center, 0.0)):
            for c in self.obstacles:
                if np.hypot(region_pt[0] - c.cx, region_pt[1] - c.cy) <= c.r + radius:
                    raise ValidationError("goal/start region intersects an obstacle")

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def action_dim(self) -> int:
        return 2


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _segment_point_distance(p0: np.ndarray, p1: np.ndarray, q: np.ndarray) -> float:
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        return float(np.hypot(*(q - p0)))
    t = float(np.clip((q - p0) @ d / dd, 0.0, 1.0))
    closest = p0 + t * d
    return float(np.hypot(*(q - closest)))


def _segment_hits_circle(p0: np.ndarray, p1: np.ndarray, c: Circle) -> bool:
    return _segment_point_distance(p0, p1, np.array([c.cx, c.cy])) <= c.r


def _segment_hits_rect(p0: np.ndarray, p1: np.ndarray, rect: Rect) -> bool:
    """Slab-clipping test: does the segment intersect the rectangle?"""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis, (lo, hi) in enumerate(((rect.x0, rect.x1), (rect.y0, rect.y1))):
        if d[axis] == 0.0:
            if p0[axis] < lo or p0[axis] > hi:
                return False
        else:
            ta = (lo - p0[axis]) / d[axis]
            tb = (hi - p0[axis]) / d[axis]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return False
    return True


def segment_violates(world: NavWorld, p0: np.ndarray, p1: np.ndarray) -> bool:
    """True if moving p0 -> p1 exits bounds or touches any obstacle or wall."""
    if not world.bounds.contains(p1):
        return True
    for c in world.obstacles:
        if _segment_hits_circle(p0, p1, c):
            return True
    for w in world.walls:
        if _segment_hits_rect(p0, p1, w):
            return True
    return False


def nearest_obstacle_distance(world: NavWorld, p: np.ndarray) -> float:
    """Distance from p to the nearest obstacle surface, wall, or boundary."""
    dists = []
    for c in world.obstacles:
        dists.append(np.hypot(p[0] - c.cx, p[1] - c.cy) - c.r)
    for w in world.walls:
        dx = max(w.x0 - p[0], 0.0, p[0] - w.x1)
        dy = max(w.y0 - p[1], 0.0, p[1] - w.y1)
        dists.append(np.hypot(dx, dy))
    b = world.bounds
    dists.append(min(p[0] - b.x0, b.x1 - p[0], p[1] - b.y0, b.y1 - p[1]))
    return float(min(dists))


def clip_action(action: np.ndarray, max_speed: float) -> np.ndarray:
    """Scale the action down to Euclidean norm <= max_speed if needed."""
    a = np.asarray(action, dtype=np.float64)
    norm = float(np.hypot(*a))
    if norm > max_speed and norm > 0.0:
        a = a * (max_speed / norm)
    return a


# ---------------------------------------------------------------------------
# Environment dynamics
# ---------------------------------------------------------------------------


def reset(world: NavWorld, rng: np.random.Generator) -> np.ndarray:
    """Sample a start state uniformly from the world's start rectangle."""
    sr = world.start_rect
    x = rng.uniform(sr.x0, sr.x1)
    y = rng.uniform(sr.y0, sr.y1)
    return np.array([x, y])


def distance_to_goal(world: NavWorld, state: np.ndarray) -> float:
    return float(np.hypot(state[0] - world.goal_center[0], state[1] - world.goal_center[1]))


def step(
    world: NavWorld,
    state: np.ndarray,
    action: np.ndarray,
    rng: np.random.Generator,
    t: int,
    t_max: int,
) -> StepOutcome:
    """Advance one timestep.

    next = state + clip(action) + noise; the motion segment decides collision.
    Terminal precedence: violation, then goal, then timeout at t+1 == t_max.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValidationError(f"non-finite action {action}")
    move = clip_action(action, world.max_speed)
    nxt = state + move
    if world.noise_std > 0.0:
        nxt = nxt + rng.normal(0.0, world.noise_std, size=2)

    reward = distance_to_goal(world, state) - distance_to_goal(world, nxt) - world.step_penalty
    if segment_violates(world, state, nxt):
        return StepOutcome(next_state=nxt, reward=reward, cost=1.0, terminal="violation")
    if distance_to_goal(world, nxt) <= world.goal_radius:
        return StepOutcome(next_state=nxt, reward=reward + world.goal_bonus, cost=0.0, terminal="goal")
    if t + 1 >= t_max:
        return StepOutcome(next_state=nxt, reward=reward, cost=0.0, terminal="timeout")
    return StepOutcome(next_state=nxt, reward=reward, cost=0.0, terminal="none")


# ---------------------------------------------------------------------------
# World loading
# ---------------------------------------------------------------------------


def world_from_dict(data: dict) -> NavWorld:
    def rect(d):
        return Rect(*[float(v) for v in d])

    return NavWorld(
        name=data["name"],
        bounds=rect(data["bounds"]),
        obstacles=tuple(Circle(*[float(v) for v in c]) for c in data.get("obstacles", [])),
        walls=tuple(rect(w) for w in data.get("walls", [])),
        goal_center=np.asarray(data["goal"]["center"], dtype=np.float64),
        goal_radius=float(data["goal"]["radius"]),
        start_rect=rect(data["start_rect"]),
        max_speed=float(data["max_speed"]),
        noise_std=float(data["noise_std"]),
        d_min=float(data["d_min"]),
        step_penalty=float(data["step_penalty"]),
        goal_bonus=float(data["goal_bonus"]),
    )


def world_to_dict(world: NavWorld) -> dict:
    return {
        "name": world.name,
        "bounds": [world.bounds.x0, world.bounds.y0, world.bounds.x1, world.bounds.y1],
        "obstacles": [[c.cx, c.cy, c.r] for c in world.obstacles],
        "walls": [[w.x0, w.y0, w.x1, w.y1] for w in world.walls],
        "goal": {"center": world.goal_center.tolist(), "radius": world.goal_radius},
        "start_rect": [world.start_rect.x0, world.start_rect.y0, world.start_rect.x1, world.start_rect.y1],
        "max_speed": world.max_speed,
        "noise_std": world.noise_std,
        "d_min": world.d_min,
        "step_penalty": world.step_penalty,
        "goal_bonus": world.goal_bonus,
    }


def load_world(name_or_path: str) -> NavWorld:
    """Load a bundled world by name ("nav2", "maze") or any world JSON by path."""
    if name_or_path in BUNDLED_WORLDS:
        text = resources.files("riskgraph.worlds").joinpath(f"{name_or_path}.json").read_text()
    else:
        with open(name_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    return world_from_dict(json.loads(text))
