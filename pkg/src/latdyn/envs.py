"""Desk-scale environments with scripted experts.

Two tasks exercise the full stack:

- ``KeyDoorGridEnv``: a partially observable two-room gridworld. The agent
  must find a key in the left room, unlock the door in the dividing wall,
  and reach the goal in the right room. Reaching the goal pays
  1 - 0.9 * steps/max_steps; everything else pays 0. Observations are the
  agent-centered 3x3 view (rotated so the agent faces up), one-hot over
  six cell types, plus a carried-key bit.

- ``PointGoalsEnv``: a sparse-reward point mass in a square arena that
  must visit an ordered list of goals; every third goal reached pays 1.
  Actions are 2-D accelerations, integrated with an explicit Euler step.

Both environments are deterministic after reset and support exact
snapshot/restore, which the exploration loop uses to branch rollouts from
mid-episode states.
"""

from __future__ import annotations

import copy
from collections import deque

import numpy as np

from .trajectory import CATEGORICAL, CONTINUOUS, Trajectory, save_dataset

FORWARD, LEFT, RIGHT, PICKUP, TOGGLE = range(5)
# headings: 0 north (-y), 1 east (+x), 2 south (+y), 3 west (-x)
_HEADING_VECS = ((0, -1), (1, 0), (0, 1), (-1, 0))
_CELL_TYPES = ("wall", "key", "door_locked", "door_open", "goal", "empty")


class KeyDoorGridEnv:
    """Two rooms split by a wall with a locked door; subgoal chain
    key -> door -> goal. Categorical actions: forward, turn left, turn
    right, pick up an adjacent key, toggle an adjacent locked door."""

    action_kind = CATEGORICAL
    action_dim = 5

    def __init__(self, width: int = 9, height: int = 7, view: int = 3, max_steps: int = 64):
        if width < 5 or height < 3 or width % 2 == 0:
            raise ValueError("need odd width >= 5 and height >= 3")
        if view % 2 == 0:
            raise ValueError("view size must be odd")
        self.width = width
        self.height = height
        self.view = view
        self.max_steps = max_steps
        self.obs_dim = view * view * len(_CELL_TYPES) + 1
        self._state = None

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        wall_x = self.width // 2
        left_cells = [(x, y) for x in range(1, wall_x) for y in range(1, self.height - 1)]
        right_cells = [(x, y) for x in range(wall_x + 1, self.width - 1)
                       for y in range(1, self.height - 1)]
        agent = left_cells[rng.integers(len(left_cells))]
        heading = int(rng.integers(4))
        key_choices = [c for c in left_cells if c != agent]
        key = key_choices[rng.integers(len(key_choices))]
        door = (wall_x, int(rng.integers(1, self.height - 1)))
        goal = right_cells[rng.integers(len(right_cells))]
        self._state = {
            "agent": agent, "heading": heading, "key": key, "carried": False,
            "door": door, "locked": True, "goal": goal, "steps": 0, "done": False,
        }
        return self._observe()

    def step(self, action: int):
        s = self._state
        if s is None:
            raise RuntimeError("reset the environment before stepping")
        if s["done"]:
            raise RuntimeError("step called after the episode ended")
        action = int(action)
        if not 0 <= action < self.action_dim:
            raise ValueError(f"action {action} outside 0..{self.action_dim - 1}")
        s["steps"] += 1
        reward = 0.0
        if action == FORWARD:
            dx, dy = _HEADING_VECS[s["heading"]]
            target = (s["agent"][0] + dx, s["agent"][1] + dy)
            if self._walkable(target):
                s["agent"] = target
                if target == s["goal"]:
                    reward = 1.0 - 0.9 * s["steps"] / self.max_steps
                    s["done"] = True
        elif action == LEFT:
            s["heading"] = (s["heading"] - 1) % 4
        elif action == RIGHT:
            s["heading"] = (s["heading"] + 1) % 4
        elif action == PICKUP:
            if not s["carried"] and s["key"] is not None and _adjacent(s["agent"], s["key"]):
                s["carried"] = True
                s["key"] = None
        elif action == TOGGLE:
            if s["carried"] and s["locked"] and _adjacent(s["agent"], s["door"]):
                s["locked"] = False
        if s["steps"] >= self.max_steps:
            s["done"] = True
        return self._observe(), reward, s["done"]

    # -- geometry -----------------------------------------------------------

    def _cell_type(self, cell) -> str:
        x, y = cell
        s = self._state
        if not (0 <= x < self.width and 0 <= y < self.height):
            return "wall"
        if x == 0 or x == self.width - 1 or y == 0 or y == self.height - 1:
            return "wall"
        if cell == s["door"]:
            return "door_locked" if s["locked"] else "door_open"
        if x == self.width // 2:
            return "wall"
        if s["key"] is not None and cell == s["key"]:
            return "key"
        if cell == s["goal"]:
            return "goal"
        return "empty"

    def _walkable(self, cell) -> bool:
        kind = self._cell_type(cell)
        return kind in ("empty", "goal", "door_open")

    def _observe(self) -> np.ndarray:
        s = self._state
        r = self.view // 2
        ax, ay = s["agent"]
        grid = np.empty((self.view, self.view), dtype=np.intp)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                grid[dy + r, dx + r] = _CELL_TYPES.index(self._cell_type((ax + dx, ay + dy)))
        grid = np.rot90(grid, k=s["heading"])
        onehot = np.zeros((self.view, self.view, len(_CELL_TYPES)))
        for i in range(self.view):
            for j in range(self.view):
                onehot[i, j, grid[i, j]] = 1.0
        return np.append(onehot.reshape(-1), 1.0 if s["carried"] else 0.0)

    def observe(self) -> np.ndarray:
        """Observation of the current state (what reset/step return)."""
        return self._observe()

    # -- snapshot / restore ---------------------------------------------------

    def snapshot(self):
        if self._state is None:
            raise RuntimeError("nothing to snapshot before reset")
        return copy.deepcopy(self._state)

    def restore(self, snap) -> None:
        required = {"agent", "heading", "key", "carried", "door", "locked",
                    "goal", "steps", "done"}
        if not isinstance(snap, dict) or set(snap) != required:
            raise ValueError("malformed grid snapshot")
        self._state = copy.deepcopy(snap)

    # -- introspection for traces and experts ---------------------------------

    @property
    def carried(self) -> bool:
        return self._state["carried"]

    @property
    def door_locked(self) -> bool:
        return self._state["locked"]

    @property
    def done(self) -> bool:
        return self._state is not None and self._state["done"]

    @property
    def solved(self) -> bool:
        return self.done and self._state["agent"] == self._state["goal"]

    def expert_action(self) -> int:
        """Shortest-path policy through the key -> door -> goal chain."""
        s = self._state
        if not s["carried"]:
            if s["key"] is not None and _adjacent(s["agent"], s["key"]):
                return PICKUP
            action = self._bfs_first_action(_cells_adjacent_to(s["key"]))
        elif s["locked"]:
            if _adjacent(s["agent"], s["door"]):
                return TOGGLE
            action = self._bfs_first_action(_cells_adjacent_to(s["door"]))
        else:
            action = self._bfs_first_action({s["goal"]})
        if action is None:
            raise RuntimeError("layout is unsolvable from the current state")
        return action

    def expert_distance(self, targets) -> int:
        """Move count of the shortest path to any target cell (turns count)."""
        result = self._bfs(set(targets))
        if result is None:
            raise RuntimeError("no path to targets")
        return result[1]

    def _bfs_first_action(self, targets):
        result = self._bfs(set(targets))
        return None if result is None else result[0]

    def _bfs(self, targets):
        s = self._state
        start = (s["agent"][0], s["agent"][1], s["heading"])
        if (start[0], start[1]) in targets:
            return (None, 0)  # already there; callers never need a move
        seen = {start}
        queue = deque([(start, None, 0)])
        while queue:
            (x, y, h), first, dist = queue.popleft()
            for action in (FORWARD, LEFT, RIGHT):
                if action == FORWARD:
                    dx, dy = _HEADING_VECS[h]
                    nxt = (x + dx, y + dy, h)
                    if not self._walkable((nxt[0], nxt[1])):
                        continue
                elif action == LEFT:
                    nxt = (x, y, (h - 1) % 4)
                else:
                    nxt = (x, y, (h + 1) % 4)
                if nxt in seen:
                    continue
                seen.add(nxt)
                f = first if first is not None else action
                if (nxt[0], nxt[1]) in targets:
                    return (f, dist + 1)
                queue.append((nxt, f, dist + 1))
        return None


def _adjacent(a, b) -> bool:
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1


def _cells_adjacent_to(cell):
    x, y = cell
    return {(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)}


# ---------------------------------------------------------------------------
# point navigation


class PointGoalsEnv:
    """Point mass visiting an ordered goal list; reward 1 for every third
    goal reached. Euler integration: p += v*dt, then v += a*dt, with the
    action clamped to [-1, 1]^2, speed to [-vmax, vmax] per axis and the
    position to the arena."""

    action_kind = CONTINUOUS
    action_dim = 2

    def __init__(self, n_goals: int = 5, arena: float = 5.0, dt: float = 0.1,
                 goal_radius: float = 0.3, max_steps: int = 400, vmax: float = 2.0):
        self.n_goals = n_goals
        self.arena = arena
        self.dt = dt
        self.goal_radius = goal_radius
        self.max_steps = max_steps
        self.vmax = vmax
        self.obs_dim = 7
        self._state = None

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        margin = self.arena - 0.5
        self._state = {
            "pos": tuple(rng.uniform(-margin, margin, 2)),
            "vel": (0.0, 0.0),
            "goals": tuple(tuple(g) for g in rng.uniform(-margin, margin, (self.n_goals, 2))),
            "reached": 0,
            "steps": 0,
            "done": False,
        }
        return self._observe()

    def step(self, action):
        s = self._state
        if s is None:
            raise RuntimeError("reset the environment before stepping")
        if s["done"]:
            raise RuntimeError("step called after the episode ended")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        p = np.array(s["pos"]) + np.array(s["vel"]) * self.dt
        p = np.clip(p, -self.arena, self.arena)
        v = np.clip(np.array(s["vel"]) + a * self.dt, -self.vmax, self.vmax)
        s["pos"] = tuple(p)
        s["vel"] = tuple(v)
        s["steps"] += 1
        reward = 0.0
        if s["reached"] < self.n_goals:
            goal = np.array(s["goals"][s["reached"]])
            if np.linalg.norm(p - goal) < self.goal_radius:
                s["reached"] += 1
                if s["reached"] % 3 == 0:
                    reward = 1.0
        if s["reached"] >= self.n_goals or s["steps"] >= self.max_steps:
            s["done"] = True
        return self._observe(), reward, s["done"]

    def _observe(self) -> np.ndarray:
        s = self._state
        if s["reached"] < self.n_goals:
            goal = np.array(s["goals"][s["reached"]])
            rel = goal - np.array(s["pos"])
        else:
            rel = np.zeros(2)
        remaining = 1.0 - s["reached"] / self.n_goals
        return np.array([*s["pos"], *s["vel"], *rel, remaining])

    def observe(self) -> np.ndarray:
        return self._observe()

    def snapshot(self):
        if self._state is None:
            raise RuntimeError("nothing to snapshot before reset")
        return copy.deepcopy(self._state)

    def restore(self, snap) -> None:
        required = {"pos", "vel", "goals", "reached", "steps", "done"}
        if not isinstance(snap, dict) or set(snap) != required:
            raise ValueError("malformed point snapshot")
        self._state = copy.deepcopy(snap)

    @property
    def done(self) -> bool:
        return self._state is not None and self._state["done"]

    @property
    def solved(self) -> bool:
        return self._state is not None and self._state["reached"] >= self.n_goals

    def expert_action(self) -> np.ndarray:
        """Proportional-derivative drive toward the next goal."""
        s = self._state
        if s["reached"] >= self.n_goals:
            return np.zeros(2)
        goal = np.array(s["goals"][s["reached"]])
        err = goal - np.array(s["pos"])
        a = 1.0 * err - 1.6 * np.array(s["vel"])
        return np.clip(a, -1.0, 1.0)


# ---------------------------------------------------------------------------
# expert rollouts and dataset generation


ENV_NAMES = ("grid", "points")


def make_env(name: str, **kwargs):
    if name == "grid":
        return KeyDoorGridEnv(**kwargs)
    if name == "points":
        return PointGoalsEnv(**kwargs)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")


def rollout_expert(env, seed: int) -> Trajectory:
    """One full expert episode; raises if the expert fails to finish."""
    obs = [env.reset(seed)]
    actions, rewards = [], []
    while not env.done:
        a = env.expert_action()
        o, r, done = env.step(a)
        obs.append(o)
        actions.append(a)
        rewards.append(r)
    if not env.solved:
        raise RuntimeError(f"expert failed on seed {seed}")
    return Trajectory(np.stack(obs), np.array(actions), np.array(rewards), env.action_kind)


def generate_dataset(env, n_trajectories: int, seed: int, path=None):
    """Roll the scripted expert for n episodes with consecutive derived
    seeds; unsolvable or failed layouts are skipped deterministically."""
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    trajs = []
    candidate = 0
    while len(trajs) < n_trajectories:
        episode_seed = seed * 1_000_003 + candidate
        candidate += 1
        try:
            trajs.append(rollout_expert(env, episode_seed))
        except RuntimeError:
            continue
    if path is not None:
        save_dataset(trajs, path, env.obs_dim, env.action_dim, env.action_kind)
    return trajs
