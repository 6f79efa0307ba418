"""Episode records and the plain-text trajectory dataset format.

A trajectory stores T+1 observations o_0..o_T, the T actions a_0..a_{T-1}
taken between them (a_t was executed while observing o_t), and the T
rewards returned by those actions. The sequence model scores o_t together
with the preceding action a_{t-1}, so this off-by-one layout is preserved
everywhere.

Dataset files are line-oriented and byte-deterministic:

    LHDS 1 <obs_dim> <action_dim> <action_kind>
    EP <T>
    <T+1 observation lines>
    <T action lines>
    <T reward lines>
    EP <T> ...

Values are space-separated decimal literals (shortest round-trip form);
categorical actions are bare integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


@dataclass
class Trajectory:
    """One episode: observations (T+1, obs_dim), actions, rewards (length T)."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    action_kind: str = CATEGORICAL

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.action_kind == CATEGORICAL:
            self.actions = np.asarray(self.actions, dtype=np.int64)
        else:
            self.actions = np.asarray(self.actions, dtype=np.float64)
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError(
                f"need T+1 observations for T actions, got {len(self.observations)} "
                f"observations and {len(self.actions)} actions"
            )
        if len(self.rewards) != len(self.actions):
            raise ValueError(f"{len(self.rewards)} rewards for {len(self.actions)} actions")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def content_hash(self) -> int:
        """Seed-stable digest of the episode content (for split assignment)."""
        import hashlib

        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(self.observations).tobytes())
        h.update(np.ascontiguousarray(self.actions).tobytes())
        return int.from_bytes(h.digest(), "little")


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(trajectories, path, obs_dim: int, action_dim: int, action_kind: str) -> None:
    lines = [f"LHDS 1 {obs_dim} {action_dim} {action_kind}"]
    for traj in trajectories:
        if traj.observations.shape[1] != obs_dim:
            raise ValueError(f"observation dim {traj.observations.shape[1]} != header {obs_dim}")
        lines.append(f"EP {traj.length}")
        for o in traj.observations:
            lines.append(" ".join(_fmt(v) for v in o))
        for a in traj.actions:
            if action_kind == CATEGORICAL:
                lines.append(str(int(a)))
            else:
                lines.append(" ".join(_fmt(v) for v in np.atleast_1d(a)))
        for r in traj.rewards:
            lines.append(_fmt(r))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


@dataclass
class Dataset:
    trajectories: list = field(default_factory=list)
    obs_dim: int = 0
    action_dim: int = 0
    action_kind: str = CATEGORICAL

    def __len__(self):
        return len(self.trajectories)

    def split_holdout(self, fraction: float = 0.1):
        """Partition by content hash so the split is stable across runs."""
        mod = max(2, round(1.0 / fraction))
        train, held = [], []
        for traj in self.trajectories:
            (held if traj.content_hash() % mod == 0 else train).append(traj)
        return train, held


def load_dataset(path) -> Dataset:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines:
        raise ValueError(f"empty dataset file {path}")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "LHDS" or head[1] != "1":
        raise ValueError(f"bad dataset header {lines[0]!r}")
    obs_dim, action_dim, action_kind = int(head[2]), int(head[3]), head[4]
    if action_kind not in (CATEGORICAL, CONTINUOUS):
        raise ValueError(f"unknown action kind {action_kind!r}")
    ds = Dataset(obs_dim=obs_dim, action_dim=action_dim, action_kind=action_kind)
    i = 1
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        tag = lines[i].split()
        if tag[0] != "EP":
            raise ValueError(f"expected EP line at {i + 1}, got {lines[i]!r}")
        t = int(tag[1])
        i += 1
        obs = np.array([[float(v) for v in lines[i + j].split()] for j in range(t + 1)])
        i += t + 1
        if action_kind == CATEGORICAL:
            actions = np.array([int(lines[i + j]) for j in range(t)], dtype=np.int64)
        else:
            actions = np.array([[float(v) for v in lines[i + j].split()] for j in range(t)])
        i += t
        rewards = np.array([float(lines[i + j]) for j in range(t)])
        i += t
        ds.trajectories.append(Trajectory(obs, actions, rewards, action_kind))
    return ds
