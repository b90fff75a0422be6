"""Per-task ring-buffer replay with stored routing masks.

Each transition keeps the behavior policy's routing masks for all three
networks (actor and both critics) at both the state and the next state, so
off-policy training can reuse the exact paths that produced the data.
Masks are stored packed (one flat uint8 row per network, see
``network.pack_masks``).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

MASK_FIELDS = (
    "masks_actor", "masks_q1", "masks_q2",
    "next_masks_actor", "next_masks_q1", "next_masks_q2",
)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    task_id: int
    masks_actor: np.ndarray
    masks_q1: np.ndarray
    masks_q2: np.ndarray
    next_masks_actor: np.ndarray
    next_masks_q1: np.ndarray
    next_masks_q2: np.ndarray


class ReplayBuffer:
    """Ring buffer partitioned by task; oldest entries overwritten first."""

    def __init__(self, capacity: int, num_tasks: int, obs_dim: int,
                 act_dim: int, mask_len: int):
        if capacity < num_tasks:
            raise ValueError("capacity smaller than task count")
        self.num_tasks = num_tasks
        self.per_task_capacity = capacity // num_tasks
        c, n = self.per_task_capacity, num_tasks
        self.states = np.zeros((n, c, obs_dim))
        self.actions = np.zeros((n, c, act_dim))
        self.rewards = np.zeros((n, c))
        self.next_states = np.zeros((n, c, obs_dim))
        self.dones = np.zeros((n, c), dtype=bool)
        self.masks = {f: np.zeros((n, c, mask_len), dtype=np.uint8) for f in MASK_FIELDS}
        self.sizes = np.zeros(n, dtype=np.int64)
        self.heads = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.sizes.sum())

    def add(self, tr: Transition) -> None:
        t = tr.task_id
        i = self.heads[t]
        self.states[t, i] = tr.state
        self.actions[t, i] = tr.action
        self.rewards[t, i] = tr.reward
        self.next_states[t, i] = tr.next_state
        self.dones[t, i] = tr.done
        for f in MASK_FIELDS:
            self.masks[f][t, i] = getattr(tr, f)
        self.heads[t] = (i + 1) % self.per_task_capacity
        self.sizes[t] = min(self.sizes[t] + 1, self.per_task_capacity)

    def can_sample(self, per_task: int) -> bool:
        return bool(np.all(self.sizes >= per_task))

    def sample_stratified(self, per_task: int, rng: np.random.Generator) -> dict:
        """Equal transitions per task; raises if any task is short."""
        if not self.can_sample(per_task):
            raise ValueError(
                f"need {per_task} transitions per task, have {self.sizes.tolist()}"
            )
        rows = {k: [] for k in ("state", "action", "reward", "next_state",
                                "done", "task_id", *MASK_FIELDS)}
        for t in range(self.num_tasks):
            idx = rng.integers(0, self.sizes[t], size=per_task)
            rows["state"].append(self.states[t, idx])
            rows["action"].append(self.actions[t, idx])
            rows["reward"].append(self.rewards[t, idx])
            rows["next_state"].append(self.next_states[t, idx])
            rows["done"].append(self.dones[t, idx])
            rows["task_id"].append(np.full(per_task, t, dtype=np.int64))
            for f in MASK_FIELDS:
                rows[f].append(self.masks[f][t, idx])
        return {k: np.concatenate(v) for k, v in rows.items()}

    def get(self, task_id: int, index: int) -> Transition:
        """Read one stored transition back out (round-trip checks)."""
        if index >= self.sizes[task_id]:
            raise IndexError("index beyond stored size")
        return Transition(
            state=self.states[task_id, index].copy(),
            action=self.actions[task_id, index].copy(),
            reward=float(self.rewards[task_id, index]),
            next_state=self.next_states[task_id, index].copy(),
            done=bool(self.dones[task_id, index]),
            task_id=task_id,
            **{f: self.masks[f][task_id, index].copy() for f in MASK_FIELDS},
        )
